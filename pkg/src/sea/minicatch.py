"""Deterministic desk-scale catch environment with synthetic gaze.

A ball falls through a 21x21 grid toward a paddle on the bottom row.
Catching bounces the ball back up (+1); once the rising ball passes the top
row it is re-served from a seeded random top cell, moving down again. A miss
ends the episode. The two phases are:

- descending (dy > 0): actions matter; the scripted demonstrator chases the
  ball and the synthetic gaze tracks the ball.
- ascending (dy < 0): actions are irrelevant to the score; the demonstrator
  mostly idles (noop with p = 0.8, otherwise a random move) and the gaze
  drifts to the distractor sprite (or a random spot), so gaze is informative
  exactly when it is needed.

The grid renders at 4 px per cell, giving exactly 84x84 frames with palette
background 0.0, distractor 0.4, paddle 0.7, ball 1.0.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datamod
from .gaze import ScreenGeometry
from .nn import rng as rngmod

GRID = 21
CELL = 4
FRAME = GRID * CELL  # 84
PADDLE_ROW = GRID - 1
PADDLE_HALF = 1  # paddle spans 3 cells
# The distractor patrols mid-field so that ascending-phase gaze lands where a
# descending ball could legitimately be; gaze heatmaps from the two phases
# then conflict instead of being separable by position alone.
DISTRACTOR_ROW = 10

ACTIONS = {"noop": 0, "left": 1, "right": 2}
ACTION_COUNT = 3
NO_ACTION_ID = 0

PALETTE = {"background": 0.0, "distractor": 0.4, "paddle": 0.7, "ball": 1.0}
PGM_MAXVAL = 10  # palette values are exact tenths, so frames round-trip losslessly

# Synthetic recording geometry for the 84x84 native frames; one visual degree
# works out to ~1.79 px, matching the downsampled real setup.
MINICATCH_GEOMETRY = ScreenGeometry(
    screen_width_cm=64.6,
    screen_height_cm=40.0,
    screen_width_px=FRAME,
    screen_height_px=FRAME,
    viewing_distance_cm=78.7,
)


@dataclass(frozen=True)
class EnvConfig:
    seed: int = 0
    max_steps: int = 600
    ball_speed: int = 1
    paddle_speed: int = 1
    gaze_noise_px: float = 2.0
    distractor: bool = True

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.ball_speed < 1 or self.paddle_speed < 1:
            raise ValueError("speeds must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EnvState:
    ball_x: int
    ball_y: int
    ball_dx: int
    ball_dy: int
    paddle_x: int
    score: int = 0
    steps: int = 0
    distractor_x: int | None = None
    distractor_dx: int = 1

    @property
    def phase(self) -> str:
        return "descending" if self.ball_dy > 0 else "ascending"


def cell_center_px(cx: int, cy: int) -> tuple[float, float]:
    """Native-pixel center of a grid cell."""
    return (CELL * cx + (CELL - 1) / 2.0, CELL * cy + (CELL - 1) / 2.0)


class MiniCatchEnv:
    """Value-like state machine; all randomness comes from named seed streams."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self._serve = rngmod.stream(cfg.seed, "env-serve")
        self._demo = rngmod.stream(cfg.seed, "env-demo")
        self._gaze = rngmod.stream(cfg.seed, "env-gaze")

    def reset(self) -> EnvState:
        bx = int(self._serve.integers(0, GRID))
        dx = 1 if self._serve.integers(0, 2) == 1 else -1
        distractor_x = int(self._serve.integers(0, GRID)) if self.cfg.distractor else None
        return EnvState(
            ball_x=bx, ball_y=0, ball_dx=dx, ball_dy=1,
            paddle_x=GRID // 2,
            distractor_x=distractor_x,
            distractor_dx=1 if self._serve.integers(0, 2) == 1 else -1,
        )

    def step(self, state: EnvState, action: int) -> tuple[EnvState, int, bool]:
        """Advance one frame. Returns (state, reward, done)."""
        if action not in (0, 1, 2):
            raise ValueError(f"unknown action {action}")
        px = state.paddle_x
        if action == ACTIONS["left"]:
            px = max(PADDLE_HALF, px - self.cfg.paddle_speed)
        elif action == ACTIONS["right"]:
            px = min(GRID - 1 - PADDLE_HALF, px + self.cfg.paddle_speed)

        bx, by, dx, dy = state.ball_x, state.ball_y, state.ball_dx, state.ball_dy
        score = state.score
        reward = 0
        done = False

        if by == PADDLE_ROW and dy > 0:
            # Constructed states can start on the paddle row; resolve in place.
            if abs(bx - px) <= PADDLE_HALF:
                reward = 1
                score += 1
                dy = -1
            else:
                done = True
        else:
            for _ in range(self.cfg.ball_speed):
                bx += dx
                if bx < 0:
                    bx, dx = -bx, -dx
                elif bx > GRID - 1:
                    bx, dx = 2 * (GRID - 1) - bx, -dx
                by += dy
                if by < 0:
                    # Ascent complete: re-serve from a seeded random top cell.
                    by = 0
                    dy = 1
                    bx = int(self._serve.integers(0, GRID))
                    dx = 1 if self._serve.integers(0, 2) == 1 else -1
                elif by == PADDLE_ROW:
                    if abs(bx - px) <= PADDLE_HALF:
                        reward = 1
                        score += 1
                        dy = -1
                    else:
                        done = True
                    break

        dist_x, dist_dx = state.distractor_x, state.distractor_dx
        if dist_x is not None:
            dist_x += dist_dx
            if dist_x < 0:
                dist_x, dist_dx = -dist_x, -dist_dx
            elif dist_x > GRID - 1:
                dist_x, dist_dx = 2 * (GRID - 1) - dist_x, -dist_dx

        steps = state.steps + 1
        if steps >= self.cfg.max_steps:
            done = True
        new_state = EnvState(
            ball_x=bx, ball_y=by, ball_dx=dx, ball_dy=dy, paddle_x=px,
            score=score, steps=steps, distractor_x=dist_x, distractor_dx=dist_dx,
        )
        return new_state, reward, done

    def demonstrator_action(self, state: EnvState) -> int:
        """Scripted policy: chase while descending, mostly idle while ascending."""
        if state.phase == "descending":
            if state.ball_x < state.paddle_x:
                return ACTIONS["left"]
            if state.ball_x > state.paddle_x:
                return ACTIONS["right"]
            return ACTIONS["noop"]
        if self._demo.random() < 0.8:
            return ACTIONS["noop"]
        return ACTIONS["left"] if self._demo.integers(0, 2) == 0 else ACTIONS["right"]

    def synthetic_gaze(self, state: EnvState) -> tuple[float, float]:
        """Native-pixel gaze sample: on the ball while descending, elsewhere after."""
        noise = self.cfg.gaze_noise_px
        if state.phase == "descending":
            cx, cy = cell_center_px(state.ball_x, state.ball_y)
        elif state.distractor_x is not None:
            cx, cy = cell_center_px(state.distractor_x, DISTRACTOR_ROW)
        else:
            cx = float(self._gaze.uniform(0, FRAME))
            cy = float(self._gaze.uniform(0, FRAME))
            noise = 0.0
        if noise > 0:
            cx += noise * self._gaze.standard_normal()
            cy += noise * self._gaze.standard_normal()
        lim = FRAME - 1e-3
        return (float(min(max(cx, 0.0), lim)), float(min(max(cy, 0.0), lim)))


def render(state: EnvState) -> np.ndarray:
    """84x84 float32 frame; the ball is drawn on top of everything."""
    frame = np.zeros((FRAME, FRAME), dtype=np.float32)

    def fill(cx, cy, value):
        frame[CELL * cy : CELL * (cy + 1), CELL * cx : CELL * (cx + 1)] = value

    if state.distractor_x is not None:
        fill(state.distractor_x, DISTRACTOR_ROW, PALETTE["distractor"])
    for cx in range(state.paddle_x - PADDLE_HALF, state.paddle_x + PADDLE_HALF + 1):
        if 0 <= cx < GRID:
            fill(cx, PADDLE_ROW, PALETTE["paddle"])
    fill(state.ball_x, state.ball_y, PALETTE["ball"])
    return frame


def generate_dataset(cfg: EnvConfig, n_trials: int = 20, out_dir: Path = Path(".")) -> list[Path]:
    """Roll the demonstrator for n_trials and write them in the trial layout.

    Episodes restart on a miss; `episode` and cumulative `score` land in the
    labels, per-step phase labels in meta.json (test oracles only).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(n_trials):
        trial_dir = out_dir / f"trial_{t:02d}"
        frames_dir = trial_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        env = MiniCatchEnv(dataclasses.replace(cfg, seed=rngmod.derive(cfg.seed, f"trial-{t}")))
        state = env.reset()
        episode = 0
        steps: list[datamod.TrajectoryStep] = []
        phases: list[str] = []
        for frame_id in range(cfg.max_steps):
            frame = render(state)
            datamod.write_pgm(
                frames_dir / f"{frame_id}.pgm",
                np.rint(frame * PGM_MAXVAL).astype(np.uint8),
                maxval=PGM_MAXVAL,
            )
            action = env.demonstrator_action(state)
            gaze = env.synthetic_gaze(state)
            steps.append(
                datamod.TrajectoryStep(
                    frame_id=frame_id,
                    episode=episode,
                    score=float(state.score),
                    action=action,
                    gaze_points=[gaze],
                )
            )
            phases.append(state.phase)
            state, _, done = env.step(state, action)
            if done and frame_id + 1 < cfg.max_steps:
                episode += 1
                state = env.reset()
        (trial_dir / "labels.csv").write_text(datamod.serialize_labels(steps))
        meta = {
            "native_resolution": [FRAME, FRAME],
            "subject_id": f"subject_{t // 5}",
            "action_set_size": ACTION_COUNT,
            "screen_geometry": MINICATCH_GEOMETRY.to_dict(),
            "phases": phases,
            "env_config": cfg.to_dict(),
        }
        (trial_dir / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
        written.append(trial_dir)
    return written
