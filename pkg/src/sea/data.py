"""Trajectory ingestion, frame preprocessing, stacking, and splits.

On-disk layout per trial:

    trial_<id>/labels.csv      header: frame_id,episode,score,action,gaze_xy
    trial_<id>/frames/<frame_id>.pgm   (binary P5; PNG is not required here)
    trial_<id>/meta.json       native resolution, subject, action-set size,
                               screen geometry, optional per-step phase labels

``gaze_xy`` holds a variable-length, space-separated list of x y pairs at
native resolution; integers are decimal ASCII and gaze coordinates carry
three decimals, so parsing then re-serializing is byte-exact.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaze import ScreenGeometry
from .nn import rng as rngmod

FRAME_SIZE = 84
STACK_DEPTH = 4

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class TrialFormatError(ValueError):
    """Malformed trial data; the message carries the file and row."""


# ---------------------------------------------------------------------------
# PGM (binary P5) I/O
# ---------------------------------------------------------------------------

def write_pgm(path: Path, values: np.ndarray, maxval: int = 255) -> None:
    """Write integer grayscale values (already in 0..maxval) as binary PGM."""
    if not 0 < maxval < 256:
        raise ValueError("maxval must be in 1..255")
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("PGM frames are 2-d")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    """Read binary PGM; returns (uint8 array (H, W), maxval)."""
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    magic = buf.readline().strip()
    if magic != b"P5":
        raise TrialFormatError(f"{path}: not a binary PGM (magic {magic!r})")

    def next_token() -> int:
        tok = b""
        while True:
            ch = buf.read(1)
            if not ch:
                raise TrialFormatError(f"{path}: truncated PGM header")
            if ch in b" \t\r\n":
                if tok:
                    break
                continue
            if ch == b"#":
                buf.readline()
                continue
            tok += ch
        return int(tok)

    w, h, maxval = next_token(), next_token(), next_token()
    if not 0 < maxval < 256:
        raise TrialFormatError(f"{path}: unsupported maxval {maxval}")
    data = buf.read(w * h)
    if len(data) != w * h:
        raise TrialFormatError(f"{path}: expected {w * h} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w), maxval


# ---------------------------------------------------------------------------
# trial records
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryStep:
    frame_id: int
    episode: int
    score: float
    action: int
    gaze_points: list[tuple[float, float]] = field(default_factory=list)
    frame_path: Path | None = None


@dataclass
class Trial:
    trial_id: str
    subject_id: str
    steps: list[TrajectoryStep]
    native_resolution: tuple[int, int]  # (W, H)
    action_set_size: int
    geometry: ScreenGeometry | None = None
    phases: list[str] | None = None  # test-oracle metadata, never model input

    def __len__(self) -> int:
        return len(self.steps)


CSV_HEADER = ["frame_id", "episode", "score", "action", "gaze_xy"]


def _format_gaze(points: list[tuple[float, float]]) -> str:
    return " ".join(f"{x:.3f} {y:.3f}" for x, y in points)


def serialize_labels(steps: list[TrajectoryStep]) -> str:
    """Canonical labels.csv text (RFC-4180 quoting, \\n line endings)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in steps:
        writer.writerow(
            [s.frame_id, s.episode, f"{s.score:.3f}", s.action, _format_gaze(s.gaze_points)]
        )
    return out.getvalue()


def parse_trial(label_file: Path, frame_dir: Path, *, action_set_size: int = 18,
                native_resolution: tuple[int, int] | None = None,
                require_frames: bool = True) -> Trial:
    """Parse a labels.csv plus frame directory into a validated Trial.

    Gaze points outside the native frame bounds are dropped; structural
    problems (bad header, non-monotone frame ids, out-of-range actions,
    missing frame files) raise TrialFormatError naming the row.
    """
    label_file = Path(label_file)
    frame_dir = Path(frame_dir)
    text = label_file.read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TrialFormatError(f"{label_file}: empty label file") from None
    if header != CSV_HEADER:
        raise TrialFormatError(f"{label_file}: bad header {header!r}")
    steps: list[TrajectoryStep] = []
    prev_id = None
    for rownum, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise TrialFormatError(f"{label_file} row {rownum}: expected {len(CSV_HEADER)} fields")
        try:
            frame_id = int(row[0])
            episode = int(row[1])
            score = float(row[2])
            action = int(row[3])
        except ValueError as e:
            raise TrialFormatError(f"{label_file} row {rownum}: {e}") from None
        if prev_id is not None and frame_id <= prev_id:
            raise TrialFormatError(
                f"{label_file} row {rownum}: frame_id {frame_id} not increasing (prev {prev_id})"
            )
        prev_id = frame_id
        if not 0 <= action < action_set_size:
            raise TrialFormatError(
                f"{label_file} row {rownum}: action {action} outside 0..{action_set_size - 1}"
            )
        gaze_field = row[4].split()
        if len(gaze_field) % 2 != 0:
            raise TrialFormatError(f"{label_file} row {rownum}: odd gaze coordinate count")
        try:
            coords = [float(v) for v in gaze_field]
        except ValueError as e:
            raise TrialFormatError(f"{label_file} row {rownum}: {e}") from None
        points = list(zip(coords[0::2], coords[1::2]))
        if native_resolution is not None:
            w, h = native_resolution
            points = [(x, y) for x, y in points if 0 <= x < w and 0 <= y < h]
        frame_path = frame_dir / f"{frame_id}.pgm"
        if require_frames and not frame_path.exists():
            raise TrialFormatError(f"{label_file} row {rownum}: missing frame {frame_path}")
        steps.append(
            TrajectoryStep(
                frame_id=frame_id,
                episode=episode,
                score=score,
                action=action,
                gaze_points=points,
                frame_path=frame_path,
            )
        )
    return Trial(
        trial_id=label_file.parent.name,
        subject_id="",
        steps=steps,
        native_resolution=native_resolution or (FRAME_SIZE, FRAME_SIZE),
        action_set_size=action_set_size,
    )


def load_trial(trial_dir: Path) -> Trial:
    """Load one trial directory (meta.json + labels.csv + frames/)."""
    trial_dir = Path(trial_dir)
    meta = json.loads((trial_dir / "meta.json").read_text())
    native = tuple(meta["native_resolution"])
    trial = parse_trial(
        trial_dir / "labels.csv",
        trial_dir / "frames",
        action_set_size=int(meta["action_set_size"]),
        native_resolution=native,
    )
    trial.subject_id = meta.get("subject_id", "")
    if "screen_geometry" in meta:
        trial.geometry = ScreenGeometry.from_dict(meta["screen_geometry"])
    if "phases" in meta:
        trial.phases = list(meta["phases"])
    return trial


def discover_trials(data_dir: Path) -> list[Path]:
    data_dir = Path(data_dir)
    dirs = sorted(p for p in data_dir.iterdir() if p.is_dir() and p.name.startswith("trial_"))
    if not dirs:
        raise TrialFormatError(f"no trial_* directories under {data_dir}")
    return dirs


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _area_weights(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic (out, in) matrix averaging input cells into output cells."""
    if in_size == out_size:
        return np.eye(out_size)
    w = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        lo = i * scale
        hi = (i + 1) * scale
        j0 = int(np.floor(lo))
        j1 = int(np.ceil(hi))
        for j in range(j0, min(j1, in_size)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                w[i, j] = overlap / scale
    return w


def preprocess_frame(raw: np.ndarray, native: tuple[int, int] | None = None,
                     size: int = FRAME_SIZE) -> np.ndarray:
    """Grayscale (luminance weights), area-average to size x size, values in [0, 1]."""
    arr = np.asarray(raw)
    if arr.size == 0:
        raise ValueError("zero-sized image")
    if native is not None and (arr.shape[1], arr.shape[0]) != tuple(native):
        raise ValueError(f"frame shape {arr.shape[:2]} does not match native {native}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3:
        r, g, b = LUMA_WEIGHTS
        arr = r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    elif arr.ndim != 2:
        raise ValueError(f"expected (H,W) or (H,W,3) image, got {arr.shape}")
    h, w = arr.shape
    if (h, w) != (size, size):
        arr = _area_weights(h, size) @ arr @ _area_weights(w, size).T
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def load_trial_frames(trial: Trial, size: int = FRAME_SIZE) -> np.ndarray:
    """Preprocessed frames for every step, shape (len(trial), size, size) float32."""
    frames = np.empty((len(trial.steps), size, size), dtype=np.float32)
    for i, step in enumerate(trial.steps):
        pix, maxval = read_pgm(step.frame_path)
        if maxval != 255:
            arr = pix.astype(np.float64) / maxval
        else:
            arr = pix
        frames[i] = preprocess_frame(arr, native=trial.native_resolution, size=size)
    return frames


def make_frame_stack(frames: np.ndarray, i: int) -> np.ndarray:
    """Stack frames i-3..i (oldest first); indices before 0 repeat frame 0."""
    if not 0 <= i < len(frames):
        raise IndexError(f"step {i} outside trial of length {len(frames)}")
    idx = [max(0, i - k) for k in range(STACK_DEPTH - 1, -1, -1)]
    return frames[idx]


def stack_batch(frames: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Vectorized make_frame_stack over many step indices -> (N, 4, H, W)."""
    offsets = np.arange(-(STACK_DEPTH - 1), 1)
    gather = np.maximum(indices[:, None] + offsets[None, :], 0)
    return frames[gather]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_trials(trials: list, train_count: int = 15, val_count: int = 5,
                 seed: int = 0) -> tuple[list, list]:
    """Seed-deterministic disjoint split at trial granularity."""
    if train_count <= 0 or val_count <= 0:
        raise ValueError("split counts must be positive")
    if len(trials) < train_count + val_count:
        raise ValueError(
            f"need at least {train_count + val_count} trials, got {len(trials)}"
        )
    order = rngmod.stream(seed, "trial-split").permutation(len(trials))
    train = [trials[i] for i in order[:train_count]]
    val = [trials[i] for i in order[train_count : train_count + val_count]]
    return train, val
