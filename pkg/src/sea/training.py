"""Decoupled two-phase training and versioned checkpoints.

Phase one fits the gaze network alone (KL between predicted maps and
Gaussian gaze targets). Phase two loads that checkpoint, freezes it
(default), and fits the gate + action networks on action cross-entropy;
the gaze loss never sees action error and vice versa.

Checkpoint container (``.seackpt``): an 8-byte magic ``SEACKPT1``, a
little-endian uint64 header length, a JSON header (format version, kind,
config snapshot, metrics history, tensor table with dtype/shape/offset),
then the concatenated little-endian raw tensor bytes.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import models
from . import nn
from .gaze import gaussian_gaze_target, visual_degree_to_pixels
from .nn import rng as rngmod

MAGIC = b"SEACKPT1"
FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".seackpt"

ADAM_EPS = 1e-8
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


class CheckpointError(ValueError):
    """Unreadable, truncated, or version-incompatible checkpoint."""


class ConfigError(ValueError):
    """Bad or unknown training-configuration fields."""


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    epochs: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    gate_policy: str = "learned"
    freeze_gaze: bool = True
    keep_fraction: float = 0.10
    sigma_px: float | None = None  # None: derive from the trial's screen geometry
    action_count: int | None = None  # None: take from dataset meta
    data_dir: str = ""
    train_trials: int = 15
    val_trials: int = 5

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs batch statistics)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.gate_policy not in models.GATE_POLICIES:
            raise ConfigError(f"gate_policy must be one of {models.GATE_POLICIES}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def field_names() -> set[str]:
        return {f.name for f in dataclasses.fields(TrainConfig)}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        unknown = set(d) - TrainConfig.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return TrainConfig(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


@dataclass
class Checkpoint:
    kind: str  # "gaze" or "sea"
    tensors: dict[str, np.ndarray]
    config: dict
    metrics: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    names = list(ckpt.tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    table = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "metrics": ckpt.metrics,
        "tensors": table,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    hstart = len(MAGIC) + 8
    if hstart + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: bad header JSON ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} not supported"
        )
    body = raw[hstart + hlen :]
    tensors: dict[str, np.ndarray] = {}
    total = 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(entry["nbytes"])
        offset = int(entry["offset"])
        if dtype.itemsize * int(np.prod(shape, dtype=np.int64)) != nbytes:
            raise CheckpointError(f"{path}: tensor {entry['name']} shape/offset mismatch")
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(body[offset : offset + nbytes], dtype=dtype).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        total = max(total, offset + nbytes)
    if total != len(body):
        raise CheckpointError(f"{path}: {len(body) - total} trailing bytes")
    return Checkpoint(
        kind=header["kind"],
        tensors=tensors,
        config=header["config"],
        metrics=header["metrics"],
        format_version=header["format_version"],
    )


def _params_to_tensor_table(p) -> dict[str, np.ndarray]:
    named = (models.sea_named_tensors(p) if isinstance(p, models.SEAParams)
             else models.gaze_named_tensors(p))
    table = {name: t.data.copy() for name, t in named.items()}
    table.update({name: buf.copy() for name, buf in models.named_buffers(p).items()})
    return table


def _load_params_from_table(p, table: dict[str, np.ndarray]) -> None:
    named = (models.sea_named_tensors(p) if isinstance(p, models.SEAParams)
             else models.gaze_named_tensors(p))
    for name, t in named.items():
        if name not in table:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if tuple(table[name].shape) != t.shape:
            raise CheckpointError(
                f"tensor {name} has shape {table[name].shape}, expected {t.shape}"
            )
        t.data = table[name].copy()
    models.load_buffers(p, table)


def gaze_params_from_checkpoint(ckpt: Checkpoint) -> models.GazeNetParams:
    p = models.create_gaze_params(seed=0)
    gaze_table = {k: v for k, v in ckpt.tensors.items() if k.startswith("gaze.")}
    _load_params_from_table(p, gaze_table)
    return p


def sea_params_from_checkpoint(ckpt: Checkpoint) -> models.SEAParams:
    if ckpt.kind != "sea":
        raise CheckpointError(f"expected a 'sea' checkpoint, got {ckpt.kind!r}")
    cfg = ckpt.config
    p = models.create_sea_params(
        action_count=int(cfg["action_count"]),
        seed=0,
        keep_fraction=float(cfg.get("keep_fraction", 0.10)),
    )
    _load_params_from_table(p, ckpt.tensors)
    return p


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class LoadedTrial:
    trial: datamod.Trial
    frames: np.ndarray  # (steps, 84, 84) float32, preprocessed
    targets: np.ndarray  # (steps, 84, 84) float32 gaze targets
    actions: np.ndarray  # (steps,) int64
    phases: list[str] | None


def _sigma_for_trial(trial: datamod.Trial, cfg: TrainConfig) -> float:
    if cfg.sigma_px is not None:
        return float(cfg.sigma_px)
    if trial.geometry is None:
        raise ConfigError(
            f"trial {trial.trial_id} has no screen geometry; set sigma_px explicitly"
        )
    return visual_degree_to_pixels(trial.geometry, datamod.FRAME_SIZE)


def load_trials(trial_dirs: list[Path], cfg: TrainConfig) -> list[LoadedTrial]:
    loaded = []
    for d in trial_dirs:
        trial = datamod.load_trial(d)
        if cfg.action_count is not None and trial.action_set_size != cfg.action_count:
            raise ConfigError(
                f"trial {trial.trial_id} has action_set_size {trial.action_set_size}, "
                f"config says {cfg.action_count}"
            )
        frames = datamod.load_trial_frames(trial)
        sigma = _sigma_for_trial(trial, cfg)
        sx = datamod.FRAME_SIZE / trial.native_resolution[0]
        sy = datamod.FRAME_SIZE / trial.native_resolution[1]
        targets = np.empty_like(frames)
        for i, step in enumerate(trial.steps):
            pts = (
                [(step.gaze_points[-1][0] * sx, step.gaze_points[-1][1] * sy)]
                if step.gaze_points else []
            )
            targets[i] = gaussian_gaze_target(pts, sigma).astype(np.float32)
        actions = np.array([s.action for s in trial.steps], dtype=np.int64)
        loaded.append(LoadedTrial(trial, frames, targets, actions, trial.phases))
    return loaded


def _flat_index(trials: list[LoadedTrial]) -> list[tuple[int, int]]:
    return [(t, i) for t, lt in enumerate(trials) for i in range(len(lt.trial.steps))]


def _gather_stacks(trials: list[LoadedTrial], index: list[tuple[int, int]],
                   rows: np.ndarray) -> np.ndarray:
    out = np.empty((len(rows), datamod.STACK_DEPTH, datamod.FRAME_SIZE, datamod.FRAME_SIZE),
                   dtype=np.float32)
    for k, r in enumerate(rows):
        t, i = index[r]
        out[k] = datamod.make_frame_stack(trials[t].frames, i)
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# phase one: gaze network
# ---------------------------------------------------------------------------

def _gaze_epoch_loss(trials, index, params, batch_size) -> float:
    """Mean validation KL in inference mode."""
    models.set_mode(params, "inference")
    total, count = 0.0, 0
    with nn.no_grad():
        for lo in range(0, len(index), batch_size):
            rows = np.arange(lo, min(lo + batch_size, len(index)))
            stacks = _gather_stacks(trials, index, rows)
            targets = np.stack([trials[index[r][0]].targets[index[r][1]] for r in rows])
            _, act = models.gaze_net_batch(nn.Tensor(stacks), params)
            q = nn.softmax2d(act)
            kl = nn.kl_divergence(targets, q)
            total += float(kl.data) * len(rows)
            count += len(rows)
    return total / max(count, 1)


def train_gaze(train_dirs: list[Path], val_dirs: list[Path], cfg: TrainConfig) -> Checkpoint:
    """Fit the gaze network; returns the best-validation-KL checkpoint."""
    train = load_trials(train_dirs, cfg)
    val = load_trials(val_dirs, cfg)
    if not train or not any(len(t.trial.steps) for t in train):
        raise ValueError("empty training dataset")
    params = models.create_gaze_params(seed=rngmod.derive(cfg.seed, "gaze-init"))
    tensors = models.gaze_named_tensors(params)
    state = nn.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=ADAM_EPS)
    shuffle = rngmod.stream(cfg.seed, "gaze-shuffle")
    index = _flat_index(train)
    val_index = _flat_index(val)

    best: Checkpoint | None = None
    best_val = np.inf
    first_train = None
    bad_epochs = 0
    history = []
    for epoch in range(cfg.epochs):
        models.set_mode(params, "training")
        order = shuffle.permutation(len(index))
        running, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            if len(rows) < 2:
                continue  # batch norm needs at least two values
            stacks = _gather_stacks(train, index, rows)
            targets = np.stack([train[index[r][0]].targets[index[r][1]] for r in rows])
            for t in tensors.values():
                t.zero_grad()
            _, act = models.gaze_net_batch(nn.Tensor(stacks), params)
            loss = nn.kl_divergence(targets, nn.softmax2d(act))
            loss.backward()
            nn.adam_step(tensors, {k: t.grad for k, t in tensors.items()}, state)
            running += float(loss.data) * len(rows)
            seen += len(rows)
        train_kl = running / max(seen, 1)
        val_kl = _gaze_epoch_loss(val, val_index, params, cfg.batch_size)
        history.append({"epoch": epoch, "train_kl": train_kl, "val_kl": val_kl})
        _log(f"[train-gaze] epoch {epoch}: train_kl={train_kl:.4f} val_kl={val_kl:.4f}")

        if not np.isfinite(train_kl) or not np.isfinite(val_kl):
            _log("[train-gaze] non-finite loss; stopping with last good checkpoint")
            break
        if first_train is None:
            first_train = train_kl
        if train_kl > DIVERGENCE_FACTOR * first_train:
            bad_epochs += 1
            if bad_epochs >= DIVERGENCE_PATIENCE:
                _log("[train-gaze] diverged; stopping with last good checkpoint")
                break
        else:
            bad_epochs = 0
        if val_kl < best_val:
            best_val = val_kl
            best = Checkpoint(
                kind="gaze",
                tensors=_params_to_tensor_table(params),
                config=cfg.to_dict(),
                metrics=list(history),
            )
    if best is None:
        raise FloatingPointError("gaze training never produced a finite validation loss")
    best.metrics = history
    return best


# ---------------------------------------------------------------------------
# phase two: gate + action networks on a frozen gaze network
# ---------------------------------------------------------------------------

def _precompute_gaze(trials: list[LoadedTrial], params: models.SEAParams,
                     batch_size: int) -> list[dict[str, np.ndarray]]:
    """Frozen-gaze caches per trial: embeddings, pooled embeddings, masked maps."""
    models.set_mode(params.gaze, "inference")
    out = []
    for lt in trials:
        n = len(lt.trial.steps)
        emb = np.empty((n, models.EMBED_CHANNELS, models.EMBED_HW, models.EMBED_HW),
                       dtype=np.float32)
        masked = np.empty((n, datamod.FRAME_SIZE, datamod.FRAME_SIZE), dtype=np.float32)
        with nn.no_grad():
            for lo in range(0, n, batch_size):
                idx = np.arange(lo, min(lo + batch_size, n))
                stacks = datamod.stack_batch(lt.frames, idx)
                e, act = models.gaze_net_batch(nn.Tensor(stacks), params.gaze)
                q = nn.softmax2d(act)
                emb[idx] = e.data
                masked[idx] = models.masked_gaze_batch(q, params.keep_fraction).data
        out.append({"embedding": emb, "masked": masked,
                    "pooled": emb.mean(axis=(2, 3))})
    return out


def _action_pass(params, emb, masked, pooled, labels, policy, rng, train_tensors,
                 state=None) -> tuple[float, float, float]:
    """One batched action pass; updates params when state is given."""
    emb_t = nn.Tensor(emb)
    masked_t = nn.Tensor(masked)
    pooled_t = nn.Tensor(pooled)
    h, c = models.gate_batch(pooled_t, policy, params.gate, rng)
    logits = models.action_net_batch(emb_t, masked_t, c, params.action)
    loss = nn.cross_entropy(logits, labels)
    if state is not None:
        for t in train_tensors.values():
            t.zero_grad()
        loss.backward()
        nn.adam_step(train_tensors, {k: t.grad for k, t in train_tensors.items()}, state)
    preds = np.argmax(logits.data, axis=1)
    acc = float((preds == labels).mean())
    usage = float(c.data.mean())
    return float(loss.data), acc, usage


def train_action(train_dirs: list[Path], val_dirs: list[Path], gaze_ckpt: Checkpoint,
                 cfg: TrainConfig) -> Checkpoint:
    """Fit gate + action networks against demonstrated actions.

    The gaze network comes from ``gaze_ckpt`` and is frozen (bitwise) unless
    ``cfg.freeze_gaze`` is false. Returns the best-validation-cross-entropy
    checkpoint containing the full composite model.
    """
    train = load_trials(train_dirs, cfg)
    val = load_trials(val_dirs, cfg)
    if not train:
        raise ValueError("empty training dataset")
    action_count = cfg.action_count or train[0].trial.action_set_size
    params = models.create_sea_params(
        action_count=action_count,
        seed=rngmod.derive(cfg.seed, "action-init"),
        keep_fraction=cfg.keep_fraction,
    )
    _load_params_from_table(params.gaze, {k: v for k, v in gaze_ckpt.tensors.items()
                                          if k.startswith("gaze.")})

    all_tensors = models.sea_named_tensors(params)
    gaze_tensors = models.gaze_named_tensors(params.gaze)
    train_tensors = {k: v for k, v in all_tensors.items() if not k.startswith("gaze.")}
    if cfg.gate_policy != "learned":
        train_tensors = {k: v for k, v in train_tensors.items() if not k.startswith("gate.")}
    if not cfg.freeze_gaze:
        train_tensors.update(gaze_tensors)
    models.set_requires_grad(all_tensors, False)
    models.set_requires_grad(train_tensors, True)

    frozen = cfg.freeze_gaze
    cache = _precompute_gaze(train, params, cfg.batch_size) if frozen else None
    val_cache = _precompute_gaze(val, params, cfg.batch_size) if frozen else None

    state = nn.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=ADAM_EPS)
    shuffle = rngmod.stream(cfg.seed, "action-shuffle")
    gate_rng = rngmod.stream(cfg.seed, "gate-random-train")
    index = _flat_index(train)
    val_index = _flat_index(val)

    cfg_dict = cfg.to_dict()
    cfg_dict["action_count"] = action_count
    best: Checkpoint | None = None
    best_val = np.inf
    first_train = None
    bad_epochs = 0
    history = []
    for epoch in range(cfg.epochs):
        params.action.emb.bn.mode = "training"
        if not frozen:
            models.set_mode(params.gaze, "training")
        order = shuffle.permutation(len(index))
        running, accs, usages, seen = 0.0, 0.0, 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            if len(rows) < 2:
                continue
            labels = np.array([train[index[r][0]].actions[index[r][1]] for r in rows])
            if frozen:
                emb = np.stack([cache[index[r][0]]["embedding"][index[r][1]] for r in rows])
                masked = np.stack([cache[index[r][0]]["masked"][index[r][1]] for r in rows])
                pooled = np.stack([cache[index[r][0]]["pooled"][index[r][1]] for r in rows])
                loss, acc, usage = _action_pass(
                    params, emb, masked, pooled, labels, cfg.gate_policy, gate_rng,
                    train_tensors, state)
            else:
                stacks = _gather_stacks(train, index, rows)
                for t in train_tensors.values():
                    t.zero_grad()
                out = models.sea_forward_batch(stacks, params, cfg.gate_policy, gate_rng)
                ce = nn.cross_entropy(out["logits"], labels)
                ce.backward()
                nn.adam_step(train_tensors,
                             {k: t.grad for k, t in train_tensors.items()}, state)
                loss = float(ce.data)
                acc = float((np.argmax(out["logits"].data, axis=1) == labels).mean())
                usage = float(out["c"].data.mean())
            running += loss * len(rows)
            accs += acc * len(rows)
            usages += usage * len(rows)
            seen += len(rows)
        train_ce = running / max(seen, 1)
        train_acc = accs / max(seen, 1)
        train_usage = usages / max(seen, 1)
        val_ce, val_acc, val_usage = _evaluate_action(
            params, val, val_cache, val_index, cfg, gate_rng)
        history.append({
            "epoch": epoch, "train_ce": train_ce, "train_acc": train_acc,
            "val_ce": val_ce, "val_acc": val_acc,
            "gaze_usage": val_usage,
        })
        _log(f"[train-action] epoch {epoch}: train_ce={train_ce:.4f} acc={train_acc:.3f} "
             f"val_ce={val_ce:.4f} val_acc={val_acc:.3f} usage={val_usage:.3f}")

        if not np.isfinite(train_ce) or not np.isfinite(val_ce):
            _log("[train-action] non-finite loss; stopping with last good checkpoint")
            break
        if first_train is None:
            first_train = train_ce
        if train_ce > DIVERGENCE_FACTOR * first_train:
            bad_epochs += 1
            if bad_epochs >= DIVERGENCE_PATIENCE:
                _log("[train-action] diverged; stopping with last good checkpoint")
                break
        else:
            bad_epochs = 0
        if val_ce < best_val:
            best_val = val_ce
            best = Checkpoint(
                kind="sea",
                tensors=_params_to_tensor_table(params),
                config=cfg_dict,
                metrics=list(history),
            )
    models.set_requires_grad(all_tensors, True)
    if best is None:
        raise FloatingPointError("action training never produced a finite validation loss")
    best.metrics = history
    return best


def _evaluate_action(params, trials, cache, index, cfg, gate_rng):
    """Validation cross-entropy/accuracy/usage in inference mode."""
    params.action.emb.bn.mode = "inference"
    models.set_mode(params.gaze, "inference")
    total, accs, usages, seen = 0.0, 0.0, 0.0, 0
    with nn.no_grad():
        for lo in range(0, len(index), cfg.batch_size):
            rows = np.arange(lo, min(lo + cfg.batch_size, len(index)))
            labels = np.array([trials[index[r][0]].actions[index[r][1]] for r in rows])
            if cache is not None:
                emb = np.stack([cache[index[r][0]]["embedding"][index[r][1]] for r in rows])
                masked = np.stack([cache[index[r][0]]["masked"][index[r][1]] for r in rows])
                pooled = np.stack([cache[index[r][0]]["pooled"][index[r][1]] for r in rows])
                h, c = models.gate_batch(nn.Tensor(pooled), cfg.gate_policy, params.gate,
                                         gate_rng)
                logits = models.action_net_batch(nn.Tensor(emb), nn.Tensor(masked), c,
                                                 params.action)
                logits_np, c_np = logits.data, c.data
            else:
                stacks = _gather_stacks(trials, index, rows)
                out = models.sea_forward_batch(stacks, params, cfg.gate_policy, gate_rng)
                logits_np, c_np = out["logits"].data, out["c"].data
            ce = nn.cross_entropy(nn.Tensor(logits_np), labels)
            total += float(ce.data) * len(rows)
            accs += float((np.argmax(logits_np, axis=1) == labels).mean()) * len(rows)
            usages += float(c_np.mean()) * len(rows)
            seen += len(rows)
    return total / max(seen, 1), accs / max(seen, 1), usages / max(seen, 1)
