"""The gaze, gating, and action networks and their composite forward pass.

Architecture (frame stacks are 4 x 84 x 84):

- gaze net: conv 32@8x8/4 -> BN -> ReLU -> conv 64@4x4/2 -> BN -> ReLU gives
  the shared embedding (64 x 9 x 9); mirrored deconvs (4x4/2 then 8x8/4, each
  BN + ReLU) give the 84 x 84 gaze activation, turned into a probability map
  by a spatial softmax.
- gating net: global-average-pool the embedding to 64 features, one GRU cell
  with hidden size 1 and constant previous state -1, then c = relu(sign(h)).
  Since h stays in (-1, 1), the straight-through window never clips.
- action net: conv 16@8x8/4 + BN + ReLU over the gated (percentile-masked)
  gaze map, concatenated with the flattened embedding, then dense 512 ->
  dense action_count.

Gate policies: "learned" uses the GRU; "off" reproduces plain behavior
cloning, "on" reproduces constant gaze augmentation, "random" draws
Bernoulli(0.5) gates from a dedicated stream in training and evaluation
alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .gaze import DEFAULT_KEEP_FRACTION, percentile_mask_batch
from .nn import rng as rngmod
from .nn.layers import BatchNormParams, DenseParams, GRUParams
from .nn.tensor import Tensor, _accumulate, _attach

GATE_POLICIES = ("learned", "on", "off", "random")

EMBED_CHANNELS = 64
EMBED_HW = 9
EMBED_DIM = EMBED_CHANNELS * EMBED_HW * EMBED_HW  # 5184
GAZE_BRANCH_DIM = 16 * 20 * 20  # 6400
HIDDEN_DIM = 512

# The gated-off gaze branch feeds exact zeros into conv+BN+ReLU. With a zero
# BN shift that lands on the ReLU kink and kills every gradient in the
# branch, including the gate's; a small positive shift keeps it trainable
# from the first step.
ACTION_BN_BETA_INIT = 0.1

# Gate bias warm start. A zero-bias GRU with previous state -1 emits
# h ~ -0.5, so every gate starts closed; the branch conv then sees only
# zeros, never trains, and the gate gradient keeps voting "closed"
# (cold start). These biases put h near zero instead, so initial gates are
# mixed: embeddings where gaze helps get pushed open, the rest drift shut,
# and a shut gate stays shut because the branch never learns to exploit
# that phase.
GATE_BZ_INIT = 1.0
GATE_BH_INIT = 0.5


@dataclass
class ConvBlock:
    w: Tensor
    bn: BatchNormParams
    stride: int


@dataclass
class GazeNetParams:
    conv1: ConvBlock
    conv2: ConvBlock
    deconv1: ConvBlock
    deconv2: ConvBlock


@dataclass
class GateParams:
    gru: GRUParams  # input 64, hidden 1


@dataclass
class ActionNetParams:
    emb: ConvBlock  # over the gated gaze map
    fc1: DenseParams
    fc2: DenseParams


@dataclass
class SEAParams:
    gaze: GazeNetParams
    gate: GateParams
    action: ActionNetParams
    action_count: int
    keep_fraction: float = DEFAULT_KEEP_FRACTION


@dataclass
class GateDecision:
    h: float | None  # pre-sign activation; None for non-learned policies
    c: int
    policy: str


def create_gaze_params(seed: int, dtype=None) -> GazeNetParams:
    mk = lambda name: rngmod.stream(seed, name)
    return GazeNetParams(
        conv1=ConvBlock(nn.conv_kernel(32, 4, 8, 8, mk("init-conv1"), dtype),
                        BatchNormParams.create(32, dtype), stride=4),
        conv2=ConvBlock(nn.conv_kernel(64, 32, 4, 4, mk("init-conv2"), dtype),
                        BatchNormParams.create(64, dtype), stride=2),
        deconv1=ConvBlock(nn.deconv_kernel(64, 32, 4, 4, mk("init-deconv1"), dtype),
                          BatchNormParams.create(32, dtype), stride=2),
        deconv2=ConvBlock(nn.deconv_kernel(32, 1, 8, 8, mk("init-deconv2"), dtype),
                          BatchNormParams.create(1, dtype), stride=4),
    )


def create_sea_params(action_count: int, seed: int,
                      keep_fraction: float = DEFAULT_KEEP_FRACTION, dtype=None) -> SEAParams:
    mk = lambda name: rngmod.stream(seed, name)
    emb_bn = BatchNormParams.create(16, dtype)
    emb_bn.beta.data = np.full_like(emb_bn.beta.data, ACTION_BN_BETA_INIT)
    gru = GRUParams.create(EMBED_CHANNELS, 1, mk("init-gate"), dtype)
    gru.b_z.data = np.full_like(gru.b_z.data, GATE_BZ_INIT)
    gru.b_h.data = np.full_like(gru.b_h.data, GATE_BH_INIT)
    return SEAParams(
        gaze=create_gaze_params(seed, dtype),
        gate=GateParams(gru=gru),
        action=ActionNetParams(
            emb=ConvBlock(nn.conv_kernel(16, 1, 8, 8, mk("init-we"), dtype), emb_bn, stride=4),
            fc1=DenseParams.create(GAZE_BRANCH_DIM + EMBED_DIM, HIDDEN_DIM, mk("init-fc1"), dtype),
            fc2=DenseParams.create(HIDDEN_DIM, action_count, mk("init-fc2"), dtype),
        ),
        action_count=action_count,
        keep_fraction=keep_fraction,
    )


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

def _block_tensors(prefix: str, b: ConvBlock) -> dict[str, Tensor]:
    return {f"{prefix}.w": b.w, f"{prefix}.bn.gamma": b.bn.gamma, f"{prefix}.bn.beta": b.bn.beta}


def gaze_named_tensors(p: GazeNetParams) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name in ("conv1", "conv2", "deconv1", "deconv2"):
        out.update(_block_tensors(f"gaze.{name}", getattr(p, name)))
    return out


def sea_named_tensors(p: SEAParams) -> dict[str, Tensor]:
    out = gaze_named_tensors(p.gaze)
    for field in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
        out[f"gate.gru.{field}"] = getattr(p.gate.gru, field)
    out.update(_block_tensors("action.emb", p.action.emb))
    out.update({"action.fc1.w": p.action.fc1.w, "action.fc1.b": p.action.fc1.b,
                "action.fc2.w": p.action.fc2.w, "action.fc2.b": p.action.fc2.b})
    return out


def _blocks(p) -> list[ConvBlock]:
    if isinstance(p, GazeNetParams):
        return [p.conv1, p.conv2, p.deconv1, p.deconv2]
    if isinstance(p, SEAParams):
        return _blocks(p.gaze) + [p.action.emb]
    raise TypeError(type(p))


def named_buffers(p) -> dict[str, np.ndarray]:
    out = {}
    for b, prefix in zip(_blocks(p), _block_prefixes(p)):
        out[f"{prefix}.bn.running_mean"] = b.bn.running_mean
        out[f"{prefix}.bn.running_var"] = b.bn.running_var
    return out


def _block_prefixes(p) -> list[str]:
    base = ["gaze.conv1", "gaze.conv2", "gaze.deconv1", "gaze.deconv2"]
    return base + ["action.emb"] if isinstance(p, SEAParams) else base


def load_buffers(p, buffers: dict[str, np.ndarray]) -> None:
    for b, prefix in zip(_blocks(p), _block_prefixes(p)):
        for attr in ("running_mean", "running_var"):
            name = f"{prefix}.bn.{attr}"
            if name not in buffers:
                raise KeyError(f"missing buffer {name}")
            setattr(b.bn, attr, buffers[name].copy())


def set_mode(p, mode: str) -> None:
    """Switch every batch-norm layer to "training" or "inference"."""
    if mode not in ("training", "inference"):
        raise ValueError(mode)
    for b in _blocks(p):
        b.bn.mode = mode


def set_requires_grad(tensors: dict[str, Tensor], flag: bool) -> None:
    for t in tensors.values():
        t.requires_grad = flag
        if not flag:
            t.grad = None


# ---------------------------------------------------------------------------
# forward passes (batched; single-sample wrappers at the bottom)
# ---------------------------------------------------------------------------

def _conv_block(x: Tensor, b: ConvBlock) -> Tensor:
    return nn.relu(nn.batchnorm(nn.conv2d(x, b.w, stride=b.stride), b.bn))


def _deconv_block(x: Tensor, b: ConvBlock) -> Tensor:
    return nn.relu(nn.batchnorm(nn.deconv2d(x, b.w, stride=b.stride), b.bn))


def gaze_net_batch(stacks: Tensor, p: GazeNetParams) -> tuple[Tensor, Tensor]:
    """(N,4,84,84) -> (embedding (N,64,9,9), gaze activation (N,84,84))."""
    h1 = _conv_block(stacks, p.conv1)
    emb = _conv_block(h1, p.conv2)
    d1 = _deconv_block(emb, p.deconv1)
    d2 = _deconv_block(d1, p.deconv2)
    return emb, nn.reshape(d2, (d2.shape[0], d2.shape[2], d2.shape[3]))


def masked_gaze_batch(q: Tensor, keep_fraction: float) -> Tensor:
    """Percentile-mask each predicted map; keeps gradients through kept cells.

    The kept/dropped pattern and the rescaling peak are treated as constants
    of the backward pass (subgradient through the sort).
    """
    masked = percentile_mask_batch(q.data, keep_fraction)
    out = Tensor(masked)
    if q.requires_grad:
        peak = np.where(masked > 0, q.data, 0.0).max(axis=(1, 2))
        scale = np.where(peak > 0, peak, 1.0)
        pattern = (masked > 0).astype(q.data.dtype) / scale[:, None, None]

        def bwd(g):
            _accumulate(q, g * pattern)

        return _attach(out, (q,), bwd)
    return out


def gate_batch(pooled: Tensor, policy: str, p: GateParams,
               rng: np.random.Generator | None) -> tuple[Tensor | None, Tensor]:
    """Gate values for a batch of pooled embeddings (N,64) -> (h, c) each (N,1)."""
    n = pooled.shape[0]
    dt = pooled.data.dtype
    if policy == "learned":
        h_prev = Tensor(np.full((n, 1), -1.0, dtype=dt))
        h = nn.gru_cell(pooled, h_prev, p.gru)
        return h, nn.hard_gate(h)
    if policy == "on":
        return None, Tensor(np.ones((n, 1), dtype=dt))
    if policy == "off":
        return None, Tensor(np.zeros((n, 1), dtype=dt))
    if policy == "random":
        if rng is None:
            raise ValueError("random gate policy needs an rng stream")
        return None, Tensor(rng.integers(0, 2, size=(n, 1)).astype(dt))
    raise ValueError(f"unknown gate policy {policy!r}")


def action_net_batch(emb: Tensor, masked_maps: Tensor, c: Tensor,
                     p: ActionNetParams) -> Tensor:
    """(embedding, masked gaze maps (N,84,84), gate (N,1)) -> logits (N,A)."""
    n, hh, ww = masked_maps.shape
    m4 = nn.reshape(masked_maps, (n, 1, hh, ww))
    gated = nn.gate_apply(m4, c)
    branch = _conv_block(gated, p.emb)
    feats = nn.concat([nn.flatten(branch), nn.flatten(emb)], axis=1)
    hidden = nn.relu(nn.dense(feats, p.fc1))
    return nn.dense(hidden, p.fc2)


def sea_forward_batch(stacks: np.ndarray, params: SEAParams, policy: str,
                      rng: np.random.Generator | None = None) -> dict:
    """Full composite pass on a stack batch; returns all intermediates."""
    x = Tensor(np.asarray(stacks))
    emb, activation = gaze_net_batch(x, params.gaze)
    q = nn.softmax2d(activation)
    masked = masked_gaze_batch(q, params.keep_fraction)
    pooled = nn.mean(emb, axes=(2, 3))
    h, c = gate_batch(pooled, policy, params.gate, rng)
    logits = action_net_batch(emb, masked, c, params.action)
    return {"logits": logits, "h": h, "c": c, "gaze_map": q, "masked_map": masked,
            "embedding": emb}


# ---------------------------------------------------------------------------
# single-sample surfaces
# ---------------------------------------------------------------------------

def _one(stack: np.ndarray) -> np.ndarray:
    arr = np.asarray(stack)
    if arr.ndim != 3:
        raise ValueError(f"expected one (4,84,84) stack, got {arr.shape}")
    return arr[None]


def gaze_forward(stack, p: GazeNetParams) -> tuple[Tensor, Tensor]:
    """One stack -> (embedding (64,9,9), gaze activation (84,84))."""
    data = stack.data if isinstance(stack, Tensor) else np.asarray(stack)
    emb, act = gaze_net_batch(Tensor(_one(data)), p)
    return nn.reshape(emb, emb.shape[1:]), nn.reshape(act, act.shape[1:])


def gate_forward(embedding, policy: str, p: GateParams,
                 rng: np.random.Generator | None = None) -> GateDecision:
    """One embedding (64,9,9) -> GateDecision."""
    data = embedding.data if isinstance(embedding, Tensor) else np.asarray(embedding)
    pooled = nn.mean(Tensor(data[None]), axes=(2, 3))
    h, c = gate_batch(pooled, policy, p, rng)
    return GateDecision(
        h=None if h is None else float(h.data[0, 0]),
        c=int(c.data[0, 0]),
        policy=policy,
    )


def action_forward(embedding, gaze_map, gate: GateDecision, p: ActionNetParams) -> Tensor:
    """One (embedding, percentile-masked map, gate decision) -> logits (A,)."""
    emb = embedding.data if isinstance(embedding, Tensor) else np.asarray(embedding)
    gmap = gaze_map.data if isinstance(gaze_map, Tensor) else np.asarray(gaze_map)
    c = Tensor(np.full((1, 1), float(gate.c), dtype=emb.dtype))
    logits = action_net_batch(Tensor(emb[None]), Tensor(gmap[None]), c, p)
    return nn.reshape(logits, (logits.shape[1],))


def sea_forward(stack, params: SEAParams, policy: str,
                rng: np.random.Generator | None = None) -> tuple[Tensor, GateDecision, np.ndarray]:
    """One stack -> (action logits, gate decision, masked gaze map)."""
    out = sea_forward_batch(_one(stack.data if isinstance(stack, Tensor) else stack),
                            params, policy, rng)
    decision = GateDecision(
        h=None if out["h"] is None else float(out["h"].data[0, 0]),
        c=int(out["c"].data[0, 0]),
        policy=policy,
    )
    logits = nn.reshape(out["logits"], (out["logits"].shape[1],))
    return logits, decision, out["masked_map"].data[0]
