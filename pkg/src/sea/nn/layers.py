"""Forward/backward passes for every layer the gated gaze architecture needs.

Convolution is cross-correlation (deep-learning convention), run as a single
GEMM over im2col patches. Transposed convolution shares the same gather /
scatter primitives, so the two are exact adjoints of each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    _accumulate,
    _attach,
    add,
    as_tensor,
    matmul,
    mul,
    sigmoid,
    sub,
    tanh,
)


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values per channel."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


# ---------------------------------------------------------------------------
# conv primitives (plain arrays)
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """View of padded input as (N, C, kh, kw, oh, ow) sliding windows."""
    n, c = xp.shape[:2]
    st = xp.strides
    shape = (n, c, kh, kw, oh, ow)
    strides = (st[0], st[1], st[2], st[3], st[2] * sh, st[3] * sw)
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride, padding) -> np.ndarray:
    """Cross-correlation: x (N,C,H,W), k (F,C,kh,kw) -> (N,F,oh,ow)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    f, ck, kh, kw = k.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, sh, sw, oh, ow)
    cols = win.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * oh * ow)
    out = (k.reshape(f, c * kh * kw) @ cols).reshape(f, n, oh, ow)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_bwd_input(gy: np.ndarray, k: np.ndarray, stride, padding, in_hw) -> np.ndarray:
    """Scatter-add adjoint of _conv_fwd: gy (N,F,oh,ow) -> gx (N,C,H,W)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, f, oh, ow = gy.shape
    _, c, kh, kw = k.shape
    h, w = in_hw
    gmat = gy.transpose(1, 0, 2, 3).reshape(f, n * oh * ow)
    gcols = (k.reshape(f, c * kh * kw).T @ gmat).reshape(c, kh, kw, n, oh, ow)
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gy.dtype)
    # Within one (u, v) the strided window anchors never overlap.
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u : u + oh * sh : sh, v : v + ow * sw : sw] += gcols[:, u, v].transpose(1, 0, 2, 3)
    if ph or pw:
        return gxp[:, :, ph : ph + h, pw : pw + w]
    return gxp


def _conv_bwd_kernel(x: np.ndarray, gy: np.ndarray, stride, padding, kshape) -> np.ndarray:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    f, _, kh, kw = kshape
    _, _, oh, ow = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, sh, sw, oh, ow)
    cols = win.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * oh * ow)
    gmat = gy.transpose(1, 0, 2, 3).reshape(f, n * oh * ow)
    return (gmat @ cols.T).reshape(f, c, kh, kw)


def _check_conv_shapes(x: Tensor, k: Tensor, stride, padding, transposed: bool) -> None:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if k.ndim != 4:
        raise DimensionError(f"conv kernel must be 4-d, got {k.shape}")
    cin = x.shape[-3]
    kc = k.shape[0] if transposed else k.shape[1]
    axis = "kernel axis 0 (input channels)" if transposed else "kernel axis 1 (input channels)"
    if cin != kc:
        raise DimensionError(f"input channel axis: input has {cin}, {axis} has {kc}")
    if not transposed:
        h, w = x.shape[-2], x.shape[-1]
        kh, kw = k.shape[2], k.shape[3]
        if h + 2 * ph < kh:
            raise DimensionError(f"height axis: padded input {h + 2 * ph} < kernel {kh}")
        if w + 2 * pw < kw:
            raise DimensionError(f"width axis: padded input {w + 2 * pw} < kernel {kw}")
    if sh < 1 or sw < 1:
        raise DimensionError(f"stride must be positive, got {(sh, sw)}")


def conv2d(x, kernel, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x`` with ``kernel`` (F, C, kh, kw).

    Accepts a single (C,H,W) input or a batch (N,C,H,W) and returns the
    matching rank. Output spatial extent is floor((H+2p-k)/s)+1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_shapes(x, kernel, stride, padding, transposed=False)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    out_data = _conv_fwd(xd, kernel.data, stride, padding)
    in_hw = xd.shape[2:]
    out = Tensor(out_data[0] if squeeze else out_data)

    def bwd(g):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            _accumulate(x, _conv_bwd_input(gb, kernel.data, stride, padding, in_hw)[0]
                        if squeeze else _conv_bwd_input(gb, kernel.data, stride, padding, in_hw))
        if kernel.requires_grad:
            _accumulate(kernel, _conv_bwd_kernel(xd, gb, stride, padding, kernel.shape))

    return _attach(out, (x, kernel), bwd)


def deconv2d(x, kernel, stride=1, padding=0) -> Tensor:
    """Transposed convolution; kernel layout (C_in, C_out, kh, kw).

    Output spatial extent is (H-1)*s - 2p + k. Forward is the exact adjoint
    of ``conv2d`` with the same kernel tensor, so the pair can be used for
    inner-product (adjointness) checks.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_shapes(x, kernel, stride, padding, transposed=True)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    kh, kw = kernel.shape[2], kernel.shape[3]
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    h, w = xd.shape[2:]
    out_h = (h - 1) * sh - 2 * ph + kh
    out_w = (w - 1) * sw - 2 * pw + kw
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"spatial axis: transposed output {(out_h, out_w)} collapses")
    out_data = _conv_bwd_input(xd, kernel.data, stride, padding, (out_h, out_w))
    out = Tensor(out_data[0] if squeeze else out_data)

    def bwd(g):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            gx = _conv_fwd(gb, kernel.data, stride, padding)
            _accumulate(x, gx[0] if squeeze else gx)
        if kernel.requires_grad:
            _accumulate(kernel, _conv_bwd_kernel(gb, xd, stride, padding, kernel.shape))

    return _attach(out, (x, kernel), bwd)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine batch norm with running statistics.

    ``mode`` is "training" (batch statistics, running stats updated by EMA)
    or "inference" (running stats only).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "training"

    @staticmethod
    def create(channels: int, dtype=None) -> "BatchNormParams":
        from .tensor import default_dtype

        dt = dtype or default_dtype()
        return BatchNormParams(
            gamma=Tensor(np.ones(channels, dtype=dt), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dt), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dt),
            running_var=np.ones(channels, dtype=dt),
        )


def batchnorm(x, params: BatchNormParams) -> Tensor:
    """Normalize (N,C,H,W) per channel; affine scale/shift from ``params``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if c != params.gamma.shape[0]:
        raise DimensionError(f"channel axis: input has {c}, params have {params.gamma.shape[0]}")
    gamma, beta = params.gamma, params.beta
    training = params.mode == "training"
    if training:
        count = n * h * w
        if count < 2:
            raise DegenerateBatchError(
                f"batch statistics need >= 2 values per channel, got {count}"
            )
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        mom = params.momentum
        params.running_mean = ((1 - mom) * params.running_mean + mom * m).astype(x.dtype)
        unbiased = v * count / (count - 1)
        params.running_var = ((1 - mom) * params.running_var + mom * unbiased).astype(x.dtype)
    else:
        m = params.running_mean
        v = params.running_var
    ivar = 1.0 / np.sqrt(v + params.eps)
    xc = x.data - m[:, None, None]
    xh = xc * ivar[:, None, None]
    out = Tensor(gamma.data[:, None, None] * xh + beta.data[:, None, None])

    def bwd(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xh).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = g * gamma.data[:, None, None]
            if training:
                cnt = n * h * w
                gv = (gxh * xc).sum(axis=(0, 2, 3)) * (-0.5) * ivar**3
                gm = -(gxh.sum(axis=(0, 2, 3))) * ivar + gv * (-2.0) * xc.mean(axis=(0, 2, 3))
                gx = (
                    gxh * ivar[:, None, None]
                    + (gv[:, None, None] * 2.0 * xc + gm[:, None, None]) / cnt
                )
            else:
                gx = gxh * ivar[:, None, None]
            _accumulate(x, gx)

    return _attach(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

@dataclass
class DenseParams:
    w: Tensor  # (out, in)
    b: Tensor  # (out,)

    @staticmethod
    def create(in_dim: int, out_dim: int, rng: np.random.Generator, dtype=None) -> "DenseParams":
        return DenseParams(
            w=Tensor(he_uniform((out_dim, in_dim), in_dim, rng, dtype), requires_grad=True),
            b=Tensor(np.zeros(out_dim, dtype=dtype or _default()), requires_grad=True),
        )


def dense(x, params: DenseParams) -> Tensor:
    """x (N, in) @ w.T + b."""
    x = as_tensor(x)
    if x.shape[-1] != params.w.shape[1]:
        raise DimensionError(
            f"feature axis: input has {x.shape[-1]}, weight expects {params.w.shape[1]}"
        )
    w, b = params.w, params.b
    out = Tensor(x.data @ w.data.T + b.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.T @ x.data)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0) if g.ndim == 2 else g)

    return _attach(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# GRU cell (non-recurrent use: constant previous hidden state)
# ---------------------------------------------------------------------------

@dataclass
class GRUParams:
    """One GRU cell. Weight shapes: w_* (hidden, in), u_* (hidden, hidden), b_* (hidden,)."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @staticmethod
    def create(in_dim: int, hidden: int, rng: np.random.Generator, dtype=None) -> "GRUParams":
        def wmat(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(
                rng.uniform(-bound, bound, size=shape).astype(dtype or _default()),
                requires_grad=True,
            )

        zeros = lambda: Tensor(np.zeros(hidden, dtype=dtype or _default()), requires_grad=True)
        return GRUParams(
            w_z=wmat((hidden, in_dim), in_dim), u_z=wmat((hidden, hidden), hidden), b_z=zeros(),
            w_r=wmat((hidden, in_dim), in_dim), u_r=wmat((hidden, hidden), hidden), b_r=zeros(),
            w_h=wmat((hidden, in_dim), in_dim), u_h=wmat((hidden, hidden), hidden), b_h=zeros(),
        )


def gru_cell(x, h_prev, weights: GRUParams) -> Tensor:
    """Single GRU step.

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r*h) + b_h)
    h' = (1 - z)*h + z*h~

    Here the cell is used non-recurrently with h_prev fixed at the constant
    -1 vector, which keeps h' inside (-1, 1).
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    if x.shape[-1] != weights.w_z.shape[1]:
        raise DimensionError(
            f"input axis: x has {x.shape[-1]}, w_z expects {weights.w_z.shape[1]}"
        )
    if h_prev.shape[-1] != weights.u_z.shape[1]:
        raise DimensionError(
            f"hidden axis: h_prev has {h_prev.shape[-1]}, u_z expects {weights.u_z.shape[1]}"
        )

    def lin(w, v):
        return matmul(v, _transpose(w))

    z = sigmoid(add(add(lin(weights.w_z, x), lin(weights.u_z, h_prev)), weights.b_z))
    r = sigmoid(add(add(lin(weights.w_r, x), lin(weights.u_r, h_prev)), weights.b_r))
    h_tilde = tanh(
        add(add(lin(weights.w_h, x), lin(weights.u_h, mul(r, h_prev))), weights.b_h)
    )
    return add(mul(sub(1.0, z), h_prev), mul(z, h_tilde))


def _transpose(t: Tensor) -> Tensor:
    out = Tensor(t.data.T)

    def bwd(g):
        _accumulate(t, g.T)

    return _attach(out, (t,), bwd)


# ---------------------------------------------------------------------------
# gating nonlinearity with straight-through gradient
# ---------------------------------------------------------------------------

def hard_gate(h) -> Tensor:
    """c = relu(sign(h)) with sgn(0) = 0, i.e. c = 1 iff h > 0.

    The threshold is non-differentiable; backward uses the straight-through
    surrogate dc/dh = 1 for |h| <= 1 and 0 elsewhere.
    """
    h = as_tensor(h)
    out = Tensor((h.data > 0).astype(h.data.dtype))
    window = (np.abs(h.data) <= 1.0).astype(h.data.dtype)

    def bwd(g):
        _accumulate(h, g * window)

    return _attach(out, (h,), bwd)


def gate_apply(gaze_map, c) -> Tensor:
    """Scale each sample's map (N,1,H,W) by its gate scalar c (N,1)."""
    gaze_map, c = as_tensor(gaze_map), as_tensor(c)
    if gaze_map.shape[0] != c.shape[0]:
        raise DimensionError(
            f"batch axis: map has {gaze_map.shape[0]}, gate has {c.shape[0]}"
        )
    cb = c.data[:, :, None, None]
    out = Tensor(gaze_map.data * cb)

    def bwd(g):
        if gaze_map.requires_grad:
            _accumulate(gaze_map, g * cb)
        if c.requires_grad:
            _accumulate(c, (g * gaze_map.data).sum(axis=(2, 3)))

    return _attach(out, (gaze_map, c), bwd)


# ---------------------------------------------------------------------------
# weight init
# ---------------------------------------------------------------------------

def _default():
    from .tensor import default_dtype

    return default_dtype()


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Fan-in-scaled uniform init, U(+-sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or _default())


def conv_kernel(f: int, c: int, kh: int, kw: int, rng: np.random.Generator, dtype=None) -> Tensor:
    return Tensor(he_uniform((f, c, kh, kw), c * kh * kw, rng, dtype), requires_grad=True)


def deconv_kernel(cin: int, cout: int, kh: int, kw: int, rng: np.random.Generator, dtype=None) -> Tensor:
    return Tensor(he_uniform((cin, cout, kh, kw), cin * kh * kw, rng, dtype), requires_grad=True)
