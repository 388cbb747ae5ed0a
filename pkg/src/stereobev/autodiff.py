"""Dense float64 tensors with reverse-mode automatic differentiation.

A module-level tape records every differentiable operation in execution
order; ``backward`` replays the tape once in strict reverse order and then
retires it, so a second backward without a fresh forward pass is rejected.
Everything is float64: at desk scale the precision is cheaper than the
debugging it saves, and finite-difference gradient checks need the headroom.

The op set is exactly what the BEV layout networks need: 2D/3D convolution,
bilinear grid sampling, horizontal sub-pixel shift, pooling/upsampling,
softmax, a visibility-masked cross entropy, a first-K-channels L1 distance,
and the elementwise basics. Convolutions loop over kernel offsets and let
BLAS handle the channel contraction, which keeps them fast without any
im2col buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, NumericError

__all__ = [
    "Tensor", "Graph", "graph", "reset_graph", "no_grad", "backward",
    "tensor", "add", "sub", "mul", "neg", "absval", "tsum", "mean",
    "relu", "softmax", "concat", "reshape", "permute",
    "maxpool2d", "upsample2d", "hshift",
    "conv2d", "conv3d", "grid_sample_bilinear",
    "masked_softmax_ce", "l1_first_k",
    "AdamState", "adam_step", "zero_grads", "he_uniform",
]


# ---------------------------------------------------------------------------
# tensor and tape

class Tensor:
    """n-d float64 array node. Leaves with requires_grad=True collect
    gradients in .grad; intermediate tensors are tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_version")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._version = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


class Graph:
    """Append-only record of one forward pass. Each node is (op name, output
    tensor, pull closure); backward walks nodes in reverse append order."""

    def __init__(self):
        self.nodes: list = []
        self.version = 0
        self.enabled = True


_GRAPH = Graph()


def graph() -> Graph:
    return _GRAPH


def reset_graph() -> None:
    """Drop any recorded-but-unconsumed forward pass."""
    _GRAPH.nodes.clear()
    _GRAPH.version += 1


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _GRAPH.enabled
        _GRAPH.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAPH.enabled = self._prev
        return False


def _track(*inputs: Tensor) -> bool:
    return _GRAPH.enabled and any(t.requires_grad for t in inputs)


def _record(op: str, out: Tensor, pull) -> None:
    if out.requires_grad:
        out._version = _GRAPH.version
        _GRAPH.nodes.append((op, out, pull))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar root. Every requires_grad leaf ends up
    with dLoss/dLeaf added into .grad (accumulating across calls until
    zero_grads). Consumes the tape: a second backward without a new forward
    pass raises GraphError."""
    if loss.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward root does not require grad; nothing to traverse")
    if loss._version != _GRAPH.version:
        raise GraphError("graph already consumed by a previous backward; run a new forward pass")
    loss.grad = np.ones_like(loss.data)
    for _op, out, pull in reversed(_GRAPH.nodes):
        if out.grad is not None:
            pull(out.grad)
    _GRAPH.nodes.clear()
    _GRAPH.version += 1


def _scalar(g) -> float:
    """Extract the single element of a scalar-output gradient."""
    return float(np.asarray(g).reshape(()))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, requires_grad=_track(a, b))

    def pull(g):
        if a.requires_grad:
            a._add_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._add_grad(_unbroadcast(g, b.data.shape))

    _record("add", out, pull)
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data, requires_grad=_track(a, b))

    def pull(g):
        if a.requires_grad:
            a._add_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._add_grad(_unbroadcast(-g, b.data.shape))

    _record("sub", out, pull)
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, requires_grad=_track(a, b))

    def pull(g):
        if a.requires_grad:
            a._add_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._add_grad(_unbroadcast(g * a.data, b.data.shape))

    _record("mul", out, pull)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=_track(a))

    def pull(g):
        a._add_grad(-g)

    _record("neg", out, pull)
    return out


def absval(a: Tensor) -> Tensor:
    """|a| with subgradient sign(a) (0 at 0)."""
    out = Tensor(np.abs(a.data), requires_grad=_track(a))

    def pull(g):
        a._add_grad(g * np.sign(a.data))

    _record("abs", out, pull)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=_track(a))
    shape = a.data.shape

    def pull(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % len(shape) for i in ax)
            g = np.expand_dims(g, tuple(sorted(ax)))
        a._add_grad(np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g))

    _record("sum", out, pull)
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=_track(a))

    def pull(g):
        a._add_grad(g * (a.data > 0.0))

    _record("relu", out, pull)
    return out


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, requires_grad=_track(a))

    def pull(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        a._add_grad(p * (g - dot))

    _record("softmax", out, pull)
    return out


# ---------------------------------------------------------------------------
# shape ops

def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), requires_grad=_track(*ts))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._add_grad(g[tuple(idx)])

    _record("concat", out, pull)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_track(a))
    orig = a.data.shape

    def pull(g):
        a._add_grad(g.reshape(orig))

    _record("reshape", out, pull)
    return out


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), requires_grad=_track(a))
    inv = tuple(np.argsort(axes))

    def pull(g):
        a._add_grad(g.transpose(inv))

    _record("permute", out, pull)
    return out


# ---------------------------------------------------------------------------
# pooling / upsampling

def maxpool2d(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the trailing two axes of an NCHW
    tensor. Ties route the gradient to the first maximal element."""
    n, c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d: spatial dims must be even, got H={h}, W={w}")
    win = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    am = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, am[..., None], axis=-1)[..., 0], requires_grad=_track(a))

    def pull(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, am[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        a._add_grad(gx)

    _record("maxpool2d", out, pull)
    return out


def upsample2d(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling over the trailing two axes (NCHW)."""
    out = Tensor(a.data.repeat(2, axis=-2).repeat(2, axis=-1), requires_grad=_track(a))
    n, c, h, w = a.data.shape

    def pull(g):
        a._add_grad(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    _record("upsample2d", out, pull)
    return out


def hshift(a: Tensor, shift: float) -> Tensor:
    """Shift content right along the last axis by a (possibly fractional)
    non-negative number of columns, zero-filling the vacated border.

    Fractional shifts interpolate linearly between the two straddled source
    columns; an output column whose interpolation support is not fully inside
    the source is zeroed, so a shift of s leaves exactly ceil(s) zero columns.
    The shift amount is a constant, not a differentiable input.
    """
    if shift < 0:
        raise ValueError(f"hshift: shift must be >= 0, got {shift}")
    w = a.data.shape[-1]
    pos = np.arange(w, dtype=np.float64) - float(shift)
    i0 = np.floor(pos).astype(np.int64)
    t = pos - i0
    exact = t < 1e-12
    valid = np.where(exact, (i0 >= 0) & (i0 <= w - 1), (i0 >= 0) & (i0 + 1 <= w - 1))
    w0 = np.where(valid, 1.0 - t, 0.0)
    w1 = np.where(valid & ~exact, t, 0.0)
    j0 = np.clip(i0, 0, w - 1)
    j1 = np.clip(i0 + 1, 0, w - 1)
    out_data = a.data[..., j0] * w0 + a.data[..., j1] * w1
    out = Tensor(out_data, requires_grad=_track(a))

    def pull(g):
        gx = np.zeros_like(a.data)
        for u in range(w):
            if not valid[u]:
                continue
            gx[..., j0[u]] += w0[u] * g[..., u]
            if w1[u] != 0.0:
                gx[..., j1[u]] += w1[u] * g[..., u]
        a._add_grad(gx)

    _record("hshift", out, pull)
    return out


# ---------------------------------------------------------------------------
# convolutions

def _conv_checks(name, x, wt, b, k_axes, stride, pad):
    if stride < 1:
        raise ValueError(f"{name}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"{name}: pad must be >= 0, got {pad}")
    ks = [wt.data.shape[i] for i in k_axes]
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"{name}: kernel extents must be odd, got {ks}")
    if x.data.shape[1] != wt.data.shape[1]:
        raise ValueError(
            f"{name}: input channel dim C_in={x.data.shape[1]} does not match "
            f"weight C_in={wt.data.shape[1]}")
    if b.data.shape != (wt.data.shape[0],):
        raise ValueError(
            f"{name}: bias shape {b.data.shape} does not match C_out={wt.data.shape[0]}")


def _conv_nd(name: str, x: Tensor, weight: Tensor, bias: Tensor,
             stride: int, pad: int, nd: int) -> Tensor:
    """Shared n-d convolution. Works channel-first with the batch folded into
    the GEMM columns: one small strided copy per kernel offset feeds a
    (C_out, C_in) x (C_in, N*P) product, which keeps the per-offset working
    set cache-sized instead of materializing a full patch matrix."""
    spatial = x.data.shape[2:]
    n, cin = x.data.shape[:2]
    cout = weight.data.shape[0]
    k = weight.data.shape[2]
    out_sp = tuple((s + 2 * pad - k) // stride + 1 for s in spatial)
    if min(out_sp) < 1:
        raise ValueError(f"{name}: kernel {k} with pad {pad} exceeds input {spatial}")
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((pad, pad),) * nd) if pad else x.data
    # channel-first copy once; every offset slice below reshapes to (cin, n*P)
    xt = np.ascontiguousarray(np.moveaxis(xp, 1, 0))
    npos = int(np.prod(out_sp))
    offsets = list(np.ndindex((k,) * nd))
    slices = [
        (slice(None), slice(None)) + tuple(
            slice(o[a], o[a] + stride * out_sp[a], stride) for a in range(nd))
        for o in offsets]
    nk = len(offsets)
    wflat = np.ascontiguousarray(weight.data.reshape(cout, cin, nk).transpose(2, 0, 1))
    out2 = np.zeros((cout, n * npos))
    for oi, sl in enumerate(slices):
        xs = np.ascontiguousarray(xt[sl]).reshape(cin, n * npos)
        out2 += wflat[oi] @ xs
    out_data = np.moveaxis(out2.reshape((cout, n) + out_sp), 0, 1).copy()
    out_data += bias.data.reshape((1, cout) + (1,) * nd)
    out = Tensor(out_data, requires_grad=_track(x, weight, bias))

    def pull(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(cout, n * npos)
        if bias.requires_grad:
            bias._add_grad(g2.sum(axis=1).reshape(bias.data.shape))
        need_w = weight.requires_grad
        need_x = x.requires_grad
        gw = np.zeros((nk, cout, cin)) if need_w else None
        gxt = np.zeros_like(xt) if need_x else None
        for oi, sl in enumerate(slices):
            if need_w:
                xs = np.ascontiguousarray(xt[sl]).reshape(cin, n * npos)
                gw[oi] = g2 @ xs.T
            if need_x:
                gxt[sl] += (wflat[oi].T @ g2).reshape((cin, n) + out_sp)
        if need_w:
            weight._add_grad(gw.transpose(1, 2, 0).reshape(weight.data.shape))
        if need_x:
            gxp = np.moveaxis(gxt, 0, 1)
            if pad:
                core = (slice(None), slice(None)) + tuple(
                    slice(pad, pad + s) for s in spatial)
                x._add_grad(gxp[core])
            else:
                x._add_grad(gxp)

    _record(name, out, pull)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution: x (N,C_in,H,W) * weight (C_out,C_in,k,k) + bias."""
    _conv_checks("conv2d", x, weight, bias, (2, 3), stride, pad)
    return _conv_nd("conv2d", x, weight, bias, stride, pad, nd=2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """NCDHW convolution: x (N,C_in,D,H,W) * weight (C_out,C_in,k,k,k) + bias."""
    _conv_checks("conv3d", x, weight, bias, (2, 3, 4), stride, pad)
    return _conv_nd("conv3d", x, weight, bias, stride, pad, nd=3)


# ---------------------------------------------------------------------------
# warping

def grid_sample_bilinear(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of x (N,C,H,W) at grid (N,H_out,W_out,2) source
    coordinates given as (col,row) in pixel units.

    Zero padding outside the source: neighbors that fall outside contribute
    nothing, samples whose whole 2x2 support is outside come back 0.
    Differentiable w.r.t the input only; grids are geometry constants.
    """
    if grid.data.shape[-1] != 2:
        raise ValueError(f"grid_sample_bilinear: grid last dim must be 2, got {grid.data.shape[-1]}")
    if x.data.ndim != 4 or grid.data.ndim != 4:
        raise ValueError("grid_sample_bilinear: expected NCHW input and NHW2 grid")
    if x.data.shape[0] != grid.data.shape[0]:
        raise ValueError(
            f"grid_sample_bilinear: batch dims differ, input N={x.data.shape[0]} "
            f"grid N={grid.data.shape[0]}")
    n, c, h, w = x.data.shape
    _, ho, wo, _ = grid.data.shape
    col = grid.data[..., 0]
    row = grid.data[..., 1]
    # clip wildly out-of-range sentinels so floor/int stay well-defined
    col = np.clip(col, -2.0, w + 1.0)
    row = np.clip(row, -2.0, h + 1.0)
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    tc = col - c0
    tr = row - r0
    corners = (
        (r0, c0, (1.0 - tr) * (1.0 - tc)),
        (r0, c0 + 1, (1.0 - tr) * tc),
        (r0 + 1, c0, tr * (1.0 - tc)),
        (r0 + 1, c0 + 1, tr * tc),
    )
    out_data = np.zeros((n, c, ho, wo))
    saved = []
    for rr, cc, wgt in corners:
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        wm = wgt * inside
        ri = np.clip(rr, 0, h - 1)
        ci = np.clip(cc, 0, w - 1)
        for ni in range(n):
            out_data[ni] += wm[ni] * x.data[ni][:, ri[ni], ci[ni]]
        saved.append((ri, ci, wm))
    out = Tensor(out_data, requires_grad=_track(x))

    def pull(g):
        gx = np.zeros_like(x.data)
        carange = np.arange(c)
        for ri, ci, wm in saved:
            for ni in range(n):
                sel = wm[ni] != 0.0
                if not sel.any():
                    continue
                lin = (ri[ni][sel] * w + ci[ni][sel])
                vals = (wm[ni][sel] * g[ni][:, sel])
                np.add.at(gx[ni].reshape(c, h * w), (carange[:, None], lin[None, :]), vals)
        x._add_grad(gx)

    _record("grid_sample", out, pull)
    return out


# ---------------------------------------------------------------------------
# losses

def masked_softmax_ce(logits: Tensor, target: np.ndarray, mask: np.ndarray,
                      normalize: bool = True) -> Tensor:
    """Visibility-masked categorical cross entropy.

    logits: (n_classes, H, W); target: (H, W) int class grid; mask: (H, W)
    binary. Masked-out pixels contribute exactly zero to both the value and
    the gradient. By default the sum is divided by the visible-pixel count so
    the learning rate does not depend on mask size; normalize=False gives the
    plain masked sum.
    """
    nc = logits.data.shape[0]
    target = np.asarray(target)
    mask = np.asarray(mask)
    if target.shape != logits.data.shape[1:] or mask.shape != target.shape:
        raise ValueError(
            f"masked_softmax_ce: shapes disagree, logits {logits.data.shape}, "
            f"target {target.shape}, mask {mask.shape}")
    if target.min() < 0 or target.max() >= nc:
        raise ValueError(
            f"masked_softmax_ce: target class {int(target.max())} out of range [0, {nc})")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("masked_softmax_ce: mask must be binary")
    m = mask.astype(np.float64)
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    tgt_z = np.take_along_axis(z, target[None].astype(np.int64), axis=0)[0]
    denom = max(1.0, m.sum()) if normalize else 1.0
    loss = float(((lse - tgt_z) * m).sum() / denom)
    out = Tensor(loss, requires_grad=_track(logits))

    def pull(g):
        p = np.exp(z - lse[None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, target[None].astype(np.int64), 1.0, axis=0)
        logits._add_grad(_scalar(g) * (p - onehot) * m[None] / denom)

    _record("masked_ce", out, pull)
    return out


def l1_first_k(a: Tensor, b: Tensor, k: int) -> Tensor:
    """Mean absolute difference over the first k channels of two feature maps
    (channel axis 0 for 3-d tensors, axis 1 for batched 4-d tensors).
    Channels at index >= k receive exactly zero gradient."""
    if k <= 0:
        raise ValueError(f"l1_first_k: K must be positive, got {k}")
    ax = 0 if a.data.ndim == 3 else 1
    ca, cb = a.data.shape[ax], b.data.shape[ax]
    if k > min(ca, cb):
        raise ValueError(f"l1_first_k: K={k} exceeds channel counts ({ca}, {cb})")
    if a.data.shape[ax + 1:] != b.data.shape[ax + 1:]:
        raise ValueError(
            f"l1_first_k: spatial shapes disagree, {a.data.shape} vs {b.data.shape}")
    sl = (slice(None),) * ax + (slice(0, k),)
    diff = a.data[sl] - b.data[sl]
    cnt = diff.size
    out = Tensor(np.abs(diff).sum() / cnt, requires_grad=_track(a, b))

    def pull(g):
        gd = _scalar(g) * np.sign(diff) / cnt
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[sl] = gd
            a._add_grad(ga)
        if b.requires_grad:
            gb = np.zeros_like(b.data)
            gb[sl] = -gd
            b._add_grad(gb)

    _record("l1_first_k", out, pull)
    return out


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    """Bias-corrected Adam optimizer state, keyed by parameter name."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, grads: dict | None = None) -> None:
    """One Adam update over a name->Tensor dict. Gradients default to each
    tensor's .grad; parameters with no gradient are skipped. NaN or inf in
    any gradient rejects the whole step."""
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.epsilon)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
               name: str | None = None) -> Tensor:
    """He-uniform fan-in initialization, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
