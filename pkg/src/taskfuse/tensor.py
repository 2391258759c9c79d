"""Dense float32 tensors with taped reverse-mode differentiation.

Everything downstream (attention, wavelets, branch banks, the full
restoration network) is built from the operations in this module.  Values
are stored as row-major float32; reductions (sums, means, normalization
statistics, softmax denominators) accumulate in float64 before the result
is rounded back to float32.

Differentiation is tape-based: operations executed while a `Tape` is
active append adjoint closures to it, and `backward` replays the closures
in reverse execution order.  Without an active tape the operations are
plain forward computations with no bookkeeping, which is what fused
inference uses.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ContractError",
    "backward",
    "finite_diff_check",
    "op_count",
    "linear",
    "conv2d",
    "layer_norm",
    "softmax",
    "gelu",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_const",
    "abs_",
    "sum_all",
    "mean_all",
    "matmul",
    "reshape",
    "permute",
    "roll",
    "concat",
    "split",
    "weighted_sum",
    "gather_rows",
    "pad_reflect",
    "crop2d",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Shape or extent mismatch between operands."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (non-shape violation)."""


class Tensor:
    """Dense rank-N float32 array with optional gradient buffer.

    Tensors are immutable after construction except for gradient
    accumulation during `backward`; read-only tensors may be shared freely
    across threads.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def clear_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE: "Tape | None" = None
_OP_COUNT = 0


def op_count() -> int:
    """Monotone counter of executed tensor operations (for structure tests)."""
    return _OP_COUNT


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager; ops running inside the `with` block record
    their adjoint closures here.  A tape is single-use: `backward` marks it
    spent and a second call raises.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._spent = False
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer

    def __len__(self) -> int:
        return len(self._records)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First write copies: adjoint closures may hand us views of another
    # tensor's grad buffer, and aliased buffers must never be shared.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad += g


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], bw: Callable[[], None] | None) -> Tensor:
    global _OP_COUNT
    _OP_COUNT += 1
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires and _ACTIVE_TAPE is not None and bw is not None:
        _ACTIVE_TAPE._records.append(bw)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every `requires_grad` tensor reachable on `tape`.

    `loss` must hold a single element.  Repeated calls on the same tape
    raise; build a fresh tape per step instead.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if tape._spent:
        raise ContractError("backward was already run on this tape")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._records):
        fn()
    tape._spent = True


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Compare taped gradients of a scalar-valued `f` to central differences.

    Returns the max over all input entries of |analytic - numeric| /
    max(1, |numeric|).  Inputs are perturbed in place and restored.
    """
    inputs = list(inputs)
    for t in inputs:
        t.clear_grad()
    with Tape() as tape:
        out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"finite_diff_check expects scalar f, got shape {out.shape}")
    backward(out, tape)
    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(flat.size, dtype=np.float32)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data.reshape(()))
            flat[i] = orig - eps
            fm = float(f(*inputs).data.reshape(()))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# arithmetic


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, which must be a suffix of g.shape (bias-add)."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return np.sum(g, dtype=np.float64).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)), dtype=np.float64)


def _check_addable(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or b.size == 1:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may also be a scalar or a trailing-axes bias."""
    _check_addable(a, b, "add")
    y = a.data + b.data

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    out = _finish(y, (a, b), bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "sub")
    y = a.data - b.data

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -_reduce_to(g, b.shape))

    out = _finish(y, (a, b), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b (same shape, or either operand a scalar)."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    y = a.data * b.data

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    out = _finish(y, (a, b), bw)
    return out


def neg(a: Tensor) -> Tensor:
    def bw():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, -g)

    out = _finish(-a.data, (a,), bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient to c)."""
    c = float(c)

    def bw():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, c * g)

    out = _finish(a.data * np.float32(c), (a,), bw)
    return out


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant array (broadcastable); no gradient flows to `arr`."""
    y = a.data + arr

    def bw():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g)

    out = _finish(y, (a,), bw)
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant of shape {arr.shape} broadcast past {a.shape}")
    return out


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; the gradient at exactly 0 is 0."""
    sign = np.sign(a.data)

    def bw():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, g * sign)

    out = _finish(np.abs(a.data), (a,), bw)
    return out


def sum_all(a: Tensor) -> Tensor:
    y = np.float32(np.sum(a.data, dtype=np.float64))

    def bw():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, np.full(a.shape, g.reshape(()), dtype=np.float32))

    out = _finish(np.asarray(y), (a,), bw)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    y = np.float32(np.sum(a.data, dtype=np.float64) / n)

    def bw():
        g = out.grad
        if g is not None and a.requires_grad:
            _accum(a, np.full(a.shape, g.reshape(()) / n, dtype=np.float32))

    out = _finish(np.asarray(y), (a,), bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: y[..., o] = sum_i W[o, i] x[..., i] + b[o]."""
    d_in = x.data.shape[-1]
    if W.data.ndim != 2 or W.data.shape[1] != d_in:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    d_out = W.data.shape[0]
    if b.data.shape != (d_out,):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    y = x.data @ W.data.T + b.data

    def bw():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, g @ W.data)
        g2 = g.reshape(-1, d_out)
        if W.requires_grad:
            _accum(W, g2.T @ x.data.reshape(-1, d_in))
        if b.requires_grad:
            _accum(b, g2.sum(axis=0, dtype=np.float64))

    out = _finish(y, (x, W, b), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product a[..., M, K] @ b[..., K, N], equal leading dims."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    y = a.data @ b.data

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    out = _finish(y, (a, b), bw)
    return out


def _im2col(xp: np.ndarray, s: int, H: int, W: int) -> np.ndarray:
    C = xp.shape[0]
    st = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(C, H, W, s, s), strides=(st[0], st[1], st[2], st[1], st[2])
    )
    return win.transpose(1, 2, 0, 3, 4).reshape(H * W, C * s * s)


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """2-D convolution with stride 1 and zero "same" padding.

    x is (C_in, H, W), k is (C_out, C_in, s, s) with s odd, b is (C_out,).
    Spatial extents are preserved.
    """
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise DimensionError(f"conv2d: expected rank-3 input and rank-4 kernel, got {x.shape} and {k.shape}")
    c_out, c_in, s, s2 = k.data.shape
    if s != s2 or s % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd extent, got {k.shape}")
    if x.data.shape[0] != c_in:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    if b.data.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match kernel {k.shape}")
    _, H, W = x.data.shape
    p = (s - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    patches = _im2col(xp, s, H, W)
    kflat = k.data.reshape(c_out, c_in * s * s)
    y = (patches @ kflat.T + b.data).T.reshape(c_out, H, W)

    def bw():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(c_out, H * W).T
        if k.requires_grad:
            _accum(k, (g2.T @ patches).reshape(k.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(1, 2), dtype=np.float64))
        if x.requires_grad:
            gp = (g2 @ kflat).reshape(H, W, c_in, s, s)
            gxp = np.zeros((c_in, H + 2 * p, W + 2 * p), dtype=np.float32)
            for i in range(s):
                for j in range(s):
                    gxp[:, i : i + H, j : j + W] += gp[:, :, :, i, j].transpose(2, 0, 1)
            _accum(x, gxp[:, p : p + H, p : p + W] if p else gxp)

    out = _finish(y, (x, k, b), bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to mean 0 / variance 1, then gamma*x + beta."""
    D = x.data.shape[-1]
    if gamma.data.shape != (D,) or beta.data.shape != (D,):
        raise DimensionError(
            f"layer_norm: params of shapes {gamma.shape}/{beta.shape} do not match input {x.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(np.float32)
    inv32 = inv.astype(np.float32)
    y = xhat * gamma.data + beta.data

    def bw():
        g = out.grad
        if g is None:
            return
        if beta.requires_grad:
            _accum(beta, _reduce_to(g, beta.shape))
        if gamma.requires_grad:
            _accum(gamma, _reduce_to(g * xhat, gamma.shape))
        if x.requires_grad:
            dxh = g * gamma.data
            m1 = dxh.mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            m2 = (dxh * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            _accum(x, inv32 * (dxh - m1 - xhat * m2))

    out = _finish(y, (x, gamma, beta), bw)
    return out


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis (max-subtracted)."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(np.float32)

    def bw():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
        _accum(x, y * (g - dot))

    out = _finish(y, (x,), bw)
    return out


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + _erf(x.data / np.float32(_SQRT2)))
    y = x.data * phi_cdf

    def bw():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        pdf = np.exp(-0.5 * x.data * x.data) * np.float32(_INV_SQRT_2PI)
        _accum(x, g * (phi_cdf + x.data * pdf))

    out = _finish(y, (x,), bw)
    return out


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Convex-style combination sum_j weights[j] * tensors[j].

    All tensors share one shape; `weights` is a length-N vector.  Gradients
    flow to both the stacked tensors and the weights.
    """
    n = len(tensors)
    if weights.data.shape != (n,):
        raise DimensionError(f"weighted_sum: {n} tensors but weight shape {weights.shape}")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise DimensionError(f"weighted_sum: mixed shapes {base} and {t.shape}")
    acc = np.zeros(base, dtype=np.float64)
    for j in range(n):
        acc += float(weights.data[j]) * tensors[j].data
    y = acc.astype(np.float32)

    def bw():
        g = out.grad
        if g is None:
            return
        if weights.requires_grad:
            gw = np.empty(n, dtype=np.float32)
            for j in range(n):
                gw[j] = np.sum(g * tensors[j].data, dtype=np.float64)
            _accum(weights, gw)
        for j in range(n):
            if tensors[j].requires_grad:
                _accum(tensors[j], float(weights.data[j]) * g)

    out = _finish(y, (*tensors, weights), bw)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    y = x.data.reshape(tuple(shape))

    def bw():
        g = out.grad
        if g is not None and x.requires_grad:
            _accum(x, g.reshape(orig))

    out = _finish(y, (x,), bw)
    return out


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bw():
        g = out.grad
        if g is not None and x.requires_grad:
            _accum(x, g.transpose(inv))

    out = _finish(x.data.transpose(axes), (x,), bw)
    return out


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)

    def bw():
        g = out.grad
        if g is not None and x.requires_grad:
            _accum(x, np.roll(g, tuple(-s for s in shifts), axis=axes))

    out = _finish(np.roll(x.data, shifts, axis=axes), (x,), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw():
        g = out.grad
        if g is None:
            return
        parts = np.split(g, bounds, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, p)

    out = _finish(y, tuple(tensors), bw)
    return out


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split along `axis` into chunks of the given sizes (multi-output op)."""
    if sum(sizes) != x.data.shape[axis]:
        raise DimensionError(f"split: sizes {tuple(sizes)} do not cover axis {axis} of {x.shape}")
    global _OP_COUNT
    _OP_COUNT += 1
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(x.data, bounds, axis=axis)
    outs = [Tensor(p, requires_grad=x.requires_grad) for p in parts]

    if x.requires_grad and _ACTIVE_TAPE is not None:

        def bw():
            gs = [
                o.grad if o.grad is not None else np.zeros(o.shape, dtype=np.float32)
                for o in outs
            ]
            if any(o.grad is not None for o in outs):
                _accum(x, np.concatenate(gs, axis=axis))

        _ACTIVE_TAPE._records.append(bw)
    return outs


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """out[h, ...] = table[h, index[...]] for an integer index array."""
    y = table.data[:, index]

    def bw():
        g = out.grad
        if g is None or not table.requires_grad:
            return
        gt = np.zeros(table.shape, dtype=np.float32)
        heads = table.shape[0]
        hidx = np.arange(heads).reshape((heads,) + (1,) * index.ndim)
        np.add.at(gt, (hidx, index[None]), g)
        _accum(table, gt)

    out = _finish(y, (table,), bw)
    return out


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the two trailing spatial axes of (C, H, W) on the far side."""
    C, H, W = x.data.shape
    if pad_h >= H or pad_w >= W:
        raise DimensionError(
            f"pad_reflect: padding ({pad_h}, {pad_w}) exceeds the reflect budget of input {x.shape}"
        )
    idx_h = np.concatenate([np.arange(H), H - 2 - np.arange(pad_h)]) if pad_h else np.arange(H)
    idx_w = np.concatenate([np.arange(W), W - 2 - np.arange(pad_w)]) if pad_w else np.arange(W)
    y = x.data[:, idx_h[:, None], idx_w[None, :]]

    def bw():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        gx = np.zeros((C, H, W), dtype=np.float32)
        for c in range(C):
            np.add.at(gx[c], (idx_h[:, None], idx_w[None, :]), g[c])
        _accum(x, gx)

    out = _finish(y, (x,), bw)
    return out


def crop2d(x: Tensor, H: int, W: int) -> Tensor:
    """Keep the top-left H x W spatial region of (C, H', W')."""
    C, Hp, Wp = x.data.shape
    if H > Hp or W > Wp:
        raise DimensionError(f"crop2d: target ({H}, {W}) exceeds input {x.shape}")

    def bw():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        gx = np.zeros((C, Hp, Wp), dtype=np.float32)
        gx[:, :H, :W] = g
        _accum(x, gx)

    out = _finish(x.data[:, :H, :W], (x,), bw)
    return out
