"""Primitive operations with their reverse-mode rules.

Only what the segmentation network needs is here: elementwise arithmetic with
numpy broadcasting, a handful of nonlinearities, reductions, reshaping,
batched matmul, 3-D convolution, group normalization and 2x resampling.
"""

from __future__ import annotations

import itertools

import numpy as np

from .core import ContractViolation, Tensor, branch, make_result


def _coerce(a, b):
    """Turn python scalars / arrays into tensors matching the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):   # reported as NumericError below
        out = a.data / b.data

    def back(g):
        gb = g / b.data
        return unbroadcast(gb, a.shape), unbroadcast(-gb * out, b.shape)

    return make_result(out, "div", (a, b), back)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _coerce(a, b)
    take_a = branch(a.data >= b.data)

    def back(g):
        return (unbroadcast(np.where(take_a, g, 0).astype(g.dtype), a.shape),
                unbroadcast(np.where(take_a, 0, g).astype(g.dtype), b.shape))

    return make_result(np.where(take_a, a.data, b.data).astype(np.result_type(a.data, b.data), copy=False), "maximum", (a, b), back)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, "neg", (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):   # overflow is reported as NumericError below
        out = np.exp(x.data)
    return make_result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ContractViolation("log of non-positive value")
    return make_result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = branch(np.where(x.data < 0, -1, 1).astype(np.int8))
    return make_result(sign * x.data, "abs", (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, "square", (x,), lambda g: (2 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, "sqrt", (x,), lambda g: (g / (2 * out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    # -1 below, 0 inside, +1 above
    state = branch(np.where(x.data < lo, -1, np.where(x.data > hi, 1, 0)).astype(np.int8))
    inside = state == 0
    out = np.where(inside, x.data, np.where(state < 0, lo, hi)).astype(x.dtype, copy=False)
    return make_result(out, "clip", (x,),
                       lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return make_result(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    out = -np.logaddexp(0, -x.data).astype(x.dtype, copy=False)
    s = _sigmoid_np(x.data)
    return make_result(out, "log_sigmoid", (x,), lambda g: (g * (1 - s),))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    pos = branch(x.data > 0)
    out = np.where(pos, x.data, alpha * x.data).astype(x.dtype, copy=False)
    return make_result(out, "leaky_relu", (x,),
                       lambda g: (np.where(pos, g, alpha * g).astype(g.dtype, copy=False),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), back)


def activation(x: Tensor, kind: str, axis: int = -1, alpha: float = 0.01) -> Tensor:
    """Dispatch by name: ``sigmoid``, ``softmax``, ``exp`` or ``leaky_relu``."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        if not -x.ndim <= axis < x.ndim:
            raise ContractViolation(f"softmax axis {axis} invalid for rank {x.ndim}")
        return softmax(x, axis)
    if kind == "exp":
        return exp(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    raise ContractViolation(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), "sum", (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = branch(np.expand_dims(x.data.argmax(axis=axis), axis))
    out = np.take_along_axis(x.data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    return make_result(out if keepdims else out.squeeze(axis), "max", (x,), back)


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input dtype."""
    dtype = np.dtype(dtype)
    return make_result(x.data.astype(dtype), "cast", (x,), lambda g: (g.astype(x.dtype),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), "transpose", (x,),
                       lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return make_result(np.array(x.data[idx]), "getitem", (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       "concat", tensors, back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % (tensors[0].ndim + 1)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product for operands of rank >= 2 (numpy semantics)."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, "matmul", (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the trailing axis."""
    n = weight.shape[1]
    if x.shape[-1] != n:
        raise ContractViolation(f"linear: trailing axis {x.shape[-1]} != weight in-features {n}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractViolation(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    x2 = x.data.reshape(-1, n)
    # einsum's fixed per-row loop, not BLAS: gemv/gemm pick different kernels by row count,
    # which would make a token's output depend on how many tokens share the call
    out = np.einsum("ni,oi->no", x2, weight.data)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[0],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, "linear", inputs, back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad_channel_major(x: np.ndarray, p: int) -> np.ndarray:
    xc = x.transpose(1, 0, 2, 3, 4)
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    return np.ascontiguousarray(xc)


def _unroll_taps(X: np.ndarray, k: int, row: int, length: int) -> np.ndarray:
    """Stack the k*k in-plane tap shifts of a flat (C, L) array -> (k*k*C, length)."""
    C = X.shape[0]
    U = np.empty((k, k, C, length), dtype=X.dtype)
    for b in range(k):
        for c in range(k):
            t = b * row + c
            U[b, c] = X[:, t:t + length]
    return U.reshape(k * k * C, length)


def _flat_correlate(X: np.ndarray, wk: np.ndarray, plane: int, row: int, n_out: int) -> np.ndarray:
    """Cross-correlate a flattened channel-major volume with a (k,k,k,Cin,Cout) kernel.

    ``X`` is (Cin, L); the result is channels-last (n_out, Cout). Output row
    ``j`` reads ``X[:, j + a*plane + b*row + c]`` for every tap (a, b, c);
    rows whose window wraps a border are garbage and must be cropped by the
    caller. In-plane taps are folded into the GEMM's inner dimension, leaving
    one GEMM per depth tap.
    """
    k, cin, cout = wk.shape[0], wk.shape[3], wk.shape[4]
    U = _unroll_taps(X, k, row, n_out + (k - 1) * plane)
    out = U[:, :n_out].T @ wk[0].reshape(k * k * cin, cout)
    for a in range(1, k):
        out += U[:, a * plane:a * plane + n_out].T @ wk[a].reshape(k * k * cin, cout)
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation, input [B,Cin,D,H,W], kernel [Cout,Cin,k,k,k].

    The padded input is held channel-major and flattened to (Cin, L), so
    every kernel tap becomes a constant shift along the flat axis. The result
    is evaluated at every padded-grid position and the valid (strided) ones
    are cropped out. The input gradient is the same correlation, run on the
    output gradient with the flipped kernel.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ContractViolation(f"conv3d expects rank-5 input and kernel, got {x.shape}, {weight.shape}")
    B, cin, D, H, W = x.shape
    cout, wcin, k, k2, k3 = weight.shape
    if wcin != cin:
        raise ContractViolation(f"conv3d: input has {cin} channels, kernel expects {wcin}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ContractViolation(f"conv3d: kernel must be cubic with odd side, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ContractViolation("conv3d: stride >= 1 and padding >= 0 required")
    if stride > 1 and min(D, H, W) < k:
        raise ContractViolation("conv3d: strided convolution needs extents >= kernel size")
    if bias is not None and bias.shape != (cout,):
        raise ContractViolation(f"conv3d: bias shape {bias.shape} != ({cout},)")
    out_sp = tuple(conv_output_size(n, k, stride, padding) for n in (D, H, W))
    if min(out_sp) < 1:
        raise ContractViolation("conv3d: output would be empty")

    p, s = padding, stride
    xc = _pad_channel_major(x.data, p)                       # (Cin, B, Dp, Hp, Wp)
    Dp, Hp, Wp = xc.shape[2:]
    plane, row = Hp * Wp, Wp
    L = B * Dp * plane
    n_valid = L - (k - 1) * (plane + row + 1)
    X = xc.reshape(cin, L)
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 4, 1, 0))   # (k,k,k,Cin,Cout)
    grid = (slice(0, s * (out_sp[0] - 1) + 1, s), slice(0, s * (out_sp[1] - 1) + 1, s),
            slice(0, s * (out_sp[2] - 1) + 1, s))

    full = np.zeros((L, cout), dtype=np.result_type(x.data, weight.data))
    full[:n_valid] = _flat_correlate(X, wk, plane, row, n_valid)
    out = full.reshape(B, Dp, Hp, Wp, cout)[(slice(None),) + grid]
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 4, 1, 2, 3)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        # output gradient placed on the padded grid where each output's window starts
        G = np.zeros((cout, B, Dp, Hp, Wp), dtype=g.dtype)
        G[(slice(None), slice(None)) + grid] = g.transpose(1, 0, 2, 3, 4)
        G = G.reshape(cout, L)
        gw = None
        if weight.requires_grad:
            U = _unroll_taps(X, k, row, n_valid + (k - 1) * plane)
            Gv = np.ascontiguousarray(G[:, :n_valid].T)
            gw = np.empty((k, k * k * cin, cout), dtype=weight.dtype)
            for a in range(k):
                gw[a] = U[:, a * plane:a * plane + n_valid] @ Gv
            gw = np.ascontiguousarray(gw.reshape(k, k, k, cin, cout).transpose(4, 3, 0, 1, 2))
        gx = None
        if x.requires_grad:
            wf = np.ascontiguousarray(wk[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
            Gp = np.concatenate([np.zeros((cout, L - n_valid), dtype=G.dtype), G], axis=1)
            GX = _flat_correlate(Gp, wf, plane, row, L).reshape(B, Dp, Hp, Wp, cin)
            gx = np.ascontiguousarray(GX[:, p:p + D, p:p + H, p:p + W].transpose(0, 4, 1, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return make_result(np.ascontiguousarray(out), "conv3d", inputs, back)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each of ``groups`` channel groups over (channels-in-group, spatial)."""
    if x.ndim < 2:
        raise ContractViolation("group_norm expects [B, C, ...]")
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ContractViolation(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractViolation(f"group_norm: gamma/beta must have shape ({C},)")
    xs = x.data.reshape(B, groups, -1)
    mu = xs.mean(axis=2, keepdims=True)
    xc = xs - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        gxhat = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                    - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out.astype(x.dtype, copy=False), "group_norm", (x, gamma, beta), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis (group norm with one group on a flattened view)."""
    c = x.shape[-1]
    flat = reshape(x, (-1, c))
    return reshape(group_norm(flat, 1, gamma, beta, eps), x.shape)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resample(x: Tensor, mode: str) -> Tensor:
    """``down2``: 2x2x2 average pooling. ``up2``: nearest-neighbour 2x repetition."""
    if x.ndim != 5:
        raise ContractViolation("resample expects [B, C, D, H, W]")
    B, C, D, H, W = x.shape
    if mode == "down2":
        if D % 2 or H % 2 or W % 2:
            raise ContractViolation(f"down2 needs even extents, got {(D, H, W)}")
        out = x.data.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2).mean(axis=(3, 5, 7))

        def back(g):
            g8 = g / 8.0
            return (np.broadcast_to(g8[:, :, :, None, :, None, :, None],
                                    (B, C, D // 2, 2, H // 2, 2, W // 2, 2)).reshape(x.shape).copy(),)

        return make_result(out.astype(x.dtype, copy=False), "down2", (x,), back)
    if mode == "up2":
        out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None],
                              (B, C, D, 2, H, 2, W, 2)).reshape(B, C, 2 * D, 2 * H, 2 * W)

        def back(g):
            return (g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)

        return make_result(np.ascontiguousarray(out), "up2", (x,), back)
    raise ContractViolation(f"unknown resample mode {mode!r}")
