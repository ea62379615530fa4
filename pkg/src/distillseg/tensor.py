"""Dense float32 tensors with reverse-mode automatic differentiation.

Ops are free functions that record the graph on their outputs whenever an
input tracks gradients; ``backward`` materializes a :class:`Tape` from the
loss and replays it in reverse. Everything is float32; only loss-style
reductions accumulate in float64 before casting back.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A float32 array plus optional autodiff bookkeeping.

    Scalar reductions also record their float64 accumulator in ``f64`` so
    verification code can read the value without the final float32 cast.
    """

    __slots__ = ("data", "grad", "requires_grad", "f64", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data: Array = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.f64: float | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make_out(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class Tape:
    """Ordered record of the differentiable ops reachable from a root.

    Nodes are listed with parents before consumers, so iterating in reverse
    is a valid replay order for gradient propagation. Rebuilding the tape
    from the same root always yields the same order.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for parent in node._parents:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        self.nodes = order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor that fed a scalar loss.

    Gradients accumulate across calls; reset with ``zero_grad`` between
    steps. Repeated backward after a reset reproduces grads bit-for-bit
    because the tape replays the identical op order.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {list(loss.data.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    tape = Tape(loss)
    pending: dict[int, Array] = {id(loss): np.ones((), dtype=np.float32)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {list(a.shape)} vs {list(b.shape)}")

    def grad_fn(g: Array):
        return g, g

    out = _make_out(a.data + b.data, (a, b), grad_fn)
    if a.f64 is not None and b.f64 is not None:
        out.f64 = a.f64 + b.f64
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s32 = np.float32(s)

    def grad_fn(g: Array):
        return (g * s32,)

    out = _make_out(a.data * s32, (a,), grad_fn)
    if a.f64 is not None:
        out.f64 = a.f64 * float(s32)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g: Array):
        return (g * mask,)

    return _make_out(np.where(mask, x.data, np.float32(0.0)), (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar; accumulates in float64."""
    total = x.data.sum(dtype=np.float64)

    def grad_fn(g: Array):
        return (np.full(x.data.shape, g, dtype=np.float32),)

    out = _make_out(np.float32(total), (x,), grad_fn)
    out.f64 = float(total)
    return out


def weighted_sum(x: Tensor, weights: Array) -> Tensor:
    """Dot product with a constant array of the same shape, as a scalar.

    Used by the finite-difference harness to probe full Jacobians and by
    tests that route one-hot upstream gradients.
    """
    w = np.asarray(weights, dtype=np.float32)
    if w.shape != x.data.shape:
        raise ValueError(f"weighted_sum shape mismatch: {list(x.shape)} vs {list(w.shape)}")
    total = np.sum(x.data * w, dtype=np.float64)

    def grad_fn(g: Array):
        return (w * g,)

    out = _make_out(np.float32(total), (x,), grad_fn)
    out.f64 = float(total)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-d [N,C,H,W] inputs")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_channels batch mismatch: N={a.shape[0]} vs N={b.shape[0]}")
    if a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels spatial mismatch: {list(a.shape[2:])} vs {list(b.shape[2:])}"
        )
    ca = a.shape[1]

    def grad_fn(g: Array):
        return g[:, :ca].copy(), g[:, ca:].copy()

    return _make_out(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the argmax.

    Ties go to the first element in row-major order within the window.
    """
    if x.data.ndim != 4:
        raise ValueError("max_pool2d expects a 4-d [N,C,H,W] input")
    n, c, h, w = x.data.shape
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    if h % window or w % window:
        raise ValueError(
            f"max_pool2d requires spatial extents divisible by {window}, got {h}x{w}"
        )
    ho, wo = h // window, w // window
    tiles = (
        x.data.reshape(n, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, window * window)
    )
    idx = tiles.argmax(axis=4)  # argmax returns the first maximum
    out = np.take_along_axis(tiles, idx[..., None], axis=4)[..., 0]

    def grad_fn(g: Array):
        dt = np.zeros((n, c, ho, wo, window * window), dtype=np.float32)
        np.put_along_axis(dt, idx[..., None], g[..., None], axis=4)
        dx = (
            dt.reshape(n, c, ho, wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (dx,)

    return _make_out(np.ascontiguousarray(out), (x,), grad_fn)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of a [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ValueError("upsample_nearest_2x expects a 4-d [N,C,H,W] input")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g: Array):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float32),)

    return _make_out(out, (x,), grad_fn)


def mean_spatial(x: Tensor) -> Tensor:
    """Global average over H and W: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ValueError("mean_spatial expects a 4-d [N,C,H,W] input")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
    inv = np.float32(1.0 / (h * w))

    def grad_fn(g: Array):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.data.shape).copy(),)

    return _make_out(out, (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N,Cin] @ [Cin,Cout] + [Cout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError("linear expects x [N,Cin], weight [Cin,Cout], bias [Cout]")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear input width {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ValueError(f"linear bias width {bias.shape[0]} != weight cols {weight.shape[1]}")
    out = x.data @ weight.data + bias.data

    def grad_fn(g: Array):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make_out(out, (x, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# convolution


def _pad_spatial(x: Array, pad_h: int, pad_w: int) -> Array:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=np.float32)
    out[:, :, pad_h : pad_h + h, pad_w : pad_w + w] = x
    return out


def _im2col(xp: Array, kh: int, kw: int, stride: int) -> tuple[Array, int, int]:
    """[N,C,Hp,Wp] -> ([N, C*kh*kw, ho*wo] patch matrix, ho, wo).

    Built from kh*kw strided slab copies, which beat a transposed gather by
    a wide margin at these sizes.
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        return xp.reshape(n, c, ho * wo), ho, wo  # zero-copy view
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _corr(xp: Array, weight: Array, stride: int) -> tuple[Array, Array]:
    """Stride-s valid cross-correlation; returns (out [N,Cout,ho,wo], cols)."""
    cout, cin, kh, kw = weight.shape
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat[None, :, :], cols).reshape(xp.shape[0], cout, ho, wo)
    return out, cols


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] + bias.

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1, same for W.
    """
    if x.data.ndim != 4:
        raise ValueError("conv2d expects a 4-d [N,Cin,H,W] input")
    if weight.data.ndim != 4:
        raise ValueError("conv2d expects a 4-d [Cout,Cin,kh,kw] weight")
    if bias.data.ndim != 1:
        raise ValueError("conv2d expects a 1-d [Cout] bias")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin_w != cin:
        raise ValueError(f"conv2d channel mismatch: input C_in={cin}, weight C_in={cin_w}")
    if bias.shape[0] != cout:
        raise ValueError(f"conv2d bias mismatch: C_out={cout}, bias has {bias.shape[0]}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = _pad_spatial(x.data, padding, padding) if padding else x.data
    out, cols = _corr(xp, weight.data, stride)
    ho, wo = out.shape[2], out.shape[3]
    out += bias.data[None, :, None, None]
    hp, wp = xp.shape[2], xp.shape[3]

    def grad_fn(g: Array):
        g3 = g.reshape(n, cout, ho * wo)
        d_bias = g.sum(axis=(0, 2, 3))
        d_weight = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, kh, kw)
        if not x.requires_grad:
            return None, d_weight, d_bias
        if stride == 1:
            # input grad = full correlation with the flipped, transposed kernel
            gp = _pad_spatial(g, kh - 1, kw - 1)
            w_rot = np.ascontiguousarray(
                weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            )
            dxp, _ = _corr(gp, w_rot, 1)  # [N,Cin,hp,wp]
        else:
            wmat = weight.data.reshape(cout, cin * kh * kw)
            d_cols = np.matmul(wmat.T[None, :, :], g3).reshape(n, cin, kh, kw, ho, wo)
            dxp = np.zeros((n, cin, hp, wp), dtype=np.float32)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        d_cols[:, :, i, j]
                    )
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return np.ascontiguousarray(dx), d_weight, d_bias

    return _make_out(out, (x, weight, bias), grad_fn)


def set_requires_grad(tensors: Sequence[Tensor], flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag
        if not flag:
            t.grad = None
