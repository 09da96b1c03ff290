"""Dense float32 tensors with reverse-mode autodiff.

Small define-by-run engine: every differentiable op records its parents and
a closure that maps the output gradient to parent gradients. ``backward``
walks the recorded graph (the tape) in reverse topological order and returns
a gradient map for all ``requires_grad`` leaves reachable from the loss.

Storage is float32; reductions (sum/mean) accumulate in float64 before
casting back. No views or general broadcasting -- only the bias-style
broadcasts the models need.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class NumericsError(ArithmeticError):
    """Raised when an op produces (or receives) non-finite values."""


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op}: non-finite values in result")


class Tensor:
    """A dense float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, op: str, parents, grad_fn) -> Tensor:
    """Build an op result, wiring the tape edge if any parent needs grads."""
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.astype(np.float32)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _result(
        data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _result(
        data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _result(
        data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * np.float32(s), "scale", (a,), lambda g: (g * np.float32(s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(
        np.where(mask, a.data, np.float32(0)), "relu", (a,),
        lambda g: (np.where(mask, g, np.float32(0)),),
    )


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="raise", invalid="raise"):
        try:
            data = np.log(a.data)
        except FloatingPointError:
            raise NumericsError("log: non-positive input")
    return _result(data, "log", (a,), lambda g: ((g / a.data).astype(np.float32),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _result(data, "exp", (a,), lambda g: ((g * data).astype(np.float32),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) != 1 or known == 0 or a.size % known:
            raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    return _result(
        a.data.reshape(shape), "reshape", (a,),
        lambda g: (g.reshape(a.shape),),
    )


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def tsum(a: Tensor) -> Tensor:
    data = np.float32(np.sum(a.data, dtype=np.float64))
    return _result(
        np.asarray(data), "sum", (a,),
        lambda g: (np.full(a.shape, g, dtype=np.float32),),
    )


def tmean(a: Tensor) -> Tensor:
    n = a.size
    data = np.float32(np.sum(a.data, dtype=np.float64) / n)
    return _result(
        np.asarray(data), "mean", (a,),
        lambda g: (np.full(a.shape, g / np.float32(n), dtype=np.float32),),
    )


def l2_norm(a: Tensor) -> Tensor:
    sq = np.sum(a.data.astype(np.float64) ** 2)
    norm = np.float32(np.sqrt(sq))
    def grad_fn(g):
        denom = max(float(norm), 1e-12)
        return ((g * a.data / np.float32(denom)).astype(np.float32),)
    return _result(np.asarray(norm), "l2_norm", (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data
    return _result(
        data, "matmul", (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ---------------------------------------------------------------------------
# softmax family (numerically stable primitives)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
    def grad_fn(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return ((s * (g - dot)).astype(np.float32),)
    return _result(s, "softmax", (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = (a.data - a.data.max(axis=axis, keepdims=True)).astype(np.float64)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    lsm = (shifted - lse).astype(np.float32)
    def grad_fn(g):
        gsum = np.sum(g, axis=axis, keepdims=True)
        return ((g - np.exp(lsm) * gsum).astype(np.float32),)
    return _result(lsm, "log_softmax", (a,), grad_fn)


# ---------------------------------------------------------------------------
# conv / pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col. x: (B,Cin,H,W), w: (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatchError(f"conv2d: bias shape {b.shape} != ({cout},)")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)          # (B, K, L)
    wmat = w.data.reshape(cout, -1)                      # (Cout, K)
    out = np.matmul(wmat[None], cols)                    # (B, Cout, L)
    out = out.reshape(bsz, cout, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def grad_fn(g):
        gr = g.reshape(bsz, cout, -1)                    # (B, Cout, L)
        gw = np.einsum("bol,bkl->ok", gr, cols).reshape(w.shape).astype(np.float32)
        gcols = np.matmul(wmat.T[None], gr)              # (B, K, L)
        gcols = gcols.reshape(bsz, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp if not padding else gxp[:, :, padding:-padding, padding:-padding]
        grads = [gx.astype(np.float32), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(np.float32))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out.astype(np.float32), "conv2d", parents, grad_fn)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd row/column is dropped."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"max_pool2: expected 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeMismatchError(f"max_pool2: input {x.shape} too small")
    xc = x.data[:, :, : 2 * ho, : 2 * wo]
    windows = xc.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = (
            gw.reshape(bsz, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, 2 * ho, 2 * wo)
        )
        return (gx,)

    return _result(out, "max_pool2", (x,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from each reachable ``requires_grad`` leaf Tensor to its
    gradient (a float32 array of the leaf's shape). Leaves not reachable from
    the loss simply do not appear in the map.
    """
    if loss.ndim != 0:
        raise ShapeMismatchError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                leaf_grads[node] = g
            continue
        parent_grads = node._grad_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
                tensors[id(p)] = p
    return leaf_grads
