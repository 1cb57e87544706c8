"""Minimal reverse-mode autodiff on float64 numpy arrays.

The graph is define-by-run: every op returns a fresh ``Tensor`` that holds
references to its parent tensors and a closure propagating the output
gradient back to them.  ``Tensor.backward()`` walks the graph in reverse
topological order.  Grads are overwritten on every backward call, never
accumulated across calls.

Only the operations the detector actually needs exist here; there is no
broadcasting beyond the channel-wise bias add inside ``conv2d`` / ``linear``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    A tensor is a graph node when it has parents; leaves are parameters
    (``requires_grad=True``) or constants.  ``data`` is always a float64
    ndarray; ``grad``, when present, has the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def values(self) -> np.ndarray:
        """Detached copy of the data (no graph attachment)."""
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable node with d(self)/d(node).

        ``self`` must be scalar.  Grads left over from a previous backward
        are discarded first, so repeated calls yield identical results.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss tensor")
        order = self._topo_order()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, attaching the graph only when grads are live."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(out, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product."""
    _check_same_shape(a, b, "hadamard")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no gradient w.r.t. the scalar)."""
    s = float(s)
    out = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out * out))

    return _result(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# softmax / losses


def softmax(z: Tensor) -> Tensor:
    """Stable softmax over a 1-D tensor (max subtraction)."""
    if z.data.ndim != 1 or z.data.size < 1:
        raise ShapeError(f"softmax expects a non-empty vector, got shape {z.shape}")
    shifted = z.data - z.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def backward(g):
        if z.requires_grad:
            z._accumulate(out * (g - np.dot(out, g)))

    return _result(out, (z,), backward)


def nll_from_logits(z: Tensor, index: int) -> Tensor:
    """-log softmax(z)[index], fused log-sum-exp form.

    Numerically equivalent to taking the log of the softmax output but
    stable for extreme logits; gradient is softmax(z) - onehot(index).
    """
    if z.data.ndim != 1:
        raise ShapeError(f"nll_from_logits expects a vector, got shape {z.shape}")
    if not 0 <= index < z.data.size:
        raise IndexError(f"class index {index} out of range for {z.data.size} logits")
    m = z.data.max()
    e = np.exp(z.data - m)
    lse = m + np.log(e.sum())
    out = np.asarray(lse - z.data[index])
    probs = e / e.sum()

    def backward(g):
        if z.requires_grad:
            gz = probs * float(g)
            gz[index] -= float(g)
            z._accumulate(gz)

    return _result(out, (z,), backward)


# ---------------------------------------------------------------------------
# linear / convolution / pooling


def linear(o: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map w.T @ o + b for o of shape (d,), w of shape (d, q)."""
    if o.data.ndim != 1 or w.data.ndim != 2 or o.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"linear: o {o.shape} incompatible with w {w.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with w {w.shape}")
    out = o.data @ w.data + b.data

    def backward(g):
        if o.requires_grad:
            o._accumulate(w.data @ g)
        if w.requires_grad:
            w._accumulate(np.outer(o.data, g))
        if b.requires_grad:
            b._accumulate(g)

    return _result(out, (o, w, b), backward)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(h, w, c) -> (h*w, k*k*c) patch matrix under same zero padding."""
    h, w, c = x.shape
    p = k // 2
    padded = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (h, w, c, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * c)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """2-D convolution, stride 1, same (zero) padding, channels-last.

    x: (h, w, c_in); kernels: (k, k, c_in, c_out); bias: (c_out,) or None.
    Output spatial dims equal the input's.
    """
    if stride != 1:
        raise ValueError("conv2d supports stride 1 only")
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    k = kernels.data.shape[0]
    if k % 2 != 1 or kernels.data.shape[1] != k:
        raise ShapeError(f"conv2d: kernels must be odd and square, got {kernels.shape}")
    if kernels.data.shape[2] != x.data.shape[2]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[2]} != kernel c_in {kernels.data.shape[2]}"
        )
    c_out = kernels.data.shape[3]
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with c_out {c_out}")

    h, w, c_in = x.data.shape
    cols = _im2col(x.data, k)  # (h*w, k*k*c_in)
    kmat = kernels.data.reshape(k * k * c_in, c_out)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(h, w, c_out)

    def backward(g):
        gmat = g.reshape(h * w, c_out)
        if kernels.requires_grad:
            kernels._accumulate((cols.T @ gmat).reshape(kernels.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            # d_input is the same-padded correlation of g with spatially
            # flipped kernels, in/out channels swapped.
            flipped = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2)
            gcols = _im2col(g, k)
            x._accumulate((gcols @ flipped.reshape(k * k * c_out, c_in)).reshape(h, w, c_in))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, backward)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling on (h, w, c); h and w must be even."""
    h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 requires even spatial dims, got {x.shape}")
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def backward(g):
        if x.requires_grad:
            spread = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
            x._accumulate(spread)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis (all other dims must agree)."""
    if not parts:
        raise ShapeError("concat_last of nothing")
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading dims differ: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[..., lo:hi])

    return _result(out, tuple(parts), backward)


def slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice [lo, hi) along the last axis."""
    if not 0 <= lo < hi <= x.data.shape[-1]:
        raise ShapeError(f"slice_last [{lo}:{hi}] out of range for {x.shape}")
    out = x.data[..., lo:hi].copy()

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[..., lo:hi] += g

    return _result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    out = x.data.reshape(-1).copy()

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _result(out, (x,), backward)


def weighted_pool(h: Tensor, weights: Tensor) -> Tensor:
    """Spatially pool h (hh, ww, d) with a flat weight vector (hh*ww,).

    Returns the d-vector sum_loc weights[loc] * h[loc, :].
    """
    hh, ww, d = h.data.shape
    if weights.data.shape != (hh * ww,):
        raise ShapeError(f"weighted_pool: weights {weights.shape} vs h {h.shape}")
    flat = h.data.reshape(hh * ww, d)
    out = weights.data @ flat

    def backward(g):
        if h.requires_grad:
            h._accumulate(np.outer(weights.data, g).reshape(hh, ww, d))
        if weights.requires_grad:
            weights._accumulate(flat @ g)

    return _result(out, (h, weights), backward)


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the tensor to a scalar Tensor and is re-evaluated with each
    coordinate of ``x`` shifted by +/- eps.
    """
    x.requires_grad = True
    out = fn(x)
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(x).item()
        flat[i] = orig - eps
        f_minus = fn(x).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, relative_error(analytic.reshape(-1)[i], numeric))
    return worst


def sampled_gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int,
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> float:
    """Central-difference check on randomly sampled parameter coordinates.

    ``loss_fn`` rebuilds the full forward graph from the current parameter
    values.  Returns the max relative error over the sampled coordinates.
    """
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for pick in picks:
        pi = int(np.searchsorted(bounds, pick, side="right"))
        ci = int(pick - (bounds[pi - 1] if pi else 0))
        flat = params[pi].data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + eps
        f_plus = loss_fn().item()
        flat[ci] = orig - eps
        f_minus = loss_fn().item()
        flat[ci] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, relative_error(grads[pi].reshape(-1)[ci], numeric))
    return worst
