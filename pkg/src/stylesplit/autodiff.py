"""Reverse-mode automatic differentiation over float64 numpy arrays.

Micrograd-style engine: every operation returns a new Tensor whose closure
knows how to route the output gradient back to the inputs. ``backward()``
walks the implicit graph once, in reverse topological order. Everything is
float64 and single-threaded; bitwise determinism for fixed inputs is part
of the contract.
"""

from __future__ import annotations

import math

import numpy as np

LOG_CLAMP = 1e-12   # floor inside log(); tau -> 0 drives probabilities to exact zeros
NORM_EPS = 1e-12    # below this a vector norm counts as degenerate
LN_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate the operation's contract."""


class GraphError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, missing gradient)."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (near-zero norm, empty mask)."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense n-d float64 array participating in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev: tuple = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._prev = tracked
            out._backward = backward
        return out

    @staticmethod
    def lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(g, self.data.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grad of every requires_grad tensor reachable from a scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        # iterative post-order DFS; graphs here run thousands of nodes deep
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor.lift(other)
        out_data = a.data + b.data

        def backward():
            a.accumulate(out.grad)
            b.accumulate(out.grad)

        out = Tensor._from_op(out_data, (a, b), backward)
        return out

    __radd__ = __add__

    def __neg__(self):
        a = self
        out = Tensor._from_op(-a.data, (a,), lambda: a.accumulate(-out.grad))
        return out

    def __sub__(self, other):
        a, b = self, Tensor.lift(other)
        out_data = a.data - b.data

        def backward():
            a.accumulate(out.grad)
            b.accumulate(-out.grad)

        out = Tensor._from_op(out_data, (a, b), backward)
        return out

    def __rsub__(self, other):
        return Tensor.lift(other) - self

    def __mul__(self, other):
        a, b = self, Tensor.lift(other)
        out_data = a.data * b.data

        def backward():
            a.accumulate(out.grad * b.data)
            b.accumulate(out.grad * a.data)

        out = Tensor._from_op(out_data, (a, b), backward)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor.lift(other)
        out_data = a.data / b.data

        def backward():
            a.accumulate(out.grad / b.data)
            b.accumulate(-out.grad * a.data / (b.data * b.data))

        out = Tensor._from_op(out_data, (a, b), backward)
        return out

    def __rtruediv__(self, other):
        return Tensor.lift(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]

        def backward():
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                np.add.at(a.grad, key, out.grad)

        out = Tensor._from_op(np.array(out_data), (a,), backward)
        return out

    # -- elementwise functions ----------------------------------------------------

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)
        out = Tensor._from_op(out_data, (a,), lambda: a.accumulate((1.0 - out.data * out.data) * out.grad))
        return out

    def sigmoid(self):
        a = self
        x = a.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.maximum(x, 0))),
                            np.exp(np.minimum(x, 0)) / (1.0 + np.exp(np.minimum(x, 0))))
        out = Tensor._from_op(out_data, (a,), lambda: a.accumulate(out.data * (1.0 - out.data) * out.grad))
        return out

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        out = Tensor._from_op(out_data, (a,), lambda: a.accumulate(out.data * out.grad))
        return out

    def log(self):
        """log with clamping at LOG_CLAMP; gradient is zero in the clamped region."""
        a = self
        clamped = np.maximum(a.data, LOG_CLAMP)

        def backward():
            a.accumulate(np.where(a.data > LOG_CLAMP, out.grad / clamped, 0.0))

        out = Tensor._from_op(np.log(clamped), (a,), backward)
        return out

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        out = Tensor._from_op(out_data, (a,), lambda: a.accumulate(out.grad / (2.0 * out.data)))
        return out

    # -- reductions -----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.data.shape))

        out = Tensor._from_op(np.asarray(out_data), (a,), backward)
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def matmul(a, b) -> Tensor:
    """2-d matrix product with gradients into both operands."""
    a, b = Tensor.lift(a), Tensor.lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward():
        a.accumulate(out.grad @ b.data.T)
        b.accumulate(a.data.T @ out.grad)

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor.lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(offset, offset + size)
            t.accumulate(out.grad[tuple(idx)])
            offset += size

    out = Tensor._from_op(out_data, tuple(tensors), backward)
    return out


def embedding_rows(weight, ids) -> Tensor:
    """Pick rows `ids` out of the [V x e] embedding; gradient scatter-adds back."""
    weight = Tensor.lift(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {weight.shape[0]}")
    out_data = weight.data[ids]

    def backward():
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids, out.grad)

    out = Tensor._from_op(out_data, (weight,), backward)
    return out


def softmax_temperature(logits, tau: float, axis: int = -1) -> Tensor:
    """Rows of exp(logit/tau) normalized to 1, with max-subtraction for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = Tensor.lift(logits)
    x = logits.data / tau
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward():
        inner = (out.grad * p).sum(axis=axis, keepdims=True)
        logits.accumulate(p * (out.grad - inner) / tau)

    out = Tensor._from_op(p, (logits,), backward)
    return out


def cross_entropy(pred, targets, mask=None, from_logits: bool = True) -> Tensor:
    """Mean -log p(target) over unmasked positions.

    `pred` is [N x V]; rows are logits (default) or probabilities.
    `mask` marks positions that count; padding rows carry mask 0.
    """
    pred = Tensor.lift(pred)
    if pred.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N x V] predictions, got {pred.shape}")
    n, v = pred.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"{n} prediction rows vs {targets.shape[0]} targets")
    if mask is None:
        mask = np.ones(n, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64).reshape(-1)
        if mask.shape[0] != n:
            raise ShapeError(f"{n} prediction rows vs {mask.shape[0]} mask entries")
    active = mask > 0
    if targets[active].size and (targets[active].min() < 0 or targets[active].max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    count = mask.sum()
    if count == 0:
        raise DegenerateInputError("empty mask: no unmasked positions to average over")

    rows = np.arange(n)
    if from_logits:
        m = pred.data.max(axis=1, keepdims=True)
        e = np.exp(pred.data - m)
        z = e.sum(axis=1, keepdims=True)
        logp_t = (pred.data[rows, targets] - m[:, 0]) - np.log(z[:, 0])
        loss = -(logp_t * mask).sum() / count

        def backward():
            p = e / z
            g = p * (mask / count)[:, None]
            g[rows, targets] -= mask / count
            pred.accumulate(g * out.grad)

    else:
        pt = pred.data[rows, targets]
        clamped = np.maximum(pt, LOG_CLAMP)
        loss = -(np.log(clamped) * mask).sum() / count

        def backward():
            g = np.zeros_like(pred.data)
            g[rows, targets] = np.where(pt > LOG_CLAMP, -mask / (count * clamped), 0.0)
            pred.accumulate(g * out.grad)

    out = Tensor._from_op(np.asarray(loss), (pred,), backward)
    return out


def cosine_distance(a, b) -> Tensor:
    """1 - a.b / (|a||b|) for two vectors, as a differentiable scalar."""
    a, b = Tensor.lift(a), Tensor.lift(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_distance expects two equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateInputError(f"cosine_distance on near-zero vector (norms {na:.3e}, {nb:.3e})")
    return 1.0 - (a * b).sum() / ((a * a).sum().sqrt() * (b * b).sum().sqrt())


def row_cosine_distance_mean(a: Tensor, b: Tensor) -> Tensor:
    """Batch mean of per-row cosine distances between [B x d] tensors."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"expected matching [B x d] tensors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if (na <= NORM_EPS).any() or (nb <= NORM_EPS).any():
        raise DegenerateInputError("cosine distance on a near-zero representation row")
    dot = (a * b).sum(axis=1)
    denom = (a * a).sum(axis=1).sqrt() * (b * b).sum(axis=1).sqrt()
    return (1.0 - dot / denom).mean()


def kl_diag_gaussian(mu1, logvar1, mu2, logvar2) -> float:
    """Closed-form KL(N(mu1, e^logvar1) || N(mu2, e^logvar2)), diagonal covariances."""
    arrays = [t.data if isinstance(t, Tensor) else _as_array(t) for t in (mu1, logvar1, mu2, logvar2)]
    m1, lv1, m2, lv2 = arrays
    if not (m1.shape == lv1.shape == m2.shape == lv2.shape):
        raise ShapeError("kl_diag_gaussian requires four equal-shape arrays")
    d = m1 - m2
    return float(0.5 * np.sum(lv2 - lv1 + (np.exp(lv1) + d * d) * np.exp(-lv2) - 1.0))


class GRUCell:
    """Single GRU step over combined gate weights.

    Gate layout along the last axis is [reset | update | candidate]:
        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        u = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - u) * n + u * h
    """

    def __init__(self, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor):
        self.hidden = w_hh.shape[0]
        if w_ih.shape[1] != 3 * self.hidden or w_hh.shape[1] != 3 * self.hidden:
            raise ShapeError(f"gate matrices must have 3*hidden columns, got {w_ih.shape} and {w_hh.shape}")
        if b_ih.shape != (3 * self.hidden,) or b_hh.shape != (3 * self.hidden,):
            raise ShapeError("gate biases must be length 3*hidden")
        self.w_ih, self.w_hh, self.b_ih, self.b_hh = w_ih, w_hh, b_ih, b_hh

    def step(self, x, h) -> Tensor:
        return gru_step(self, x, h)

    def _step2d(self, x: Tensor, h: Tensor) -> Tensor:
        nh = self.hidden
        gi = matmul(x, self.w_ih) + self.b_ih
        gh = matmul(h, self.w_hh) + self.b_hh
        r = (gi[:, :nh] + gh[:, :nh]).sigmoid()
        u = (gi[:, nh:2 * nh] + gh[:, nh:2 * nh]).sigmoid()
        n = (gi[:, 2 * nh:] + r * gh[:, 2 * nh:]).tanh()
        out = (1.0 - u) * n + u * h
        return out


def gru_step(cell: GRUCell, input_embedding, hidden) -> Tensor:
    """One GRU update; accepts [e]/[h] vectors or [B x e]/[B x h] batches."""
    x, h = Tensor.lift(input_embedding), Tensor.lift(hidden)
    if x.ndim == 1:
        x2 = reshape(x, (1, x.shape[0]))
        h2 = reshape(h, (1, h.shape[0]))
        return reshape(cell._step2d(x2, h2), (cell.hidden,))
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"batch mismatch: input {x.shape} vs hidden {h.shape}")
    return cell._step2d(x, h)


def reshape(a, shape) -> Tensor:
    a = Tensor.lift(a)
    out_data = a.data.reshape(shape)

    def backward():
        a.accumulate(out.grad.reshape(a.data.shape))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


class Adam:
    """Adam with bias correction over a named parameter dict.

    step() consumes and clears gradients; a parameter with no gradient is a
    contract violation (the caller forgot a backward pass).
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise GraphError(f"adam step with missing gradient for '{name}'")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    total = 0.0
    for p in tensors:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    total = math.sqrt(total)
    if total > max_norm:
        scale = max_norm / total
        for p in tensors:
            if p.grad is not None:
                p.grad *= scale
    return total
