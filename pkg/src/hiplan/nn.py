"""Dense-network engine: array-valued reverse-mode autodiff, MLPs, Adam, checkpoints.

Everything runs in float64 numpy. Graphs are built eagerly: each op returns a
Tensor holding its value plus a closure that routes the incoming adjoint to its
parents. Parameter containers are treated as immutable snapshots by readers;
only the training loop mutates them (through `adam_step` / `soft_update`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class ShapeError(ValueError):
    """Dimension mismatch between an operand and what the op/network expects."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where training cannot continue."""


# ---------------------------------------------------------------------------
# autodiff core
# ---------------------------------------------------------------------------


class Tensor:
    """A node in the reverse-mode graph.

    `data` is always a float64 ndarray. `grad` is allocated lazily on the
    first adjoint accumulation. Leaf tensors created with requires_grad=True
    (network parameters) collect gradients; everything else only propagates.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar node, accumulating into leaf .grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar (scalars and ndarrays are promoted to constant leaves)
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward=bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor(out_data, parents=(a,), backward=bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accumulate(g * (a.data > 0.0))

    return Tensor(out_data, parents=(a,), backward=bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bwd(g):
        a._accumulate(g * 2.0 * a.data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the adjoint follows the winning branch (ties go to a)."""
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor(out_data, parents=tuple(tensors), backward=bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[:, start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return Tensor(out_data, parents=(a,), backward=bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor(out_data, parents=(a,), backward=bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, parents=(a,), backward=bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / n))


def logsumexp_cols(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a (B, K) tensor; the max shift is detached."""
    m = a.data.max(axis=1, keepdims=True)
    shifted = sub(a, Tensor(m))
    s = tsum(exp(shifted), axis=1, keepdims=True)
    return add(log(s), Tensor(m))


# ---------------------------------------------------------------------------
# multilayer perceptron
# ---------------------------------------------------------------------------


class Mlp:
    """Fully connected net: widths[0] -> ... -> widths[-1], one activation per layer.

    Weights init uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
    """

    def __init__(self, widths, activations, rng=None):
        widths = list(widths)
        activations = list(activations)
        if len(widths) < 2:
            raise ShapeError("need at least input and output widths")
        if len(activations) != len(widths) - 1:
            raise ShapeError(
                f"{len(widths) - 1} layers but {len(activations)} activation tags"
            )
        for act in activations:
            if act not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {act!r}")
        if any(w <= 0 for w in widths):
            raise ShapeError(f"layer widths must be positive: {widths}")
        self.widths = widths
        self.activations = activations
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x) -> Tensor:
        """Graph-building forward pass. Input (B, in_dim) or (in_dim,)."""
        x = _wrap(x)
        squeeze = x.data.ndim == 1
        if squeeze:
            x = reshape(x, (1, x.data.shape[0]))
        if x.data.shape[1] != self.in_dim:
            raise ShapeError(f"input dim {x.data.shape[1]}, net expects {self.in_dim}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = add(matmul(x, w), b)
            if act == "tanh":
                x = tanh(x)
            elif act == "relu":
                x = relu(x)
        if squeeze:
            x = reshape(x, (self.out_dim,))
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass for inference; same arithmetic as forward()."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input dim {x.shape[1]}, net expects {self.in_dim}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ w.data + b.data
            if act == "tanh":
                np.tanh(x, out=x)
            elif act == "relu":
                np.maximum(x, 0.0, out=x)
        return x[0] if squeeze else x

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.widths = list(self.widths)
        dup.activations = list(self.activations)
        dup.weights = [Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        dup.biases = [Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        return dup

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.parameters():
            n = p.data.size
            p.data[...] = flat[i : i + n].reshape(p.data.shape)
            i += n
        if i != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, net needs {i}")


def forward(net: Mlp, x) -> Tensor:
    return net.forward(x)


def backward(net: Mlp, loss: Tensor) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. net parameters, in parameters() order."""
    for p in net.parameters():
        p.grad = None
    loss.backward()
    return [
        p.grad if p.grad is not None else np.zeros_like(p.data)
        for p in net.parameters()
    ]


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[Tensor], lr: float) -> AdamState:
    state = AdamState(lr=lr)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One adaptive-moment update, in place. Raises on non-finite gradients."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params/grads/state length mismatch")
    for i, g in enumerate(grads):
        if g.shape != params[i].data.shape:
            raise ShapeError(
                f"grad {i} shape {g.shape} != param shape {params[i].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient in parameter {i} "
                f"(|g|_max={np.abs(g[np.isfinite(g)]).max(initial=0.0):.3e}, "
                f"nan={int(np.isnan(g).sum())}, inf={int(np.isinf(g).sum())})"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    scale = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= scale * m / (np.sqrt(v) + state.eps)


def soft_update(target_params: list[Tensor], online_params: list[Tensor], tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, per parameter."""
    for tp, op in zip(target_params, online_params):
        tp.data *= 1.0 - tau
        tp.data += tau * op.data


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def numeric_grad_entry(loss_fn, param: Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central finite difference of loss_fn() w.r.t. one parameter entry."""
    orig = param.data[index]
    param.data[index] = orig + h
    up = float(loss_fn())
    param.data[index] = orig - h
    down = float(loss_fn())
    param.data[index] = orig
    return (up - down) / (2.0 * h)


def gradient_check(
    loss_builder,
    params: list[Tensor],
    rng: np.random.Generator,
    entries_per_param: int = 3,
    h: float = 1e-5,
) -> float:
    """Compare analytic grads against central differences on sampled entries.

    loss_builder() must rebuild the loss graph from current parameter values.
    Returns the worst relative error, |a - n| / max(|a|, |n|, 1).
    """
    zero_grads(params)
    loss = loss_builder()
    loss.backward()
    analytic = [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    def loss_value():
        return loss_builder().data

    worst = 0.0
    for p, g in zip(params, analytic):
        flat_idx = rng.choice(p.data.size, size=min(entries_per_param, p.data.size), replace=False)
        for fi in flat_idx:
            index = np.unravel_index(fi, p.data.shape)
            num = numeric_grad_entry(loss_value, p, index, h=h)
            ana = float(g[index])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"HPK1"


def save_checkpoint(path, nets: dict, extra: dict | None = None) -> None:
    """Write named nets as one flat little-endian float64 array + JSON header.

    Header records layer widths, activation tags, and byte offsets of every
    net inside the binary blob; `extra` must be JSON-serializable.
    """
    header_nets = {}
    blobs = []
    offset = 0
    for name, net in nets.items():
        flat = net.flat_params()
        header_nets[name] = {
            "widths": list(net.widths),
            "activations": list(net.activations),
            "byte_offset": offset,
            "count": int(flat.size),
        }
        blobs.append(flat.astype("<f8"))
        offset += flat.size * 8
    header = {"nets": header_nets, "extra": extra or {}}
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read nets saved by save_checkpoint; returns ({name: Mlp}, extra)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    nets = {}
    for name, info in header["nets"].items():
        net = Mlp(info["widths"], info["activations"])
        start = info["byte_offset"]
        flat = np.frombuffer(blob, dtype="<f8", count=info["count"], offset=start)
        net.set_flat_params(flat.astype(np.float64))
        nets[name] = net
    return nets, header["extra"]
