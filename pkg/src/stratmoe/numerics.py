"""Dense 2-D float64 matrices with a reverse-mode tape, Adam, and an LR schedule.

Arrays are numpy ``float64``; every differentiable op records a closure on the
active :class:`Tape` (if any).  Outside a ``with Tape():`` block ops run eagerly
without recording, which is what inference uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "ParameterStore",
    "AdamState",
    "constant",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax_rows",
    "layer_norm",
    "cross_entropy",
    "sum_all",
    "mean_rows",
    "take_rows",
    "concat_rows",
    "scatter_rows",
    "pick",
    "attention",
    "backward",
    "adam_step",
    "inverse_sqrt_lr",
    "glorot_uniform",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    """A 2-D float64 matrix that may carry a gradient."""

    __slots__ = ("data", "grad", "name", "requires_grad", "_tape", "_slot")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape = None
        self._slot = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def constant(data) -> Tensor:
    return Tensor(data)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


class Tape:
    """Records ops in execution order; :func:`backward` replays them in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
        out._tape = self
        out._slot = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))


def _emit(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(_tracked(p) for p in parents):
        _ACTIVE[-1].record(out, parents, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise ShapeError(f"layer_norm: gain/bias must be 1x{a.cols}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit(xhat * gd + bias.data, (a, gain, bias), bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored rows."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != logits.rows:
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {logits.rows} rows")
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    rows = np.nonzero(keep)[0]
    cls = targets[keep]
    if cls.min() < 0 or cls.max() >= logits.cols:
        raise ValueError("cross_entropy: target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[rows, cls].sum() / n

    def bw(g):
        d = np.zeros_like(logp)
        d[rows] = np.exp(logp[rows])
        d[rows, cls] -= 1.0
        return (d * (g[0, 0] / n),)

    return _emit(np.array([[loss]]), (logits,), bw)


# ---------------------------------------------------------------- reductions / indexing

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n x m) -> (1 x m)."""
    n, m = a.shape
    return _emit(a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / n, (n, m)).copy(),))


def take_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    shape = a.shape

    def bw(g):
        d = np.zeros(shape)
        np.add.at(d, index, g)
        return (d,)

    return _emit(a.data[index], (a,), bw)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column mismatch {sorted(cols)}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def scatter_rows(src: Tensor, index, n_rows: int) -> Tensor:
    """Zero matrix of ``n_rows`` rows with ``src`` rows added at ``index``."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.shape[0] != src.rows:
        raise ShapeError("scatter_rows: index length must equal src rows")
    out = np.zeros((n_rows, src.cols))
    np.add.at(out, index, src.data)
    return _emit(out, (src,), lambda g: (g[index],))


def pick(a: Tensor, rows, cols) -> Tensor:
    """Gather single entries ``a[rows[n], cols[n]]`` into an (n x 1) column."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    shape = a.shape

    def bw(g):
        d = np.zeros(shape)
        np.add.at(d, (rows, cols), g[:, 0])
        return (d,)

    return _emit(a.data[rows, cols][:, None], (a,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, batch: int,
              key_mask: np.ndarray | None = None, causal: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention on row-stacked sequences.

    ``q`` is (batch*Sq x d), ``k``/``v`` are (batch*Sk x d).  ``key_mask`` is a
    boolean (batch x Sk) array, True where the key may be attended to.
    """
    d = q.cols
    if d % n_heads:
        raise ShapeError(f"attention: d={d} not divisible by {n_heads} heads")
    if k.cols != d or v.cols != d or k.rows != v.rows:
        raise ShapeError("attention: q/k/v shape mismatch")
    if q.rows % batch or k.rows % batch:
        raise ShapeError("attention: rows not divisible by batch")
    sq, sk, dh = q.rows // batch, k.rows // batch, d // n_heads

    def heads(x, s):
        return x.reshape(batch, s, n_heads, dh).transpose(0, 2, 1, 3)

    Q, K, V = heads(q.data, sq), heads(k.data, sk), heads(v.data, sk)
    c = 1.0 / math.sqrt(dh)
    scores = np.einsum("bhqd,bhkd->bhqk", Q, K) * c
    allowed = np.ones((batch, 1, sq, sk), dtype=bool)
    if key_mask is not None:
        allowed &= np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        allowed &= np.tril(np.ones((sq, sk), dtype=bool))[None, None]
    scores = np.where(allowed, scores, -1e30)
    scores -= scores.max(axis=-1, keepdims=True)
    P = np.exp(scores) * allowed
    P /= np.maximum(P.sum(axis=-1, keepdims=True), 1e-300)
    O = np.einsum("bhqk,bhkd->bhqd", P, V)

    def merge(x, s):
        return x.transpose(0, 2, 1, 3).reshape(batch * s, d)

    def bw(g):
        G = heads(g, sq)
        dV = np.einsum("bhqk,bhqd->bhkd", P, G)
        dP = np.einsum("bhqd,bhkd->bhqk", G, V)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * c
        dQ = np.einsum("bhqk,bhkd->bhqd", dS, K)
        dK = np.einsum("bhqk,bhqd->bhkd", dS, Q)
        return merge(dQ, sq), merge(dK, sk), merge(dV, sk)

    return _emit(merge(O, sq), (q, k, v), bw)


# ---------------------------------------------------------------- backward

def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if output.data.size != 1:
        raise ShapeError("backward needs a scalar (1x1) output")
    tape = tape or output._tape
    if tape is None or output._tape is not tape:
        raise TapeError("output was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    for out, parents, fn in reversed(tape.nodes[: output._slot + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, fn(g)):
            if p._tape is not None:
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
            elif p.requires_grad:
                p.grad += gp


# ---------------------------------------------------------------- parameters & optimizer

def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParameterStore:
    """Named trainable matrices with their Adam moments and a shared step counter."""

    params: dict[str, Tensor] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        self.state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((t.grad * t.grad).sum()) for t in self.params.values()))


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam, no weight decay."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        st = store.state[name]
        g = p.grad
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * g * g
        p.data -= lr * (st.m / c1) / (np.sqrt(st.v / c2) + eps)


def inverse_sqrt_lr(step: int, warmup: int, peak_lr: float) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup <= 0:
        return peak_lr / math.sqrt(step)
    if step < warmup:
        return peak_lr * step / warmup
    return peak_lr * math.sqrt(warmup / step)
