"""Minimal reverse-mode autodiff engine and neural building blocks.

Dense numpy arrays throughout; a Tensor records its parents and a backward
closure on a tape that is traversed in reverse topological order from a
scalar loss.
"""
from __future__ import annotations

import json
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "parents", "bw", "requires_grad")

    def __init__(self, data, parents: Tuple["Tensor", ...] = (),
                 bw: Optional[Callable[[np.ndarray], None]] = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.bw = bw
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node.bw is not None and node.grad is not None:
                node.bw(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _binary(a, b, out_data, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(out_data, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(da(g), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(db(g), b.data.shape))
    out.bw = bw
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    return _binary(a, b, a.data @ b.data,
                   lambda g: g @ b.data.T, lambda g: a.data.T @ g)


def const_matmul(const: np.ndarray, x: Tensor) -> Tensor:
    """Left-multiply by a constant matrix (e.g. a normalized adjacency)."""
    x = as_tensor(x)
    out = Tensor(const @ x.data, (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(const.T @ g)
    out.bw = bw
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(x.data * mask, (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(g * mask)
    out.bw = bw
    return out


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    val = np.exp(x.data)
    out = Tensor(val, (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(g * val)
    out.bw = bw
    return out


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data), (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(g / x.data)
    out.bw = bw
    return out


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data ** 2, (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(g * 2.0 * x.data)
    out.bw = bw
    return out


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(), (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, float(g)))
    out.bw = bw
    return out


def tmean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean(), (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, float(g) / n))
    out.bw = bw
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _binary(a, b, np.where(take_a, a.data, b.data),
                   lambda g: g * take_a, lambda g: g * ~take_a)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi), (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(g * inside)
    out.bw = bw
    return out


def gather_rows(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx], (x,))

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            x._accum(acc)
    out.bw = bw
    return out


def pick(x: Tensor, index: int) -> Tensor:
    """Scalar element of a vector."""
    x = as_tensor(x)
    out = Tensor(x.data.reshape(-1)[index], (x,))

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc.reshape(-1)[index] = float(g)
            x._accum(acc)
    out.bw = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accum(g[tuple(sl)])
    out.bw = bw
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Graph mean pooling: column-wise mean, keeps a (1, H) row for broadcast."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError("mean_rows needs a non-empty matrix")
    n = x.data.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True), (x,))

    def bw(g):
        if x.requires_grad:
            x._accum(np.repeat(g / n, n, axis=0))
    out.bw = bw
    return out


class EmptySupportError(ValueError):
    pass


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the unmasked entries of a score vector.

    Masked entries come out exactly 0.  Computed with max-subtraction; the
    backward pass is the softmax Jacobian restricted to the support.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    s = scores.data.reshape(-1)
    if s.shape != mask.shape:
        raise ValueError("mask shape mismatch")
    if not mask.any():
        raise EmptySupportError("all entries masked")
    z = s[mask]
    e = np.exp(z - z.max())
    p = np.zeros_like(s)
    p[mask] = e / e.sum()
    out = Tensor(p.reshape(scores.data.shape), (scores,))

    def bw(g):
        if scores.requires_grad:
            gf = g.reshape(-1)
            dot = float((gf[mask] * p[mask]).sum())
            gs = np.where(mask, p * (gf - dot), 0.0)
            scores._accum(gs.reshape(scores.data.shape))
    out.bw = bw
    return out


def normalized_adjacency(node_count: int, links: Iterable[Tuple[int, int]]
                         ) -> np.ndarray:
    """Symmetric normalized adjacency with self-loops:
    D^{-1/2} (A + I) D^{-1/2}."""
    a = np.eye(node_count)
    for u, v in links:
        a[u, v] = 1.0
        a[v, u] = 1.0
    d = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_layer(h: Tensor, norm_adj: np.ndarray, w: Tensor, b: Tensor,
              activation: bool = True) -> Tensor:
    """activation( Ahat @ H @ W + b )."""
    if h.data.shape[0] != norm_adj.shape[0]:
        raise ValueError("node count mismatch between features and adjacency")
    out = add(matmul(const_matmul(norm_adj, h), w), b)
    return relu(out) if activation else out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


class ParamStore:
    """Named parameter tensors with deterministic iteration order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self.items():
            other.add(n, t.data.copy())
        return other

    def load_from(self, other: "ParamStore"):
        for n, t in self.items():
            t.data[...] = other[n].data

    def assert_finite(self):
        for n, t in self.items():
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"non-finite values in parameter {n}")


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform fan-in scaled init: +/- sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    def __init__(self, params: ParamStore, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self):
        self.t += 1
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            mhat = self.m[n] / (1 - self.beta1 ** self.t)
            vhat = self.v[n] / (1 - self.beta2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.params.assert_finite()


CHECKPOINT_VERSION = 1


def save_params(params: ParamStore, path: str, manifest: Optional[dict] = None):
    arrays = {n: t.data for n, t in params.items()}
    meta = {"version": CHECKPOINT_VERSION, "manifest": manifest or {}}
    np.savez(path, __meta__=np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_params(path: str, into: Optional[ParamStore] = None
                ) -> Tuple[ParamStore, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        names = [n for n in data.files if n != "__meta__"]
        if into is None:
            into = ParamStore()
            for n in sorted(names):
                into.add(n, data[n].copy())
        else:
            if sorted(names) != into.names():
                raise ValueError("checkpoint parameter names do not match")
            for n in names:
                if data[n].shape != into[n].data.shape:
                    raise ValueError(f"shape mismatch for {n}")
                into[n].data[...] = data[n]
    return into, meta.get("manifest", {})
