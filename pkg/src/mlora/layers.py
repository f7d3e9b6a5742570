"""Differentiable layer primitives with hand-written backward passes.

All layers work on row batches: an input ``X`` has shape ``(n, d_in)`` and a
weight ``W`` has shape ``(d_out, d_in)``, so a dense layer computes
``X @ W.T + b``.  The free functions ``dense_forward`` / ``mlora_forward``
also accept a single 1-D sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, MissingDomainError, ParameterError, ShapeError
from .numerics import Rng, gaussian_fill, matmul

ADAPTOR_INIT_STD = 0.02
EMBEDDING_INIT_STD = 0.02
PROB_EPS = 1e-12


def rank_for(d_out: int, alpha: float, cap: int | None = None, d_in: int | None = None) -> int:
    """Adaptor rank ``max(floor(d_out / alpha), 1)``.

    With ``cap`` set, alpha is doubled until one adaptor pair holds at most
    ``cap`` parameters, i.e. ``r * (d_in + d_out) <= cap``, or the rank bottoms
    out at 1.  When ``d_in`` is known the rank never exceeds ``min(d_in, d_out)``.
    """
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if d_out < 1:
        raise ParameterError(f"d_out must be >= 1, got {d_out}")
    if cap is not None and d_in is None:
        raise ParameterError("rank cap requires d_in")

    def _rank(a):
        r = max(math.floor(d_out / a), 1)
        if d_in is not None:
            r = min(r, d_in, d_out)
        return r

    r = _rank(alpha)
    if cap is not None:
        a = alpha
        while r > 1 and r * (d_in + d_out) > cap:
            a *= 2
            r = _rank(a)
    return r


class GradTape:
    """Gradient buffers keyed by registry name."""

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, grad: np.ndarray) -> None:
        if name in self.grads:
            if self.grads[name].shape != grad.shape:
                raise ShapeError(f"gradient for {name!r} changed shape: "
                                 f"{self.grads[name].shape} vs {grad.shape}")
            self.grads[name] += grad
        else:
            self.grads[name] = np.array(grad, dtype=np.float64)

    def __contains__(self, name):
        return name in self.grads

    def __getitem__(self, name):
        return self.grads[name]

    def __len__(self):
        return len(self.grads)

    def items(self):
        return self.grads.items()

    def clear(self):
        self.grads.clear()


@dataclass(eq=False)
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    frozen: bool = False
    name: str = "dense"

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.ndim != 1 or self.b.shape[0] != self.W.shape[0]:
            raise ShapeError(f"dense layer {self.name!r}: W {self.W.shape} and b {self.b.shape} disagree")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: Rng, name: str = "dense") -> "DenseLayer":
        """He-scaled Gaussian weights, zero bias."""
        W = np.empty((d_out, d_in))
        gaussian_fill(W, rng, 0.0, math.sqrt(2.0 / d_in))
        return cls(W, np.zeros(d_out), name=name)

    @property
    def d_in(self):
        return self.W.shape[1]

    @property
    def d_out(self):
        return self.W.shape[0]

    def tensors(self):
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def forward(self, X):
        if X.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: input width {X.shape[-1]} != d_in {self.d_in}")
        return matmul(X, self.W.T) + self.b

    def backward(self, X, G, tape: GradTape):
        if not self.frozen:
            tape.add(f"{self.name}.W", matmul(G.T, X))
            tape.add(f"{self.name}.b", G.sum(axis=0))
        return matmul(G, self.W)


@dataclass(eq=False)
class LoRAPair:
    A: np.ndarray  # (rank, d_in)
    B: np.ndarray  # (d_out, rank)

    def __post_init__(self):
        if self.A.shape[0] != self.B.shape[1] or self.A.shape[0] < 1:
            raise ShapeError(f"LoRA pair rank mismatch: A {self.A.shape}, B {self.B.shape}")

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def n_params(self):
        return self.A.size + self.B.size


@dataclass(eq=False)
class MLoRADenseLayer:
    """A frozen-able dense layer plus one low-rank update per domain.

    For domain ``t`` the layer computes ``W x + b + B_t (A_t x)``; the product
    ``B_t A_t`` is never formed.
    """

    base: DenseLayer
    alpha: float = 32.0
    cap: int | None = None
    adaptors: dict[int, LoRAPair] = field(default_factory=dict)

    @property
    def name(self):
        return self.base.name

    @property
    def d_in(self):
        return self.base.d_in

    @property
    def d_out(self):
        return self.base.d_out

    @property
    def rank(self):
        return rank_for(self.d_out, self.alpha, self.cap, self.d_in)

    def adaptor_names(self, t):
        return f"{self.name}.lora.{t}.A", f"{self.name}.lora.{t}.B"

    def add_adaptor(self, t: int, rng: Rng, std: float = ADAPTOR_INIT_STD) -> LoRAPair:
        r = self.rank
        A = np.empty((r, self.d_in))
        gaussian_fill(A, rng, 0.0, std)
        pair = LoRAPair(A, np.zeros((self.d_out, r)))
        self.adaptors[t] = pair
        return pair

    def _pair(self, t) -> LoRAPair:
        try:
            return self.adaptors[t]
        except KeyError:
            raise MissingDomainError(f"{self.name}: no adaptor for domain {t}") from None

    def tensors(self):
        out = self.base.tensors()
        for t, pair in self.adaptors.items():
            a, b = self.adaptor_names(t)
            out[a] = pair.A
            out[b] = pair.B
        return out

    def forward(self, X, t=None):
        """Rows of ``X`` through domain ``t``'s path; ``t=None`` uses the base only."""
        h = self.base.forward(X)
        if t is None:
            return h
        pair = self._pair(t)
        return h + matmul(matmul(X, pair.A.T), pair.B.T)

    def forward_routed(self, X, domains, use_adaptor):
        """Per-row routing: row ``i`` goes through domain ``domains[i]``'s adaptor
        whenever ``use_adaptor(domains[i])`` is true."""
        h = self.base.forward(X)
        for t in np.unique(domains):
            t = int(t)
            if not use_adaptor(t):
                continue
            rows = np.flatnonzero(domains == t)
            pair = self._pair(t)
            h[rows] += matmul(matmul(X[rows], pair.A.T), pair.B.T)
        return h

    def backward(self, X, t, G, tape: GradTape):
        """Accumulate parameter gradients for domain ``t`` and return dL/dX."""
        if G.shape[-1] != self.d_out or X.shape[-1] != self.d_in or G.shape[0] != X.shape[0]:
            raise ShapeError(f"{self.name}: backward got X {X.shape}, grad {G.shape}")
        dX = self.base.backward(X, G, tape)
        if t is None:
            return dX
        pair = self._pair(t)
        a_name, b_name = self.adaptor_names(t)
        XA = matmul(X, pair.A.T)           # (n, r)
        GB = matmul(G, pair.B)             # (n, r)
        tape.add(b_name, matmul(G.T, XA))
        tape.add(a_name, matmul(GB.T, X))
        return dX + matmul(GB, pair.A)

    def backward_routed(self, X, domains, G, tape, use_adaptor):
        dX = self.base.backward(X, G, tape)
        for t in np.unique(domains):
            t = int(t)
            if not use_adaptor(t):
                continue
            rows = np.flatnonzero(domains == t)
            pair = self._pair(t)
            a_name, b_name = self.adaptor_names(t)
            Xr, Gr = X[rows], G[rows]
            GB = matmul(Gr, pair.B)
            tape.add(b_name, matmul(Gr.T, matmul(Xr, pair.A.T)))
            tape.add(a_name, matmul(GB.T, Xr))
            dX[rows] += matmul(GB, pair.A)
        return dX


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x.reshape(1, -1), True) if x.ndim == 1 else (x, False)


def dense_forward(layer: DenseLayer, x):
    X, single = _as_batch(x)
    h = layer.forward(X)
    return h[0] if single else h


def mlora_forward(layer: MLoRADenseLayer, x, t):
    X, single = _as_batch(x)
    h = layer.forward(X, t)
    return h[0] if single else h


def mlora_backward(layer: MLoRADenseLayer, x, t, grad_out, tape: GradTape):
    X, single = _as_batch(x)
    G, _ = _as_batch(grad_out)
    dX = layer.backward(X, t, G, tape)
    return dX[0] if single else dX


@dataclass(eq=False)
class EmbeddingTable:
    rows: np.ndarray  # (vocab_size, dim)
    frozen: bool = False
    name: str = "emb"

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: Rng, name: str = "emb",
             std: float = EMBEDDING_INIT_STD) -> "EmbeddingTable":
        if vocab_size < 1 or dim < 1:
            raise ParameterError(f"embedding {name!r} needs vocab_size, dim >= 1")
        rows = np.empty((vocab_size, dim))
        gaussian_fill(rows, rng, 0.0, std)
        return cls(rows, name=name)

    @property
    def vocab_size(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    def tensors(self):
        return {f"{self.name}.rows": self.rows}

    def _check(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab_size):
            raise IndexError(f"{self.name}: index out of range for vocab size {self.vocab_size}")
        return idx

    def lookup(self, idx):
        return self.rows[self._check(idx)].copy()

    def backward(self, idx, G, tape: GradTape):
        if self.frozen:
            return
        grad = np.zeros_like(self.rows)
        np.add.at(grad, self._check(idx), G)
        tape.add(f"{self.name}.rows", grad)


def embedding_lookup(table: EmbeddingTable, idx: int):
    if not 0 <= idx < table.vocab_size:
        raise IndexError(f"{table.name}: index {idx} out of range [0, {table.vocab_size})")
    return table.rows[idx].copy()


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad):
    return grad * (x > 0)


def sigmoid(z):
    """Logistic function, evaluated without overflow for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return out.item() if out.ndim == 0 else out


def dropout_forward(x, rate: float, rng: Rng | None, training: bool):
    """Inverted dropout; returns ``(output, mask)``.  ``mask`` is None in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.uniform(x.size).reshape(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask


def _check_labels(y):
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be 0 or 1")
    return y.astype(np.float64)


def bce_loss(p, y):
    """Binary cross-entropy of probability ``p`` against label ``y`` (elementwise)."""
    y = _check_labels(y)
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return loss.item() if loss.ndim == 0 else loss


def bce_with_logits(logits, y):
    """Mean sigmoid+BCE over a batch; returns ``(loss, dloss/dlogits)``.

    The loss is evaluated as softplus(z) - y*z, which stays exact for large
    logits where going through the probability would cancel.
    """
    y = _check_labels(y)
    z = np.asarray(logits, dtype=np.float64)
    n = max(np.size(z), 1)
    loss = np.logaddexp(0.0, z) - y * z
    return float(np.mean(loss)), (sigmoid(z) - y) / n
