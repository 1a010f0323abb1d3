"""Reference transformer: embeddings, multi-head self-attention, GELU MLP, unembedding.

No layer normalization and no biases. The attention block is

    X_hat = X + concat_h(A_h X W_v,h) [W_o]
    X_next = X_hat + gelu(X_hat W_1) W_2

with ``A_h = softmax(X W_q,h W_k,h^T X^T / sqrt(d))``. Note the scale uses the
full model width ``d`` rather than the head width. ``W_o`` is optional and
absent by default (identity). Weights act on row vectors (``X @ W``).

Every function accepts either a single sequence ``(N,)`` or a batch ``(B, N)``
of token ids; arrays in the trace carry a leading batch axis in both cases.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import erf

from . import numerics
from .errors import ShapeError

Matrix = np.ndarray

_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    model_dim: int
    ff_dim: int
    vocab_size: int
    max_seq: int
    causal: bool = False
    use_output_proj: bool = False

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "ff_dim", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class LayerParams:
    W_q: Matrix
    W_k: Matrix
    W_v: Matrix
    W_1: Matrix
    W_2: Matrix
    W_o: Matrix | None = None


@dataclass
class ModelParams:
    config: ModelConfig
    W_e: Matrix
    W_p: Matrix
    layers: list[LayerParams]
    W_u: Matrix

    def named_tensors(self) -> Iterator[tuple[str, Matrix]]:
        """Yield ``(name, array)`` pairs in a fixed order."""
        yield "embed.W_e", self.W_e
        yield "embed.W_p", self.W_p
        for i, layer in enumerate(self.layers):
            for attr in ("W_q", "W_k", "W_v", "W_o", "W_1", "W_2"):
                value = getattr(layer, attr)
                if value is not None:
                    yield f"layers.{i}.{attr}", value
        yield "unembed.W_u", self.W_u

    def get(self, name: str) -> Matrix:
        return dict(self.named_tensors())[name]

    def set(self, name: str, value: Matrix) -> None:
        if name == "embed.W_e":
            self.W_e = value
        elif name == "embed.W_p":
            self.W_p = value
        elif name == "unembed.W_u":
            self.W_u = value
        else:
            _, idx, attr = name.split(".")
            setattr(self.layers[int(idx)], attr, value)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


def _gaussian(rng: np.random.Generator, shape, sigma: float) -> Matrix:
    return sigma * rng.standard_normal(shape)


def init_params(config: ModelConfig, scheme: str = "iid", sigma: float = 0.02,
                seed: int = 0) -> ModelParams:
    """Draw every weight i.i.d. from ``N(0, sigma^2)``.

    ``scheme="symmetric"`` additionally sets ``W_k := W_q`` in every layer, so
    each head's ``W_q,h W_q,h^T`` is symmetric positive semidefinite.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if scheme not in ("iid", "symmetric"):
        raise ValueError(f"unknown init scheme {scheme!r}; expected 'iid' or 'symmetric'")
    rng = np.random.default_rng(seed)
    d, f = config.model_dim, config.ff_dim
    W_e = _gaussian(rng, (config.vocab_size, d), sigma)
    W_p = _gaussian(rng, (config.max_seq, d), sigma)
    layers = []
    for _ in range(config.num_layers):
        W_q = _gaussian(rng, (d, d), sigma)
        W_k = _gaussian(rng, (d, d), sigma)
        if scheme == "symmetric":
            W_k = W_q.copy()
        W_v = _gaussian(rng, (d, d), sigma)
        W_o = _gaussian(rng, (d, d), sigma) if config.use_output_proj else None
        W_1 = _gaussian(rng, (d, f), sigma)
        W_2 = _gaussian(rng, (f, d), sigma)
        layers.append(LayerParams(W_q, W_k, W_v, W_1, W_2, W_o))
    W_u = _gaussian(rng, (d, config.vocab_size), sigma)
    return ModelParams(config, W_e, W_p, layers, W_u)


def compose_wqk(params: ModelParams, layer: int) -> Matrix:
    """The layer's bilinear form ``W_q W_k^T`` (sum of the per-head forms)."""
    if not 0 <= layer < len(params.layers):
        raise IndexError(f"layer {layer} out of range [0, {len(params.layers)})")
    lp = params.layers[layer]
    return numerics.matmul(lp.W_q, lp.W_k.T)


def head_wqk(params: ModelParams, layer: int) -> list[Matrix]:
    """Per-head bilinear forms ``W_q,h W_k,h^T``; they sum to :func:`compose_wqk`."""
    if not 0 <= layer < len(params.layers):
        raise IndexError(f"layer {layer} out of range [0, {len(params.layers)})")
    lp = params.layers[layer]
    dh = params.config.head_dim
    return [lp.W_q[:, h * dh:(h + 1) * dh] @ lp.W_k[:, h * dh:(h + 1) * dh].T
            for h in range(params.config.num_heads)]


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``(n, n)`` mask, True where attention is allowed (``j <= i``)."""
    return np.tril(np.ones((n, n), dtype=bool))


def _masked_softmax(raw: np.ndarray, causal: bool) -> np.ndarray:
    if causal:
        raw = np.where(causal_mask(raw.shape[-1]), raw, -np.inf)
    z = np.exp(raw - raw.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def attention_scores(X, wqk, causal: bool = False) -> tuple[Matrix, Matrix]:
    """Raw scores ``X W_qk X^T / sqrt(d)`` and their (optionally causal) softmax."""
    X = numerics.as_matrix(X, "X")
    wqk = numerics.require_square(wqk, "wqk")
    if X.shape[1] != wqk.shape[0]:
        raise ShapeError(f"X has {X.shape[1]} columns but wqk is {wqk.shape}")
    raw = (X @ wqk @ X.T) / np.sqrt(X.shape[1])
    return raw, _masked_softmax(raw, causal)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU ``x * Phi(x)`` using the error function."""
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class LayerTrace:
    X_in: np.ndarray       # (B, N, d)
    Q: np.ndarray          # (B, H, N, dh)
    K: np.ndarray
    V: np.ndarray
    raw: np.ndarray        # (B, H, N, N), scaled by 1/sqrt(d)
    A: np.ndarray          # (B, H, N, N)
    O: np.ndarray          # (B, N, d) concatenated head outputs before W_o
    X_hat: np.ndarray      # (B, N, d)
    H_pre: np.ndarray      # (B, N, d_f)
    H_act: np.ndarray      # (B, N, d_f)


@dataclass
class ForwardTrace:
    tokens: np.ndarray     # (B, N)
    causal: bool
    X: list[np.ndarray]    # X^0 .. X^L, each (B, N, d)
    layers: list[LayerTrace] = field(default_factory=list)
    logits: np.ndarray | None = None   # (B, N, V)

    @property
    def attention(self) -> list[np.ndarray]:
        return [lt.A for lt in self.layers]

    @property
    def raw_scores(self) -> list[np.ndarray]:
        return [lt.raw for lt in self.layers]


def split_heads(M: np.ndarray, H: int) -> np.ndarray:
    B, N, d = M.shape
    return M.reshape(B, N, H, d // H).transpose(0, 2, 1, 3)


def merge_heads(M: np.ndarray) -> np.ndarray:
    B, H, N, dh = M.shape
    return M.transpose(0, 2, 1, 3).reshape(B, N, H * dh)


def check_tokens(params: ModelParams, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] < 1:
        raise ShapeError(f"tokens must have shape (N,) or (B, N), got {np.shape(tokens)}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("token ids must be integers")
    cfg = params.config
    if t.shape[1] > cfg.max_seq:
        raise ValueError(f"sequence length {t.shape[1]} exceeds max_seq {cfg.max_seq}")
    if t.min() < 0 or t.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    return t.astype(np.int64)


def forward(params: ModelParams, tokens, causal: bool | None = None) -> ForwardTrace:
    """Run the model and keep every intermediate needed for backpropagation.

    ``causal=None`` falls back to ``params.config.causal``.
    """
    t = check_tokens(params, tokens)
    if causal is None:
        causal = params.config.causal
    H = params.config.num_heads
    d = params.config.model_dim
    scale = 1.0 / np.sqrt(d)
    X = params.W_e[t] + params.W_p[: t.shape[1]]
    trace = ForwardTrace(tokens=t, causal=causal, X=[X])
    for lp in params.layers:
        Q = split_heads(X @ lp.W_q, H)
        K = split_heads(X @ lp.W_k, H)
        V = split_heads(X @ lp.W_v, H)
        raw = (Q @ K.transpose(0, 1, 3, 2)) * scale
        A = _masked_softmax(raw, causal)
        O = merge_heads(A @ V)
        X_hat = X + (O @ lp.W_o if lp.W_o is not None else O)
        H_pre = X_hat @ lp.W_1
        H_act = gelu(H_pre)
        X_next = X_hat + H_act @ lp.W_2
        trace.layers.append(LayerTrace(X, Q, K, V, raw, A, O, X_hat, H_pre, H_act))
        trace.X.append(X_next)
        X = X_next
    trace.logits = X @ params.W_u
    return trace
