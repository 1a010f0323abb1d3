"""Independent oracles for the structure of query-key gradients.

With the softmax removed and values equal to the inputs, token ``i`` reads
``o_i = sum_{j in C_i} (x_i^T W x_j) x_j``. Given upstream errors
``delta_i = dL/do_i`` the gradient is a weighted sum of outer products

    dL/dW = sum_i sum_{j in C_i} beta_ij x_i x_j^T,    beta_ij = delta_i . x_j

Everything here is a function of explicit inputs and a seed. Monte Carlo
helpers draw from ``numpy.random.Generator`` streams spawned from one
``SeedSequence`` so results do not depend on call order elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from . import numerics, scores
from .errors import ShapeError

Matrix = np.ndarray

INFINITE_RATIO = math.inf


def _conditioning_mask(conditioning, n: int) -> np.ndarray:
    """Boolean ``(n, n)`` mask from ``"full"``, ``"causal"``, a boolean array or index sets."""
    if isinstance(conditioning, str):
        if conditioning == "full":
            return np.ones((n, n), dtype=bool)
        if conditioning == "causal":
            return np.tril(np.ones((n, n), dtype=bool))
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if isinstance(conditioning, np.ndarray) and conditioning.dtype == bool:
        if conditioning.shape != (n, n):
            raise ShapeError(f"conditioning mask must be {(n, n)}, got {conditioning.shape}")
        return conditioning.copy()
    if len(conditioning) != n:
        raise ShapeError(f"need one conditioning set per token ({n}), got {len(conditioning)}")
    mask = np.zeros((n, n), dtype=bool)
    for i, ctx in enumerate(conditioning):
        for j in ctx:
            if not 0 <= j < n:
                raise IndexError(f"context index {j} of token {i} out of range")
            mask[i, j] = True
    return mask


@dataclass
class Rank1Decomposition:
    betas: Matrix     # (N, N), zero outside the conditioning sets
    factors: Matrix   # (N, d) token embeddings

    def reconstruct(self) -> Matrix:
        out = np.zeros((self.factors.shape[1],) * 2)
        for i, j in zip(*np.nonzero(self.betas)):
            out += self.betas[i, j] * np.outer(self.factors[i], self.factors[j])
        return out

    @property
    def num_terms(self) -> int:
        return int(np.count_nonzero(self.betas))


def rank1_decomposition(X, deltas, conditioning="full") -> Rank1Decomposition:
    X = numerics.as_matrix(X, "X")
    deltas = numerics.as_matrix(deltas, "deltas")
    if deltas.shape != X.shape:
        raise ShapeError(f"deltas shape {deltas.shape} does not match X shape {X.shape}")
    mask = _conditioning_mask(conditioning, X.shape[0])
    return Rank1Decomposition(np.where(mask, deltas @ X.T, 0.0), X)


def linear_attention_grad_paths(X, wqk, deltas, conditioning="full") -> tuple[Matrix, Matrix]:
    """Both evaluations of the softmax-free gradient: ``(matrix form, explicit sum)``.

    The gradient is linear in the scores, so ``wqk`` only fixes the shape.
    """
    X = numerics.as_matrix(X, "X")
    wqk = numerics.require_square(wqk, "wqk")
    if wqk.shape[0] != X.shape[1]:
        raise ShapeError(f"wqk is {wqk.shape} but tokens have dimension {X.shape[1]}")
    dec = rank1_decomposition(X, deltas, conditioning)
    matrix_form = X.T @ dec.betas @ X
    return matrix_form, dec.reconstruct()


def linear_attention_grad(X, wqk, deltas, conditioning="full", rtol: float = 1e-12) -> Matrix:
    """``dL/dW_qk`` for softmax-free attention; raises if the two evaluation paths disagree."""
    a, b = linear_attention_grad_paths(X, wqk, deltas, conditioning)
    scale = max(numerics.frobenius_norm(a), numerics.frobenius_norm(b))
    if scale > 0 and numerics.frobenius_norm(a - b) > rtol * scale:
        raise ArithmeticError("matrix-form and rank-1-sum gradients disagree")
    return a


def _weighted_sum(terms) -> tuple[np.ndarray | None, int]:
    total = None
    for beta, x in terms:
        v = beta * numerics.as_vector(x, "x")
        total = v if total is None else total + v
    return total, 0 if total is None else total.shape[0]


def context_update(x_star, predicted) -> Matrix:
    """Update from ``x_star`` acting as context: ``(sum beta_i x_i) x_star^T``.

    Every column is a multiple of the same vector. An empty ``predicted`` list
    gives the zero matrix.
    """
    x_star = numerics.as_vector(x_star, "x_star")
    total, dim = _weighted_sum(predicted)
    if total is None:
        return np.zeros((x_star.shape[0], x_star.shape[0]))
    if dim != x_star.shape[0]:
        raise ShapeError(f"vectors have dimension {dim}, x_star has {x_star.shape[0]}")
    return np.outer(total, x_star)


def prediction_update(x_star, context) -> Matrix:
    """Update from ``x_star`` being predicted: ``x_star (sum beta_j x_j)^T``.

    Every row is a multiple of the same vector.
    """
    x_star = numerics.as_vector(x_star, "x_star")
    total, dim = _weighted_sum(context)
    if total is None:
        return np.zeros((x_star.shape[0], x_star.shape[0]))
    if dim != x_star.shape[0]:
        raise ShapeError(f"vectors have dimension {dim}, x_star has {x_star.shape[0]}")
    return np.outer(x_star, total)


# --------------------------------------------------------------------------
# expected column/row norm ratios


@dataclass(frozen=True)
class EmbeddingDistribution:
    """Zero-mean Gaussian embeddings with covariance ``cov``."""
    cov: Matrix

    def __post_init__(self):
        cov = numerics.require_square(self.cov, "cov")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "cov", cov)

    @classmethod
    def isotropic(cls, dim: int, variance: float = 1.0) -> "EmbeddingDistribution":
        return cls(variance * np.eye(dim))

    @classmethod
    def diagonal(cls, variances) -> "EmbeddingDistribution":
        return cls(np.diag(np.asarray(variances, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> Matrix:
        # eigh square root tolerates singular covariances, unlike cholesky
        w, v = np.linalg.eigh(self.cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return rng.standard_normal((size, self.dim)) @ root.T


@dataclass
class NormRatioResult:
    role: str
    trials: int
    per_pair: Matrix           # (d, d) estimate of E|col k|^2 / E|row m|^2 at [k, m]
    pooled: np.ndarray         # (d,) estimate pooled over the index the closed form ignores
    closed_form: Matrix        # (d, d)
    closed_form_pooled: np.ndarray

    def max_rel_error(self, pooled: bool = True) -> float:
        est, ref = (self.pooled, self.closed_form_pooled) if pooled else (self.per_pair, self.closed_form)
        return float(np.max(np.abs(est / ref - 1.0)))


def norm_ratio_closed_form(cov, role: str = "context") -> Matrix:
    """``[k, m]`` entry: closed-form ``E|dW[:, k]|^2 / E|dW[m, :]|^2``.

    Context role: ``Tr(cov) / (d cov_mm)``. Prediction role: ``d cov_kk / Tr(cov)``.
    """
    cov = numerics.require_square(cov, "cov")
    d = cov.shape[0]
    tr = float(np.trace(cov))
    if tr <= 0:
        raise ValueError("covariance has zero trace")
    diag = np.diag(cov)
    if role == "context":
        return np.broadcast_to(tr / (d * diag)[None, :], (d, d)).copy()
    if role == "prediction":
        return np.broadcast_to((d * diag / tr)[:, None], (d, d)).copy()
    raise ValueError(f"role must be 'context' or 'prediction', got {role!r}")


def norm_ratio_mc(dist: EmbeddingDistribution, betas: Sequence[float], trials: int,
                  seed: int = 0, role: str = "context") -> NormRatioResult:
    """Monte Carlo estimate of the column/row squared-norm ratio of a token's update.

    Each trial draws the partner tokens from ``dist`` and the token ``x_star``
    itself from a unit isotropic Gaussian, builds the update with
    :func:`context_update` (or :func:`prediction_update`) semantics and
    accumulates squared column and row norms. The ratio of the accumulated
    means is compared with :func:`norm_ratio_closed_form`.

    ``pooled`` averages the numerator over all columns in the context role
    (the closed form does not depend on ``k``) and the denominator over all
    rows in the prediction role.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ValueError("betas must be a non-empty list of scalars")
    closed = norm_ratio_closed_form(dist.cov, role)
    d = dist.dim
    rng_partner, rng_star = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    col_sq = np.zeros(d)
    row_sq = np.zeros(d)
    chunk = 4096
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        partners = dist.sample(rng_partner, n * betas.size).reshape(n, betas.size, d)
        y = np.einsum("t,ntd->nd", betas, partners)
        x_star = rng_star.standard_normal((n, d))
        # context: dW = y x*^T ; prediction: dW = x* y^T
        left, right = (y, x_star) if role == "context" else (x_star, y)
        # |dW[:, k]|^2 = right_k^2 |left|^2 and |dW[m, :]|^2 = left_m^2 |right|^2
        col_sq += np.einsum("nk,n->k", right ** 2, np.sum(left ** 2, axis=1))
        row_sq += np.einsum("nm,n->m", left ** 2, np.sum(right ** 2, axis=1))
        done += n

    per_pair = col_sq[:, None] / row_sq[None, :]
    if role == "context":
        pooled = col_sq.mean() / row_sq
        closed_pooled = closed[0, :]
    else:
        pooled = col_sq / row_sq.mean()
        closed_pooled = closed[:, 0]
    return NormRatioResult(role, trials, per_pair, pooled, closed, closed_pooled.copy())


# --------------------------------------------------------------------------
# counting how often a token is context versus prediction


@dataclass(frozen=True)
class CountingRatio:
    ratio: float            # INFINITE_RATIO when a token is never predicted with context
    mean_position: float    # 1-based expected position
    mean_position_form: float      # (N - mu) / (mu - 1), same sentinel rule


def counting_ratio(position_probs, mode: str = "autoregressive") -> CountingRatio:
    """Expected (times used as context) / (times predicted from context).

    ``position_probs[k-1]`` is the probability that position ``k`` holds the
    token. Under the autoregressive objective a token at position ``k`` is
    context for ``N - k`` predictions and is predicted from ``k - 1`` tokens.
    Bidirectionally both counts coincide and the ratio is exactly 1.
    A zero denominator yields :data:`INFINITE_RATIO` instead of raising.
    """
    p = numerics.as_vector(position_probs, "position_probs")
    if p.size == 0 or np.any(p < 0) or not np.any(p > 0):
        raise ValueError("position probabilities must be nonnegative and not all zero")
    n = p.size
    k = np.arange(1, n + 1)
    mu = float(np.sum(k * p) / np.sum(p))
    if mode in ("bidirectional", "mlm"):
        return CountingRatio(1.0, mu, 1.0)
    if mode not in ("autoregressive", "ar"):
        raise ValueError(f"unknown mode {mode!r}")
    num = float(np.sum((n - k) * p))
    den = float(np.sum((k - 1) * p))
    ratio = num / den if den > 0 else INFINITE_RATIO
    by_mean = (n - mu) / (mu - 1) if mu > 1 else INFINITE_RATIO
    return CountingRatio(ratio, mu, by_mean)


def counting_ratio_mc(position_probs, mode: str = "autoregressive", samples: int = 100_000,
                      seed: int = 0, mask_prob: float = 0.15) -> float:
    """Count context and prediction pairs over sampled sequences.

    Position ``k`` of each sampled sequence holds the token independently with
    probability ``position_probs[k-1]``. Autoregressively an occurrence at
    ``k`` contributes ``N - k`` context pairs and ``k - 1`` prediction pairs.
    Bidirectionally each position is masked with ``mask_prob``; a masked
    occurrence is predicted from every unmasked position and an unmasked one
    is context for every masked position.
    """
    p = numerics.as_vector(position_probs, "position_probs")
    if np.any(p < 0) or np.any(p > 1) or not np.any(p > 0):
        raise ValueError("position probabilities must lie in [0, 1] and not all be zero")
    n = p.size
    rng = np.random.default_rng(seed)
    k = np.arange(1, n + 1)
    ctx = pred = 0.0
    chunk = max(1, 2_000_000 // n)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        present = rng.random((m, n)) < p
        if mode in ("autoregressive", "ar"):
            ctx += float(np.sum(present * (n - k)))
            pred += float(np.sum(present * (k - 1)))
        elif mode in ("bidirectional", "mlm"):
            masked = rng.random((m, n)) < mask_prob
            n_masked = masked.sum(axis=1, keepdims=True)
            n_unmasked = n - n_masked
            ctx += float(np.sum((present & ~masked) * n_masked))
            pred += float(np.sum((present & masked) * n_unmasked))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        done += m
    return ctx / pred if pred > 0 else INFINITE_RATIO


def symmetric_pair_fraction(n: int, mask_prob: float, seed: int = 0) -> tuple[float, float, float]:
    """Share of bidirectional updates that come in mirrored pairs.

    A masked position ``i`` receives updates from every other position. A pair
    ``(i, j)`` has its mirror ``(j, i)`` exactly when both are masked. Returns
    ``(counted, exact, approximation)`` where ``counted`` enumerates the pairs
    of one sampled mask with ``round(mask_prob * n)`` positions, ``exact`` is
    ``m (m - 1) / (m (n - m))`` and the approximation is ``m / (n - m)``.
    """
    m = int(round(mask_prob * n))
    if not 0 < m < n:
        raise ValueError("mask must select at least one and fewer than all positions")
    rng = np.random.default_rng(seed)
    masked = np.zeros(n, dtype=bool)
    masked[rng.choice(n, size=m, replace=False)] = True
    # updates: (i, j) with i masked, j != i
    pairs = masked[:, None] & ~np.eye(n, dtype=bool)
    mirrored = int(np.sum(pairs & pairs.T))
    one_sided = int(np.sum(pairs & ~pairs.T))
    return mirrored / one_sided, (m * (m - 1)) / (m * (n - m)), m / (n - m)


# --------------------------------------------------------------------------
# tail probabilities and pairwise symmetry


def tail_bound(mu: float, sigma_a: float, sigma_b: float) -> float:
    """Threshold above which the wider distribution has the heavier tail."""
    return math.sqrt(sigma_a * sigma_b) - mu


def tail_prob_check(sampler_a: Callable[[np.random.Generator, int], np.ndarray] | None,
                    sampler_b: Callable[[np.random.Generator, int], np.ndarray] | None,
                    mu: float, sigma_a: float, sigma_b: float, z: float,
                    trials: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Empirical ``(Pr[X_a > z], Pr[X_b > z])``.

    ``None`` samplers default to Gaussians with the given mean and scales.
    Requires ``sigma_a > sigma_b > 0``.
    """
    if not sigma_a > sigma_b > 0:
        raise ValueError(f"need sigma_a > sigma_b > 0, got {sigma_a}, {sigma_b}")
    if sampler_a is None:
        sampler_a = lambda rng, n: rng.normal(mu, sigma_a, n)  # noqa: E731
    if sampler_b is None:
        sampler_b = lambda rng, n: rng.normal(mu, sigma_b, n)  # noqa: E731
    rng_a, rng_b = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    a = np.asarray(sampler_a(rng_a, trials))
    b = np.asarray(sampler_b(rng_b, trials))
    return float(np.mean(a > z)), float(np.mean(b > z))


def gaussian_tail(mu: float, sigma: float, z: float) -> float:
    return float(norm.sf(z, loc=mu, scale=sigma))


def pairwise_symmetric_update(beta_ij: float, beta_ji: float, x_i, x_j) -> tuple[Matrix, float]:
    """``beta_ij x_i x_j^T + beta_ji x_j x_i^T`` and its symmetry score."""
    x_i = numerics.as_vector(x_i, "x_i")
    x_j = numerics.as_vector(x_j, "x_j")
    if x_i.shape != x_j.shape:
        raise ShapeError(f"x_i has shape {x_i.shape}, x_j has {x_j.shape}")
    k = np.outer(x_i, x_j)
    update = beta_ij * k + beta_ji * k.T
    return update, scores.symmetry_score(update)


# --------------------------------------------------------------------------
# measurements on a real model


@dataclass(frozen=True)
class BetaAsymmetry:
    sign_agreement: float        # share of mirrored pairs with sign(beta_ij) == sign(beta_ji)
    median_rel_gap: float        # median of | |b_ij| - |b_ji| | / (|b_ij| + |b_ji|)
    num_pairs: int


def beta_matrix(delta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``beta[..., i, j] = delta_i . x_j`` for batched ``(B, N, d)`` inputs."""
    return delta @ np.swapaxes(X, -1, -2)


def beta_asymmetry(hooks, trace, layer: int, predicted: np.ndarray) -> BetaAsymmetry:
    """Compare ``beta_ij`` with ``beta_ji`` over pairs of predicted positions.

    ``hooks`` and ``trace`` come from ``training.loss_and_grads(...,
    return_hooks=True)``; ``predicted`` is the ``(B, N)`` boolean mask of
    positions carrying a target. Only pairs where both positions are
    predicted have a mirrored update.
    """
    beta = beta_matrix(hooks[layer].dO, trace.layers[layer].X_in)
    b_ij, b_ji = [], []
    for b in range(beta.shape[0]):
        idx = np.flatnonzero(predicted[b])
        if idx.size < 2:
            continue
        sub = beta[b][np.ix_(idx, idx)]
        iu = np.triu_indices(idx.size, k=1)
        b_ij.append(sub[iu])
        b_ji.append(sub.T[iu])
    if not b_ij:
        return BetaAsymmetry(float("nan"), float("nan"), 0)
    u, v = np.concatenate(b_ij), np.concatenate(b_ji)
    agree = float(np.mean(np.sign(u) == np.sign(v)))
    denom = np.abs(u) + np.abs(v)
    ok = denom > 0
    gap = np.abs(np.abs(u) - np.abs(v))[ok] / denom[ok]
    return BetaAsymmetry(agree, float(np.median(gap)) if gap.size else 0.0, int(u.size))


def true_wqk_gradient(hooks, trace, layer: int, batch_index: int = 0) -> Matrix:
    """Softmax-inclusive ``dL/dW_qk`` of one sequence: ``sum_h X^T dS_h X / sqrt(d)``."""
    X = trace.layers[layer].X_in[batch_index]
    dS = hooks[layer].dS[batch_index].sum(axis=0)
    return X.T @ dS @ X / np.sqrt(X.shape[1])


def true_gradient_rank(hooks, trace, layer: int, batch_index: int = 0,
                       rtol: float = 1e-9) -> int:
    return numerics.numerical_rank(true_wqk_gradient(hooks, trace, layer, batch_index), rtol)
