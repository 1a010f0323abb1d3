"""Symmetry and directionality scores for square matrices.

Sign conventions: ``s = +1`` for a symmetric matrix and ``-1`` for a
skew-symmetric one. ``d > 0`` means a few high-norm *rows* dominate, ``d < 0``
means a few high-norm *columns* dominate. "More directional" in the
autoregressive sense therefore means *more negative* ``d``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics
from .errors import EmptyInputError, UndefinedScoreError

DEFAULT_GAMMA = 2.0


def symmetry_score(m) -> float:
    """``(|M_s|_F^2 - |M_n|_F^2) / |M|_F^2`` for a non-zero square matrix.

    ``M_s`` and ``M_n`` are the symmetric and skew-symmetric parts. Their
    squared norms add up to ``|M|_F^2``, so the score lies in ``[-1, 1]``.
    """
    m = numerics.require_square(m)
    total = float(np.sum(m * m))
    if total == 0.0:
        raise UndefinedScoreError("symmetry score of the zero matrix is undefined")
    sym, skew = numerics.toeplitz_split(m)
    return (float(np.sum(sym * sym)) - float(np.sum(skew * skew))) / total


def symmetry_score_trace(m) -> float:
    """Equivalent closed form ``Tr(MM) / |M|_F^2``."""
    m = numerics.require_square(m)
    total = float(np.sum(m * m))
    if total == 0.0:
        raise UndefinedScoreError("symmetry score of the zero matrix is undefined")
    # Tr(MM) = sum_ij M_ij M_ji
    return float(np.sum(m * m.T)) / total


def _outlier_mass(norms: np.ndarray, gamma: float) -> float:
    threshold = norms.mean() + gamma * norms.std()
    return float(norms[norms > threshold].sum())


def outlier_masses(m, gamma: float = DEFAULT_GAMMA) -> tuple[float, float]:
    """Return ``(r_bar, c_bar)``: summed norms of outlier rows and columns.

    Outliers are strictly above ``mean + gamma * std`` of the respective norm
    distribution (population std).
    """
    m = numerics.require_square(m)
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return (_outlier_mass(numerics.row_norms(m), gamma),
            _outlier_mass(numerics.col_norms(m), gamma))


def directionality_score(m, gamma: float = DEFAULT_GAMMA) -> float:
    r_bar, c_bar = outlier_masses(m, gamma)
    if r_bar == 0.0 and c_bar == 0.0:
        return 0.0
    return (r_bar - c_bar) / (r_bar + c_bar)


@dataclass(frozen=True)
class LayerScore:
    layer: int
    s: float
    d: float


@dataclass
class ScoreReport:
    per_layer: list[LayerScore]
    median_s: float
    iqr_s_low: float
    iqr_s_high: float
    median_d: float
    iqr_d_low: float
    iqr_d_high: float
    gamma: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_layer"] = [asdict(p) for p in self.per_layer]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreReport":
        data = dict(data)
        data["per_layer"] = [LayerScore(**p) for p in data["per_layer"]]
        return cls(**data)


def _quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    q25, q50, q75 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75],
                                  method="linear")
    return float(q50), float(q25), float(q75)


def summarize_scores(per_layer: list[LayerScore], gamma: float) -> ScoreReport:
    if not per_layer:
        raise EmptyInputError("no layers to summarize")
    med_s, lo_s, hi_s = _quartiles([p.s for p in per_layer])
    med_d, lo_d, hi_d = _quartiles([p.d for p in per_layer])
    return ScoreReport(per_layer, med_s, lo_s, hi_s, med_d, lo_d, hi_d, gamma)


def layer_summary(wqk_per_layer: Sequence, gamma: float = DEFAULT_GAMMA) -> ScoreReport:
    """Score each layer's matrix and aggregate with median and 25th/75th percentiles."""
    if len(wqk_per_layer) == 0:
        raise EmptyInputError("layer_summary needs at least one matrix")
    per_layer = [LayerScore(i, symmetry_score(m), directionality_score(m, gamma))
                 for i, m in enumerate(wqk_per_layer)]
    return summarize_scores(per_layer, gamma)
