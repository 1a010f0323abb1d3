"""Property suites behind ``attention-geometry verify``.

Each suite returns a list of :class:`Check` records. A check passes when its
``margin`` is non-negative; margins are reported so near misses are visible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import gradlab, numerics, scores, training
from .transformer import ModelConfig, init_params

SUITES = ("scores", "gradients", "ratios", "counting", "tails")


@dataclass
class Check:
    suite: str
    name: str
    value: float
    threshold: float
    margin: float

    @property
    def passed(self) -> bool:
        return bool(self.margin >= 0)

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _at_most(suite, name, value, limit) -> Check:
    return Check(suite, name, float(value), float(limit), float(limit - value))


def _at_least(suite, name, value, limit) -> Check:
    return Check(suite, name, float(value), float(limit), float(value - limit))


def suite_scores(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    a = rng.standard_normal((16, 16))
    out.append(_at_most("scores", "symmetric_is_one", abs(scores.symmetry_score(a + a.T) - 1), 1e-12))
    out.append(_at_most("scores", "skew_is_minus_one", abs(scores.symmetry_score(a - a.T) + 1), 1e-12))
    row = np.ones((8, 8))
    row[3] *= 10.0
    out.append(_at_most("scores", "dominant_row_is_plus_one",
                        abs(scores.directionality_score(row) - 1), 1e-12))
    worst_bound = worst_flip = worst_trace = 0.0
    for _ in range(100):
        m = rng.standard_normal((12, 12))
        s, d = scores.symmetry_score(m), scores.directionality_score(m)
        worst_bound = max(worst_bound, abs(s) - 1, abs(d) - 1)
        worst_flip = max(worst_flip, abs(scores.directionality_score(m.T) + d))
        worst_trace = max(worst_trace, abs(scores.symmetry_score_trace(m) - s))
    out.append(_at_most("scores", "scores_within_unit_interval", worst_bound, 0.0))
    out.append(_at_most("scores", "transpose_flips_d", worst_flip, 1e-12))
    out.append(_at_most("scores", "trace_form_agrees", worst_trace, 1e-12))
    return out


def suite_gradients(seed: int) -> list[Check]:
    out = []
    cfg = ModelConfig(num_layers=2, num_heads=2, model_dim=16, ff_dim=32, vocab_size=20, max_seq=8)
    params = init_params(cfg, "iid", sigma=0.3, seed=seed)
    rng = np.random.default_rng(seed)
    seqs = rng.integers(0, cfg.vocab_size - 1, size=(2, cfg.max_seq))
    for objective in ("autoregressive", "bidirectional"):
        batch = training.make_objective_batch(seqs, objective, 0.3, cfg.vocab_size - 1,
                                              np.random.default_rng(seed + 1))
        worst = max(training.gradient_check(params, batch).values())
        out.append(_at_most("gradients", f"finite_difference_{objective}", worst, 1e-5))

    worst_path = 0.0
    worst_rank_excess = -np.inf
    for _ in range(20):
        n, d = int(rng.integers(2, 9)), int(rng.integers(4, 13))
        X = rng.standard_normal((n, d))
        deltas = rng.standard_normal((n, d))
        a, b = gradlab.linear_attention_grad_paths(X, np.zeros((d, d)), deltas)
        worst_path = max(worst_path, np.linalg.norm(a - b) / np.linalg.norm(a))
        worst_rank_excess = max(worst_rank_excess, numerics.numerical_rank(a) - n)
    out.append(_at_most("gradients", "rank1_dual_path", worst_path, 1e-12))
    out.append(_at_most("gradients", "rank_at_most_n", worst_rank_excess, 0))

    x, y = rng.standard_normal(5), rng.standard_normal(5)
    dual = np.abs(gradlab.prediction_update(x, [(1.0, y)]) - gradlab.context_update(x, [(1.0, y)]).T).max()
    out.append(_at_most("gradients", "context_prediction_transpose", dual, 1e-15))
    return out


def suite_ratios(seed: int) -> list[Check]:
    out = []
    aniso = gradlab.EmbeddingDistribution.diagonal([4.0, 1.0, 1.0, 1.0, 1.0])
    res = gradlab.norm_ratio_mc(aniso, [1.0], 10_000, seed)
    err = np.max(np.abs(res.pooled[1:] / 1.6 - 1.0))
    out.append(_at_most("ratios", "anisotropic_context_within_5pct", err, 0.05))
    iso = gradlab.norm_ratio_mc(gradlab.EmbeddingDistribution.isotropic(5), [1.0], 100_000, seed)
    out.append(_at_most("ratios", "isotropic_within_2pct", iso.max_rel_error(), 0.02))
    pred = gradlab.norm_ratio_mc(aniso, [1.0], 10_000, seed, role="prediction")
    out.append(_at_most("ratios", "prediction_reciprocal_within_5pct", pred.max_rel_error(), 0.05))
    return out


def suite_counting(seed: int) -> list[Check]:
    out = []
    rng = np.random.default_rng(seed)
    worst_bi = max(abs(gradlab.counting_ratio(rng.random(int(rng.integers(2, 50))),
                                              "bidirectional").ratio - 1.0) for _ in range(20))
    out.append(_at_most("counting", "bidirectional_exactly_one", worst_bi, 0.0))
    uniform = gradlab.counting_ratio(np.full(32, 0.5), "autoregressive")
    out.append(_at_most("counting", "uniform_autoregressive_one", abs(uniform.ratio - 1.0), 1e-12))
    probs = rng.random(16) * 0.5
    closed = gradlab.counting_ratio(probs, "autoregressive")
    mc = gradlab.counting_ratio_mc(probs, "autoregressive", 100_000, seed)
    out.append(_at_most("counting", "autoregressive_mc_within_2pct", abs(mc / closed.mean_position_form - 1), 0.02))
    point = np.zeros(10)
    point[1] = 1.0
    out.append(_at_most("counting", "position_two_of_ten_is_8",
                        abs(gradlab.counting_ratio(point).ratio - 8.0), 1e-12))
    counted, exact, _ = gradlab.symmetric_pair_fraction(1000, 0.2, seed)
    out.append(_at_most("counting", "symmetric_pair_fraction_exact", abs(counted - exact), 1e-12))
    return out


def suite_tails(seed: int) -> list[Check]:
    out = []
    for z in (1.5, 2.0, 3.0):
        p_a, p_b = gradlab.tail_prob_check(None, None, 0.0, 2.0, 1.0, z, 100_000, seed)
        out.append(_at_least("tails", f"wider_tail_heavier_at_{z}", p_a - p_b, 0.0))
    return out


_RUNNERS = {"scores": suite_scores, "gradients": suite_gradients, "ratios": suite_ratios,
            "counting": suite_counting, "tails": suite_tails}


def run(suite: str = "all", seed: int = 0) -> list[Check]:
    if suite == "all":
        names = SUITES
    elif suite in _RUNNERS:
        names = (suite,)
    else:
        raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)} or all")
    checks = []
    for name in names:
        checks.extend(_RUNNERS[name](seed))
    return checks


def summary(checks: list[Check], suite: str, seed: int) -> dict:
    return {"suite": suite, "seed": seed,
            "passed": all(c.passed for c in checks),
            "checks": [c.to_dict() for c in checks]}
