"""Linear relative-attribute ranker.

The constrained program with squared slacks on ordered (O) and similar (M)
pairs is solved in its equivalent unconstrained form

    F(w) = 0.5 |w|^2 + C sum_O max(0, 1 - w.(x_i - x_j))^2 + C sum_M (w.(x_i - x_j))^2

by full-batch gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataset import Corpus, Emotion, PairSamplingConfig, PairSet, class_pair_sets


class RankerDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class RankerOptions:
    max_iterations: int = 5000
    gradient_tolerance: float = 1e-8
    step_rule: str = "backtracking"  # backtracking | fixed
    seed: int = 0
    step_size: float | None = None  # fixed rule only; None -> 1 / Lipschitz bound

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.step_rule not in ("backtracking", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass(frozen=True)
class RankingModel:
    weights: np.ndarray
    c_tradeoff: float
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if not self.c_tradeoff > 0:
            raise ValueError("C must be positive")

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])

    def to_json(self) -> dict:
        return {
            "weights": [float(v) for v in self.weights],
            "c": float(self.c_tradeoff),
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RankingModel":
        return cls(np.array(obj["weights"], dtype=np.float64), float(obj["c"]),
                   dict(obj.get("diagnostics", {})))


def score(model: RankingModel, features) -> np.ndarray | float:
    """w.x for a vector, or row-wise for a matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match model dimension {model.dim}")
    out = x @ model.weights
    return float(out) if np.ndim(out) == 0 else out


def _differences(corpus: Corpus, pairs: PairSet) -> tuple[np.ndarray, np.ndarray]:
    x = corpus.features
    n = len(corpus)
    for arr in (pairs.ordered_pairs, pairs.similar_pairs):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise IndexError("pair index outside the corpus")
    d_o = x[pairs.ordered_pairs[:, 0]] - x[pairs.ordered_pairs[:, 1]]
    d_m = x[pairs.similar_pairs[:, 0]] - x[pairs.similar_pairs[:, 1]]
    return d_o.reshape(-1, corpus.feature_dim), d_m.reshape(-1, corpus.feature_dim)


def _objective_grad(w, d_o, d_m, c):
    slack = np.maximum(0.0, 1.0 - d_o @ w)
    gap = d_m @ w
    f = 0.5 * float(w @ w) + c * float(slack @ slack) + c * float(gap @ gap)
    g = w - 2.0 * c * (d_o.T @ slack) + 2.0 * c * (d_m.T @ gap)
    return f, g


def objective(model: RankingModel, corpus: Corpus, pairs: PairSet) -> float:
    if model.dim != corpus.feature_dim:
        raise ValueError("model and corpus dimensions differ")
    d_o, d_m = _differences(corpus, pairs)
    return _objective_grad(model.weights, d_o, d_m, model.c_tradeoff)[0]


def objective_gradient(weights: np.ndarray, corpus: Corpus, pairs: PairSet, c: float) -> np.ndarray:
    d_o, d_m = _differences(corpus, pairs)
    return _objective_grad(np.asarray(weights, dtype=np.float64), d_o, d_m, c)[1]


def lipschitz_bound(d_o: np.ndarray, d_m: np.ndarray, c: float) -> float:
    """Upper bound on the gradient's Lipschitz constant."""
    stacked = np.vstack([d_o, d_m])
    top = np.linalg.norm(stacked, 2) ** 2 if stacked.size else 0.0
    return 1.0 + 2.0 * c * top


def _diagnostics(w, d_o, d_m, f, iterations, grad_norm, converged) -> dict:
    margins = d_o @ w
    gaps = d_m @ w
    return {
        "final_objective": float(f),
        "o_violation_rate": float(np.mean(margins < 1.0)) if len(margins) else 0.0,
        "m_mean_abs_gap": float(np.mean(np.abs(gaps))) if len(gaps) else 0.0,
        "iterations": int(iterations),
        "gradient_norm": float(grad_norm),
        "converged": bool(converged),
        "n_ordered_pairs": int(len(d_o)),
        "n_similar_pairs": int(len(d_m)),
    }


def train_ranker(corpus: Corpus, pairs: PairSet, C: float = 1.0,
                 opts: RankerOptions | None = None) -> RankingModel:
    opts = opts or RankerOptions()
    if not C > 0:
        raise ValueError("C must be positive")
    if pairs.empty:
        raise ValueError("pair set is empty")
    d_o, d_m = _differences(corpus, pairs)
    rng = np.random.default_rng(opts.seed)
    w = 0.01 * rng.standard_normal(corpus.feature_dim)
    f, g = _objective_grad(w, d_o, d_m, C)
    if not math.isfinite(f):
        raise RankerDivergence("non-finite objective at iteration 0")

    lip = lipschitz_bound(d_o, d_m, C)
    fixed_step = opts.step_size if opts.step_size is not None else 1.0 / lip
    step = 1.0 / lip
    gnorm = float(np.linalg.norm(g))
    it = 0
    while it < opts.max_iterations and gnorm > opts.gradient_tolerance:
        it += 1
        if opts.step_rule == "fixed":
            w_new = w - fixed_step * g
            f_new, g_new = _objective_grad(w_new, d_o, d_m, C)
        else:
            # Armijo backtracking from a Barzilai-Borwein trial step.
            t = step
            while True:
                w_new = w - t * g
                f_new, g_new = _objective_grad(w_new, d_o, d_m, C)
                if math.isfinite(f_new) and f_new <= f - 1e-4 * t * gnorm * gnorm:
                    break
                t *= 0.5
                if t < 1e-300:
                    break
            if not f_new <= f or np.array_equal(w_new, w):
                # no descent left in float64; the gradient tolerance is out of reach
                break
            s = w_new - w
            y = g_new - g
            sy = float(s @ y)
            step = float(s @ s) / sy if sy > 0 else t
        if not math.isfinite(f_new):
            raise RankerDivergence(f"non-finite objective at iteration {it}")
        w, f, g = w_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))

    diag = _diagnostics(w, d_o, d_m, f, it, gnorm, gnorm <= opts.gradient_tolerance)
    return RankingModel(w, C, diag)


def train_per_class(corpus: Corpus, C: float = 1.0, opts: RankerOptions | None = None,
                    pair_config: PairSamplingConfig | None = None) -> dict[Emotion, RankingModel]:
    """One ranker per non-neutral class, each against the Neutral utterances."""
    models = {}
    for emo in corpus.emotion_classes:
        pairs = class_pair_sets(corpus, emo, pair_config)
        models[emo] = train_ranker(corpus, pairs, C, opts)
    return models
