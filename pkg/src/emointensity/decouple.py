"""Speaker/emotion decoupling losses: vCLUB mutual-information bound, speaker
consistency, reconstruction, and their weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nets import Adam, DenseNet, Params, params_from_json, params_to_json

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.1  # mutual information
    alpha2: float = 0.1  # speaker consistency

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")


class VClubModel:
    """Diagonal Gaussian q(i_e | i_s) with mean and clamped log-variance from one MLP."""

    def __init__(self, speaker_dim: int, emb_dim: int, hidden: int = 64, seed: int = 0,
                 net: DenseNet | None = None):
        self.speaker_dim, self.emb_dim, self.hidden = speaker_dim, emb_dim, hidden
        self.net = net or DenseNet([speaker_dim, hidden, 2 * emb_dim], ["relu", "identity"], seed=seed)
        if self.net.sizes[0] != speaker_dim or self.net.sizes[-1] != 2 * emb_dim:
            raise ValueError("network widths do not match (speaker_dim, 2 * emb_dim)")

    @property
    def params(self) -> Params:
        return self.net.params

    def copy(self) -> "VClubModel":
        return VClubModel.from_json(self.to_json())

    def _check(self, i_s, i_e=None):
        s = np.atleast_2d(np.asarray(i_s, dtype=np.float64))
        if s.shape[1] != self.speaker_dim:
            raise ValueError(f"speaker width {s.shape[1]} != {self.speaker_dim}")
        if i_e is None:
            return s, None
        e = np.atleast_2d(np.asarray(i_e, dtype=np.float64))
        if e.shape[1] != self.emb_dim:
            raise ValueError(f"emotion width {e.shape[1]} != {self.emb_dim}")
        return s, e

    def _heads(self, s):
        out, cache = self.net.forward(s)
        mu = out[:, :self.emb_dim]
        raw = out[:, self.emb_dim:]
        logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar, raw, cache

    def moments(self, i_s) -> tuple[np.ndarray, np.ndarray]:
        s, _ = self._check(i_s)
        mu, logvar, _, _ = self._heads(s)
        return mu, logvar

    def logprob(self, i_s, i_e) -> np.ndarray:
        """log q(i_e[n] | i_s[n]) per row."""
        s, e = self._check(i_s, i_e)
        if len(s) != len(e):
            raise ValueError("i_s and i_e must have the same number of rows")
        mu, logvar, _, _ = self._heads(s)
        return _gauss_logpdf(e, mu, logvar)

    def logprob_matrix(self, i_s, i_e, chunk: int = 64) -> np.ndarray:
        """M[n, k] = log q(i_e[k] | i_s[n])."""
        s, e = self._check(i_s, i_e)
        mu, logvar, _, _ = self._heads(s)
        out = np.empty((len(s), len(e)))
        for lo in range(0, len(s), chunk):
            m = mu[lo:lo + chunk, None, :]
            lv = logvar[lo:lo + chunk, None, :]
            out[lo:lo + chunk] = _gauss_logpdf(e[None, :, :], m, lv)
        return out

    def nll_and_grad(self, i_s, i_e) -> tuple[float, Params]:
        """Mean negative log-likelihood over positive pairs and its parameter gradient."""
        s, e = self._check(i_s, i_e)
        mu, logvar, raw, cache = self._heads(s)
        n = len(s)
        inv = np.exp(-logvar)
        diff = e - mu
        lp = _gauss_logpdf(e, mu, logvar)
        nll = float(-np.mean(lp))
        dmu = -(diff * inv) / n
        dlogvar = 0.5 * (1.0 - diff * diff * inv) / n
        dlogvar = np.where((raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX), dlogvar, 0.0)
        grads, _ = self.net.backward(cache, np.concatenate([dmu, dlogvar], axis=1))
        return nll, grads

    def to_json(self) -> dict:
        return {"speaker_dim": self.speaker_dim, "emb_dim": self.emb_dim, "hidden": self.hidden,
                "net": self.net.to_json()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "VClubModel":
        return cls(obj["speaker_dim"], obj["emb_dim"], obj["hidden"], net=DenseNet.from_json(obj["net"]))


def _gauss_logpdf(x, mu, logvar) -> np.ndarray:
    d = x - mu
    return -0.5 * np.sum(_LOG_2PI + logvar + d * d * np.exp(-logvar), axis=-1)


def qtheta_logprob(model: VClubModel, i_s, i_e) -> float:
    s = np.asarray(i_s, dtype=np.float64)
    e = np.asarray(i_e, dtype=np.float64)
    if s.ndim != 1 or e.ndim != 1:
        raise ValueError("qtheta_logprob takes single embeddings")
    return float(model.logprob(s[None], e[None])[0])


@dataclass(frozen=True)
class VariationalOptions:
    steps: int = 500
    batch_size: int = 512
    lr: float = 1e-2
    seed: int = 0


@dataclass
class VariationalHistory:
    mean_logprob: list[float] = field(default_factory=list)


def train_variational(model: VClubModel, i_s, i_e, opts: VariationalOptions | None = None
                      ) -> tuple[VClubModel, VariationalHistory]:
    """Maximize mean log q over positive pairs with minibatch Adam; returns a trained copy."""
    opts = opts or VariationalOptions()
    s = np.atleast_2d(np.asarray(i_s, dtype=np.float64))
    e = np.atleast_2d(np.asarray(i_e, dtype=np.float64))
    if len(s) == 0 or len(s) != len(e):
        raise ValueError("need a non-empty set of (i_s, i_e) pairs of equal length")
    trained = model.copy()
    opt = Adam(lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    hist = VariationalHistory()
    bs = min(opts.batch_size, len(s))
    for step in range(opts.steps):
        idx = rng.choice(len(s), size=bs, replace=False) if bs < len(s) else np.arange(len(s))
        nll, grads = trained.nll_and_grad(s[idx], e[idx])
        if not math.isfinite(nll):
            raise FloatingPointError(f"non-finite variational loss at step {step}")
        hist.mean_logprob.append(-nll)
        opt.step(trained.params, grads)
    return trained, hist


def mi_loss(model: VClubModel, i_s, i_e) -> float:
    """Sampled vCLUB bound: (1/N^2) sum_n sum_k [log q(e_n|s_n) - log q(e_k|s_n)]."""
    s = np.atleast_2d(np.asarray(i_s, dtype=np.float64))
    if len(s) < 2:
        raise ValueError("mi_loss needs a batch of at least two pairs")
    lq = model.logprob_matrix(i_s, i_e)
    diff = np.diag(lq)[:, None] - lq
    # Symmetrizing leaves the sum unchanged and cancels exactly when q ignores i_s.
    return float(0.5 * np.mean(diff + diff.T))


def speaker_consistency_loss(i_s_hat, i_s) -> float:
    a = np.atleast_2d(np.asarray(i_s_hat, dtype=np.float64))
    b = np.atleast_2d(np.asarray(i_s, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"speaker embedding shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(np.sum(d * d, axis=1)))


def recon_loss(predicted, target) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def total_loss(l_recon: float, l_mi: float, l_spcon: float, w: LossWeights | None = None) -> float:
    w = w or LossWeights()
    vals = (l_recon, l_mi, l_spcon)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("loss components must be finite")
    return l_recon + w.alpha1 * l_mi + w.alpha2 * l_spcon


def gaussian_mi(rho: float) -> float:
    """Mutual information of a bivariate Gaussian with correlation rho, in nats."""
    return -0.5 * math.log(1.0 - rho * rho)


def correlated_gaussian_pairs(n: int, rho: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, 1))
    e = rho * s + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, 1))
    return s, e
