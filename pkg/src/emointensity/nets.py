"""Minimal numpy feed-forward substrate with hand-written backprop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

Params = dict[str, np.ndarray]
LossFn = Callable[[], tuple[float, Mapping[str, np.ndarray]]]

_ACTS = ("relu", "identity", "tanh")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _dact(name, z, a, dout):
    if name == "relu":
        return dout * (z > 0)
    if name == "tanh":
        return dout * (1.0 - a * a)
    return dout


class DenseNet:
    """Chain of affine maps, each followed by its activation.

    Works on arrays of shape (..., sizes[0]); leading axes are treated as batch.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], seed: int = 0,
                 params: Params | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least input and output sizes, all positive")
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer")
        for a in activations:
            if a not in _ACTS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = list(activations)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                gain = 2.0 if activations[k] == "relu" else 1.0
                params[f"W{k}"] = rng.standard_normal((n_in, n_out)) * math.sqrt(gain / n_in)
                # positive relu bias keeps all-dead inputs off the kink at 0
                params[f"b{k}"] = np.full(n_out, 0.01 if activations[k] == "relu" else 0.0)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if self.params[f"W{k}"].shape != (n_in, n_out) or self.params[f"b{k}"].shape != (n_out,):
                raise ValueError(f"layer {k} parameter shapes do not chain")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        cache = []
        h = x
        for k in range(self.n_layers):
            z = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            a = _act(self.activations[k], z)
            cache.append((h, z, a))
            h = a
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: list, dout: np.ndarray) -> tuple[Params, np.ndarray]:
        grads: Params = {}
        d = np.asarray(dout, dtype=np.float64)
        for k in reversed(range(self.n_layers)):
            h, z, a = cache[k]
            dz = _dact(self.activations[k], z, a, d)
            grads[f"W{k}"] = h.reshape(-1, h.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            grads[f"b{k}"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            d = dz @ self.params[f"W{k}"].T
        return grads, d

    def to_json(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": self.activations,
            "params": params_to_json(self.params),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DenseNet":
        return cls(obj["sizes"], obj["activations"], params=params_from_json(obj["params"]))


def params_to_json(params: Mapping[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "values": [float(x) for x in np.ravel(v)]}
            for k, v in sorted(params.items())}


def params_from_json(obj: Mapping) -> Params:
    return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in obj.items()}


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple:
        return self.t, {k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}

    def restore(self, state: tuple) -> None:
        self.t, m, v = state
        self.m = {k: a.copy() for k, a in m.items()}
        self.v = {k: a.copy() for k, a in v.items()}


def copy_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: v.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int
    worst: str = ""

    def to_json(self) -> dict:
        return {"max_rel_err": self.max_rel_err, "tol": self.tol, "pass": self.passed}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def grad_check(params, loss: LossFn, tol: float = 1e-4, step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``loss()``'s analytic gradient with central differences.

    ``params`` is a dict of arrays (or an object with a ``params`` dict) that
    ``loss`` reads on every call; entries are perturbed in place and restored.
    The relative error per entry is |a - n| / max(|a|, |n|, floor).
    ``max_entries`` caps the entries probed per array (chosen at random).
    """
    if hasattr(params, "params"):
        params = params.params
    f0, analytic = loss()
    if not math.isfinite(f0):
        raise FloatingPointError("loss is not finite at the current parameters")
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    worst_err, worst, n_checked = 0.0, "", 0
    for name in sorted(params):
        arr = params[name]
        if name not in analytic:
            raise KeyError(f"analytic gradient missing for {name!r}")
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss()[0]
            flat[i] = orig - step
            fm = loss()[0]
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            num = (fp - fm) / (2.0 * step)
            a = float(grad[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n_checked += 1
            if err > worst_err:
                worst_err, worst = err, f"{name}[{i}]"
    return GradCheckReport(float(worst_err), float(tol), bool(worst_err < tol), n_checked, worst)
