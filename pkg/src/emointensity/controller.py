"""Emotion intensity controller: mixing, NLinear heads, candidate pool and attention fusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Emotion
from .nets import Adam, DenseNet, Params, copy_params, params_from_json, params_to_json
from .remap import IntensityTable, sigmoid

INTENSITY_EPS = 1e-3
_TINY = np.nextafter(0.0, 1.0)
_ALMOST_ONE = np.nextafter(1.0, 0.0)
DEFAULT_TOP_K = 8


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_lambda(a: float = 1.0, b: float = 1.0, seed=0, size: int | None = None):
    """Mixing weight(s) drawn from Beta(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("beta shape parameters must be positive")
    out = _rng(seed).beta(a, b, size=size)
    return float(out) if size is None else out


def mix_emotions(e_i, e_j, lam: float) -> np.ndarray:
    """lam * e_i + (1 - lam) * e_j."""
    e_i = np.asarray(e_i, dtype=np.float64)
    e_j = np.asarray(e_j, dtype=np.float64)
    if e_i.shape != e_j.shape:
        raise ValueError(f"embedding shapes differ: {e_i.shape} vs {e_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return e_i.copy()
    if lam == 0.0:
        return e_j.copy()
    return lam * e_i + (1.0 - lam) * e_j


# --------------------------------------------------------------------------
# NLinear


class NLinear:
    """Linear map along time with last-value normalization, shared across channels.

    ``forward`` maps (B, L, e) -> (B, L_out, e) as W @ (X - X[-1]) + b + X[-1].
    """

    def __init__(self, window: int, out_len: int | None = None, seed: int = 0,
                 init: str = "uniform", params: Params | None = None):
        self.window = int(window)
        self.out_len = int(out_len or window)
        if self.window < 1 or self.out_len < 1:
            raise ValueError("window lengths must be positive")
        if params is None:
            if init == "zeros":
                W = np.zeros((self.out_len, self.window))
            elif init == "identity":
                if self.out_len != self.window:
                    raise ValueError("identity init needs out_len == window")
                W = np.eye(self.window)
            else:
                bound = 1.0 / math.sqrt(self.window)
                W = np.random.default_rng(seed).uniform(-bound, bound, (self.out_len, self.window))
            params = {"W": W, "b": np.zeros(self.out_len)}
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        if self.params["W"].shape != (self.out_len, self.window):
            raise ValueError("NLinear weight shape does not match window")

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.window:
            raise ValueError(f"expected sequences with {self.window} time steps, got shape {x.shape}")
        return x

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._check(x)
        last = x[:, -1:, :]
        centred = x - last
        y = np.einsum("tl,ble->bte", self.params["W"], centred)
        y += self.params["b"][None, :, None]
        y += last
        return y, centred

    def __call__(self, x) -> np.ndarray:
        y = self.forward(x)[0]
        return y[0] if np.ndim(x) == 2 else y

    def backward(self, centred: np.ndarray, dy: np.ndarray) -> Params:
        return {
            "W": np.einsum("bte,ble->tl", dy, centred),
            "b": dy.sum(axis=(0, 2)),
        }


def nlinear_forward(params: Mapping[str, np.ndarray], sequence) -> np.ndarray:
    W = np.asarray(params["W"])
    layer = NLinear(W.shape[1], W.shape[0], params={"W": W, "b": params.get("b", np.zeros(W.shape[0]))})
    return layer(sequence)


def _prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class _Composite:
    """Exposes the sub-layers' parameters as one flat dict (views, not copies)."""

    parts: tuple[str, ...] = ()

    @property
    def params(self) -> Params:
        out: Params = {}
        for name in self.parts:
            out.update(_prefixed(name, getattr(self, name).params))
        return out

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        for key, value in params.items():
            part, sub = key.split(".", 1)
            getattr(self, part).params[sub][...] = value


# --------------------------------------------------------------------------
# Intensity extractor and emotion classifier


class ExtractorModel(_Composite):
    """NLinear -> dense(relu) -> dense(relu) -> mean over time -> affine -> logistic."""

    parts = ("nlinear", "dense", "head")

    def __init__(self, window: int = 96, emb_dim: int = 256, hidden: int = 128, seed: int = 0):
        self.window, self.emb_dim, self.hidden = window, emb_dim, hidden
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 2**31, size=3)
        self.nlinear = NLinear(window, seed=int(s[0]))
        self.dense = DenseNet([emb_dim, hidden, hidden], ["relu", "relu"], seed=int(s[1]))
        self.head = DenseNet([hidden, 1], ["identity"], seed=int(s[2]))
        self.head.params["W0"][...] = 0.0  # start at y = 0.5

    def _forward(self, x):
        h, centred = self.nlinear.forward(x)
        if h.shape[-1] != self.emb_dim:
            raise ValueError(f"expected embedding width {self.emb_dim}, got {h.shape[-1]}")
        d, dcache = self.dense.forward(h)
        pooled = d.mean(axis=1)
        z, hcache = self.head.forward(pooled)
        y = sigmoid(z[:, 0])
        return y, (centred, dcache, hcache, d.shape)

    def predict(self, x) -> np.ndarray:
        y = self._forward(x)[0]
        # the logistic rounds to 0 or 1 for large |z|; keep the open interval
        return np.clip(y, _TINY, _ALMOST_ONE)

    def __call__(self, sequence) -> float:
        """Utterance-level intensity for one (L, e) sequence."""
        seq = np.asarray(sequence)
        if seq.ndim != 2:
            raise ValueError("extract_intensity takes a single (L, e) sequence")
        return float(self.predict(seq)[0])

    def loss_and_grad(self, x, targets) -> tuple[float, Params]:
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        y, (centred, dcache, hcache, dshape) = self._forward(x)
        n = y.shape[0]
        err = y - targets
        loss = float(np.mean(err * err))
        dz = (2.0 / n) * err * y * (1.0 - y)
        g_head, dpooled = self.head.backward(hcache, dz[:, None])
        dd = np.broadcast_to(dpooled[:, None, :] / dshape[1], dshape)
        g_dense, dh = self.dense.backward(dcache, dd)
        g_nl = self.nlinear.backward(centred, dh)
        grads = _prefixed("nlinear", g_nl)
        grads.update(_prefixed("dense", g_dense))
        grads.update(_prefixed("head", g_head))
        return loss, grads

    def to_json(self) -> dict:
        return {"kind": "extractor", "window": self.window, "emb_dim": self.emb_dim,
                "hidden": self.hidden, "params": params_to_json(self.params)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ExtractorModel":
        m = cls(obj["window"], obj["emb_dim"], obj["hidden"])
        m.set_params(params_from_json(obj["params"]))
        return m


def softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


class ClassifierModel(_Composite):
    """NLinear -> mean over time -> affine -> softmax over the emotion classes."""

    parts = ("nlinear", "head")

    def __init__(self, classes: Sequence[Emotion], window: int = 96, emb_dim: int = 256, seed: int = 0):
        if not classes:
            raise ValueError("classifier needs at least one class")
        self.classes = [Emotion(c) for c in classes]
        self.window, self.emb_dim = window, emb_dim
        s = np.random.default_rng(seed).integers(0, 2**31, size=2)
        self.nlinear = NLinear(window, seed=int(s[0]))
        self.head = DenseNet([emb_dim, len(self.classes)], ["identity"], seed=int(s[1]))
        self.head.params["W0"][...] = 0.0  # start from uniform probabilities

    def _forward(self, x):
        h, centred = self.nlinear.forward(x)
        if h.shape[-1] != self.emb_dim:
            raise ValueError(f"expected embedding width {self.emb_dim}, got {h.shape[-1]}")
        pooled = h.mean(axis=1)
        logits, hcache = self.head.forward(pooled)
        return logits, (centred, hcache, h.shape)

    def logits(self, x) -> np.ndarray:
        return self._forward(x)[0]

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def __call__(self, sequence) -> np.ndarray:
        seq = np.asarray(sequence)
        if seq.ndim != 2:
            raise ValueError("classify_emotion takes a single (L, e) sequence")
        return self.predict_proba(seq)[0]

    def predict(self, x) -> list[Emotion]:
        return [self.classes[i] for i in np.argmax(self.logits(x), axis=1)]

    def loss_and_grad(self, x, labels) -> tuple[float, Params]:
        idx = np.asarray(labels, dtype=np.int64).reshape(-1)
        logits, (centred, hcache, hshape) = self._forward(x)
        n = logits.shape[0]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-np.mean(logp[np.arange(n), idx]))
        dlogits = np.exp(logp)
        dlogits[np.arange(n), idx] -= 1.0
        dlogits /= n
        g_head, dpooled = self.head.backward(hcache, dlogits)
        dh = np.broadcast_to(dpooled[:, None, :] / hshape[1], hshape)
        grads = _prefixed("nlinear", self.nlinear.backward(centred, dh))
        grads.update(_prefixed("head", g_head))
        return loss, grads

    def to_json(self) -> dict:
        return {"kind": "classifier", "classes": [c.value for c in self.classes],
                "window": self.window, "emb_dim": self.emb_dim,
                "params": params_to_json(self.params)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClassifierModel":
        m = cls([Emotion.parse(c) for c in obj["classes"]], obj["window"], obj["emb_dim"])
        m.set_params(params_from_json(obj["params"]))
        return m


def extract_intensity(model: ExtractorModel, sequence) -> float:
    return model(sequence)


def classify_emotion(model: ClassifierModel, sequence) -> np.ndarray:
    return model(sequence)


@dataclass(frozen=True)
class ExtractorOptions:
    window: int = 96
    hidden: int = 128
    epochs: int = 200
    lr: float = 3e-3
    seed: int = 0


@dataclass
class TrainingHistory:
    intensity_loss: list[float] = field(default_factory=list)
    class_loss: list[float] = field(default_factory=list)


def _fit(model, x, y, epochs: int, lr: float) -> list[float]:
    """Full-batch Adam; a step that raises the loss is undone and the rate halved."""
    opt = Adam(lr=lr)
    params = model.params
    loss, grads = model.loss_and_grad(x, y)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss at initialization")
    history = [loss]
    rate = lr
    for _ in range(epochs):
        saved = copy_params(params)
        state = opt.state()
        opt.step(params, grads, lr=rate)
        new_loss, new_grads = model.loss_and_grad(x, y)
        if not math.isfinite(new_loss) or new_loss > loss:
            model.set_params(saved)
            opt.restore(state)
            rate *= 0.5
            if rate < 1e-12:
                # no representable descent left; treat as converged
                break
        else:
            loss, grads = new_loss, new_grads
        history.append(loss)
    return history


def train_extractor(sequences, intensities, classes: Sequence[Emotion],
                    opts: ExtractorOptions | None = None,
                    class_order: Sequence[Emotion] | None = None
                    ) -> tuple[ExtractorModel, ClassifierModel, TrainingHistory]:
    """Fit the intensity head by squared error and the classifier by cross-entropy."""
    opts = opts or ExtractorOptions()
    x = np.asarray(sequences, dtype=np.float64)
    t = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError("sequences must be a non-empty (N, L, e) array")
    if x.shape[1] != opts.window:
        raise ValueError(f"sequences have {x.shape[1]} steps, options say {opts.window}")
    if len(t) != x.shape[0] or len(classes) != x.shape[0]:
        raise ValueError("sequences, intensities and classes must have equal length")
    labels = [Emotion(c) for c in classes]
    order = list(class_order) if class_order else [e for e in Emotion if e in set(labels)]
    index = {e: i for i, e in enumerate(order)}
    y_cls = np.array([index[e] for e in labels], dtype=np.int64)

    seeds = np.random.default_rng(opts.seed).integers(0, 2**31, size=2)
    ext = ExtractorModel(opts.window, x.shape[2], opts.hidden, seed=int(seeds[0]))
    clf = ClassifierModel(order, opts.window, x.shape[2], seed=int(seeds[1]))
    history = TrainingHistory(
        intensity_loss=_fit(ext, x, t, opts.epochs, opts.lr),
        class_loss=_fit(clf, x, y_cls, opts.epochs, opts.lr),
    )
    return ext, clf, history


def tile_sequence(embedding, window: int, rng=None, jitter: float = 0.0) -> np.ndarray:
    """Frame-level stand-in: repeat an utterance embedding ``window`` times, optionally jittered."""
    e = np.asarray(embedding, dtype=np.float64)
    seq = np.repeat(e[None, :], window, axis=0)
    if jitter > 0:
        seq = seq + jitter * _rng(rng).standard_normal(seq.shape)
    return seq


def mixed_training_set(embeddings: np.ndarray, emotions: Sequence[Emotion], remapped: np.ndarray,
                       neutral: np.ndarray, window: int, a: float = 1.0, b: float = 1.0,
                       jitter: float = 0.05, seed: int = 0):
    """Sequences for extractor training: each emotional embedding as-is, plus one copy
    mixed with a random neutral embedding by a Beta-drawn weight.

    A mixture keeps the class label and has intensity ``lam * remapped``.
    """
    rng = np.random.default_rng(seed)
    if len(neutral) == 0:
        raise ValueError("mixing needs at least one neutral embedding")
    seqs, targets, labels = [], [], []
    for emb, emo, r in zip(embeddings, emotions, remapped):
        seqs.append(tile_sequence(emb, window, rng, jitter))
        targets.append(float(r))
        labels.append(emo)
        lam = sample_lambda(a, b, rng)
        partner = neutral[rng.integers(len(neutral))]
        seqs.append(tile_sequence(mix_emotions(emb, partner, lam), window, rng, jitter))
        targets.append(lam * float(r))
        labels.append(emo)
    return np.stack(seqs), np.array(targets), labels


# --------------------------------------------------------------------------
# Candidate pool, intensity adjustment and selection


@dataclass(frozen=True)
class PoolEntry:
    intensity: float
    embedding: np.ndarray
    utterance_id: str = ""


@dataclass(frozen=True)
class CandidatePool:
    entries: Mapping[Emotion, tuple[PoolEntry, ...]]

    def __post_init__(self):
        dims = {e.embedding.shape for lst in self.entries.values() for e in lst}
        if len(dims) > 1:
            raise ValueError("pool embeddings must share one dimension")
        for emo, lst in self.entries.items():
            vals = [e.intensity for e in lst]
            if any(not 0.0 < v < 1.0 for v in vals):
                raise ValueError(f"pool intensities for {emo.value} must lie in (0, 1)")
            if any(x > y for x, y in zip(vals, vals[1:])):
                raise ValueError(f"pool list for {emo.value} is not sorted")

    @property
    def classes(self) -> list[Emotion]:
        return [e for e in Emotion if e in self.entries]

    @property
    def emb_dim(self) -> int | None:
        for lst in self.entries.values():
            if lst:
                return int(lst[0].embedding.shape[0])
        return None

    def intensities(self, emotion: Emotion) -> np.ndarray:
        return np.array([e.intensity for e in self.entries[emotion]])

    def to_json(self) -> dict:
        return {emo.value: [{"intensity": e.intensity, "embedding": [float(v) for v in e.embedding],
                             "utterance_id": e.utterance_id} for e in self.entries[emo]]
                for emo in self.classes}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CandidatePool":
        return cls({Emotion.parse(k): tuple(
            PoolEntry(float(e["intensity"]), np.array(e["embedding"], dtype=np.float64),
                      e.get("utterance_id", ""))
            for e in v) for k, v in obj.items()})

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CandidatePool":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_pool(embeddings: Sequence[tuple], table: IntensityTable) -> CandidatePool:
    """Pair each (utterance_id, embedding) or (utterance_id, class, embedding) with its
    remapped intensity; per-class lists are stably sorted ascending."""
    rows = table.lookup()
    buckets: dict[Emotion, list[PoolEntry]] = {}
    for item in embeddings:
        if len(item) == 3:
            uid, emo, emb = item
            emo = Emotion(emo)
        else:
            uid, emb = item
            emo = None
        row = rows.get(uid)
        if row is None or row.remapped is None:
            raise KeyError(f"no remapped intensity for utterance {uid!r}")
        if emo is not None and emo is not row.emotion:
            raise ValueError(f"class mismatch for {uid!r}: {emo.value} vs {row.emotion.value}")
        buckets.setdefault(row.emotion, []).append(
            PoolEntry(float(row.remapped), np.array(emb, dtype=np.float64), uid))
    return CandidatePool({emo: tuple(sorted(lst, key=lambda e: e.intensity))
                          for emo, lst in buckets.items()})


def adjust_intensity(y_pred: float, alpha: float, eps: float = INTENSITY_EPS) -> float:
    """Target intensity alpha * y_pred, clamped to [eps, 1 - eps]."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not 0.0 < y_pred < 1.0:
        raise ValueError("y_pred must lie in (0, 1)")
    return float(min(max(alpha * y_pred, eps), 1.0 - eps))


@dataclass(frozen=True)
class Selection:
    keys: np.ndarray
    values: np.ndarray
    intensities: np.ndarray
    utterance_ids: tuple[str, ...]


def select_candidates(pool: CandidatePool, emotion: Emotion, target: float,
                      top_k: int = DEFAULT_TOP_K) -> Selection:
    """The top_k entries nearest to target; ties go to the lower intensity."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    emotion = Emotion(emotion)
    if emotion not in pool.entries:
        raise KeyError(f"class {emotion.value} not in pool")
    entries = pool.entries[emotion]
    if not entries:
        raise ValueError(f"pool list for {emotion.value} is empty")
    order = sorted(range(len(entries)),
                   key=lambda i: (abs(entries[i].intensity - target), entries[i].intensity, i))
    chosen = [entries[i] for i in order[:top_k]]
    emb = np.stack([e.embedding for e in chosen])
    return Selection(emb, emb.copy(), np.array([e.intensity for e in chosen]),
                     tuple(e.utterance_id for e in chosen))


# --------------------------------------------------------------------------
# Scaled dot-product fusion


class QueryProjection:
    """Affine map from speaker width to embedding width; identity when widths agree."""

    def __init__(self, speaker_dim: int, emb_dim: int, seed: int = 0, params: Params | None = None):
        self.speaker_dim, self.emb_dim = speaker_dim, emb_dim
        if params is None and speaker_dim == emb_dim:
            params = {"W0": np.eye(emb_dim), "b0": np.zeros(emb_dim)}
        self.net = DenseNet([speaker_dim, emb_dim], ["identity"], seed=seed, params=params)

    @property
    def params(self) -> Params:
        return self.net.params

    def __call__(self, query) -> np.ndarray:
        return self.net(query)

    def to_json(self) -> dict:
        return self.net.to_json()

    @classmethod
    def from_json(cls, obj: Mapping) -> "QueryProjection":
        net = DenseNet.from_json(obj)
        return cls(net.sizes[0], net.sizes[1], params=net.params)


def attention_weights(query, keys) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] == 0:
        raise ValueError("keys must be a non-empty (n, e) array")
    if q.shape != (k.shape[1],):
        raise ValueError(f"query width {q.shape} does not match key width {k.shape[1]}")
    return softmax(k @ q / math.sqrt(k.shape[1]))


def fuse(query, keys, values, projection: QueryProjection | None = None
         ) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q.k_i / sqrt(e)) weighted sum of values; returns (fusion embedding, weights)."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or len(keys) == 0:
        raise ValueError("fusion needs at least one key")
    if len(keys) != len(values):
        raise ValueError("keys and values must have equal length")
    q = np.asarray(query, dtype=np.float64)
    if projection is not None:
        q = projection(q)
    w = attention_weights(q, keys)
    if len(w) == 1:
        return values[0].copy(), w
    return w @ values, w


def fuse_backward(query, keys, values, projection: QueryProjection, dout) -> Params:
    """Gradient of <dout, fuse(...)> with respect to the projection parameters."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    q, cache = projection.net.forward(np.asarray(query, dtype=np.float64))
    w = attention_weights(q, keys)
    dw = values @ np.asarray(dout, dtype=np.float64)
    ds = w * (dw - w @ dw)
    dq = keys.T @ ds / math.sqrt(keys.shape[1])
    grads, _ = projection.net.backward(cache, dq[None, :])
    return grads
