"""Corpus ingestion, synthetic corpora and ordered/similar pair construction."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class Emotion(str, Enum):
    NEUTRAL = "Neutral"
    ANGRY = "Angry"
    HAPPY = "Happy"
    SAD = "Sad"
    SURPRISE = "Surprise"

    @classmethod
    def parse(cls, label: str) -> "Emotion":
        key = str(label).strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown emotion label {label!r}")


EMOTION_ORDER = tuple(Emotion)


class CorpusFormatError(ValueError):
    """A corpus file is malformed (ragged rows, bad labels, missing columns)."""


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    emotion: Emotion
    features: np.ndarray
    latent_intensity: float | None = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Corpus:
    """Column-oriented corpus; ``features`` is an (n, d) read-only array."""

    ids: tuple[str, ...]
    speakers: tuple[str, ...]
    emotions: tuple[Emotion, ...]
    features: np.ndarray
    latent: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = len(self.ids)
        if not (len(self.speakers) == len(self.emotions) == feats.shape[0] == n):
            raise ValueError("column lengths disagree")
        if n and feats.shape[1] < 1:
            raise ValueError("feature dimension must be >= 1")
        if not np.all(np.isfinite(feats)):
            raise ValueError("non-finite feature values")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "emotions", tuple(Emotion(e) for e in self.emotions))
        if self.latent is not None:
            lat = np.asarray(self.latent, dtype=np.float64)
            if lat.shape != (n,):
                raise ValueError("latent must have one entry per utterance")
            object.__setattr__(self, "latent", _frozen(lat))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def emotion_classes(self) -> list[Emotion]:
        present = set(self.emotions)
        return [e for e in EMOTION_ORDER if e in present and e is not Emotion.NEUTRAL]

    @property
    def per_class_counts(self) -> dict[Emotion, int]:
        counts = {e: 0 for e in EMOTION_ORDER}
        for e in self.emotions:
            counts[e] += 1
        return {e: c for e, c in counts.items() if c}

    @property
    def utterances(self) -> list[Utterance]:
        out = []
        for i in range(len(self)):
            lat = None if self.latent is None else float(self.latent[i])
            out.append(Utterance(self.ids[i], self.speakers[i], self.emotions[i],
                                 self.features[i], lat))
        return out

    def indices_of(self, emotion: Emotion) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.emotions) if e is emotion], dtype=np.int64)

    def with_features(self, features: np.ndarray) -> "Corpus":
        return Corpus(self.ids, self.speakers, self.emotions, features, self.latent)

    def with_latent(self, latent: np.ndarray | None) -> "Corpus":
        return Corpus(self.ids, self.speakers, self.emotions, self.features, latent)

    def subset(self, index: Sequence[int]) -> "Corpus":
        index = np.asarray(index, dtype=np.int64)
        lat = None if self.latent is None else self.latent[index]
        return Corpus(
            tuple(self.ids[i] for i in index),
            tuple(self.speakers[i] for i in index),
            tuple(self.emotions[i] for i in index),
            self.features[index].reshape(len(index), self.feature_dim),
            lat,
        )

    @classmethod
    def from_utterances(cls, utterances: Iterable[Utterance]) -> "Corpus":
        utts = list(utterances)
        if not utts:
            raise ValueError("no utterances")
        lat = [u.latent_intensity for u in utts]
        latent = None if any(v is None for v in lat) else np.array(lat, dtype=np.float64)
        return cls(
            tuple(u.id for u in utts),
            tuple(u.speaker_id for u in utts),
            tuple(Emotion(u.emotion) for u in utts),
            np.vstack([np.asarray(u.features, dtype=np.float64) for u in utts]),
            latent,
        )


# --------------------------------------------------------------------------
# File I/O


def _feature_columns(keys: Sequence[str], where: str) -> int:
    feats = [k for k in keys if k.startswith("f") and k[1:].isdigit()]
    d = len(feats)
    if d < 1:
        raise CorpusFormatError(f"{where}: no feature columns f0..f{{d-1}}")
    if sorted(int(k[1:]) for k in feats) != list(range(d)):
        raise CorpusFormatError(f"{where}: feature columns must be f0..f{d - 1}")
    return d


def _check_rows(rows: list[tuple[int, dict]], d: int) -> Corpus:
    ids, speakers, emotions, feats = [], [], [], []
    for lineno, row in rows:
        for key in ("id", "speaker", "emotion"):
            if row.get(key) in (None, ""):
                raise CorpusFormatError(f"line {lineno}: missing field {key!r}")
        try:
            emo = Emotion.parse(row["emotion"])
        except ValueError:
            raise CorpusFormatError(f"line {lineno}: unknown emotion label {row['emotion']!r}") from None
        vec = []
        for c in range(d):
            raw = row.get(f"f{c}")
            if raw is None or raw == "":
                raise CorpusFormatError(f"line {lineno}: ragged row, expected {d} features")
            try:
                val = float(raw)
            except (TypeError, ValueError):
                raise CorpusFormatError(f"line {lineno}: non-numeric feature f{c}={raw!r}") from None
            if not math.isfinite(val):
                raise CorpusFormatError(f"line {lineno}: non-finite feature f{c}")
            vec.append(val)
        ids.append(str(row["id"]))
        speakers.append(str(row["speaker"]))
        emotions.append(emo)
        feats.append(vec)
    if not ids:
        raise CorpusFormatError("corpus file has no rows")
    return Corpus(tuple(ids), tuple(speakers), tuple(emotions), np.array(feats, dtype=np.float64))


def load_corpus(path: str | Path, format: str | None = None) -> Corpus:
    """Read a CSV or JSONL corpus; rows keep their file order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise CorpusFormatError(f"{path}: empty file") from None
            d = _feature_columns(header, str(path))
            rows = []
            for lineno, values in enumerate(reader, start=2):
                if not values:
                    continue
                if len(values) != len(header):
                    raise CorpusFormatError(
                        f"line {lineno}: ragged row, {len(values)} fields but header has {len(header)}"
                    )
                rows.append((lineno, dict(zip(header, (v.strip() for v in values)))))
        return _check_rows(rows, d)
    if fmt == "jsonl":
        rows = []
        d = None
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if d is None:
                    d = _feature_columns(list(rec), f"{path}:{lineno}")
                elif _has_extra_features(rec, d):
                    raise CorpusFormatError(f"line {lineno}: ragged row, expected {d} features")
                rows.append((lineno, rec))
        if d is None:
            raise CorpusFormatError(f"{path}: empty file")
        return _check_rows(rows, d)
    raise ValueError(f"unsupported corpus format {fmt!r}")


def _has_extra_features(rec: Mapping, d: int) -> bool:
    return any(k.startswith("f") and k[1:].isdigit() and int(k[1:]) >= d for k in rec)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    header = ["id", "speaker", "emotion"] + [f"f{c}" for c in range(corpus.feature_dim)]
    if path.suffix.lower() == ".jsonl":
        with path.open("w") as fh:
            for i in range(len(corpus)):
                rec = {"id": corpus.ids[i], "speaker": corpus.speakers[i],
                       "emotion": corpus.emotions[i].value}
                rec.update({f"f{c}": float(v) for c, v in enumerate(corpus.features[i])})
                fh.write(json.dumps(rec) + "\n")
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(corpus)):
            w.writerow([corpus.ids[i], corpus.speakers[i], corpus.emotions[i].value]
                       + [repr(float(v)) for v in corpus.features[i]])


def save_latents(corpus: Corpus, path: str | Path) -> None:
    if corpus.latent is None:
        raise ValueError("corpus has no latent intensities")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "latent_intensity"])
        for uid, lat in zip(corpus.ids, corpus.latent):
            w.writerow([uid, repr(float(lat))])


def attach_latents(corpus: Corpus, path: str | Path) -> Corpus:
    with Path(path).open(newline="") as fh:
        table = {row["id"]: float(row["latent_intensity"]) for row in csv.DictReader(fh)}
    missing = [uid for uid in corpus.ids if uid not in table]
    if missing:
        raise CorpusFormatError(f"latent file lacks {len(missing)} ids, e.g. {missing[0]!r}")
    return corpus.with_latent(np.array([table[uid] for uid in corpus.ids]))


# --------------------------------------------------------------------------
# Standardization


@dataclass(frozen=True)
class Scaler:
    means: np.ndarray
    stds: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.means.shape[0]:
            raise ValueError(f"expected {self.means.shape[0]} features, got {x.shape[-1]}")
        safe = np.where(self.stds > 0, self.stds, 1.0)
        return np.where(self.stds > 0, (x - self.means) / safe, 0.0)

    def apply(self, corpus: Corpus) -> Corpus:
        return corpus.with_features(self.transform(corpus.features))

    def to_json(self) -> dict:
        return {"means": [float(v) for v in self.means], "stds": [float(v) for v in self.stds]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Scaler":
        return cls(np.array(obj["means"], dtype=np.float64), np.array(obj["stds"], dtype=np.float64))


def standardize_features(corpus: Corpus) -> tuple[Corpus, Scaler]:
    if len(corpus) == 0:
        raise ValueError("cannot standardize an empty corpus")
    x = corpus.features
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    # Rounding in the mean leaves ~eps residue on constant columns.
    scale = np.maximum(1.0, np.abs(means))
    stds = np.where(stds <= 1e-12 * scale, 0.0, stds)
    scaler = Scaler(means, stds)
    return scaler.apply(corpus), scaler


# --------------------------------------------------------------------------
# Pair sets


@dataclass(frozen=True)
class PairSamplingConfig:
    mode: str = "auto"  # auto | exhaustive | sampled
    max_pairs_per_set: int = 50_000
    exhaustive_limit: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class PairSet:
    ordered_pairs: np.ndarray  # (P, 2) int64; emotion(i) non-neutral, emotion(j) neutral
    similar_pairs: np.ndarray  # (Q, 2) int64; same emotion label

    def __post_init__(self):
        for name in ("ordered_pairs", "similar_pairs"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def empty(self) -> bool:
        return len(self.ordered_pairs) == 0 and len(self.similar_pairs) == 0


def unrank_combination(t: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map flat indices into the row-major strict upper triangle of an n x n grid to (i, j)."""
    t = np.asarray(t, dtype=np.int64)
    total = n * (n - 1) // 2
    # Count pairs from the end of the triangle, where the row index is a triangular root.
    r = total - 1 - t
    k = ((np.sqrt(8.0 * r + 1.0) - 1.0) // 2).astype(np.int64)
    # float sqrt can be off by one for large r
    k = np.where((k + 1) * (k + 2) // 2 <= r, k + 1, k)
    k = np.where(k * (k + 1) // 2 > r, k - 1, k)
    i = n - 2 - k
    row_start = i * (2 * n - i - 1) // 2
    j = i + 1 + (t - row_start)
    return i, j


def _choose(rng: np.random.Generator, total: int, cap: int) -> np.ndarray:
    if total <= cap:
        return np.arange(total, dtype=np.int64)
    return np.sort(rng.choice(total, size=cap, replace=False)).astype(np.int64)


def build_pair_sets(corpus: Corpus, config: PairSamplingConfig | None = None) -> PairSet:
    config = config or PairSamplingConfig()
    neutral = corpus.indices_of(Emotion.NEUTRAL)
    emotional = np.array(
        [i for i, e in enumerate(corpus.emotions) if e is not Emotion.NEUTRAL], dtype=np.int64
    )
    if len(neutral) == 0:
        raise ValueError("pair construction needs at least one Neutral utterance")
    if len(emotional) == 0:
        raise ValueError("pair construction needs at least one non-neutral utterance")

    mode = config.mode
    if mode == "auto":
        mode = "exhaustive" if len(corpus) <= config.exhaustive_limit else "sampled"
    if mode not in ("exhaustive", "sampled"):
        raise ValueError(f"unknown pair sampling mode {config.mode!r}")
    cap = None if mode == "exhaustive" else int(config.max_pairs_per_set)
    rng = np.random.default_rng(config.seed)

    n_o = len(emotional) * len(neutral)
    flat = np.arange(n_o, dtype=np.int64) if cap is None else _choose(rng, n_o, cap)
    ordered = np.stack([emotional[flat // len(neutral)], neutral[flat % len(neutral)]], axis=1)

    groups = [corpus.indices_of(e) for e in EMOTION_ORDER]
    groups = [g for g in groups if len(g) >= 2]
    sizes = np.array([len(g) * (len(g) - 1) // 2 for g in groups], dtype=np.int64)
    n_m = int(sizes.sum())
    flat = np.arange(n_m, dtype=np.int64) if cap is None else _choose(rng, n_m, cap)
    similar = np.empty((len(flat), 2), dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for g, idx in enumerate(groups):
        sel = (flat >= offsets[g]) & (flat < offsets[g + 1])
        a, b = unrank_combination(flat[sel] - offsets[g], len(idx))
        similar[sel] = np.stack([idx[a], idx[b]], axis=1)
    return PairSet(ordered, similar)


def class_pair_sets(corpus: Corpus, emotion: Emotion,
                    config: PairSamplingConfig | None = None) -> PairSet:
    """Pairs for the one-class problem: ``emotion`` against Neutral, indexed into ``corpus``."""
    keep = np.array([i for i, e in enumerate(corpus.emotions)
                     if e is emotion or e is Emotion.NEUTRAL], dtype=np.int64)
    sub = build_pair_sets(corpus.subset(keep), config)
    return PairSet(keep[sub.ordered_pairs], keep[sub.similar_pairs])


# --------------------------------------------------------------------------
# Synthetic corpora


@dataclass(frozen=True)
class SyntheticSpec:
    """Latent-intensity generator.

    Neutral latents are uniform on ``[-spread/2, spread/2]``; class ``k`` (0-based,
    in ``classes`` order) is uniform on ``[lo_k, lo_k + spread]`` with
    ``lo_k = spread/2 + margin + k * class_step``. Features are
    ``latent * direction + noise * N(0, I)`` with a unit-norm ``direction``.
    ``latents`` overrides the sampled values per class name (Neutral included).
    """

    classes: tuple[str, ...] = ("Angry", "Happy", "Sad", "Surprise")
    per_class: int = 50
    neutral_count: int | None = None
    feature_dim: int = 16
    margin: float = 1.0
    spread: float = 0.25
    class_step: float = 0.5
    noise: float = 0.0
    n_speakers: int = 10
    direction: tuple[float, ...] | None = None
    latents: Mapping[str, Sequence[float]] | None = field(default=None, hash=False)

    def validate(self) -> None:
        if self.per_class <= 0:
            raise ValueError("per_class must be positive")
        if self.neutral_count is not None and self.neutral_count < 0:
            raise ValueError("neutral_count must be non-negative")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if not self.classes:
            raise ValueError("at least one non-neutral class is required")
        if self.n_speakers <= 0:
            raise ValueError("n_speakers must be positive")
        if self.margin <= 0 or self.spread < 0 or self.noise < 0:
            raise ValueError("margin must be positive; spread and noise non-negative")
        if self.direction is not None and len(self.direction) != self.feature_dim:
            raise ValueError("direction length must equal feature_dim")


def synth_direction(spec: SyntheticSpec, seed: int) -> np.ndarray:
    if spec.direction is not None:
        w = np.asarray(spec.direction, dtype=np.float64)
    else:
        w = np.random.default_rng([seed, 1]).standard_normal(spec.feature_dim)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("direction must be non-zero")
    return w / norm


def synth_corpus(spec: SyntheticSpec, seed: int) -> Corpus:
    spec.validate()
    rng = np.random.default_rng([seed, 0])
    w = synth_direction(spec, seed)
    classes = [Emotion.parse(c) for c in spec.classes]
    if Emotion.NEUTRAL in classes:
        raise ValueError("classes must not include Neutral")
    overrides = {Emotion.parse(k): list(v) for k, v in (spec.latents or {}).items()}

    n_neutral = spec.per_class if spec.neutral_count is None else spec.neutral_count
    half = spec.spread / 2.0
    blocks: list[tuple[Emotion, np.ndarray]] = []
    if Emotion.NEUTRAL in overrides:
        blocks.append((Emotion.NEUTRAL, np.asarray(overrides[Emotion.NEUTRAL], dtype=np.float64)))
    elif n_neutral:
        blocks.append((Emotion.NEUTRAL, rng.uniform(-half, half, n_neutral)))
    for k, emo in enumerate(classes):
        if emo in overrides:
            blocks.append((emo, np.asarray(overrides[emo], dtype=np.float64)))
            continue
        lo = half + spec.margin + k * spec.class_step
        blocks.append((emo, rng.uniform(lo, lo + spec.spread, spec.per_class)))

    ids, speakers, emotions, latents = [], [], [], []
    for emo, lat in blocks:
        for n, value in enumerate(lat):
            ids.append(f"{emo.value.lower()}_{n:04d}")
            speakers.append(f"spk{n % spec.n_speakers:02d}")
            emotions.append(emo)
            latents.append(float(value))
    latent = np.array(latents, dtype=np.float64)
    feats = latent[:, None] * w[None, :]
    if spec.noise > 0:
        feats = feats + spec.noise * rng.standard_normal(feats.shape)
    return Corpus(tuple(ids), tuple(speakers), tuple(emotions), feats, latent)


def synth_embeddings(corpus: Corpus, emotion_dim: int, speaker_dim: int, seed: int,
                     noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Emotion and speaker embeddings for every utterance.

    Emotion embeddings move along a per-class direction with latent intensity
    (or the first feature when no latent is recorded); speaker embeddings depend
    on speaker identity only.
    """
    if emotion_dim <= 0 or speaker_dim <= 0:
        raise ValueError("embedding dimensions must be positive")
    rng = np.random.default_rng([seed, 2])
    protos = {e: rng.standard_normal(emotion_dim) for e in EMOTION_ORDER}
    dirs = {e: rng.standard_normal(emotion_dim) / math.sqrt(emotion_dim) for e in EMOTION_ORDER}
    speakers = sorted(set(corpus.speakers))
    spk_proto = {s: rng.standard_normal(speaker_dim) for s in speakers}
    level = corpus.latent if corpus.latent is not None else corpus.features[:, 0]
    emo = np.empty((len(corpus), emotion_dim))
    spk = np.empty((len(corpus), speaker_dim))
    for i, (e, s) in enumerate(zip(corpus.emotions, corpus.speakers)):
        emo[i] = protos[e] + level[i] * dirs[e] * math.sqrt(emotion_dim)
        spk[i] = spk_proto[s]
    emo += noise * rng.standard_normal(emo.shape)
    spk += noise * rng.standard_normal(spk.shape)
    return emo, spk


def save_embeddings(path: str | Path, ids: Sequence[str], emotion: np.ndarray,
                    speaker: np.ndarray | None = None) -> None:
    header = ["id"] + [f"e{c}" for c in range(emotion.shape[1])]
    if speaker is not None:
        header += [f"s{c}" for c in range(speaker.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, uid in enumerate(ids):
            row = [uid] + [repr(float(v)) for v in emotion[i]]
            if speaker is not None:
                row += [repr(float(v)) for v in speaker[i]]
            w.writerow(row)


def load_embeddings(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray | None]:
    """Read ``id,e0..e{E-1}[,s0..s{S-1}]``; returns ids, emotion and optional speaker matrices."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        e_cols = [c for c, h in enumerate(header) if h.startswith("e") and h[1:].isdigit()]
        s_cols = [c for c, h in enumerate(header) if h.startswith("s") and h[1:].isdigit()]
        if not e_cols:
            raise CorpusFormatError(f"{path}: no emotion embedding columns e0..")
        ids, emo, spk = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CorpusFormatError(f"line {lineno}: ragged row in {path.name}")
            ids.append(row[0])
            emo.append([float(row[c]) for c in e_cols])
            spk.append([float(row[c]) for c in s_cols])
    speaker = np.array(spk, dtype=np.float64) if s_cols else None
    return ids, np.array(emo, dtype=np.float64), speaker
