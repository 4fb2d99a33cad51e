"""Raw intensity labels, per-class means and sigmoid remapping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import Corpus, Emotion
from .ranker import RankingModel, score

SATURATION_THRESHOLD = 0.49
_TINY = np.nextafter(0.0, 1.0)
_ALMOST_ONE = np.nextafter(1.0, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class IntensityRow:
    utterance_id: str
    emotion: Emotion
    raw: float
    remapped: float | None = None


@dataclass(frozen=True)
class IntensityTable:
    rows: tuple[IntensityRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def classes(self) -> list[Emotion]:
        seen = {r.emotion for r in self.rows}
        return [e for e in Emotion if e in seen]

    def class_rows(self, emotion: Emotion) -> list[IntensityRow]:
        return [r for r in self.rows if r.emotion is emotion]

    def raw_of(self, emotion: Emotion) -> np.ndarray:
        return np.array([r.raw for r in self.rows if r.emotion is emotion], dtype=np.float64)

    def remapped_of(self, emotion: Emotion) -> np.ndarray:
        return np.array([r.remapped for r in self.rows if r.emotion is emotion], dtype=np.float64)

    def lookup(self) -> dict[str, IntensityRow]:
        return {r.utterance_id: r for r in self.rows}

    def to_json(self) -> dict:
        return {"rows": [
            {"utterance_id": r.utterance_id, "class": r.emotion.value, "raw": r.raw,
             "remapped": r.remapped}
            for r in self.rows
        ]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "IntensityTable":
        return cls(tuple(
            IntensityRow(r["utterance_id"], Emotion.parse(r["class"]), float(r["raw"]),
                         None if r.get("remapped") is None else float(r["remapped"]))
            for r in obj["rows"]
        ))

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utterance_id", "class", "raw", "remapped"])
            for r in self.rows:
                w.writerow([r.utterance_id, r.emotion.value, repr(r.raw),
                            "" if r.remapped is None else repr(r.remapped)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "IntensityTable":
        with Path(path).open(newline="") as fh:
            return cls(tuple(
                IntensityRow(row["utterance_id"], Emotion.parse(row["class"]), float(row["raw"]),
                             float(row["remapped"]) if row["remapped"] else None)
                for row in csv.DictReader(fh)
            ))

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


@dataclass(frozen=True)
class ClassStats:
    means: Mapping[Emotion, float]


def raw_intensities(models: RankingModel | Mapping[Emotion, RankingModel],
                    corpus: Corpus) -> IntensityTable:
    """Score every non-neutral utterance with its class model (or one shared model)."""
    rows = []
    for i, emo in enumerate(corpus.emotions):
        if emo is Emotion.NEUTRAL:
            continue
        if isinstance(models, RankingModel):
            model = models
        else:
            try:
                model = models[emo]
            except KeyError:
                raise KeyError(f"no ranking model for class {emo.value}") from None
        rows.append(IntensityRow(corpus.ids[i], emo, score(model, corpus.features[i])))
    return IntensityTable(tuple(rows))


def class_means(table: IntensityTable) -> ClassStats:
    if not len(table):
        raise ValueError("intensity table is empty")
    return ClassStats({emo: float(np.mean(table.raw_of(emo))) for emo in table.classes})


def remap(table: IntensityTable, stats: ClassStats) -> IntensityTable:
    missing = [e.value for e in table.classes if e not in stats.means]
    if missing:
        raise KeyError(f"class statistics missing for {', '.join(missing)}")
    raw = np.array([r.raw for r in table.rows], dtype=np.float64)
    centre = np.array([stats.means[r.emotion] for r in table.rows], dtype=np.float64)
    # keep the open interval even when the logistic saturates in float64
    vals = np.clip(sigmoid(raw - centre), _TINY, _ALMOST_ONE)
    return IntensityTable(tuple(
        IntensityRow(r.utterance_id, r.emotion, r.raw, float(v)) for r, v in zip(table.rows, vals)
    ))


def saturation_fraction(table: IntensityTable) -> dict[Emotion, float]:
    out = {}
    for emo in table.classes:
        vals = table.remapped_of(emo)
        out[emo] = float(np.mean(np.abs(vals - 0.5) > SATURATION_THRESHOLD))
    return out


def remap_pipeline(models, corpus: Corpus) -> tuple[IntensityTable, ClassStats]:
    table = raw_intensities(models, corpus)
    stats = class_means(table)
    return remap(table, stats), stats
