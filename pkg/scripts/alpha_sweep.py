"""Selected candidate intensity as a function of alpha, for a pool from the ranker
and for a dense pool whose raw scores span a wide range."""

import argparse
import csv
import sys

import numpy as np

from emointensity.controller import adjust_intensity, build_pool, select_candidates
from emointensity.dataset import Emotion, SyntheticSpec, standardize_features, synth_corpus
from emointensity.ranker import train_per_class
from emointensity.remap import IntensityRow, IntensityTable, class_means, remap, remap_pipeline


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--y-pred", type=float, default=0.9)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0])
    ap.add_argument("--dense-size", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = synth_corpus(SyntheticSpec(), args.seed)
    z, _ = standardize_features(corpus)
    table, _ = remap_pipeline(train_per_class(z), z)
    ranked = build_pool([(u, np.zeros(1)) for u, e in zip(corpus.ids, corpus.emotions)
                         if e is not Emotion.NEUTRAL], table)
    rows = tuple(IntensityRow(f"d{i}", Emotion.ANGRY, float(v))
                 for i, v in enumerate(np.linspace(-4, 4, args.dense_size)))
    dense_table = remap(IntensityTable(rows), class_means(IntensityTable(rows)))
    dense = build_pool([(r.utterance_id, np.zeros(1)) for r in dense_table.rows], dense_table)

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["alpha", "target", "ranked_pool", "dense_pool"])
    for a in args.alphas:
        t = adjust_intensity(args.y_pred, a)
        pick = lambda pool: select_candidates(pool, Emotion.ANGRY, t, 1).intensities[0]
        w.writerow([a, f"{t:.4f}", f"{pick(ranked):.4f}", f"{pick(dense):.4f}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
