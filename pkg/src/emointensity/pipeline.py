"""Pipeline stages behind the CLI verbs. Each stage reads upstream artifacts from the
output directory, writes its own artifacts and a JSON report under ``reports/``."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import kendalltau

from .config import PipelineConfig, stage_seed
from .controller import (
    CandidatePool,
    ClassifierModel,
    ExtractorModel,
    ExtractorOptions,
    QueryProjection,
    adjust_intensity,
    build_pool,
    fuse,
    mixed_training_set,
    select_candidates,
    tile_sequence,
    train_extractor,
)
from .dataset import (
    Emotion,
    PairSamplingConfig,
    Scaler,
    SyntheticSpec,
    attach_latents,
    build_pair_sets,
    load_corpus,
    load_embeddings,
    save_corpus,
    save_embeddings,
    save_latents,
    standardize_features,
    synth_corpus,
    synth_embeddings,
)
from .decouple import LossWeights, VariationalOptions, VClubModel, mi_loss, total_loss, train_variational
from .ranker import RankerOptions, RankingModel, train_per_class, train_ranker
from .remap import IntensityTable, class_means, raw_intensities, remap, saturation_fraction

STAGES = ("gen", "rank", "remap", "pool", "train-extractor", "mi", "fuse")
HIST_BINS = 10


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing artifact {path}; run `{command}` first")
        self.path = path
        self.command = command


def dump_json(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _need(path: Path, command: str) -> Path:
    if not path.is_file():
        raise MissingArtifact(path, command)
    return path


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output directory {out} is not writable: {exc}") from None
    dump_json(cfg.to_json(), out / "config.json")
    return out


def _report(cfg: PipelineConfig, stage: str, body: dict) -> dict:
    dump_json(body, Path(cfg.out) / "reports" / f"{stage}.json")
    return body


def _load_corpus(cfg: PipelineConfig):
    corpus = load_corpus(_need(cfg.resolve(cfg.paths.corpus), "gen"))
    if cfg.paths.latents:
        lat = cfg.resolve(cfg.paths.latents)
        if lat.is_file():
            corpus = attach_latents(corpus, lat)
    return corpus


def _tau(a, b) -> float:
    if len(a) < 2:
        return float("nan")
    return float(kendalltau(a, b).statistic)


# --------------------------------------------------------------------------


def run_gen(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    g = cfg.gen
    spec = SyntheticSpec(
        classes=tuple(g.classes), per_class=g.per_class, neutral_count=g.neutral_count,
        feature_dim=g.feature_dim, margin=g.margin, spread=g.spread, class_step=g.class_step,
        noise=g.noise, n_speakers=g.n_speakers,
    )
    corpus = synth_corpus(spec, stage_seed(cfg.seed, "gen"))
    emo, spk = synth_embeddings(corpus, cfg.controller.emb_dim, g.speaker_dim,
                                stage_seed(cfg.seed, "gen.embeddings"), g.embedding_noise)
    save_corpus(corpus, cfg.resolve(cfg.paths.corpus))
    if cfg.paths.latents:
        save_latents(corpus, cfg.resolve(cfg.paths.latents))
    save_embeddings(cfg.resolve(cfg.paths.embeddings), corpus.ids, emo, spk)
    counts = corpus.per_class_counts
    return _report(cfg, "gen", {
        "rows": len(corpus),
        "non_neutral_rows": int(sum(c for e, c in counts.items() if e is not Emotion.NEUTRAL)),
        "per_class_counts": {e.value: c for e, c in counts.items()},
        "feature_dim": corpus.feature_dim,
        "emotion_dim": int(emo.shape[1]),
        "speaker_dim": int(spk.shape[1]),
    })


def run_rank(cfg: PipelineConfig) -> dict:
    corpus = _load_corpus(cfg)
    out = _out(cfg)
    std, scaler = standardize_features(corpus)
    r = cfg.ranking
    opts = RankerOptions(max_iterations=r.max_iterations, gradient_tolerance=r.gradient_tolerance,
                         step_rule=r.step_rule, seed=stage_seed(cfg.seed, "rank"))
    pair_cfg = PairSamplingConfig(mode=r.pair_mode, max_pairs_per_set=r.max_pairs_per_set,
                                  seed=stage_seed(cfg.seed, "rank.pairs"))
    if r.joint:
        models = {"joint": train_ranker(std, build_pair_sets(std, pair_cfg), r.c, opts)}
    else:
        models = {e.value: m for e, m in train_per_class(std, r.c, opts, pair_cfg).items()}
    dump_json(scaler.to_json(), out / "scaler.json")
    dump_json({"mode": "joint" if r.joint else "per_class",
               "models": {k: m.to_json() for k, m in models.items()}}, out / "ranking.json")
    body: dict[str, Any] = {"mode": "joint" if r.joint else "per_class",
                            "diagnostics": {k: dict(m.diagnostics) for k, m in models.items()}}
    if std.latent is not None:
        taus = {}
        for emo in std.emotion_classes:
            model = models["joint"] if r.joint else models[emo.value]
            idx = std.indices_of(emo)
            taus[emo.value] = _tau(std.features[idx] @ model.weights, std.latent[idx])
        body["kendall_tau"] = taus
    return _report(cfg, "rank", body)


def load_ranking(path: Path) -> RankingModel | dict[Emotion, RankingModel]:
    obj = json.loads(path.read_text())
    if obj["mode"] == "joint":
        return RankingModel.from_json(obj["models"]["joint"])
    return {Emotion.parse(k): RankingModel.from_json(v) for k, v in obj["models"].items()}


def run_remap(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out)
    models = load_ranking(_need(out / "ranking.json", "rank"))
    scaler = Scaler.from_json(json.loads(_need(out / "scaler.json", "rank").read_text()))
    corpus = scaler.apply(_load_corpus(cfg))
    _out(cfg)
    table = raw_intensities(models, corpus)
    stats = class_means(table)
    table = remap(table, stats)
    table.write_csv(out / "intensities.csv")
    table.write_json(out / "intensities.json")
    body: dict[str, Any] = {
        "class_means": {e.value: v for e, v in stats.means.items()},
        "saturation_fraction": {e.value: v for e, v in saturation_fraction(table).items()},
        "remapped_range": {e.value: [float(table.remapped_of(e).min()), float(table.remapped_of(e).max())]
                           for e in table.classes},
        "rows": len(table),
    }
    if corpus.latent is not None:
        latent = dict(zip(corpus.ids, corpus.latent))
        body["kendall_tau"] = {
            e.value: _tau([r.remapped for r in table.class_rows(e)],
                          [latent[r.utterance_id] for r in table.class_rows(e)])
            for e in table.classes
        }
    return _report(cfg, "remap", body)


def run_pool(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out)
    table = IntensityTable.read_csv(_need(out / "intensities.csv", "remap"))
    ids, emo, _ = load_embeddings(_need(cfg.resolve(cfg.paths.embeddings), "gen"))
    rows = table.lookup()
    items = [(uid, emo[i]) for i, uid in enumerate(ids) if uid in rows]
    pool = build_pool(items, table)
    _out(cfg)
    pool.save(out / "pool.json")
    return _report(cfg, "pool", {
        "sizes": {e.value: len(pool.entries[e]) for e in pool.classes},
        "emb_dim": pool.emb_dim,
        "top_k": cfg.pool.top_k,
    })


def _neutral_embeddings(cfg: PipelineConfig):
    ids, emo, spk = load_embeddings(_need(cfg.resolve(cfg.paths.embeddings), "gen"))
    corpus = _load_corpus(cfg)
    label = dict(zip(corpus.ids, corpus.emotions))
    mask = np.array([label.get(uid) is Emotion.NEUTRAL for uid in ids])
    return emo[mask]


def run_train_extractor(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out)
    pool = CandidatePool.load(_need(out / "pool.json", "pool"))
    neutral = _neutral_embeddings(cfg)
    c = cfg.controller
    embs, labels, targets = [], [], []
    for emo in pool.classes:
        for entry in pool.entries[emo]:
            embs.append(entry.embedding)
            labels.append(emo)
            targets.append(entry.intensity)
    seed = stage_seed(cfg.seed, "train-extractor")
    x, t, y = mixed_training_set(np.array(embs), labels, np.array(targets), neutral, c.window,
                                 c.beta_a, c.beta_b, c.jitter, seed)
    opts = ExtractorOptions(window=c.window, hidden=c.hidden, epochs=c.epochs, lr=c.lr, seed=seed)
    ext, clf, hist = train_extractor(x, t, y, opts, class_order=pool.classes)
    _out(cfg)
    dump_json(ext.to_json(), out / "extractor.json")
    dump_json(clf.to_json(), out / "classifier.json")
    baseline = float(np.mean((t - 0.5) ** 2))
    acc = float(np.mean([p is q for p, q in zip(clf.predict(x), y)]))
    return _report(cfg, "train-extractor", {
        "samples": int(len(t)),
        "intensity_loss": {"first": hist.intensity_loss[0], "last": hist.intensity_loss[-1]},
        "constant_half_baseline_mse": baseline,
        "class_loss": {"first": hist.class_loss[0], "last": hist.class_loss[-1]},
        "train_accuracy": acc,
        "epochs": c.epochs,
    })


def run_mi(cfg: PipelineConfig) -> dict:
    ids, emo, spk = load_embeddings(_need(cfg.resolve(cfg.paths.embeddings), "gen"))
    if spk is None:
        raise ValueError("embedding file has no speaker columns s0..; mi needs them")
    out = _out(cfg)
    m = cfg.mi
    seed = stage_seed(cfg.seed, "mi")
    model = VClubModel(spk.shape[1], emo.shape[1], m.hidden, seed=seed)
    # q is fitted on one half and the bound read on both; a gap between them flags overfitting
    perm = np.random.default_rng(seed).permutation(len(ids))
    fit, held = np.sort(perm[: (len(ids) + 1) // 2]), np.sort(perm[(len(ids) + 1) // 2:])
    if len(held) < 2:
        raise ValueError("mi needs at least four embeddings")
    trained, hist = train_variational(model, spk[fit], emo[fit], VariationalOptions(
        steps=m.steps, batch_size=m.batch_size, lr=m.lr, seed=seed))
    l_fit = mi_loss(trained, spk[fit[:m.batch_size]], emo[fit[:m.batch_size]])
    l_mi = mi_loss(trained, spk[held[:m.batch_size]], emo[held[:m.batch_size]])
    w = LossWeights(m.alpha1, m.alpha2)
    dump_json(trained.to_json(), out / "vclub.json")
    return _report(cfg, "mi", {
        "mi_estimate": l_mi,
        "mi_estimate_fit": l_fit,
        "fit_rows": int(len(fit)),
        "heldout_rows": int(len(held)),
        "mean_logprob": {"first": hist.mean_logprob[0], "last": hist.mean_logprob[-1]},
        "loss_weights": {"alpha1": w.alpha1, "alpha2": w.alpha2},
        "weighted_mi_term": total_loss(0.0, l_mi, 0.0, w),
    })


def run_fuse(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out)
    pool = CandidatePool.load(_need(out / "pool.json", "pool"))
    ext = ExtractorModel.from_json(json.loads(_need(out / "extractor.json", "train-extractor").read_text()))
    clf = ClassifierModel.from_json(json.loads(_need(out / "classifier.json", "train-extractor").read_text()))
    ids, emo, spk = load_embeddings(_need(cfg.resolve(cfg.paths.embeddings), "gen"))
    in_pool = {e.utterance_id for lst in pool.entries.values() for e in lst}
    ref = cfg.fuse.reference or next((uid for uid in ids if uid in in_pool), None)
    if ref is None or ref not in ids:
        raise KeyError(f"reference utterance {ref!r} not found in embeddings")
    i = ids.index(ref)
    seq = tile_sequence(emo[i], ext.window)
    y_pred = ext(seq)
    probs = clf(seq)
    emotion = clf.classes[int(np.argmax(probs))]
    query = spk[i] if spk is not None else np.zeros(pool.emb_dim)
    proj = QueryProjection(len(query), pool.emb_dim, seed=stage_seed(cfg.seed, "fuse"))
    _out(cfg)
    sweep = []
    fusion_rows = []
    for alpha in sorted(float(a) for a in cfg.alphas):
        target = adjust_intensity(y_pred, alpha)
        sel = select_candidates(pool, emotion, target, cfg.pool.top_k)
        fused, weights = fuse(query, sel.keys, sel.values, proj)
        sweep.append({
            "alpha": alpha,
            "target": target,
            "selected_intensity": float(sel.intensities[0]),
            "mean_topk_intensity": float(np.mean(sel.intensities)),
            "attention_weights": [float(v) for v in weights],
            "candidates": list(sel.utterance_ids),
            "fusion_norm": float(np.linalg.norm(fused)),
        })
        fusion_rows.append([repr(alpha)] + [repr(float(v)) for v in fused])
    with (out / "fusion.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha"] + [f"e{c}" for c in range(pool.emb_dim)])
        w.writerows(fusion_rows)
    return _report(cfg, "fuse", {
        "reference": ref,
        "predicted_class": emotion.value,
        "class_probabilities": {c.value: float(p) for c, p in zip(clf.classes, probs)},
        "y_pred": y_pred,
        "sweep": sweep,
        "selected_intensities": [s["selected_intensity"] for s in sweep],
    })


def run_report(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out)
    rdir = out / "reports"
    stages = [s for s in STAGES if (rdir / f"{s}.json").is_file()]
    if not stages:
        raise FileNotFoundError(f"no stage reports under {rdir}; run a pipeline stage first")
    summary = {s: json.loads((rdir / f"{s}.json").read_text()) for s in stages}
    tables = []
    if (out / "intensities.csv").is_file():
        table = IntensityTable.read_csv(out / "intensities.csv")
        edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
        with (out / "summary_intensity_distribution.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "bin_lo", "bin_hi", "count"])
            for emo in table.classes:
                counts, _ = np.histogram(table.remapped_of(emo), bins=edges)
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([emo.value, f"{lo:.1f}", f"{hi:.1f}", int(c)])
        tables.append("summary_intensity_distribution.csv")
    if "fuse" in summary:
        with (out / "summary_alpha_sweep.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "target", "selected_intensity", "mean_topk_intensity"])
            for row in summary["fuse"]["sweep"]:
                w.writerow([repr(row["alpha"]), repr(row["target"]),
                            repr(row["selected_intensity"]), repr(row["mean_topk_intensity"])])
        tables.append("summary_alpha_sweep.csv")
    doc = {"stages": stages, "sections": summary, "tables": tables}
    dump_json(doc, out / "summary.json")
    return doc


RUNNERS = {
    "gen": run_gen,
    "rank": run_rank,
    "remap": run_remap,
    "pool": run_pool,
    "train-extractor": run_train_extractor,
    "mi": run_mi,
    "fuse": run_fuse,
    "report": run_report,
}


def run_all(cfg: PipelineConfig) -> dict:
    for name in STAGES:
        RUNNERS[name](cfg)
    return run_report(cfg)
