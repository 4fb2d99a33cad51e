"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import json
import math
import shutil
import time

import numpy as np
import pytest
from scipy.stats import kendalltau

from conftest import ACCEPTANCE_LINES
from emointensity.cli import main
from emointensity.controller import (
    ClassifierModel, ExtractorModel, NLinear, QueryProjection, adjust_intensity,
    attention_weights, build_pool, fuse, fuse_backward, select_candidates,
)
from emointensity.dataset import (
    Corpus, Emotion, SyntheticSpec, build_pair_sets, standardize_features, synth_corpus,
)
from emointensity.decouple import (
    LossWeights, VariationalOptions, VClubModel, correlated_gaussian_pairs, gaussian_mi, mi_loss,
    total_loss, train_variational,
)
from emointensity.nets import DenseNet, grad_check
from emointensity.ranker import score, train_per_class, train_ranker
from emointensity.remap import (
    ClassStats, IntensityRow, IntensityTable, class_means, logit, remap, remap_pipeline,
)

ALPHAS = (0.2, 0.4, 0.6, 0.8)


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# 1 ---------------------------------------------------------------------------

def test_c01_single_pair_ranker():
    c = Corpus(("a", "n"), ("s", "s"), (Emotion.ANGRY, Emotion.NEUTRAL), np.array([[1.0], [0.0]]))
    t0 = time.perf_counter()
    w = float(train_ranker(c, build_pair_sets(c), C=1.0).weights[0])
    dt = time.perf_counter() - t0
    err = abs(w - 2.0 / 3.0)
    ok = err <= 1e-6 and dt < 1.0
    record(1, "ranker analytic case", ok, f"w={w:.12f} |w-2/3|={err:.2e} (tol 1e-6), {dt:.3f}s (<1s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_c02_separable_ranker():
    spec = SyntheticSpec(classes=("Angry", "Happy", "Sad", "Surprise"), per_class=50,
                         feature_dim=16, margin=1.0, noise=0.0)
    corpus = synth_corpus(spec, 0)
    t0 = time.perf_counter()
    z, _ = standardize_features(corpus)
    models = train_per_class(z, C=1.0)
    dt = time.perf_counter() - t0
    worst_v, worst_tau = 0.0, 1.0
    for emo, m in models.items():
        idx = z.indices_of(emo)
        worst_v = max(worst_v, m.diagnostics["o_violation_rate"])
        worst_tau = min(worst_tau, kendalltau(score(m, z.features[idx]), corpus.latent[idx]).statistic)
    ok = worst_v <= 0.01 and worst_tau >= 0.9 and dt < 30.0
    record(2, "ranker separable case", ok,
           f"max o_violation_rate={worst_v:.4f} (<=0.01), min tau={worst_tau:.4f} (>=0.9), {dt:.2f}s (<30s)")
    assert worst_tau >= 0.9 and dt < 30.0
    assert worst_v <= 0.01


# 3 ---------------------------------------------------------------------------

def test_c03_remap_fixed_points():
    fixed = remap(IntensityTable((IntensityRow("a", Emotion.SAD, 1.7),
                                  IntensityRow("b", Emotion.SAD, 1.7 + math.log(3.0)))),
                  ClassStats({Emotion.SAD: 1.7}))
    e_half = abs(fixed.rows[0].remapped - 0.5)
    e_q = abs(fixed.rows[1].remapped - 0.75)

    corpus = synth_corpus(SyntheticSpec(per_class=50, feature_dim=16), 0)
    z, _ = standardize_features(corpus)
    table, _ = remap_pipeline(train_per_class(z), z)
    pairs = bad = 0
    worst_sum = 0.0
    for emo in table.classes:
        raw, rem = table.raw_of(emo), table.remapped_of(emo)
        for i in range(len(raw)):
            for j in range(len(raw)):
                if raw[i] < raw[j]:
                    pairs += 1
                    bad += not rem[i] < rem[j]
        worst_sum = max(worst_sum, abs(float(np.sum(logit(rem)))))
    ok = e_half <= 1e-12 and e_q <= 1e-12 and bad == 0 and worst_sum <= 1e-9
    record(3, "remap fixed points", ok,
           f"|r-0.5|={e_half:.1e}, |r-0.75|={e_q:.1e} (tol 1e-12), order kept {pairs - bad}/{pairs}, "
           f"max |sum logit|={worst_sum:.1e} (tol 1e-9)")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c04_shift_invariance():
    rng = np.random.default_rng(4)
    worst = 0.0
    for c in (-100.0, -1.5, 0.3, 7.0, 250.0):
        raw = rng.normal(0.0, 2.0, 60)
        base = IntensityTable(tuple(IntensityRow(f"u{i}", Emotion.HAPPY, float(v)) for i, v in enumerate(raw)))
        moved = IntensityTable(tuple(IntensityRow(r.utterance_id, r.emotion, r.raw + c) for r in base.rows))
        a = remap(base, class_means(base)).remapped_of(Emotion.HAPPY)
        b = remap(moved, class_means(moved)).remapped_of(Emotion.HAPPY)
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 1e-12
    record(4, "shift invariance", ok, f"max change {worst:.1e} (tol 1e-12) over 5 shifts")
    assert ok


# 5 ---------------------------------------------------------------------------

def _vclub_estimate(rho: float) -> tuple[float, float]:
    s, e = correlated_gaussian_pairs(512, rho, seed=11)
    t0 = time.perf_counter()
    model, _ = train_variational(VClubModel(1, 1, hidden=64, seed=0), s, e,
                                 VariationalOptions(steps=300, batch_size=512, lr=1e-2, seed=0))
    s2, e2 = correlated_gaussian_pairs(512, rho, seed=12)
    est = mi_loss(model, s2, e2)
    return est, time.perf_counter() - t0


def test_c05_vclub_oracle():
    est_c, dt_c = _vclub_estimate(0.9)
    est_i, dt_i = _vclub_estimate(0.0)
    true_mi = gaussian_mi(0.9)
    ok = est_c >= 0.73 and abs(est_i) <= 0.05 and dt_c < 60 and dt_i < 60
    record(5, "vCLUB oracle", ok,
           f"rho=0.9 estimate={est_c:.3f} nats (true {true_mi:.3f}, need >=0.73), "
           f"independent |estimate|={abs(est_i):.4f} (<=0.05), {dt_c:.1f}s/{dt_i:.1f}s (<60s)")
    assert ok


# 6 ---------------------------------------------------------------------------

def _checks(seed: int) -> dict[str, float]:
    r = np.random.default_rng(seed)
    L, E, H = 8, 5, 6
    x = r.standard_normal((4, L, E))
    out = {}

    dense = DenseNet([E, H, 3], ["relu", "identity"], seed=seed)
    xd, yd = r.standard_normal((7, E)), r.standard_normal((7, 3))

    def dense_loss():
        o, cache = dense.forward(xd)
        g, _ = dense.backward(cache, 2.0 * (o - yd) / o.size)
        return float(np.mean((o - yd) ** 2)), g
    out["dense"] = grad_check(dense, dense_loss).max_rel_err

    nl = NLinear(L, seed=seed)
    target = r.standard_normal((4, L, E))

    def nl_loss():
        y, centred = nl.forward(x)
        return float(np.mean((y - target) ** 2)), nl.backward(centred, 2.0 * (y - target) / y.size)
    out["nlinear"] = grad_check(nl.params, nl_loss).max_rel_err

    ext = ExtractorModel(L, E, H, seed=seed)
    ext.head.params["W0"][...] = r.standard_normal(ext.head.params["W0"].shape)
    t = r.uniform(0.05, 0.95, 4)
    out["extractor"] = grad_check(ext.params, lambda: ext.loss_and_grad(x, t)).max_rel_err

    clf = ClassifierModel([Emotion.ANGRY, Emotion.HAPPY, Emotion.SAD], L, E, seed=seed)
    clf.head.params["W0"][...] = r.standard_normal(clf.head.params["W0"].shape)
    lab = r.integers(0, 3, 4)
    out["classifier"] = grad_check(clf.params, lambda: clf.loss_and_grad(x, lab)).max_rel_err

    vc = VClubModel(3, 2, hidden=H, seed=seed)
    s, e = r.standard_normal((10, 3)), r.standard_normal((10, 2))
    out["variational"] = grad_check(vc.params, lambda: vc.nll_and_grad(s, e)).max_rel_err

    proj = QueryProjection(3, E, seed=seed)
    q, k, v, d = r.standard_normal(3), r.standard_normal((4, E)), r.standard_normal((4, E)), r.standard_normal(E)
    out["projection"] = grad_check(
        proj.params, lambda: (float(fuse(q, k, v, proj)[0] @ d), fuse_backward(q, k, v, proj, d))
    ).max_rel_err
    return out


def test_c06_gradient_checks():
    worst: dict[str, float] = {}
    for seed in (101, 202, 303):
        for name, err in _checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(v < 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(6, "gradient checks", ok, f"max rel err over 3 points: {detail} (tol 1e-4)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_c07_attention_properties():
    r = np.random.default_rng(7)
    worst_sum = 0.0
    for _ in range(1000):
        n, e = int(r.integers(1, 16)), int(r.integers(1, 32))
        w = attention_weights(r.standard_normal(e) * 3, r.standard_normal((n, e)) * 3)
        worst_sum = max(worst_sum, abs(float(w.sum()) - 1.0))
    v = r.standard_normal((1, 9))
    single, _ = fuse(r.standard_normal(9), r.standard_normal((1, 9)), v)
    exact = single.tobytes() == v[0].tobytes()
    worst_perm = 0.0
    for _ in range(200):
        n = int(r.integers(2, 16))
        q, k, vals = r.standard_normal(9), r.standard_normal((n, 9)), r.standard_normal((n, 9))
        p = r.permutation(n)
        worst_perm = max(worst_perm, float(np.max(np.abs(fuse(q, k[p], vals[p])[0] - fuse(q, k, vals)[0]))))
    ok = worst_sum <= 1e-9 and exact and worst_perm < 1e-12
    record(7, "attention properties", ok,
           f"max |sum w - 1|={worst_sum:.1e} (tol 1e-9) on 1000 inputs, single-candidate exact={exact}, "
           f"max permutation change={worst_perm:.1e} (<1e-12)")
    assert ok


# 8 ---------------------------------------------------------------------------

def _sweep(pool, emotion, y_pred):
    return [float(select_candidates(pool, emotion, adjust_intensity(y_pred, a), 1).intensities[0])
            for a in ALPHAS]


def test_c08_control_monotonicity():
    corpus = synth_corpus(SyntheticSpec(per_class=50, feature_dim=16), 0)
    z, _ = standardize_features(corpus)
    table, _ = remap_pipeline(train_per_class(z), z)
    emb = np.random.default_rng(8).standard_normal((len(corpus), 4))
    pool = build_pool([(u, emb[i]) for i, u in enumerate(corpus.ids)
                       if corpus.emotions[i] is not Emotion.NEUTRAL], table)
    synth_ok = True
    for emo in pool.classes:
        for y in (0.3, 0.5, 0.7, 0.9):
            sel = _sweep(pool, emo, y)
            synth_ok &= all(a <= b for a, b in zip(sel, sel[1:]))

    # dense pool: 120 candidates per class whose raw scores span [-4, 4]
    rows = tuple(IntensityRow(f"{emo.value}_{i}", emo, float(v))
                 for emo in pool.classes for i, v in enumerate(np.linspace(-4.0, 4.0, 120)))
    dense_table = remap(IntensityTable(rows), class_means(IntensityTable(rows)))
    dense = build_pool([(r_.utterance_id, np.full(4, r_.raw)) for r_ in dense_table.rows], dense_table)
    dense_sel = {emo: _sweep(dense, emo, 0.9) for emo in dense.classes}
    strict_ok = all(len(dense.entries[e]) >= 100 and all(a < b for a, b in zip(s, s[1:]))
                    for e, s in dense_sel.items())
    ok = synth_ok and strict_ok
    sample = ", ".join(f"{v:.3f}" for v in dense_sel[Emotion.ANGRY])
    record(8, "control monotonicity", ok,
           f"synthetic pool non-decreasing={synth_ok}, dense pool strictly increasing={strict_ok} "
           f"(Angry, y_pred=0.9: {sample})")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_c09_loss_arithmetic():
    total = total_loss(1.0, 2.0, 3.0, LossWeights(alpha1=0.1, alpha2=0.1))
    net = DenseNet([3, 4, 4], ["relu", "identity"], seed=0)
    net.params["W0"][...] = 0.0
    net.params["W1"][...] = 0.0
    net.params["b1"][...] = [0.4, -1.2, 0.7, 0.1]
    r = np.random.default_rng(9)
    mi = mi_loss(VClubModel(3, 2, hidden=4, net=net), r.standard_normal((64, 3)), r.standard_normal((64, 2)))
    ok = total == 1.5 and mi == 0.0
    record(9, "loss arithmetic", ok, f"total_loss={total!r} (exactly 1.5), mi_loss={mi!r} (exactly 0)")
    assert ok


# 10 --------------------------------------------------------------------------

def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "gen": {"per_class": 30, "speaker_dim": 8},
        "controller": {"window": 12, "emb_dim": 16, "hidden": 16, "epochs": 30},
        "mi": {"steps": 100, "hidden": 16, "batch_size": 128},
    }))
    out = tmp_path / "run"
    assert main(["all", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    first = _snapshot(out)
    shutil.rmtree(out)
    assert main(["all", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    second = _snapshot(out)
    capsys.readouterr()
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    ok = not differing and len(first) > 10
    record(10, "determinism", ok,
           f"{len(first)} artifacts compared, {len(differing)} differ"
           + (f" ({', '.join(differing[:3])})" if differing else ""))
    assert ok
