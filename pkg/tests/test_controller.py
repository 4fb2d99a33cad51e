import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from emointensity.controller import (
    INTENSITY_EPS, CandidatePool, ClassifierModel, ExtractorModel, ExtractorOptions, NLinear,
    PoolEntry, QueryProjection, adjust_intensity, attention_weights, build_pool, classify_emotion,
    extract_intensity, fuse, fuse_backward, mix_emotions, mixed_training_set, nlinear_forward,
    sample_lambda, select_candidates, softmax, tile_sequence, train_extractor,
)
from emointensity.dataset import Emotion
from emointensity.nets import grad_check
from emointensity.remap import IntensityRow, IntensityTable

CLASSES = [Emotion.ANGRY, Emotion.HAPPY, Emotion.SAD, Emotion.SURPRISE]
L, E = 10, 6


def _pool(values, emotion=Emotion.SAD, dim=3):
    rows = tuple(IntensityRow(f"u{i}", emotion, 0.0, v) for i, v in enumerate(values))
    embs = [(f"u{i}", np.full(dim, float(i))) for i in range(len(values))]
    return build_pool(embs, IntensityTable(rows))


# ---- mixing ------------------------------------------------------------------

def test_lambda_uniform_mean():
    lam = sample_lambda(1.0, 1.0, seed=0, size=10_000)
    assert abs(lam.mean() - 0.5) < 0.02
    assert lam.min() >= 0.0 and lam.max() <= 1.0


@given(st.floats(0.2, 20.0), st.integers(0, 1000))
def test_lambda_symmetric_and_seeded(a, seed):
    x = sample_lambda(a, a, seed=seed, size=4000)
    np.testing.assert_array_equal(x, sample_lambda(a, a, seed=seed, size=4000))
    assert abs(x.mean() - 0.5) < 0.05


def test_lambda_rejects_bad_shape():
    with pytest.raises(ValueError):
        sample_lambda(0.0, 1.0)


def test_mix_examples(rng):
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    assert mix_emotions(a, b, 1.0).tobytes() == a.tobytes()
    assert mix_emotions(a, b, 0.0).tobytes() == b.tobytes()
    np.testing.assert_array_equal(mix_emotions([4.0, 0.0], [0.0, 4.0], 0.25), [1.0, 3.0])
    with pytest.raises(ValueError):
        mix_emotions(a, b[:3], 0.5)
    with pytest.raises(ValueError):
        mix_emotions(a, b, 1.5)


# ---- NLinear -----------------------------------------------------------------

def test_nlinear_constant_zero_map(rng):
    seq = np.tile(rng.standard_normal(E), (L, 1))
    out = nlinear_forward({"W": np.zeros((L, L)), "b": np.zeros(L)}, seq)
    np.testing.assert_array_equal(out, seq)


def test_nlinear_identity(rng):
    seq = rng.standard_normal((L, E))
    # (x - last) + last is exact up to one rounding per element
    out = NLinear(L, init="identity")(seq)
    np.testing.assert_allclose(out, seq, rtol=0, atol=np.spacing(np.abs(seq) + np.abs(seq[-1])).max())


@given(st.integers(0, 1000), st.floats(-50, 50))
def test_nlinear_shift_equivariant(seed, c):
    r = np.random.default_rng(seed)
    layer = NLinear(L, seed=seed)
    seq = r.standard_normal((L, E))
    np.testing.assert_allclose(layer(seq + c), layer(seq) + c, atol=1e-12 * max(1.0, abs(c)) * 10)


def test_nlinear_window_checked(rng):
    with pytest.raises(ValueError):
        NLinear(L)(rng.standard_normal((L + 1, E)))


# ---- heads -------------------------------------------------------------------

def test_zero_head_gives_half(rng):
    m = ExtractorModel(L, E, 8, seed=0)
    m.head.params["b0"][...] = 0.0
    assert extract_intensity(m, rng.standard_normal((L, E))) == 0.5


def test_extractor_range_fuzz(rng):
    m = ExtractorModel(L, E, 8, seed=3)
    m.head.params["W0"][...] = rng.standard_normal(m.head.params["W0"].shape) * 5
    y = m.predict(rng.standard_normal((1000, L, E)) * 3)
    assert np.all((y > 0) & (y < 1))


def test_classifier_probabilities(rng):
    m = ClassifierModel(CLASSES, L, E, seed=0)
    p = classify_emotion(m, rng.standard_normal((L, E)))
    np.testing.assert_allclose(p, 0.25, atol=0, rtol=0)  # zero head -> uniform
    m.head.params["W0"][...] = rng.standard_normal(m.head.params["W0"].shape)
    p = m.predict_proba(rng.standard_normal((50, L, E)))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift(logits, c):
    np.testing.assert_allclose(softmax(np.array(logits) + c), softmax(logits), atol=1e-12)


def test_shape_errors(rng):
    with pytest.raises(ValueError):
        extract_intensity(ExtractorModel(L, E, 4), rng.standard_normal((L, E + 1)))
    with pytest.raises(ValueError):
        classify_emotion(ClassifierModel(CLASSES, L, E), rng.standard_normal((L - 1, E)))


@pytest.mark.parametrize("point", range(3))
def test_head_gradients(rng, point):
    x = rng.standard_normal((5, L, E))
    ext = ExtractorModel(L, E, 8, seed=point)
    ext.head.params["W0"][...] = rng.standard_normal(ext.head.params["W0"].shape)
    t = rng.uniform(0.1, 0.9, 5)
    assert grad_check(ext.params, lambda: ext.loss_and_grad(x, t)).passed
    clf = ClassifierModel(CLASSES, L, E, seed=point)
    clf.head.params["W0"][...] = rng.standard_normal(clf.head.params["W0"].shape)
    y = rng.integers(0, 4, 5)
    assert grad_check(clf.params, lambda: clf.loss_and_grad(x, y)).passed


# ---- training ----------------------------------------------------------------

def test_memorizes_single_pair(rng):
    x = np.repeat(rng.standard_normal((1, L, E)), 3, axis=0)
    ext, clf, hist = train_extractor(x, [0.8] * 3, [Emotion.ANGRY] * 3,
                                     ExtractorOptions(window=L, hidden=8, epochs=500))
    assert hist.intensity_loss[-1] < 1e-3
    assert all(b <= a for a, b in zip(hist.intensity_loss, hist.intensity_loss[1:]))
    assert all(b <= a for a, b in zip(hist.class_loss, hist.class_loss[1:]))


def _class_data(n, seed, protos):
    r = np.random.default_rng(seed)
    lab = r.integers(0, len(CLASSES), n)
    x = np.stack([tile_sequence(protos[k] + 0.3 * r.standard_normal(E), L, r, 0.05) for k in lab])
    return x, [CLASSES[k] for k in lab]


def test_classifier_held_out_accuracy():
    protos = np.random.default_rng(0).standard_normal((4, E)) * 2
    x, y = _class_data(200, 1, protos)
    xt, yt = _class_data(200, 2, protos)
    _, clf, _ = train_extractor(x, np.full(len(x), 0.5), y,
                                ExtractorOptions(window=L, hidden=8, epochs=100), class_order=CLASSES)
    assert np.mean([a is b for a, b in zip(clf.predict(xt), yt)]) >= 0.95


def test_extractor_beats_constant_baseline():
    r = np.random.default_rng(5)
    direction = r.standard_normal(E)
    base = r.standard_normal(E)
    neutral = base[None] + 0.1 * r.standard_normal((20, E))

    def data(n, seed):
        rr = np.random.default_rng(seed)
        level = rr.uniform(0.2, 0.8, n)
        emb = base + np.outer(level - 0.5, direction) * 3
        return mixed_training_set(emb, [Emotion.HAPPY] * n, level, neutral, L, seed=seed)

    x, t, lab = data(120, 1)
    xv, tv, _ = data(60, 2)
    ext, _, _ = train_extractor(x, t, lab, ExtractorOptions(window=L, hidden=16, epochs=300))
    assert np.mean((ext.predict(xv) - tv) ** 2) < np.mean((0.5 - tv) ** 2)


def test_training_deterministic(rng):
    x = rng.standard_normal((6, L, E))
    opts = ExtractorOptions(window=L, hidden=8, epochs=20, seed=4)
    a = train_extractor(x, np.linspace(0.1, 0.9, 6), CLASSES[:2] * 3, opts)
    b = train_extractor(x, np.linspace(0.1, 0.9, 6), CLASSES[:2] * 3, opts)
    for m, n in ((a[0], b[0]), (a[1], b[1])):
        assert json.dumps(m.to_json()) == json.dumps(n.to_json())


def test_model_json_roundtrip(rng):
    x = rng.standard_normal((3, L, E))
    ext, clf, _ = train_extractor(x, [0.2, 0.5, 0.7], CLASSES[:3], ExtractorOptions(window=L, hidden=8, epochs=5))
    ext2 = ExtractorModel.from_json(json.loads(json.dumps(ext.to_json())))
    clf2 = ClassifierModel.from_json(json.loads(json.dumps(clf.to_json())))
    assert ext2.predict(x).tobytes() == ext.predict(x).tobytes()
    assert clf2.predict_proba(x).tobytes() == clf.predict_proba(x).tobytes()
    assert clf2.classes == clf.classes


def test_training_input_checks(rng):
    with pytest.raises(ValueError):
        train_extractor(rng.standard_normal((2, L + 1, E)), [0.5, 0.5], CLASSES[:2],
                        ExtractorOptions(window=L))
    with pytest.raises(ValueError):
        train_extractor(rng.standard_normal((2, L, E)), [0.5], CLASSES[:2], ExtractorOptions(window=L))


def test_mixture_labels(rng):
    emb = rng.standard_normal((4, E))
    x, t, lab = mixed_training_set(emb, [Emotion.SAD] * 4, np.full(4, 0.6), rng.standard_normal((3, E)), L)
    assert x.shape == (8, L, E) and len(lab) == 8
    assert np.all(t[0::2] == 0.6) and np.all((t[1::2] >= 0) & (t[1::2] <= 0.6))


# ---- pool and selection ------------------------------------------------------

def test_pool_sorted():
    p = _pool([0.9, 0.2, 0.5])
    assert p.intensities(Emotion.SAD).tolist() == [0.2, 0.5, 0.9]


def test_pool_stable_on_ties():
    p = _pool([0.4, 0.4, 0.1, 0.4])
    assert [e.utterance_id for e in p.entries[Emotion.SAD]] == ["u2", "u0", "u1", "u3"]


def test_pool_roundtrip(tmp_path):
    p = _pool([0.31, 0.77, 0.123456789012345])
    p.save(tmp_path / "pool.json")
    q = CandidatePool.load(tmp_path / "pool.json")
    assert q.dumps() == p.dumps()
    for a, b in zip(p.entries[Emotion.SAD], q.entries[Emotion.SAD]):
        assert a.intensity == b.intensity and a.embedding.tobytes() == b.embedding.tobytes()


def test_pool_missing_row():
    t = IntensityTable((IntensityRow("a", Emotion.SAD, 0.0, 0.5),))
    with pytest.raises(KeyError):
        build_pool([("b", np.zeros(2))], t)


def test_pool_validates():
    with pytest.raises(ValueError):
        CandidatePool({Emotion.SAD: (PoolEntry(0.5, np.zeros(2)), PoolEntry(0.2, np.zeros(2)))})
    with pytest.raises(ValueError):
        CandidatePool({Emotion.SAD: (PoolEntry(1.0, np.zeros(2)),)})


def test_adjust_examples():
    assert adjust_intensity(0.37, 1.0) == 0.37
    assert adjust_intensity(0.37, 0.0) == INTENSITY_EPS
    targets = [adjust_intensity(0.5, a) for a in (0.2, 0.4, 0.6, 0.8)]
    np.testing.assert_allclose(targets, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    assert all(b > a for a, b in zip(targets, targets[1:]))
    with pytest.raises(ValueError):
        adjust_intensity(0.5, -0.1)


@given(st.floats(1e-6, 1 - 1e-6), st.floats(0, 5), st.floats(0, 5))
def test_adjust_monotone(y, a1, a2):
    lo, hi = sorted((a1, a2))
    assert adjust_intensity(y, lo) <= adjust_intensity(y, hi)
    assert INTENSITY_EPS <= adjust_intensity(y, hi) <= 1 - INTENSITY_EPS


@given(st.floats(1e-6, 0.5), st.floats(1e-6, 0.5), st.floats(0, 3))
def test_adjust_monotone_in_prediction(y1, dy, a):
    assert adjust_intensity(y1, a) <= adjust_intensity(min(y1 + dy, 1 - 1e-9), a)


def test_select_examples():
    p = _pool([0.2, 0.5, 0.9])
    assert select_candidates(p, Emotion.SAD, 0.55, 1).intensities.tolist() == [0.5]
    assert select_candidates(p, Emotion.SAD, 0.35, 1).intensities.tolist() == [0.2]
    with pytest.raises(KeyError):
        select_candidates(p, Emotion.HAPPY, 0.5)
    with pytest.raises(ValueError):
        select_candidates(p, Emotion.SAD, 0.5, 0)


@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=30), st.floats(0, 1))
def test_select_full_matches_brute_force(values, target):
    p = _pool(values)
    got = select_candidates(p, Emotion.SAD, target, top_k=len(values)).intensities
    want = sorted(values, key=lambda v: (abs(v - target), v))
    assert got.tolist() == want


@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=30),
       st.floats(0, 1), st.floats(0, 1))
def test_select_monotone_in_target(values, t1, t2):
    p = _pool(values)
    lo, hi = sorted((t1, t2))
    a = select_candidates(p, Emotion.SAD, lo, 1).intensities[0]
    b = select_candidates(p, Emotion.SAD, hi, 1).intensities[0]
    assert a <= b


# ---- fusion ------------------------------------------------------------------

def test_single_candidate_exact(rng):
    v = rng.standard_normal((1, E))
    out, w = fuse(rng.standard_normal(E), rng.standard_normal((1, E)), v)
    assert out.tobytes() == v[0].tobytes() and w.tolist() == [1.0]


def test_identical_keys_uniform(rng):
    keys = np.tile(rng.standard_normal(E), (4, 1))
    vals = rng.standard_normal((4, E))
    out, w = fuse(rng.standard_normal(E), keys, vals)
    np.testing.assert_allclose(w, 0.25, atol=1e-15)
    np.testing.assert_allclose(out, vals.mean(axis=0), atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_weights_are_distribution(seed, n):
    r = np.random.default_rng(seed)
    w = attention_weights(r.standard_normal(E) * 5, r.standard_normal((n, E)) * 5)
    assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-9


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_permutation_invariance(seed, n):
    r = np.random.default_rng(seed)
    q, k, v = r.standard_normal(E), r.standard_normal((n, E)), r.standard_normal((n, E))
    perm = r.permutation(n)
    np.testing.assert_allclose(fuse(q, k[perm], v[perm])[0], fuse(q, k, v)[0], atol=1e-12, rtol=0)


def test_projection_identity_and_errors(rng):
    proj = QueryProjection(E, E)
    q = rng.standard_normal(E)
    np.testing.assert_array_equal(proj(q), q)
    with pytest.raises(ValueError):
        fuse(rng.standard_normal(E + 1), rng.standard_normal((2, E)), rng.standard_normal((2, E)))
    with pytest.raises(ValueError):
        fuse(q, np.empty((0, E)), np.empty((0, E)))


@pytest.mark.parametrize("point", range(3))
def test_projection_gradient(rng, point):
    proj = QueryProjection(4, E, seed=point)
    q, k, v = rng.standard_normal(4), rng.standard_normal((5, E)), rng.standard_normal((5, E))
    dout = rng.standard_normal(E)

    def loss():
        out, _ = fuse(q, k, v, proj)
        return float(out @ dout), fuse_backward(q, k, v, proj, dout)
    assert grad_check(proj.params, loss).passed
