import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dotuda import pseudo_labels as pl
from dotuda.pseudo_labels import MetricKind, PseudoLabelState

from oracles import metric, naive_refine

KINDS = [m.value for m in MetricKind]


def random_instance(rng, n=None, k=None, d=None):
    n = n or int(rng.integers(2, 51))
    k = k or int(rng.integers(2, 6))
    d = d or int(rng.integers(2, 9))
    feats = rng.standard_normal((n, d))
    w = rng.standard_normal((d, k)) * rng.uniform(0.5, 3.0)
    b = rng.standard_normal(k)
    return feats, (lambda f: f @ w + b), feats @ w + b


def assert_matches_oracle(feats, head, logits, kind):
    got = pl.refine(feats, head, kind)
    ref = naive_refine(feats.tolist(), logits.tolist(), kind)
    assert got.initial_labels.tolist() == ref["initial"]
    assert got.reliable.tolist() == ref["reliable"]
    assert got.labels.tolist() == ref["labels"]
    assert got.center_valid.tolist() == ref["valid"]
    assert np.max(np.abs(got.centers - np.array(ref["centers"]))) < 1e-10
    assert np.max(np.abs(got.class_weights - np.array(ref["weights"]))) < 1e-12


def test_initial_predictions_examples():
    ident = lambda f: f  # noqa: E731
    labels, probs, _ = pl.initial_predictions(np.array([[0.1, 0.9, 0.3], [1.0, 1.0, 0.0]]), ident)
    assert labels.tolist() == [1, 0]
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 4))
    assert pl.initial_predictions(x, ident)[0].tolist() == [int(np.argmax(r)) for r in x]


def test_metric_examples():
    z = np.zeros((1, 3))
    assert abs(pl.metric_delta(z, "confidence")[0] - 1 / 3) < 1e-15
    assert abs(pl.metric_delta(z, "neg_entropy")[0] + math.log(3)) < 1e-12
    assert abs(pl.metric_delta(z, "energy")[0] - math.log(3)) < 1e-12
    dom = np.array([[10.0, -10.0]])
    assert abs(pl.metric_delta(dom, "confidence")[0] - 1) < 1e-8
    assert abs(pl.metric_delta(dom, "energy")[0] - 10) < 1e-8


@pytest.mark.parametrize("kind", KINDS)
def test_metric_matches_scalar_script(kind):
    logits = np.random.default_rng(1).standard_normal((20, 5)) * 4
    expected = [metric(r, kind) for r in logits.tolist()]
    np.testing.assert_allclose(pl.metric_delta(logits, kind), expected, atol=1e-13)


def test_energy_does_not_overflow():
    assert abs(pl.metric_delta(np.array([[1000.0, 999.0]]), "energy")[0] - (1000 + math.log1p(math.exp(-1)))) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.floats(-100, 100))
def test_metric_shift_properties(seed, c):
    logits = np.random.default_rng(seed).standard_normal((8, 4)) * 3
    for kind in ("confidence", "energy"):
        a, b = pl.metric_delta(logits, kind), pl.metric_delta(logits + c, kind)
        for i in range(8):
            for j in range(8):
                if abs(a[i] - a[j]) > 1e-9:
                    assert (a[i] < a[j]) == (b[i] < b[j])
    np.testing.assert_allclose(pl.metric_delta(logits + c, "confidence"), pl.metric_delta(logits, "confidence"),
                               atol=1e-12)


def test_split_examples():
    flags, members = pl.split_reliable(np.array([0, 0, 0]), np.array([1.0, 2.0, 3.0]), 1)
    assert flags.tolist() == [False, True, True]
    assert members[0].tolist() == [1, 2]
    flags, members = pl.split_reliable(np.array([1]), np.array([-4.2]), 3)
    assert flags.tolist() == [True] and members[0].size == 0 and members[2].size == 0


def test_split_matches_double_loop():
    rng = np.random.default_rng(2)
    labels, deltas = rng.integers(0, 3, 20), rng.standard_normal(20)
    flags, _ = pl.split_reliable(labels, deltas, 3)
    for i in range(20):
        same = [deltas[j] for j in range(20) if labels[j] == labels[i]]
        assert flags[i] == (deltas[i] >= sum(same) / len(same))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(-1e6, 1e6)), min_size=1, max_size=30))
def test_split_keeps_one_per_nonempty_class(pairs):
    labels = np.array([p[0] for p in pairs])
    deltas = np.array([p[1] for p in pairs])
    flags, members = pl.split_reliable(labels, deltas, 4)
    for k in set(labels.tolist()):
        assert members[k].size >= 1
    assert flags.sum() == sum(m.size for m in members)


def test_class_centers_examples():
    f = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]])
    centers, valid = pl.class_centers(f, [np.array([0, 1]), np.array([], dtype=int), np.array([2])])
    np.testing.assert_array_equal(centers, [[0.5, 0.5], [0, 0], [3, 4]])
    assert valid.tolist() == [True, False, True]


def _state(centers, weights, reliable, initial):
    n = len(reliable)
    return PseudoLabelState(
        labels=np.array(initial), reliable=np.array(reliable), centers=np.array(centers, dtype=float),
        center_valid=np.ones(len(centers), dtype=bool), class_weights=np.array(weights),
        metric_values=np.zeros(n), initial_labels=np.array(initial),
    )


def test_reassign_colinear_and_weight_dominance():
    st_ = _state([[1.0, 0.0], [0.0, 1.0]], [1.5, 1.5], [False], [1])
    assert pl.reassign(np.array([[2.0, 0.0]]), st_).tolist() == [0]
    # x sits 60 degrees from both centers, so 1 - cos = 0.5 to each and the lighter weight decides
    def unit(deg):
        return [math.cos(math.radians(deg)), math.sin(math.radians(deg))]

    x, centers = np.array([unit(-60)]), np.array([unit(0), unit(-120)])
    d = pl.cosine_distance(x, centers)[0]
    assert np.all(np.abs(d - 0.5) < 1e-12)
    st_ = _state(centers, [math.exp(0.75), math.exp(0.25)], [False], [0])
    assert pl.reassign(x, st_).tolist() == [1]


def test_reassign_aborts_without_centers(caplog):
    st_ = _state([[0.0, 0.0]], [0.0], [False, False], [0, 0])
    st_.center_valid[:] = False
    st_.labels = np.array([1, 1])
    with caplog.at_level(logging.WARNING):
        out = pl.reassign(np.ones((2, 2)), st_)
    assert out.tolist() == [1, 1] and st_.aborted
    assert "aborted" in caplog.text


def test_refine_fixed_point():
    feats = np.vstack([np.tile([5.0, 0.0], (4, 1)), np.tile([0.0, 5.0], (4, 1))])
    st_ = pl.refine(feats, lambda f: f * 10, "energy")
    assert st_.labels.tolist() == [0] * 4 + [1] * 4


def test_refine_pulls_outlier_into_cluster():
    rng = np.random.default_rng(3)
    a = np.array([4.0, 0.2]) + 0.05 * rng.standard_normal((6, 2))
    b = np.array([0.2, 4.0]) + 0.05 * rng.standard_normal((6, 2))
    outlier = np.array([[1.0, 0.1]])  # points at cluster a but the bias tips it to class 1
    feats = np.vstack([a, b, outlier])
    head = lambda f: f + np.array([0.0, 0.95])  # noqa: E731
    got = pl.refine(feats, head, "confidence")
    assert got.initial_labels[-1] == 1 and not got.reliable[-1]
    assert got.labels[-1] == 0
    assert got.labels[-1] == naive_refine(feats.tolist(), head(feats).tolist(), "confidence")["labels"][-1]


@pytest.mark.parametrize("seed", range(5))
def test_refine_12_and_50_sample_instances(seed):
    rng = np.random.default_rng(seed)
    for n, k in ((12, 3), (50, 4)):
        feats, head, logits = random_instance(rng, n=n, k=k, d=4)
        assert_matches_oracle(feats, head, logits, KINDS[seed % 3])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1_000_000), st.sampled_from(KINDS), st.floats(0.01, 100))
def test_refine_invariants(seed, kind, scale):
    rng = np.random.default_rng(seed)
    feats, head, logits = random_instance(rng)
    got = pl.refine(feats, head, kind)
    # reliable samples keep their prediction
    assert np.all(got.labels[got.reliable] == got.initial_labels[got.reliable])
    for k in np.flatnonzero(got.center_valid):
        idx = np.flatnonzero(got.reliable & (got.initial_labels == k))
        assert np.max(np.abs(got.centers[k] - feats[idx].mean(axis=0))) < 1e-10
        assert 1.0 < got.class_weights[k] <= math.e
    # rescaling features and centers together leaves the reassignment unchanged
    scaled = PseudoLabelState(got.labels, got.reliable, got.centers * scale, got.center_valid, got.class_weights,
                              got.metric_values, got.initial_labels)
    assert np.array_equal(pl.reassign(feats * scale, scaled), got.labels)


def test_refine_is_deterministic():
    feats, head, _ = random_instance(np.random.default_rng(9), n=40, k=4, d=6)
    a, b = pl.refine(feats, head, "energy"), pl.refine(feats, head, "energy")
    for name, arr in a.to_arrays().items():
        assert arr.tobytes() == b.to_arrays()[name].tobytes()


def test_state_file_round_trip(tmp_path):
    feats, head, _ = random_instance(np.random.default_rng(4), n=10, k=3, d=3)
    state = pl.refine(feats, head, "confidence")
    pl.write_state_file(tmp_path / "s.jsonl", state)
    recs = pl.read_state_file(tmp_path / "s.jsonl")
    assert [r["id"] for r in recs] == list(range(10))
    assert [r["label"] for r in recs] == state.labels.tolist()
    assert [r["reliable"] for r in recs] == state.reliable.tolist()
    (tmp_path / "bad.jsonl").write_text('{"id": 0}\n{oops\n')
    with pytest.raises(ValueError, match=":2:"):
        pl.read_state_file(tmp_path / "bad.jsonl")
