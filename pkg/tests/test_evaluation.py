import logging

import numpy as np
import pytest

import oracles
from plants.evaluation import (
    HmmSpec,
    Regime,
    anomaly_score,
    anomaly_scores,
    auroc,
    bench_similarity,
    classify_probe,
    default_hmm_spec,
    difference,
    forecast_probe,
    gen_hmm_mts,
    inject_spikes,
    periodic_dataset,
    trajectory_pca,
    window_features,
)
from plants.model import ModelConfig, PLanTSModel


def sine_regimes(n, channels=1):
    return [Regime("sine", freqs=(0.05 * (s + 1),) * channels, amps=(1.0,) * channels) for s in range(n)]


def test_identity_chain_never_leaves_initial_state():
    spec = HmmSpec(np.eye(3), sine_regimes(3), initial=np.array([0.0, 1.0, 0.0]))
    ds = gen_hmm_mts(spec, 4, 200, 1, seed=0)
    assert np.all(ds.labels == 1)


def test_uniform_chain_occupancy():
    spec = HmmSpec(np.full((4, 4), 0.25), sine_regimes(4), dwell=1)
    ds = gen_hmm_mts(spec, 1, 10_000, 1, seed=1)
    freq = np.bincount(ds.labels.ravel(), minlength=4) / 10_000
    assert np.all(np.abs(freq - 0.25) <= 0.02)


def test_dwell_holds_state():
    ds = gen_hmm_mts(default_hmm_spec(2, dwell=10), 3, 100, 2, seed=2)
    blocks = ds.labels.reshape(3, 10, 10)
    assert np.all(blocks == blocks[:, :, :1])


def test_generator_is_deterministic():
    spec = default_hmm_spec(3)
    a = gen_hmm_mts(spec, 5, 120, 3, seed=7)
    b = gen_hmm_mts(spec, 5, 120, 3, seed=7)
    c = gen_hmm_mts(spec, 5, 120, 3, seed=8)
    assert a.values.tobytes() == b.values.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.values.tobytes() != c.values.tobytes()


def test_ar2_regime_runs_and_invalid_specs_raise():
    ar = [Regime("ar2", ar=((0.5, -0.2),)), Regime("ar2", ar=((-0.5, 0.3),))]
    ds = gen_hmm_mts(HmmSpec(np.full((2, 2), 0.5), ar), 2, 50, 1)
    assert np.all(np.isfinite(ds.values))
    with pytest.raises(ValueError):
        gen_hmm_mts(HmmSpec(np.array([[0.5, 0.6], [0.5, 0.5]]), sine_regimes(2)), 1, 10, 1)
    with pytest.raises(ValueError):
        gen_hmm_mts(HmmSpec(np.eye(3), sine_regimes(2)), 1, 10, 1)
    with pytest.raises(ValueError):
        gen_hmm_mts(HmmSpec(np.eye(1), [Regime("ar2", ar=((1.5, 0.0),))]), 1, 10, 1)


def test_difference_examples():
    assert difference([1.0, 4.0, 9.0, 16.0], 1).tolist() == [3.0, 5.0, 7.0]
    assert difference([1.0, 4.0, 9.0, 16.0], 2).tolist() == [2.0, 2.0]
    assert difference([1.0, 2.0], 0).tolist() == [1.0, 2.0]
    assert difference(np.zeros((2, 5, 3)), 1).shape == (2, 4, 3)
    with pytest.raises(ValueError):
        difference([1.0, 2.0], 2)
    with pytest.raises(ValueError):
        difference([1.0, 2.0], -1)


def toy_classes(seed, n=60):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=n)
    X = rng.normal(size=(n, 4)) * 0.1
    X[np.arange(n), y] += 3.0
    return X, y


@pytest.mark.parametrize("kind", ["linear", "knn"])
def test_probe_separates_easy_classes(kind):
    X, y = toy_classes(0)
    Xt, yt = toy_classes(1)
    rep = classify_probe(X, y, Xt, yt, kind=kind)
    assert rep.metrics["accuracy"] == 1.0
    assert rep.metrics["accuracy"] >= rep.baseline["accuracy"]
    assert {r["metric"] for r in rep.rows()} == {"accuracy"}


def test_shuffled_labels_score_near_chance():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X, Xt = rng.normal(size=(200, 5)), rng.normal(size=(200, 5))
        y, yt = rng.integers(0, 2, 200), rng.integers(0, 2, 200)
        accs.append(classify_probe(X, y, Xt, yt).metrics["accuracy"])
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_probe_rejects_single_class_and_unknown_kind():
    X = np.zeros((5, 2))
    with pytest.raises(ValueError):
        classify_probe(X, np.zeros(5), X, np.zeros(5))
    with pytest.raises(ValueError):
        classify_probe(X, np.arange(5) % 2, X, np.arange(5) % 2, kind="svm")


def test_forecast_phase_features_beat_raw_window():
    L = 300
    t = np.arange(L)
    series = (np.sin(2 * np.pi * t / 40) + 0.01 * np.random.default_rng(0).normal(size=L))[:, None]
    # features that know the phase exactly should predict far ahead with lower error
    phase = np.stack([np.sin(2 * np.pi * t / 40), np.cos(2 * np.pi * t / 40)], axis=1)
    rep = forecast_probe(phase, series, horizon=16, lookback=2)
    assert rep.metrics["mse"] < rep.baseline["mse"]
    assert rep.task == "forecast-h16"


def test_forecast_edge_cases():
    const = np.full((60, 1), 3.0)
    rep = forecast_probe(np.random.default_rng(1).normal(size=(60, 4)), const, horizon=4)
    assert rep.metrics["mse"] == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        forecast_probe(np.zeros((60, 4)), const, horizon=0)
    with pytest.raises(ValueError):
        forecast_probe(np.zeros((20, 4)), const[:20], horizon=10)


def small_model(C=2, seed=0):
    return PLanTSModel(ModelConfig(input_dims=C, latent_dim=4, transition_dim=4, hidden=8,
                                   depth=3, head_hidden=8, seed=seed))


def test_window_features_shapes_and_majority_labels():
    m = small_model()
    x = np.random.default_rng(0).normal(size=(2, 10, 2))
    labels = np.array([[0, 0, 0, 1, 1, 1, 1, 2, 2, 2]] * 2)
    F, y, inst = window_features(m, x, labels, 4)
    assert F.shape == (6, 8)
    assert y.tolist() == [0, 1, 2] * 2
    assert inst.tolist() == [0, 0, 0, 1, 1, 1]
    z = m.encode_full(x)
    np.testing.assert_allclose(F[2], z[0, 8:].mean(axis=0), atol=1e-12)


def test_anomaly_masking_a_masked_value_scores_zero():
    m = small_model()
    x = np.random.default_rng(1).normal(size=(30, 2))
    x[12] = 0.0
    assert anomaly_score(m, x, 12) == 0.0
    assert np.all(anomaly_scores(m, x) >= 0)
    with pytest.raises(IndexError):
        anomaly_score(m, x, 30)
    with pytest.raises(IndexError):
        anomaly_scores(m, x, [-1])


def test_anomaly_scores_match_single_position_calls():
    m = small_model()
    x = np.random.default_rng(2).normal(size=(20, 2))
    batch = anomaly_scores(m, x, chunk=7)
    single = [anomaly_score(m, x, t) for t in range(20)]
    np.testing.assert_allclose(batch, single, atol=1e-12)


def test_spike_scores_above_clean_tail():
    m = small_model(seed=3)
    clean = periodic_dataset(1, 200, 2, seed=3)[0]
    clean = (clean - clean.mean(axis=0)) / clean.std(axis=0)
    spiked, pos = inject_spikes(clean, 1, magnitude=10.0, seed=3)
    ref = anomaly_scores(m, clean)
    assert anomaly_scores(m, spiked, pos)[0] > np.percentile(ref, 99)


def test_auroc_examples():
    assert auroc([3.0, 4.0], [1.0, 2.0]) == 1.0
    assert auroc([1.0, 2.0], [3.0, 4.0]) == 0.0
    assert auroc([1.0], [1.0]) == 0.5
    rng = np.random.default_rng(4)
    pos, neg = rng.normal(size=30), rng.normal(size=40)
    pairs = np.mean([(p > q) + 0.5 * (p == q) for p in pos for q in neg])
    assert auroc(pos, neg) == pytest.approx(pairs, abs=1e-12)


def test_inject_spikes_respects_margin():
    x = np.zeros((50, 3)) + np.arange(50)[:, None]
    y, pos = inject_spikes(x, 5, seed=0, margin=8)
    assert len(pos) == 5 and pos.min() >= 8 and pos.max() < 42
    changed = np.nonzero(np.any(y != x, axis=1))[0]
    assert changed.tolist() == pos.tolist()


def test_pca_on_a_line():
    t = np.linspace(0, 1, 50)
    Z = np.outer(t, [1.0, 2.0, -1.0]) + np.array([0.0, 1.0, 2.0])
    Z[:, 0] += 1e-4 * np.sin(7 * t)
    Z[:, 2] += 1e-4 * np.cos(11 * t)
    proj, ratios = trajectory_pca(Z, 2)
    assert ratios[0] == pytest.approx(1.0, abs=1e-6)
    assert proj.shape == (50, 2)


def test_pca_matches_bruteforce():
    Z = np.random.default_rng(5).normal(size=(40, 6)) @ np.diag([3, 2, 1, 0.5, 0.2, 0.1])
    proj, ratios = trajectory_pca(Z, 3)
    want_proj, want_ratios = oracles.pca_bruteforce(Z, 3)
    np.testing.assert_allclose(proj, want_proj, atol=1e-8)
    np.testing.assert_allclose(ratios, want_ratios, atol=1e-8)
    assert ratios.sum() <= 1 + 1e-12 and np.all(np.diff(ratios) <= 0)


def test_pca_low_rank_warns(caplog):
    Z = np.outer(np.arange(10.0), [1.0, 1.0, 1.0, 1.0])
    with caplog.at_level(logging.WARNING, logger="plants.evaluation"):
        proj, ratios = trajectory_pca(Z, 3)
    assert proj.shape == (10, 1) and "rank" in caplog.text
    with pytest.raises(ValueError):
        trajectory_pca(np.zeros((3, 4)), 3)


def test_bench_records_precompute_phases():
    mx = bench_similarity(64, 20, 2, "mxcorr", repeats=1)
    dtw = bench_similarity(64, 20, 2, "dtw", repeats=1)
    assert mx.precompute_mean == 0.0 and mx.epoch_mean > 0
    assert dtw.precompute_mean > 0
    assert set(mx.as_row()) == set(mx.FIELDS)
    with pytest.raises(ValueError):
        bench_similarity(64, 20, 2, "euclid", repeats=1)


def test_dtw_cost_grows_quadratically_in_n():
    a = min(bench_similarity(48, 40, 2, "dtw", repeats=1).precompute_mean for _ in range(2))
    b = min(bench_similarity(48, 80, 2, "dtw", repeats=1).precompute_mean for _ in range(2))
    assert 3.0 <= b / a <= 5.0
