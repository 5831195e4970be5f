import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare, ks_2samp

from d3m.calibrator import (
    CalibrationConfig,
    CalibrationRecord,
    calibrate,
    categorical_sample,
    disagreement_rate,
    load_calibration,
    max_disagreement,
    max_disagreement_from_posterior,
    round_streams,
    save_calibration,
    temperature_softmax,
)
from d3m.errors import ArtifactError, InputError, ShapeError
from d3m.trainer import posterior
from d3m.vbll import GaussianLogitPosterior


def test_temperature_softmax_examples():
    np.testing.assert_allclose(temperature_softmax([0.0, 0.0], 0.3), [0.5, 0.5])
    np.testing.assert_allclose(temperature_softmax([1.0, 0.0], 1.0), [0.7310585786, 0.2689414214], rtol=1e-9)
    np.testing.assert_allclose(temperature_softmax([1.0, 3.0, 2.0], 1e-6), [0.0, 1.0, 0.0])
    with pytest.raises(InputError):
        temperature_softmax([1.0, 0.0], 0.0)


def test_categorical_one_hot_and_determinism():
    rng = np.random.default_rng(0)
    assert all(categorical_sample([0.0, 1.0, 0.0], rng) == 1 for _ in range(100))
    a = categorical_sample([0.2, 0.3, 0.5], np.random.default_rng(42))
    b = categorical_sample([0.2, 0.3, 0.5], np.random.default_rng(42))
    assert a == b


def test_categorical_uniform_frequencies():
    draws = categorical_sample(np.full((10 ** 5, 4), 0.25), np.random.default_rng(1))
    counts = np.bincount(draws, minlength=4)
    assert np.all(np.abs(counts / 1e5 - 0.25) < 0.01)
    assert chisquare(counts).pvalue > 0.001


def test_categorical_matches_probabilities_chi_square():
    p = np.array([0.1, 0.6, 0.3])
    draws = categorical_sample(np.tile(p, (10 ** 5, 1)), np.random.default_rng(2))
    assert chisquare(np.bincount(draws, minlength=3), p * 1e5).pvalue > 0.001


def test_categorical_rejects_unnormalized():
    with pytest.raises(InputError):
        categorical_sample([0.5, 0.6], np.random.default_rng(0))


def test_disagreement_rate():
    assert disagreement_rate([1, 0, 1], [1, 0, 1]) == 0.0
    assert disagreement_rate([1, 0, 1, 1], [1, 0, 1, 0]) == 0.25
    rng = np.random.default_rng(3)
    a, b = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    assert disagreement_rate(a, b) == sum(int(u != v) for u, v in zip(a, b)) / 100
    with pytest.raises(ShapeError):
        disagreement_rate([1, 2], [1])


def replay_max_disagreement(mu, std, K, tau, rng, mode="categorical"):
    """Step-by-step re-execution of the sampling pipeline with scalar Python arithmetic."""
    m, C = mu.shape
    eps1 = rng.standard_normal((K, m, C))
    pseudo = []
    for i in range(m):
        avg = [0.0] * C
        for k in range(K):
            z = [mu[i, c] + std[i, c] * eps1[k, i, c] for c in range(C)]
            top = max(z)
            e = [math.exp(v - top) for v in z]
            s = sum(e)
            for c in range(C):
                avg[c] += e[c] / s / K
        pseudo.append(max(range(C), key=lambda c: (avg[c], -c)))
    eps2 = rng.standard_normal((K, m, C))
    u = rng.random((K, m)) if mode == "categorical" else None
    best = 0.0
    for k in range(K):
        wrong = 0
        for i in range(m):
            z = [mu[i, c] + std[i, c] * eps2[k, i, c] for c in range(C)]
            if mode == "argmax":
                label = max(range(C), key=lambda c: (z[c], -c))
            else:
                top = max(v / tau for v in z)
                e = [math.exp(v / tau - top) for v in z]
                s = sum(e)
                cum, label = 0.0, 0
                for c in range(C - 1):
                    cum += e[c] / s
                    if cum < u[k, i]:
                        label += 1
            wrong += label != pseudo[i]
        best = max(best, wrong / m)
    return best


@pytest.mark.parametrize("mode", ["categorical", "argmax"])
def test_max_disagreement_trace_replay(small_model, blob_data, mode):
    batch = blob_data["heldout"].x[:3]
    q = posterior(small_model, batch)
    cfg = CalibrationConfig(T=1, m=3, K=4, tau=0.7, mode=mode)
    got = max_disagreement(small_model, batch, cfg, np.random.default_rng(11))
    want = replay_max_disagreement(q.mu, q.std, 4, 0.7, np.random.default_rng(11), mode)
    assert got == want


def test_trace_replay_three_classes():
    rng = np.random.default_rng(5)
    q = GaussianLogitPosterior(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
    got = max_disagreement_from_posterior(q, 30, 1.3, np.random.default_rng(8))
    assert got == replay_max_disagreement(q.mu, q.std, 30, 1.3, np.random.default_rng(8))


def test_degenerate_posterior_gives_zero():
    q = GaussianLogitPosterior(np.array([[2.0, -1.0], [-3.0, 0.5]]), np.full((2, 2), -200.0))
    assert max_disagreement_from_posterior(q, 50, 1e-6, np.random.default_rng(0)) == 0.0


def test_k_one_is_single_rate(small_model, blob_data):
    batch = blob_data["heldout"].x[:20]
    q = posterior(small_model, batch)
    phi = max_disagreement_from_posterior(q, 1, 1.0, np.random.default_rng(4))
    assert phi == replay_max_disagreement(q.mu, q.std, 1, 1.0, np.random.default_rng(4))


def test_calibrate_single_round(small_model, blob_data):
    rec = calibrate(small_model, blob_data["heldout"].x, CalibrationConfig(T=1, m=10, K=20, seed=1))
    assert rec.phi.shape == (1,)


def test_calibrate_trace_replay(small_model, blob_data):
    pool = blob_data["heldout"].x
    cfg = CalibrationConfig(T=10, m=5, K=8, tau=1.0, seed=3)
    rec = calibrate(small_model, pool, cfg)
    expected = []
    for rng in round_streams(3, 10):
        idx = rng.integers(0, len(pool), size=5)
        q = posterior(small_model, pool[idx])  # recomputed per round, no memoization
        expected.append(replay_max_disagreement(q.mu, q.std, 8, 1.0, rng))
    np.testing.assert_array_equal(rec.phi, np.sort(expected))


def test_calibrate_degenerate_all_zero(small_model):
    sharp = replace(small_model, head=replace(small_model.head,
                                              logvar_weight=np.zeros_like(small_model.head.logvar_weight),
                                              logvar_bias=np.full(2, -300.0)))
    pool = np.tile([[1.0, 0.5]], (30, 1))
    rec = calibrate(sharp, pool, CalibrationConfig(T=20, m=10, K=50, tau=1e-6))
    assert np.all(rec.phi == 0)


def test_workers_give_identical_collection(small_model, blob_data):
    pool = blob_data["heldout"].x
    cfg = CalibrationConfig(T=12, m=10, K=30, seed=9)
    a = calibrate(small_model, pool, cfg)
    b = calibrate(small_model, pool, cfg, workers=4)
    np.testing.assert_array_equal(a.phi, b.phi)


def test_record_invariants(small_model, blob_data):
    rec = calibrate(small_model, blob_data["heldout"].x, CalibrationConfig(T=30, m=10, K=20))
    assert np.all(np.diff(rec.phi) >= 0)
    assert rec.phi[0] >= 0 and rec.phi[-1] <= 1
    with pytest.raises(ShapeError):
        CalibrationRecord(np.zeros(3), CalibrationConfig(T=4), "x")


def test_config_validation():
    for bad in (dict(T=0), dict(m=0), dict(K=0), dict(tau=0.0), dict(mode="soft")):
        with pytest.raises(InputError):
            CalibrationConfig(**bad)


def test_warns_when_m_exceeds_pool(small_model, caplog):
    with caplog.at_level(logging.WARNING):
        calibrate(small_model, np.zeros((3, 2)), CalibrationConfig(T=2, m=5, K=5))
    assert "exceeds" in caplog.text


def test_empty_pool(small_model):
    with pytest.raises(InputError):
        calibrate(small_model, np.zeros((0, 2)), CalibrationConfig(T=2, m=5, K=5))


def test_artifact_round_trip(small_model, blob_data, tmp_path):
    rec = calibrate(small_model, blob_data["heldout"].x, CalibrationConfig(T=15, m=8, K=10, seed=2))
    p1, p2 = tmp_path / "c1.json", tmp_path / "c2.json"
    save_calibration(rec, p1)
    again = load_calibration(p1)
    save_calibration(again, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(again.phi, rec.phi)
    p2.write_text(p2.read_text()[:40])
    with pytest.raises(ArtifactError):
        load_calibration(p2)


def _mean_phi(q_pool, K, tau, seeds, m=20):
    out = []
    for s in seeds:
        rng = np.random.default_rng(s)
        idx = rng.integers(0, len(q_pool), size=m)
        out.append(max_disagreement_from_posterior(q_pool[idx], K, tau, rng))
    return np.array(out)


def test_phi_grows_with_k(small_model, blob_data):
    q = posterior(small_model, blob_data["heldout"].x)
    lo = _mean_phi(q, 10, 1.0, range(50))
    hi = _mean_phi(q, 1000, 1.0, range(50))
    assert hi.mean() >= lo.mean()


def test_phi_grows_with_temperature(small_model, blob_data):
    q = posterior(small_model, blob_data["heldout"].x)
    means = [_mean_phi(q, 200, tau, range(50)).mean() for tau in (0.5, 1.0, 2.0)]
    assert means[0] <= means[1] <= means[2]


def test_independent_collections_exchangeable(small_model, blob_data):
    pool = blob_data["heldout"].x
    a = calibrate(small_model, pool, CalibrationConfig(T=300, m=20, K=100, seed=1))
    b = calibrate(small_model, pool, CalibrationConfig(T=300, m=20, K=100, seed=2))
    assert ks_2samp(a.phi, b.phi).pvalue > 0.01
