import numpy as np
import pytest
from scipy.stats import binom

from d3m import datagen
from d3m.errors import ArtifactError, InputError
from d3m.trainer import (
    TrainConfig,
    evaluate,
    init_model,
    load_model,
    model_fingerprint,
    predict,
    save_model,
    train,
)

FAST = dict(epochs=10, seed=0)


def test_separable_blobs_train_accuracy(blob_data):
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(0)
    d = datagen.gen_blobs(500, 2, 8.0, rng)
    oracle = LogisticRegression().fit(d.x, d.y).score(d.x, d.y)
    assert oracle >= 0.99
    model = train(TrainConfig(seed=1), d.x, d.y)
    assert 1 - evaluate(model, d.x, d.y, 500) >= 0.95


def test_zero_epochs_returns_initial_model(blob_data):
    d = blob_data["train"]
    cfg = TrainConfig(epochs=0, seed=3)
    model = train(cfg, d.x, d.y)
    init = init_model(cfg, 2, 2, len(d), np.random.default_rng(3))
    for k, v in init.arrays().items():
        np.testing.assert_array_equal(model.arrays()[k], v)


def test_training_is_deterministic(blob_data, tmp_path):
    d = blob_data["train"]
    a = train(TrainConfig(**FAST), d.x, d.y)
    b = train(TrainConfig(**FAST), d.x, d.y)
    assert model_fingerprint(a) == model_fingerprint(b)
    save_model(a, tmp_path / "a.json")
    save_model(b, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_loss_decreases_over_first_epoch(blob_data):
    d = blob_data["train"]
    history = []
    train(TrainConfig(epochs=1, batch_size=32, seed=0), d.x, d.y, history=history)
    k = len(history) // 3
    assert np.mean(history[-k:]) < np.mean(history[:k])


def test_kl_weight_tracks_training_size(small_model, blob_data):
    assert small_model.kl_weight == pytest.approx(100.0 / len(blob_data["train"]))
    m2 = small_model.with_n(50)
    assert m2.kl_weight == pytest.approx(2.0)


def test_rejects_bad_data():
    with pytest.raises(InputError):
        train(TrainConfig(), np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(InputError):
        train(TrainConfig(), np.zeros((3, 2)), np.array([0, 1, -1]))
    with pytest.raises(InputError):
        train(TrainConfig(), np.zeros((3, 2)), np.array([0, 1, 2]), num_classes=2)


def test_evaluate_trivial_cases(small_model):
    x = np.tile([[3.0, 0.0]], (20, 1))
    pred = predict(small_model, x, 100, np.random.default_rng(0))
    assert np.all(pred == pred[0])
    assert evaluate(small_model, x, pred, 100) == 0.0
    assert evaluate(small_model, x, 1 - pred, 100) == 1.0


def test_random_model_error_near_half():
    rng = np.random.default_rng(0)
    d = datagen.gen_blobs(4000, 2, 4.0, rng)
    model = train(TrainConfig(epochs=0, seed=1), d.x, rng.permutation(d.y))
    # an untrained model on labels independent of x: errors are Binomial(n, 1/2) at best
    err = evaluate(model, d.x, rng.integers(0, 2, len(d)), 200)
    lo, hi = binom.interval(0.999, len(d), 0.5)
    assert lo / len(d) <= err <= hi / len(d)


def test_save_load_round_trip(small_model, tmp_path, blob_data):
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    fp = save_model(small_model, p1)
    loaded = load_model(p1)
    save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert fp == model_fingerprint(loaded) == model_fingerprint(small_model)
    for k, v in small_model.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[k], v)
    d = blob_data["validation"]
    e1 = evaluate(small_model, d.x, d.y, 200, np.random.default_rng(9))
    e2 = evaluate(loaded, d.x, d.y, 200, np.random.default_rng(9))
    assert e1 == e2


def test_truncated_file_is_corrupt(small_model, tmp_path):
    p = tmp_path / "m.json"
    save_model(small_model, p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(ArtifactError):
        load_model(p)


def test_version_mismatch(small_model, tmp_path):
    p = tmp_path / "m.json"
    save_model(small_model, p)
    p.write_text(p.read_text().replace('"format_version":1', '"format_version":99'))
    with pytest.raises(ArtifactError):
        load_model(p)
