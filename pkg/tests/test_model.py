import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnograph.model import (
    ModelConfig,
    MultivariateNet,
    TimeDistributedNet,
    TrainSpec,
    balanced_batches,
    balanced_class_counts,
    load_model,
    predict_proba,
    predict_record,
    save_model,
    train_stage1,
    train_stage2,
)
from somnograph.nn import cross_entropy_backward, softmax_cross_entropy
from somnograph.numerics import finite_diff_grad, relative_error
from somnograph.evaluation import compute_metrics
from somnograph.preprocess import preprocess_record
from somnograph.signal_io import make_synthetic_record

CHANNELS = ["EEG Fpz-Cz", "EEG Pz-Oz"]


def test_default_parameter_counts():
    net = MultivariateNet(ModelConfig(n_eeg=2, n_times=3840))
    counts = net.param_counts()
    assert counts == {"eeg.spatial": 4, "eeg.conv1": 520, "eeg.conv2": 4104, "classifier": 1205}
    assert net.extractor.config.feature_dim == 240
    assert net.n_params == 5833


def test_emg_branch_widens_classifier():
    cfg = ModelConfig(n_eeg=2, n_emg=3)
    net = MultivariateNet(cfg)
    assert net.classifier.params["weight"].shape == (5, (2 + 3) * 15 * 8)
    assert net.param_counts()["emg.spatial"] == 9
    x = np.zeros((2, 5, 3840), dtype=np.float32)
    assert net.predict_proba(x).shape == (2, 5)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_eeg=0, n_emg=0)
    with pytest.raises(ValueError):
        ModelConfig(n_times=200)
    with pytest.raises(ValueError):
        TrainSpec(batch_size=3)
    assert ModelConfig.from_dict(ModelConfig(n_eeg=3).to_dict()) == ModelConfig(n_eeg=3)


def test_network_gradient_with_emg_branch():
    cfg = ModelConfig(n_eeg=1, n_emg=1, n_times=512, dropout=0.0, dtype="float64", seed=3)
    net = MultivariateNet(cfg)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 512))
    y = np.array([0, 4])
    net.loss_and_grad(x, y)
    grads = {k: v.copy() for k, v in net.grads.items()}

    def loss(_):
        return softmax_cross_entropy(net.forward(x), y)[1]

    for name in ("extractor.eeg.spatial.weight", "extractor.emg.spatial.weight", "classifier.bias"):
        fd = finite_diff_grad(loss, net.params[name], h=1e-6)
        assert relative_error(grads[name], fd) < 1e-4, name


def test_balanced_class_counts_rotate():
    totals = sum(balanced_class_counts(128, b) for b in range(5))
    np.testing.assert_array_equal(totals, [128] * 5)
    c = balanced_class_counts(128, 0)
    assert c.sum() == 128 and c.max() - c.min() <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 300), st.integers(0, 2**32 - 1))
def test_balanced_batches_property(batch_size, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(rng.integers(1, 50, 5))])
    for idx in balanced_batches(labels, batch_size, seed, n_batches=3):
        counts = np.bincount(labels[idx], minlength=5)
        assert len(idx) == batch_size
        assert counts.max() - counts.min() <= 1


def test_balanced_batches_need_every_class():
    with pytest.raises(ValueError, match="N3"):
        next(balanced_batches(np.array([0, 1, 2, 4]), 10, 0))


@pytest.fixture(scope="module")
def tiny_sets(small_record):
    es = preprocess_record(small_record)
    return es


def test_stage1_trains_and_restores(tmp_path, tiny_sets):
    net = MultivariateNet(ModelConfig(n_eeg=2, seed=1))
    spec = TrainSpec(batch_size=20, max_epochs=3, patience=2, seed=0)
    net, history = train_stage1(net, tiny_sets, tiny_sets, spec)
    assert net.trained and 1 <= len(history) <= 3
    assert set(history[0]) == {"epoch", "train_loss", "val_loss", "val_balanced_accuracy", "wall_seconds"}
    best = min(h["val_loss"] for h in history)
    p = predict_proba(net, tiny_sets)
    _, val_loss = softmax_cross_entropy(np.log(p), tiny_sets.labels)
    assert val_loss == pytest.approx(best, rel=1e-5)

    save_model(tmp_path / "m.json", net)
    back = load_model(tmp_path / "m.json")
    assert back.trained
    np.testing.assert_array_equal(predict_proba(back, tiny_sets), p)


def test_zero_epochs_leaves_network_untrained(tiny_sets):
    net = MultivariateNet(ModelConfig(n_eeg=2))
    before = net.copy_params()
    net, history = train_stage1(net, tiny_sets, tiny_sets, TrainSpec(max_epochs=0))
    assert history == [] and not net.trained
    for k, v in net.params.items():
        np.testing.assert_array_equal(v, before[k])


def test_non_finite_loss_is_reported(tiny_sets):
    net = MultivariateNet(ModelConfig(n_eeg=2, dtype="float64"))
    net.classifier.params["weight"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="parameter norms"):
        train_stage1(net, tiny_sets, tiny_sets, TrainSpec(batch_size=20, max_epochs=1))


def test_time_distributed_k0_matches_base(tiny_sets):
    base = MultivariateNet(ModelConfig(n_eeg=2, seed=4))
    td = TimeDistributedNet.from_base(base, 0, copy_classifier=True)
    x = tiny_sets.data[:6].astype(np.float32)
    np.testing.assert_allclose(td.predict_proba(x[:, None]), base.predict_proba(x), atol=1e-6)


def test_stage2_keeps_extractor_frozen(tiny_sets):
    base = MultivariateNet(ModelConfig(n_eeg=2, seed=5))
    base.trained = True
    before = {k: v.copy() for k, v in base.extractor.params.items()}
    td, history = train_stage2(base, 1, [tiny_sets], [tiny_sets], TrainSpec(batch_size=20, max_epochs=2))
    assert history and td.trained and td.k == 1
    for k, v in td.extractor.params.items():
        assert v.tobytes() == before[k].tobytes()
    assert td.classifier.params["weight"].shape == (5, 3 * 240)
    hyp, p = predict_record(td, tiny_sets)
    assert len(hyp) == len(tiny_sets) and p.shape == (len(tiny_sets), 5)


def test_time_distributed_backward_when_unfrozen():
    cfg = ModelConfig(n_eeg=1, n_times=512, dropout=0.0, dtype="float64")
    td = TimeDistributedNet(MultivariateNet(cfg).extractor, 1, frozen=False)
    x = np.random.default_rng(0).standard_normal((2, 3, 1, 512))
    y = np.array([1, 2])
    p, _ = softmax_cross_entropy(td.forward(x, train=True), y)
    dx = td.backward(cross_entropy_backward(p, y))
    assert dx.shape == x.shape
    assert set(td.trainable_params()) == set(td.params)


def test_predict_rejects_channel_mismatch(tiny_sets):
    net = MultivariateNet(ModelConfig(n_eeg=3))
    with pytest.raises(ValueError, match="channels"):
        predict_proba(net, tiny_sets)


def test_forward_is_a_distribution():
    net = MultivariateNet(ModelConfig(n_eeg=2))
    p = net.predict_proba(np.random.default_rng(0).standard_normal((3, 2, 3840)).astype(np.float32))
    assert p.shape == (3, 5)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        net.predict_proba(np.zeros((1, 2, 1000), dtype=np.float32))


def test_balanced_counts_examples():
    assert sorted(balanced_class_counts(128, 0).tolist()) == [25, 25, 26, 26, 26]
    labels = np.repeat(np.arange(5), [1, 2, 30, 4, 5])
    idx = next(balanced_batches(labels, 5, 0))
    np.testing.assert_array_equal(np.bincount(labels[idx], minlength=5), 1)


def test_stage2_rejects_negative_k(tiny_sets):
    with pytest.raises(ValueError):
        train_stage2(MultivariateNet(ModelConfig(n_eeg=2)), -1, [tiny_sets], [tiny_sets], TrainSpec())


def test_stage1_is_bit_reproducible(tiny_sets):
    spec = TrainSpec(batch_size=20, max_epochs=2, seed=3)
    a, _ = train_stage1(MultivariateNet(ModelConfig(n_eeg=2, seed=2)), tiny_sets, tiny_sets, spec)
    b, _ = train_stage1(MultivariateNet(ModelConfig(n_eeg=2, seed=2)), tiny_sets, tiny_sets, spec)
    for k, v in a.params.items():
        assert v.tobytes() == b.params[k].tobytes()


def test_trained_benchmark_recall_per_class(benchmark):
    hyp, _ = predict_record(benchmark["net"], benchmark["test"])
    for stage, block in compute_metrics(benchmark["test"].labels, hyp).per_class.items():
        assert block["sensitivity"] >= 0.8, stage


def test_stage2_k0_tracks_stage1(benchmark):
    net, test = benchmark["net"], benchmark["test"]
    seeds = benchmark["seeds"]
    train = preprocess_record(make_synthetic_record(100, CHANNELS, seeds[6]))
    val = preprocess_record(make_synthetic_record(50, CHANNELS, seeds[7]))
    td, _ = train_stage2(net, 0, [train], [val], TrainSpec(max_epochs=30, seed=1))
    s1 = compute_metrics(test.labels, predict_record(net, test)[0]).balanced_accuracy
    s0 = compute_metrics(test.labels, predict_record(td, test)[0]).balanced_accuracy
    assert abs(s0 - s1) <= 0.05


def test_window_path_matches_epoch_path(benchmark):
    net, test = benchmark["net"], benchmark["test"]
    td = TimeDistributedNet.from_base(net, 0, copy_classifier=True)
    td.trained = True
    np.testing.assert_allclose(predict_proba(td, test), predict_proba(net, test), atol=1e-6)
