"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line
in the terminal summary."""

import contextlib
import json
import string
import time

import numpy as np

from conftest import ACCEPTANCE
from somnograph.cli import main as cli_main
from somnograph.evaluation import compute_metrics, occlusion_probe, transition_matrix
from somnograph.model import (
    ModelConfig,
    MultivariateNet,
    TimeDistributedNet,
    TrainSpec,
    balanced_batches,
    balanced_class_counts,
    predict_record,
    train_stage2,
)
from somnograph.nn import (
    Dense,
    Flatten,
    MaxPool,
    ReLU,
    Sequential,
    SpatialFilter,
    TemporalConv,
    cross_entropy_backward,
    softmax_cross_entropy,
)
from somnograph.numerics import finite_diff_grad, relative_error
from somnograph.preprocess import design_lowpass, filtfilt, preprocess_record
from somnograph.signal_io import (
    ChannelInfo,
    EdfHeader,
    Hypnogram,
    Record,
    make_markov_record,
    make_synthetic_record,
    read_edf,
    write_edf,
)
from somnograph.stages import BAND_STAGE, BAND_NAMES, STAGE_NAMES

CHANNELS = ["EEG Fpz-Cz", "EEG Pz-Oz"]


@contextlib.contextmanager
def criterion(n, title):
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE[n] = (title, "FAIL", f"{detail['text']} {type(exc).__name__}: {exc}".strip().splitlines()[0])
        raise
    ACCEPTANCE[n] = (title, "PASS", detail["text"])


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def _layer_error(layer, x, rng):
    out = layer.forward(x, train=True)
    r = rng.standard_normal(out.shape)
    dx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    def f(_):
        return float(np.sum(layer.forward(x, train=True) * r))

    errs = [relative_error(dx, finite_diff_grad(f, x))]
    errs += [relative_error(grads[k], finite_diff_grad(f, p)) for k, p in layer.params.items()]
    return max(errs)


def _loss_error(net, x, y, h=1e-6):
    """Cross-entropy of `net` on (x, y): backprop vs central differences for
    the input and every parameter."""
    p, _ = softmax_cross_entropy(net.forward(x), y)
    dx = net.backward(cross_entropy_backward(p, y))
    grads = {k: v.copy() for k, v in net.grads.items()}

    def loss(_):
        return softmax_cross_entropy(net.forward(x), y)[1]

    errs = [relative_error(dx, finite_diff_grad(loss, x, h))]
    errs += [relative_error(grads[k], finite_diff_grad(loss, w, h)) for k, w in net.params.items()]
    return max(errs)


def _small_composed(rng):
    net = Sequential(
        [
            ("spatial", SpatialFilter(2, 2, rng=rng)),
            ("conv1", TemporalConv(1, 3, 6, rng=rng)),
            ("relu1", ReLU()),
            ("pool1", MaxPool(4)),
            ("conv2", TemporalConv(3, 3, 6, rng=rng)),
            ("relu2", ReLU()),
            ("pool2", MaxPool(4)),
            ("flatten", Flatten()),
            ("dense", Dense(2 * 3 * 4, 5, rng=rng)),
        ]
    )
    for _, layer in net.layers:
        if "bias" in layer.params:
            layer.params["bias"][:] = rng.uniform(0.05, 0.2, layer.params["bias"].shape)
    return net


def test_c01_gradient_fidelity():
    with criterion(1, "gradient fidelity") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        worst = {}
        for _ in range(10):
            x4 = rng.standard_normal((2, 2, 2, 40))
            distinct = (rng.permutation(2 * 2 * 3 * 40).reshape(2, 2, 3, 40) * 0.01).astype(float)
            relu_x = rng.standard_normal((3, 12))
            relu_x[np.abs(relu_x) < 1e-3] = 0.5
            a = rng.standard_normal((4, 5))
            y = rng.integers(0, 5, 4)
            tc = TemporalConv(2, 3, length=int(rng.integers(2, 12)), rng=rng)
            tc.params["bias"][:] = rng.standard_normal(3)
            dense = Dense(7, 5, rng=rng)
            dense.params["bias"][:] = rng.standard_normal(5)
            errs = {
                "spatial": _layer_error(SpatialFilter(3, 2, rng=rng), rng.standard_normal((2, 3, 16)), rng),
                "temporal_conv": _layer_error(tc, x4, rng),
                "relu": _layer_error(ReLU(), relu_x, rng),
                "maxpool": _layer_error(MaxPool(8), distinct, rng),
                "dense": _layer_error(dense, rng.standard_normal((4, 7)), rng),
                "softmax_ce": relative_error(
                    cross_entropy_backward(softmax_cross_entropy(a, y)[0], y),
                    finite_diff_grad(lambda z: softmax_cross_entropy(z, y)[1], a),
                ),
            }
            net = _small_composed(rng)
            errs["composed"] = _loss_error(net, rng.standard_normal((2, 2, 64)), rng.integers(0, 5, 2))
            for k, v in errs.items():
                worst[k] = max(worst.get(k, 0.0), v)
        # the full architecture, every parameter
        full = MultivariateNet(ModelConfig(n_eeg=2, n_times=512, dropout=0.0, dtype="float64", seed=9))
        for _, layer in full.extractor.pipelines["eeg"].layers:
            if "bias" in layer.params:
                layer.params["bias"][:] = rng.uniform(0.05, 0.2, layer.params["bias"].shape)
        worst["full_network"] = _loss_error(full, rng.standard_normal((2, 2, 512)), np.array([1, 3]))
        elapsed = time.perf_counter() - t0
        d["text"] = f"max rel err {max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f} s"
        for k, v in worst.items():
            assert v < 1e-4, f"{k}: {v:.3e}"
        assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. architecture arithmetic


def test_c02_architecture_arithmetic():
    with criterion(2, "architecture arithmetic") as d:
        net = MultivariateNet(ModelConfig(n_eeg=2, n_times=3840))
        counts = net.param_counts()
        assert counts["eeg.spatial"] == 2 * 2
        assert counts["eeg.conv1"] == 8 * 64 + 8
        assert counts["eeg.conv2"] == 8 * 8 * 64 + 8
        assert counts["classifier"] == 1200 + 5
        assert net.extractor.config.feature_dim == 2 * (3840 // 256) * 8 == 240
        emg = MultivariateNet(ModelConfig(n_eeg=2, n_emg=3, n_times=3840))
        assert emg.classifier.params["weight"].shape == (5, (2 + 3) * 15 * 8)
        assert emg.classifier.params["weight"].size == 5 * ((2 + 3) * (3840 // 256) * 8)
        z = emg.extractor.forward(np.zeros((1, 5, 3840), dtype=np.float32))
        assert z.shape == (1, 600)
        d["text"] = f"counts {counts}, D=240, D(C'=3)=600"


# ---------------------------------------------------------------------------
# shared synthetic benchmark


# ---------------------------------------------------------------------------
# 3. time-distributed consistency


def test_c03_time_distributed_consistency():
    with criterion(3, "time-distributed consistency") as d:
        base = MultivariateNet(ModelConfig(n_eeg=2, seed=21))
        rec = preprocess_record(make_synthetic_record(6, CHANNELS, np.random.default_rng(22)))
        td = TimeDistributedNet.from_base(base, 0, copy_classifier=True)
        x = rec.data.astype(np.float32)
        diff = float(np.max(np.abs(td.predict_proba(x[:, None]) - base.predict_proba(x))))
        assert diff < 1e-6

        base.trained = True
        before = {k: v.tobytes() for k, v in base.extractor.params.items()}
        td2, history = train_stage2(base, 2, [rec], [rec], TrainSpec(batch_size=30, max_epochs=3, seed=23))
        assert history
        changed = [k for k, v in td2.extractor.params.items() if v.tobytes() != before[k]]
        assert not changed, changed
        d["text"] = f"k=0 max |dp| {diff:.1e}; Z bitwise unchanged after {len(history)} stage-2 epochs"


# ---------------------------------------------------------------------------
# 4. balanced sampler


def test_c04_balanced_sampler():
    with criterion(4, "balanced sampler") as d:
        rng = np.random.default_rng(31)
        # strongly imbalanced, N2-heavy as in real nights
        labels = rng.permutation(np.repeat(np.arange(5), [300, 80, 1200, 250, 400]))
        totals = np.zeros(5, dtype=np.int64)
        for b, idx in enumerate(balanced_batches(labels, 128, rng, n_batches=100)):
            counts = np.bincount(labels[idx], minlength=5)
            assert len(idx) == 128
            np.testing.assert_array_equal(counts, balanced_class_counts(128, b))
            assert counts.max() - counts.min() <= 1
            totals += counts
        freq = totals / totals.sum()
        assert np.all((freq >= 0.18) & (freq <= 0.22))
        d["text"] = f"class frequencies {np.round(freq, 4).tolist()}"


# ---------------------------------------------------------------------------
# 5. synthetic learnability


def test_c05_synthetic_learnability(benchmark):
    with criterion(5, "synthetic learnability") as d:
        net, test = benchmark["net"], benchmark["test"]
        hyp, _ = predict_record(net, test)
        bacc1 = compute_metrics(test.labels, hyp).balanced_accuracy
        d["text"] = f"stage-1 test bacc {bacc1:.4f} in {benchmark['seconds']:.0f} s"
        assert bacc1 >= 0.90
        assert benchmark["seconds"] < 600

        seeds = benchmark["seeds"]
        m_train = [preprocess_record(make_markov_record(600, CHANNELS, seeds[3], subject_id="m_train"))]
        m_val = [preprocess_record(make_markov_record(300, CHANNELS, seeds[4], subject_id="m_val"))]
        m_test = preprocess_record(make_markov_record(600, CHANNELS, seeds[5], subject_id="m_test"))
        s1 = compute_metrics(m_test.labels, predict_record(net, m_test)[0]).balanced_accuracy
        td, _ = train_stage2(net, 1, m_train, m_val, TrainSpec(max_epochs=50, patience=5, seed=51))
        s2 = compute_metrics(m_test.labels, predict_record(td, m_test)[0]).balanced_accuracy
        d["text"] += f"; Markov test: stage-1 {s1:.4f}, stage-2 (k=1) {s2:.4f}"
        assert s2 >= s1 - 0.02


# ---------------------------------------------------------------------------
# 6. occlusion probe


def test_c06_occlusion_probe(benchmark):
    with criterion(6, "occlusion probe") as d:
        shares = {}
        for band in BAND_NAMES:
            cm = occlusion_probe(benchmark["net"], [benchmark["test_record"]], band)
            stage = int(BAND_STAGE[band])
            shares[band] = cm[:, stage].sum() / cm.sum()
        d["text"] = ", ".join(f"{b}->{STAGE_NAMES[int(BAND_STAGE[b])]} {s:.3f}" for b, s in shares.items())
        for band, share in shares.items():
            assert share >= 0.80, band


# ---------------------------------------------------------------------------
# 7. metric oracles


def _brute_force(true, pred):
    cm = [[0] * 5 for _ in range(5)]
    for t, p in zip(true, pred):
        cm[t][p] += 1
    n = len(true)
    rec, f1s, spec, prec = [], [], [], []
    for c in range(5):
        tp = cm[c][c]
        row = sum(cm[c])
        col = sum(cm[r][c] for r in range(5))
        r_ = tp / row if row else 0.0
        p_ = tp / col if col else 0.0
        f = 2 * p_ * r_ / (p_ + r_) if p_ + r_ else 0.0
        tn = n - row - col + tp
        spec.append(tn / (tn + col - tp) if tn + col - tp else 0.0)
        prec.append(p_)
        if row:
            rec.append(r_)
            f1s.append(f)
    po = sum(cm[c][c] for c in range(5)) / n
    pe = sum(sum(cm[c]) * sum(cm[r][c] for r in range(5)) for c in range(5)) / n**2
    return {
        "accuracy": po,
        "balanced_accuracy": sum(rec) / len(rec),
        "cohen_kappa": (po - pe) / (1 - pe) if pe != 1 else 1.0,
        "macro_f1": sum(f1s) / len(f1s),
        "specificity": spec,
        "precision": prec,
    }


def test_c07_metric_oracles():
    with criterion(7, "metric oracles") as d:
        rng = np.random.default_rng(71)
        worst = 0.0
        for _ in range(100):
            n = 10_000
            true = rng.integers(0, 5, n)
            noise = rng.random() * 0.8
            pred = np.where(rng.random(n) < noise, rng.integers(0, 5, n), true)
            got = compute_metrics(true, pred)
            ref = _brute_force(true.tolist(), pred.tolist())
            for key in ("accuracy", "balanced_accuracy", "cohen_kappa", "macro_f1"):
                worst = max(worst, abs(getattr(got, key) - ref[key]))
            for c, stage in enumerate(STAGE_NAMES):
                worst = max(worst, abs(got.per_class[stage]["specificity"] - ref["specificity"][c]))
                worst = max(worst, abs(got.per_class[stage]["precision"] - ref["precision"][c]))
        assert worst < 1e-12

        y = np.array([0] * 9000 + [1] * 1000)
        const = compute_metrics(y, np.zeros_like(y)).balanced_accuracy
        assert const == 0.5

        row_err = 0.0
        for _ in range(100):
            tm = transition_matrix(rng.integers(0, 5, int(rng.integers(2, 500))))
            sums = tm.sum(axis=1)
            row_err = max(row_err, float(np.max(np.abs(sums[sums > 0] - 1.0))))
        assert row_err < 1e-9
        d["text"] = f"max oracle deviation {worst:.1e}; constant bacc {const}; row-sum error {row_err:.1e}"


# ---------------------------------------------------------------------------
# 8. DSP fidelity


def _sine_gain(fir, freq, rate, n=8192):
    t = np.arange(n) / rate
    x = np.sin(2 * np.pi * freq * t)
    y = filtfilt(fir, x)
    # FFT of a whole number of periods away from the edges
    seg = slice(n // 4, n // 4 + int(rate))
    fx = np.abs(np.fft.rfft(x[seg]))
    fy = np.abs(np.fft.rfft(y[seg]))
    k = int(round(freq))
    return fy[k] / fx[k]


def test_c08_dsp_fidelity(benchmark):
    with criterion(8, "DSP fidelity") as d:
        rate = 256.0
        fir = design_lowpass(30.0, 7.0, rate)
        g10, g45 = _sine_gain(fir, 10.0, rate), _sine_gain(fir, 45.0, rate)
        assert g10 > 0.99
        assert g45 < 0.01

        x = np.random.default_rng(81).standard_normal(8192)
        y = filtfilt(fir, x)
        xc = np.correlate(y - y.mean(), x - x.mean(), mode="full")
        lag = int(np.argmax(xc)) - (len(x) - 1)
        assert lag == 0

        data = benchmark["test"].data
        std = data.std(axis=-1)
        ok = std > 0
        mean_err = float(np.max(np.abs(data.mean(axis=-1)[ok])))
        std_err = float(np.max(np.abs(std[ok] - 1.0)))
        assert mean_err < 1e-9 and std_err < 1e-6
        d["text"] = (f"gain 10 Hz {g10:.4f}, 45 Hz {g45:.1e}, lag {lag}, "
                     f"|mean| {mean_err:.1e}, |std-1| {std_err:.1e}")


# ---------------------------------------------------------------------------
# 9. EDF round trip


def _random_record(rng, i):
    n_ch = int(rng.integers(1, 5))
    rate = float(rng.choice([100.0, 128.0, 200.0, 256.0, 500.0]))
    n_epochs = int(rng.integers(1, 4))
    prefixes = ["EEG", "EOG", "EMG"]
    channels, signals = [], []
    for c in range(n_ch):
        label = f"{prefixes[int(rng.integers(0, 3))]} ch{c}"
        amp = float(10 ** rng.uniform(-1, 3))
        kw = {}
        if rng.random() < 0.5:
            kw = {"physical_min": -2.0 * amp, "physical_max": 2.0 * amp}
        channels.append(ChannelInfo.from_label(label, rate, transducer="AgAgCl electrode",
                                               prefiltering=f"HP:{rng.integers(1, 9) / 10}Hz", **kw))
        signals.append(np.clip(rng.standard_normal(int(rate * 30 * n_epochs)) * amp / 2, -1.9 * amp, 1.9 * amp))
    letters = string.ascii_letters + string.digits
    header = EdfHeader(
        patient=f"subj{i:02d} M 01-JAN-1970 " + "".join(rng.choice(list(letters), 8)),
        recording="Startdate 01-JAN-2020 synthetic " + "".join(rng.choice(list(letters), 6)),
        startdate=f"{rng.integers(1, 29):02d}.{rng.integers(1, 13):02d}.{rng.integers(0, 100):02d}",
        starttime=f"{rng.integers(0, 24):02d}.{rng.integers(0, 60):02d}.{rng.integers(0, 60):02d}",
    )
    hyp = Hypnogram(rng.integers(0, 5, n_epochs))
    return Record(f"subj{i:02d}", channels, signals, hyp, header)


def _header(raw):
    return raw[: int(raw[184:192])]


def test_c09_edf_round_trip(tmp_path):
    with criterion(9, "EDF round-trip") as d:
        rng = np.random.default_rng(91)
        worst = 0.0
        for i in range(20):
            rec = _random_record(rng, i)
            p1, p2 = tmp_path / f"r{i}.edf", tmp_path / f"r{i}_again.edf"
            write_edf(rec, p1)
            back = read_edf(p1)
            assert back.header.patient == rec.header.patient
            assert back.header.recording == rec.header.recording
            assert back.header.startdate == rec.header.startdate
            assert back.header.starttime == rec.header.starttime
            assert back.labels == rec.labels and back.hypnogram == rec.hypnogram
            for ch, orig, ch_in, got in zip(back.channels, rec.signals, rec.channels, back.signals):
                assert ch.transducer == ch_in.transducer and ch.prefiltering == ch_in.prefiltering
                step = (ch.physical_max - ch.physical_min) / (ch.digital_max - ch.digital_min)
                err = float(np.max(np.abs(orig - got))) / step
                worst = max(worst, err)
                assert err <= 1.0
            write_edf(back, p2)
            assert _header(p2.read_bytes()) == _header(p1.read_bytes())
            assert p2.read_bytes() == p1.read_bytes()
        d["text"] = f"20 records, headers byte-identical, max error {worst:.3f} quantization steps"


# ---------------------------------------------------------------------------
# 10. determinism


def test_c10_determinism(tmp_path, capsys):
    with criterion(10, "determinism") as d:
        cfg = {
            "seed": 5,
            "data_dir": "data",
            "synth": {"n_records": 3, "n_epochs_per_class": 6},
            "model": {"k": 1},
            "train": {"max_epochs": 2, "batch_size": 32},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert cli_main(["synth", "--config", str(path)]) == 0
        outs = []
        for run in ("a", "b"):
            assert cli_main(["train", "--config", str(path), "--out", str(tmp_path / run)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).glob("checkpoint_*.json"))})
        capsys.readouterr()
        assert set(outs[0]) == {"checkpoint_k0.json", "checkpoint_k1.json"}
        for name in outs[0]:
            assert outs[0][name] == outs[1][name], name
        d["text"] = f"{len(outs[0])} checkpoints bit-identical across two runs"
