"""Multivariate feature extractor, softmax classifiers, the time-distributed
network and the two-stage training protocol."""

import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .nn import (
    Dense,
    Dropout,
    Flatten,
    MaxPool,
    ReLU,
    Sequential,
    SpatialFilter,
    TemporalConv,
    AdamState,
    adam_step,
    cross_entropy_backward,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)
from .numerics import make_rng
from .preprocess import EpochSet, context_indices
from .signal_io import Hypnogram
from .stages import N_STAGES, STAGE_NAMES

logger = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TrainSpec",
    "Dataset",
    "FeatureExtractor",
    "MultivariateNet",
    "TimeDistributedNet",
    "balanced_batches",
    "balanced_class_counts",
    "train_stage1",
    "train_stage2",
    "predict_proba",
    "predict_record",
    "save_model",
    "load_model",
]

N_FILTERS = 8
KERNEL_LENGTH = 64
POOL_SIZE = 16


@dataclass
class ModelConfig:
    n_eeg: int = 2  # EEG/EOG channels, C
    n_emg: int = 0  # EMG channels, C'
    n_times: int = 3840
    virtual_eeg: int = None  # defaults to n_eeg
    virtual_emg: int = None  # defaults to n_emg
    k: int = 0
    dropout: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_eeg < 0 or self.n_emg < 0 or self.n_eeg + self.n_emg < 1:
            raise ValueError("at least one EEG/EOG or EMG channel is required")
        if self.n_times <= POOL_SIZE * POOL_SIZE:
            raise ValueError(f"n_times must exceed {POOL_SIZE * POOL_SIZE}, got {self.n_times}")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.virtual_eeg is None:
            self.virtual_eeg = self.n_eeg
        if self.virtual_emg is None:
            self.virtual_emg = self.n_emg

    @property
    def n_channels(self):
        return self.n_eeg + self.n_emg

    @property
    def n_pooled(self):
        return (self.n_times // POOL_SIZE) // POOL_SIZE

    @property
    def feature_dim(self):
        return (self.virtual_eeg + self.virtual_emg) * self.n_pooled * N_FILTERS

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainSpec:
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    balanced: bool = True
    steps_per_epoch: int = None  # default ceil(n_train / batch_size)
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.balanced and self.batch_size < N_STAGES:
            raise ValueError("balanced sampling needs batch_size >= number of classes")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")


@dataclass
class Dataset:
    x: np.ndarray  # (n, C + C', T)
    y: np.ndarray  # (n,)

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_epochsets(cls, sets):
        sets = list(sets)
        if not sets:
            raise ValueError("no records given")
        return cls(np.concatenate([s.data for s in sets]), np.concatenate([s.labels for s in sets]))


def _pipeline(n_in, n_virtual, cfg, seeds, dtype):
    return Sequential(
        [
            ("spatial", SpatialFilter(n_in, n_virtual, rng=seeds[0], dtype=dtype)),
            ("conv1", TemporalConv(1, N_FILTERS, KERNEL_LENGTH, rng=seeds[1], dtype=dtype)),
            ("relu1", ReLU()),
            ("pool1", MaxPool(POOL_SIZE)),
            ("conv2", TemporalConv(N_FILTERS, N_FILTERS, KERNEL_LENGTH, rng=seeds[2], dtype=dtype)),
            ("relu2", ReLU()),
            ("pool2", MaxPool(POOL_SIZE)),
            ("flatten", Flatten()),
            ("dropout", Dropout(cfg.dropout, rng=seeds[3])),
        ]
    )


class FeatureExtractor:
    """Separate EEG/EOG and EMG pipelines whose outputs are concatenated.

    Input rows ``[:n_eeg]`` go to the EEG/EOG pipeline, the rest to the EMG
    one. A pipeline with zero input channels is not built at all.
    """

    def __init__(self, config):
        self.config = config
        dtype = np.dtype(config.dtype)
        seq = np.random.SeedSequence(config.seed).spawn(8)
        self.pipelines = {}
        if config.n_eeg:
            self.pipelines["eeg"] = _pipeline(config.n_eeg, config.virtual_eeg, config, seq[:4], dtype)
        if config.n_emg:
            self.pipelines["emg"] = _pipeline(config.n_emg, config.virtual_emg, config, seq[4:], dtype)
        self._sizes = {}

    def _split(self, x):
        c = self.config.n_eeg
        parts = {}
        if "eeg" in self.pipelines:
            parts["eeg"] = x[:, :c]
        if "emg" in self.pipelines:
            parts["emg"] = x[:, c:]
        return parts

    def forward(self, x, train=False):
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.n_channels or x.shape[2] != cfg.n_times:
            raise ValueError(f"expected input (N, {cfg.n_channels}, {cfg.n_times}), got {x.shape}")
        x = x.astype(cfg.dtype, copy=False)
        outs = []
        for name, part in self._split(x).items():
            z = self.pipelines[name].forward(part, train=train)
            self._sizes[name] = z.shape[1]
            outs.append(z)
        return np.concatenate(outs, axis=1)

    def backward(self, grad):
        dx, start = [], 0
        for name, pipe in self.pipelines.items():
            n = self._sizes[name]
            dx.append(pipe.backward(grad[:, start : start + n]))
            start += n
        return np.concatenate(dx, axis=1)

    @property
    def params(self):
        return {f"{p}.{k}": v for p, pipe in self.pipelines.items() for k, v in pipe.params.items()}

    @property
    def grads(self):
        return {f"{p}.{k}": v for p, pipe in self.pipelines.items() for k, v in pipe.grads.items()}

    def param_counts(self):
        out = {}
        for p, pipe in self.pipelines.items():
            for lname, layer in pipe.layers:
                if layer.params:
                    out[f"{p}.{lname}"] = sum(v.size for v in layer.params.values())
        return out

    @property
    def dropout_rate(self):
        return self.config.dropout


class _SoftmaxNet:
    """Shared plumbing: parameter views, loss/gradient, probabilities."""

    extractor: FeatureExtractor
    classifier: Dense
    trained = False

    @property
    def params(self):
        out = {f"extractor.{k}": v for k, v in self.extractor.params.items()}
        out.update({f"classifier.{k}": v for k, v in self.classifier.params.items()})
        return out

    @property
    def grads(self):
        out = {f"extractor.{k}": v for k, v in self.extractor.grads.items()}
        out.update({f"classifier.{k}": v for k, v in self.classifier.grads.items()})
        return out

    def trainable_params(self):
        return self.params

    def trainable_grads(self):
        return self.grads

    def load_params(self, params):
        own = self.params
        for name, value in params.items():
            if name not in own:
                raise KeyError(f"unknown parameter {name!r}")
            if own[name].shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {own[name].shape} vs {value.shape}")
            own[name][...] = value

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def predict_proba(self, x):
        return softmax(self.forward(x, train=False))

    def loss_and_grad(self, x, y):
        """Forward in train mode, mean cross-entropy, backward. Returns the
        loss and probabilities; gradients are left in ``self.grads``."""
        logits = self.forward(x, train=True)
        p, loss = softmax_cross_entropy(logits, y)
        g = cross_entropy_backward(p, y).astype(logits.dtype)
        self.backward(g)
        return loss, p

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())


class MultivariateNet(_SoftmaxNet):
    """Feature extractor Z followed by a 5-way softmax classifier (k = 0)."""

    def __init__(self, config):
        self.config = config
        self.extractor = FeatureExtractor(config)
        rng = make_rng(np.random.SeedSequence(config.seed).spawn(9)[8])
        self.classifier = Dense(config.feature_dim, N_STAGES, rng=rng, dtype=np.dtype(config.dtype))

    @property
    def k(self):
        return 0

    def forward(self, x, train=False):
        if x.ndim == 4:  # a (N, 1, C, T) window batch
            if x.shape[1] != 1:
                raise ValueError("the base network takes no temporal context")
            x = x[:, 0]
        return self.classifier.forward(self.extractor.forward(x, train=train), train=train)

    def backward(self, grad):
        return self.extractor.backward(self.classifier.backward(grad))

    def param_counts(self):
        out = self.extractor.param_counts()
        out["classifier"] = self.classifier.n_params
        return out


class TimeDistributedNet(_SoftmaxNet):
    """Z applied with tied weights to each of the 2k+1 epochs of a window,
    features concatenated in window order, then a softmax classifier over
    D(2k+1) inputs."""

    def __init__(self, extractor, k, rng=None, frozen=True):
        if k < 0:
            raise ValueError("context half-width k must be non-negative")
        self.extractor = extractor
        self.k = k
        self.frozen = frozen
        cfg = extractor.config
        self.config = ModelConfig.from_dict({**cfg.to_dict(), "k": k})
        if rng is None:
            rng = np.random.SeedSequence([cfg.seed, k]).spawn(1)[0]
        self.classifier = Dense(cfg.feature_dim * (2 * k + 1), N_STAGES, rng=make_rng(rng), dtype=np.dtype(cfg.dtype))

    @classmethod
    def from_base(cls, base, k, rng=None, copy_classifier=False):
        net = cls(base.extractor, k, rng=rng)
        if copy_classifier:
            if k != 0:
                raise ValueError("the base classifier only fits a k = 0 network")
            net.classifier.params["weight"][...] = base.classifier.params["weight"]
            net.classifier.params["bias"][...] = base.classifier.params["bias"]
        return net

    @property
    def width(self):
        return 2 * self.k + 1

    def forward(self, windows, train=False):
        n, w = windows.shape[:2]
        if w != self.width:
            raise ValueError(f"expected windows of {self.width} epochs, got {w}")
        z = self.extractor.forward(windows.reshape((n * w,) + windows.shape[2:]), train=train)
        return self.classifier.forward(z.reshape(n, -1), train=train)

    def backward(self, grad):
        gz = self.classifier.backward(grad)
        if self.frozen:
            return None
        n = gz.shape[0]
        dx = self.extractor.backward(gz.reshape(n * self.width, -1))
        return dx.reshape((n, self.width) + dx.shape[1:])

    def trainable_params(self):
        if not self.frozen:
            return self.params
        return {f"classifier.{k}": v for k, v in self.classifier.params.items()}

    def trainable_grads(self):
        if not self.frozen:
            return self.grads
        return {f"classifier.{k}": v for k, v in self.classifier.grads.items()}

    def param_counts(self):
        out = self.extractor.param_counts()
        out["classifier"] = self.classifier.n_params
        return out


# ---------------------------------------------------------------------------
# sampling


def balanced_class_counts(batch_size, batch_index, n_classes=N_STAGES):
    """Per-class counts of one balanced batch. The remainder classes that
    receive one extra example rotate with `batch_index`."""
    base, rem = divmod(batch_size, n_classes)
    counts = np.full(n_classes, base, dtype=np.int64)
    extra = (batch_index * rem + np.arange(rem)) % n_classes
    counts[extra] += 1
    return counts


def balanced_batches(labels, batch_size, rng, n_batches=None, n_classes=N_STAGES):
    """Yield index arrays of class-balanced batches.

    Within a class, examples are drawn with replacement; each batch is
    shuffled. Runs forever when `n_batches` is None.
    """
    labels = np.asarray(labels)
    rng = make_rng(rng)
    pools = [np.flatnonzero(labels == c) for c in range(n_classes)]
    for c, pool in enumerate(pools):
        if pool.size == 0:
            raise ValueError(f"class {STAGE_NAMES[c] if n_classes == N_STAGES else c} has no examples")
    b = 0
    while n_batches is None or b < n_batches:
        counts = balanced_class_counts(batch_size, b, n_classes)
        idx = np.concatenate([rng.choice(pool, size=n, replace=True) for pool, n in zip(pools, counts)])
        rng.shuffle(idx)
        yield idx
        b += 1


def _plain_batches(n, batch_size, rng, n_batches):
    order = np.empty(0, dtype=np.int64)
    for _ in range(n_batches):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


# ---------------------------------------------------------------------------
# training


def _batched(fn, x, batch_size):
    return np.concatenate([fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def _balanced_accuracy(y, pred):
    recalls = [np.mean(pred[y == c] == c) for c in range(N_STAGES) if np.any(y == c)]
    return float(np.mean(recalls))


def _layer_norms(params):
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


def _fit(step_fn, eval_fn, n_train, train_labels, val_labels, net, spec, rng):
    """Generic loop: balanced batches, Adam, early stopping on validation
    loss, best-weight restoration."""
    history = []
    if spec.max_epochs == 0:
        return history
    state = AdamState(lr=spec.lr, beta1=spec.beta1, beta2=spec.beta2, eps=spec.eps)
    steps = spec.steps_per_epoch or math.ceil(n_train / spec.batch_size)
    if spec.balanced:
        batches = balanced_batches(train_labels, spec.batch_size, rng)
    else:
        batches = _plain_batches(n_train, spec.batch_size, rng, steps * spec.max_epochs)
    best_loss, best_params, bad_epochs = np.inf, net.copy_params(), 0
    for epoch in range(1, spec.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b in range(steps):
            idx = next(batches)
            loss = step_fn(idx)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {b}; "
                    f"parameter norms: {_layer_norms(net.trainable_params())}"
                )
            adam_step(net.trainable_params(), net.trainable_grads(), state)
            losses.append(loss)
        val_p = eval_fn()
        _, val_loss = softmax_cross_entropy(np.log(np.clip(val_p, 1e-300, None)), val_labels)
        val_bacc = _balanced_accuracy(val_labels, np.argmax(val_p, axis=1))
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": float(val_loss),
            "val_balanced_accuracy": val_bacc,
            "wall_seconds": time.perf_counter() - t0,
        }
        history.append(entry)
        logger.info("epoch %d train_loss %.4f val_loss %.4f val_bacc %.3f",
                    epoch, entry["train_loss"], val_loss, val_bacc)
        if val_loss < best_loss:
            best_loss, best_params, bad_epochs = val_loss, net.copy_params(), 0
        else:
            bad_epochs += 1
            if bad_epochs >= spec.patience:
                break
    net.load_params(best_params)
    return history


def _as_dataset(data):
    if isinstance(data, Dataset):
        return data
    if isinstance(data, EpochSet):
        return Dataset(data.data, data.labels)
    return Dataset.from_epochsets(data)


def train_stage1(net, train_set, val_set, spec):
    """Train the k = 0 network end to end. Returns (net, history)."""
    train, val = _as_dataset(train_set), _as_dataset(val_set)
    rng = make_rng(spec.seed)
    dtype = np.dtype(net.config.dtype)
    x_train = train.x.astype(dtype, copy=False)
    x_val = val.x.astype(dtype, copy=False)

    def step(idx):
        loss, _ = net.loss_and_grad(x_train[idx], train.y[idx])
        return loss

    def evaluate():
        return _batched(net.predict_proba, x_val, spec.eval_batch_size)

    history = _fit(step, evaluate, len(train), train.y, val.y, net, spec, rng)
    net.trained = net.trained or bool(history)
    return net, history


def _record_features(extractor, epochsets, batch_size):
    dtype = np.dtype(extractor.config.dtype)
    return [
        _batched(lambda x: extractor.forward(x, train=False), s.data.astype(dtype, copy=False), batch_size)
        for s in epochsets
    ]


def _windowed_features(feats, pad, k):
    """Stack per-record features into (n, 2k+1, D) windows with `pad` filling
    slots outside the record."""
    out = []
    for f in feats:
        idx = context_indices(len(f), k)
        table = np.concatenate([f, pad[None]], axis=0)
        out.append(table[idx])  # index -1 selects the pad row
    return np.concatenate(out) if out else np.zeros((0, 2 * k + 1, len(pad)))


def extractor_zero_features(extractor):
    cfg = extractor.config
    zeros = np.zeros((1, cfg.n_channels, cfg.n_times), dtype=cfg.dtype)
    return extractor.forward(zeros, train=False)[0]


def train_stage2(base_net, k, train_sets, val_sets, spec, rng=None):
    """Freeze the base extractor, distribute it over 2k+1 epochs and train a
    fresh classifier on the concatenated features.

    Because Z is frozen and its last layer is dropout, the pre-dropout
    features of every epoch are computed once; during training dropout is
    applied to them slot by slot, which is what running the frozen Z in
    training mode would produce.
    """
    if k < 0:
        raise ValueError("context half-width k must be non-negative")
    if isinstance(train_sets, EpochSet):
        train_sets = [train_sets]
    if isinstance(val_sets, EpochSet):
        val_sets = [val_sets]
    net = TimeDistributedNet.from_base(base_net, k, rng=rng)
    ex = net.extractor
    pad = extractor_zero_features(ex)
    f_train = _windowed_features(_record_features(ex, train_sets, spec.eval_batch_size), pad, k)
    f_val = _windowed_features(_record_features(ex, val_sets, spec.eval_batch_size), pad, k)
    y_train = np.concatenate([s.labels for s in train_sets])
    y_val = np.concatenate([s.labels for s in val_sets])
    train_rng = make_rng(spec.seed)
    drop = Dropout(ex.dropout_rate, rng=np.random.SeedSequence([spec.seed, 2]).spawn(1)[0])
    clf = net.classifier

    def step(idx):
        z = drop.forward(f_train[idx], train=True).reshape(len(idx), -1)
        logits = clf.forward(z, train=True)
        p, loss = softmax_cross_entropy(logits, y_train[idx])
        clf.backward(cross_entropy_backward(p, y_train[idx]).astype(logits.dtype))
        return loss

    def evaluate():
        return softmax(clf.forward(f_val.reshape(len(f_val), -1)))

    history = _fit(step, evaluate, len(y_train), y_train, y_val, net, spec, train_rng)
    net.trained = base_net.trained and bool(history)
    return net, history


# ---------------------------------------------------------------------------
# inference


def predict_proba(net, epochset, batch_size=256):
    """Per-epoch stage probabilities for one preprocessed record, with
    zero-padded context windows when the network has k > 0."""
    cfg = net.extractor.config
    if epochset.data.shape[1] != cfg.n_channels or epochset.modality_split != cfg.n_eeg:
        raise ValueError(
            f"record {epochset.subject_id!r} has {epochset.data.shape[1]} channels "
            f"({epochset.modality_split} EEG/EOG), model expects {cfg.n_channels} ({cfg.n_eeg})"
        )
    x = epochset.data.astype(cfg.dtype, copy=False)
    if isinstance(net, MultivariateNet):
        return _batched(net.predict_proba, x, batch_size)
    feats = _record_features(net.extractor, [epochset], batch_size)
    windows = _windowed_features(feats, extractor_zero_features(net.extractor), net.k)
    return softmax(net.classifier.forward(windows.reshape(len(windows), -1)))


def predict_record(net, epochset, batch_size=256):
    """Hypnogram (argmax, ties to the lower stage) and probabilities."""
    p = predict_proba(net, epochset, batch_size)
    return Hypnogram(np.argmax(p, axis=1)), p


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, net):
    kind = "time_distributed" if isinstance(net, TimeDistributedNet) else "multivariate"
    config = {"kind": kind, "k": net.k, "trained": bool(net.trained), "model": net.extractor.config.to_dict()}
    save_checkpoint(path, net.params, config)


def load_model(path):
    params, config = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    base = MultivariateNet(cfg)
    if config.get("kind") == "time_distributed":
        net = TimeDistributedNet(base.extractor, config["k"])
    else:
        net = base
    net.load_params(params)
    net.trained = bool(config.get("trained", False))
    return net
