"""Hand-crafted spectral and statistical epoch features (26 per channel) and
a softmax-regression baseline trained on them."""

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import signal as sps

from .model import TrainSpec, _fit
from .nn import Dense, cross_entropy_backward, softmax, softmax_cross_entropy
from .numerics import make_rng
from .stages import BAND_NAMES, BANDS, N_STAGES

__all__ = [
    "FEATURE_NAMES",
    "FeatureVector",
    "welch_psd",
    "band_powers",
    "extract_epoch_features",
    "extract_features",
    "feature_names",
    "write_features_csv",
    "FeatureBaseline",
]

RATIO_PAIRS = tuple(combinations(BAND_NAMES, 2))

FEATURE_NAMES = (
    tuple(f"power_{b}" for b in BAND_NAMES)
    + tuple(f"relpower_{b}" for b in BAND_NAMES)
    + tuple(f"ratio_{a}_{b}" for a, b in RATIO_PAIRS)
    + ("spectral_entropy", "mean", "variance", "skewness", "kurtosis", "quantile_75")
)
assert len(FEATURE_NAMES) == 26

SPECTRAL_RANGE = (BANDS[BAND_NAMES[0]][0], BANDS[BAND_NAMES[-1]][1])


def feature_names(channel_labels):
    return [f"{ch}/{name}" for ch in channel_labels for name in FEATURE_NAMES]


@dataclass
class FeatureVector:
    values: np.ndarray
    names: list
    degenerate: np.ndarray  # per channel: True when total 0.5-30 Hz power is zero


def welch_psd(x, rate_hz):
    """One-sided Welch density: 2 s Hamming windows, 50 % overlap."""
    x = np.asarray(x, dtype=np.float64)
    nperseg = int(round(2 * rate_hz))
    if x.shape[-1] < nperseg:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one {nperseg}-sample window")
    return sps.welch(x, fs=rate_hz, window="hamming", nperseg=nperseg, noverlap=nperseg // 2,
                     scaling="density", axis=-1)


def _band_mask(freqs, low, high, last):
    return (freqs >= low) & ((freqs <= high) if last else (freqs < high))


def band_powers(freqs, psd):
    """Absolute power per band (PSD summed over the band times bin width)."""
    df = freqs[1] - freqs[0]
    out = []
    for i, name in enumerate(BAND_NAMES):
        low, high = BANDS[name]
        mask = _band_mask(freqs, low, high, i == len(BAND_NAMES) - 1)
        out.append(psd[..., mask].sum(axis=-1) * df)
    return np.stack(out, axis=-1)


def _spectral_entropy(freqs, psd):
    mask = _band_mask(freqs, *SPECTRAL_RANGE, True)
    p = psd[..., mask]
    total = p.sum(axis=-1, keepdims=True)
    p = np.divide(p, total, out=np.zeros_like(p), where=total > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)
    return h / np.log(mask.sum())


def _moments(x):
    mean = x.mean(axis=-1)
    c = x - mean[..., None]
    m2 = np.mean(c**2, axis=-1)
    m3 = np.mean(c**3, axis=-1)
    m4 = np.mean(c**4, axis=-1)
    ok = m2 > 0
    safe = np.where(ok, m2, 1.0)
    skew = np.where(ok, m3 / safe**1.5, 0.0)
    kurt = np.where(ok, m4 / safe**2 - 3.0, 0.0)
    return mean, m2, skew, kurt


def _channel_features(x, rate_hz):
    """Feature matrix of shape (..., 26) for signals x of shape (..., T)."""
    freqs, psd = welch_psd(x, rate_hz)
    power = band_powers(freqs, psd)
    total = power.sum(axis=-1, keepdims=True)
    rel = np.divide(power, total, out=np.zeros_like(power), where=total > 0)
    idx = {b: i for i, b in enumerate(BAND_NAMES)}
    num = np.stack([power[..., idx[a]] for a, _ in RATIO_PAIRS], axis=-1)
    den = np.stack([power[..., idx[b]] for _, b in RATIO_PAIRS], axis=-1)
    ratios = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    entropy = _spectral_entropy(freqs, psd)
    mean, var, skew, kurt = _moments(x)
    q75 = np.quantile(x, 0.75, axis=-1)
    feats = np.concatenate(
        [power, rel, ratios, np.stack([entropy, mean, var, skew, kurt, q75], axis=-1)], axis=-1
    )
    return feats, total[..., 0] <= 0


def extract_epoch_features(epoch, rate_hz=128.0, channel_labels=None):
    """26 features per channel of one (C, T) epoch, channel-major order."""
    data = getattr(epoch, "data", epoch)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    feats, degenerate = _channel_features(data, rate_hz)
    if channel_labels is None:
        channel_labels = [f"ch{i}" for i in range(len(data))]
    return FeatureVector(feats.reshape(-1), feature_names(channel_labels), degenerate)


def extract_features(epochset):
    """Feature matrix (n_epochs, 26 C) for an unstandardized EpochSet, with
    its column names and a (n_epochs, C) degenerate-channel mask."""
    feats, degenerate = _channel_features(epochset.data, epochset.rate)
    n = len(epochset.data)
    return feats.reshape(n, -1), feature_names(epochset.channel_labels), degenerate


def write_features_csv(path, values, names, labels=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + (["label"] if labels is not None else []))
        for i, row in enumerate(values):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(int(labels[i]))
            w.writerow(cells)


class FeatureBaseline:
    """Multinomial logistic regression on z-scored features, trained with
    the same balanced-batch Adam loop and early stopping as the networks.

    Absolute band powers and variances span orders of magnitude, so every
    feature goes through ``sign(x) * log1p(|x|)`` before z-scoring.
    """

    def __init__(self, n_features, seed=0):
        self.classifier = Dense(n_features, N_STAGES, rng=make_rng(seed))
        self.mean = np.zeros(n_features)
        self.scale = np.ones(n_features)
        self.trained = False

    @staticmethod
    def _compress(x):
        return np.sign(x) * np.log1p(np.abs(x))

    def _transform(self, x):
        return (self._compress(np.asarray(x, dtype=np.float64)) - self.mean) / self.scale

    @property
    def params(self):
        return self.classifier.params

    def trainable_params(self):
        return self.classifier.params

    def trainable_grads(self):
        return self.classifier.grads

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params):
        for k, v in params.items():
            self.classifier.params[k][...] = v

    def fit(self, x_train, y_train, x_val, y_val, spec=None):
        spec = spec or TrainSpec()
        c = self._compress(np.asarray(x_train, dtype=np.float64))
        self.mean = c.mean(axis=0)
        std = c.std(axis=0)
        self.scale = np.where(std > 0, std, 1.0)
        xt, xv = self._transform(x_train), self._transform(x_val)
        yt, yv = np.asarray(y_train), np.asarray(y_val)
        clf = self.classifier

        def step(idx):
            logits = clf.forward(xt[idx], train=True)
            p, loss = softmax_cross_entropy(logits, yt[idx])
            clf.backward(cross_entropy_backward(p, yt[idx]))
            return loss

        def evaluate():
            return softmax(clf.forward(xv))

        history = _fit(step, evaluate, len(yt), yt, yv, self, spec, make_rng(spec.seed))
        self.trained = True
        return history

    def predict_proba(self, x):
        return softmax(self.classifier.forward(self._transform(x)))

    def predict(self, x):
        return np.argmax(self.predict_proba(x), axis=1)
