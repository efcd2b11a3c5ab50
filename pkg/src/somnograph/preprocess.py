"""From raw records to standardized 30 s epochs.

The fixed order is: (optional band-pass for occlusion) -> FIR low-pass ->
integer decimation -> epoching -> per-epoch, per-channel standardization.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from .stages import BANDS, EPOCH_SECONDS

__all__ = [
    "FirFilter",
    "Epoch",
    "EpochSet",
    "ContextWindow",
    "design_lowpass",
    "design_bandpass",
    "filtfilt",
    "downsample",
    "standardize",
    "standardize_epoch",
    "build_context",
    "context_indices",
    "order_channels",
    "preprocess_record",
]


@dataclass(frozen=True, eq=False)
class FirFilter:
    taps: np.ndarray
    cutoff_low: float
    cutoff_high: float
    rate: float

    @property
    def numtaps(self):
        return len(self.taps)

    def response(self, freqs):
        """Complex frequency response at `freqs` (Hz), zero-phase referenced
        to the center tap."""
        freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
        m = (self.numtaps - 1) / 2
        n = np.arange(self.numtaps) - m
        return np.exp(-2j * np.pi * np.outer(freqs, n) / self.rate) @ self.taps


def _odd_numtaps(rate, transition):
    n = int(np.ceil(3.3 * rate / transition - 1e-9))
    return n if n % 2 == 1 else n + 1


def _windowed_sinc(cutoff, numtaps, rate):
    m = (numtaps - 1) / 2
    n = np.arange(numtaps) - m
    fc = cutoff / rate
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(numtaps)
    return h / h.sum()


@lru_cache(maxsize=64)
def design_lowpass(cutoff_hz, transition_hz, rate_hz):
    """Hamming-windowed sinc low-pass with unit DC gain.

    The tap count is the smallest odd integer >= 3.3 * rate / transition,
    and the response is -6 dB (gain 0.5) at `cutoff_hz`.
    """
    nyq = rate_hz / 2
    if not 0 < cutoff_hz < nyq:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyq}) Hz")
    if transition_hz <= 0:
        raise ValueError("transition bandwidth must be positive")
    taps = _windowed_sinc(cutoff_hz, _odd_numtaps(rate_hz, transition_hz), rate_hz)
    taps.setflags(write=False)
    return FirFilter(taps, None, float(cutoff_hz), float(rate_hz))


def _band_transitions(low, high, nyq):
    # widths grow with the edge frequency, capped so they stay inside (0, nyq)
    low_tw = min(max(0.25 * low, 2.0), low)
    high_tw = min(max(0.25 * high, 2.0), nyq - high)
    return low_tw, high_tw


@lru_cache(maxsize=64)
def design_bandpass(band, rate_hz):
    """Linear-phase band-pass as the difference of two windowed-sinc
    low-passes. `band` is one of the names in ``BANDS``."""
    if band not in BANDS:
        raise ValueError(f"unknown band {band!r}; expected one of {sorted(BANDS)}")
    low, high = BANDS[band]
    nyq = rate_hz / 2
    if high >= nyq:
        raise ValueError(f"band {band!r} upper edge {high} Hz is not below Nyquist {nyq} Hz")
    low_tw, high_tw = _band_transitions(low, high, nyq)
    numtaps = max(_odd_numtaps(rate_hz, low_tw), _odd_numtaps(rate_hz, high_tw))
    taps = _windowed_sinc(high, numtaps, rate_hz) - _windowed_sinc(low, numtaps, rate_hz)
    taps.setflags(write=False)
    return FirFilter(taps, float(low), float(high), float(rate_hz))


def filtfilt(fir, x, axis=-1):
    """Zero-phase forward-backward FIR filtering along `axis`.

    The signal is reflection-padded with ``numtaps - 1`` samples at both ends,
    filtered causally, reversed, filtered again and reversed back.
    """
    x = np.asarray(x, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    pad = fir.numtaps - 1
    if n <= fir.numtaps:
        raise ValueError(f"signal of length {n} is too short for a {fir.numtaps}-tap filter")
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x, widths, mode="reflect")
    h = fir.taps.reshape((1,) * (x.ndim - 1) + (-1,))
    length = xp.shape[-1]
    y = sps.oaconvolve(xp, h, axes=-1)[..., :length]
    y = sps.oaconvolve(y[..., ::-1], h, axes=-1)[..., :length][..., ::-1]
    out = np.ascontiguousarray(y[..., pad : pad + n])
    return np.moveaxis(out, -1, axis)


def downsample(x, from_hz, to_hz, axis=-1):
    """Keep every (from/to)-th sample starting at index 0."""
    ratio = from_hz / to_hz
    if to_hz <= 0 or ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"cannot decimate {from_hz} Hz to {to_hz} Hz by an integer factor")
    x = np.asarray(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(None, None, int(round(ratio)))
    return x[tuple(index)]


def standardize(x, eps=1e-12):
    """Zero mean, unit population variance along the last axis.

    Rows whose standard deviation is below `eps` become all zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    std = np.sqrt(np.mean(centered**2, axis=-1, keepdims=True))
    ok = std >= eps
    return np.where(ok, centered / np.where(ok, std, 1.0), 0.0)


@dataclass
class Epoch:
    data: np.ndarray
    label: int = None
    subject_id: str = ""
    index: int = 0
    modality_split: int = None  # rows [:split] are EEG/EOG, [split:] EMG


def standardize_epoch(epoch):
    if isinstance(epoch, Epoch):
        return Epoch(standardize(epoch.data), epoch.label, epoch.subject_id, epoch.index, epoch.modality_split)
    return standardize(epoch)


@dataclass
class ContextWindow:
    data: np.ndarray  # (2k + 1, C, T)
    label: int
    k: int

    @property
    def center(self):
        return self.data[self.k]


def context_indices(n_epochs, k):
    """(n_epochs, 2k+1) epoch indices of every window, -1 marking zero padding."""
    if k < 0:
        raise ValueError("context half-width k must be non-negative")
    idx = np.arange(n_epochs)[:, None] + np.arange(-k, k + 1)[None, :]
    idx[(idx < 0) | (idx >= n_epochs)] = -1
    return idx


def build_context(epochs, t, k, labels=None):
    """Window of the 2k+1 epochs centered on `t`, zero-padded at the edges.

    `epochs` is an (n, C, T) array or a list of :class:`Epoch`.
    """
    if isinstance(epochs, (list, tuple)) and epochs and isinstance(epochs[0], Epoch):
        labels = [e.label for e in epochs]
        epochs = np.stack([e.data for e in epochs])
    epochs = np.asarray(epochs)
    n = len(epochs)
    if k < 0:
        raise ValueError("context half-width k must be non-negative")
    if not 0 <= t < n:
        raise ValueError(f"epoch index {t} out of range for a record of {n} epochs")
    window = np.zeros((2 * k + 1,) + epochs.shape[1:], dtype=epochs.dtype)
    for slot, i in enumerate(range(t - k, t + k + 1)):
        if 0 <= i < n:
            window[slot] = epochs[i]
    label = None if labels is None else labels[t]
    return ContextWindow(window, label, k)


@dataclass
class EpochSet:
    """All epochs of one record, channel-major: data is (n, C + C', T) with
    EEG/EOG rows first and EMG rows after `modality_split`."""

    data: np.ndarray
    labels: np.ndarray
    subject_id: str
    channel_labels: list
    modality_split: int
    rate: float

    def __len__(self):
        return len(self.data)

    def epoch(self, t):
        label = None if self.labels is None else int(self.labels[t])
        return Epoch(self.data[t], label, self.subject_id, t, self.modality_split)

    def context(self, t, k):
        return build_context(self.data, t, k, self.labels)


def order_channels(record, channels=None):
    """Channel labels of `record` with EEG/EOG first, then EMG.

    `channels` restricts (and orders within modality) the selection.
    """
    chosen = record.channels
    if channels is not None:
        by_label = {ch.label: ch for ch in record.channels}
        missing = [c for c in channels if c not in by_label]
        if missing:
            raise ValueError(f"record {record.subject_id!r} lacks channels {missing}")
        chosen = [by_label[c] for c in channels]
    eeg = [ch.label for ch in chosen if ch.modality in ("EEG", "EOG")]
    emg = [ch.label for ch in chosen if ch.modality == "EMG"]
    return eeg + emg, len(eeg)


def preprocess_record(record, target_rate=128.0, cutoff_hz=30.0, transition_hz=7.0,
                      band=None, channels=None, standardized=True):
    """Filter, decimate, cut into 30 s epochs and standardize one record.

    `band` (a ``BANDS`` name) applies a zero-phase band-pass to the raw
    signals first; this is how the occlusion probe keeps a single band.
    """
    labels, split = order_channels(record, channels)
    if not labels:
        raise ValueError(f"record {record.subject_id!r} has no EEG/EOG/EMG channels")
    index = {ch.label: i for i, ch in enumerate(record.channels)}
    rows = []
    for lab in labels:
        i = index[lab]
        rate = record.channels[i].sampling_rate
        x = record.signals[i]
        if band is not None:
            x = filtfilt(design_bandpass(band, rate), x)
        x = filtfilt(design_lowpass(cutoff_hz, transition_hz, rate), x)
        rows.append(downsample(x, rate, target_rate))
    per_epoch = int(round(EPOCH_SECONDS * target_rate))
    n = min(len(r) for r in rows) // per_epoch
    if record.hypnogram is not None:
        n = min(n, len(record.hypnogram))
    data = np.stack([r[: n * per_epoch].reshape(n, per_epoch) for r in rows], axis=1)
    if standardized:
        data = standardize(data)
    hyp = None if record.hypnogram is None else np.asarray(record.hypnogram.stages[:n])
    return EpochSet(data, hyp, record.subject_id, labels, split, float(target_rate))
