"""Polysomnography records: EDF reading/writing, hypnogram sidecars,
synthetic stage-coded nights and record-wise splits.

Only plain EDF (and continuous EDF+) is handled. Hypnograms live next to the
EDF file in a text sidecar with one stage token per line.
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import make_rng
from .stages import BANDS, EPOCH_SECONDS, N_STAGES, STAGE_BAND, STAGE_NAMES, SleepStage

logger = logging.getLogger(__name__)

__all__ = [
    "ChannelInfo",
    "EdfHeader",
    "EdfParseError",
    "Hypnogram",
    "Record",
    "infer_modality",
    "read_edf",
    "write_edf",
    "hypnogram_path",
    "read_hypnogram",
    "write_hypnogram",
    "make_synthetic_record",
    "make_markov_record",
    "markov_hypnogram",
    "synthesize_record",
    "split_records",
]

MODALITIES = ("EEG", "EOG", "EMG", "OTHER")

# label prefix -> modality, matched case-insensitively after stripping
MODALITY_PREFIXES = (
    ("EEG", "EEG"),
    ("EOG", "EOG"),
    ("EMG", "EMG"),
)

DIGITAL_MIN = -32768
DIGITAL_MAX = 32767


class EdfParseError(ValueError):
    """Malformed EDF content; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def infer_modality(label, overrides=None):
    """Modality of a channel from its label.

    ``overrides`` maps exact labels to a modality and wins over the prefix
    table.
    """
    if overrides and label in overrides:
        modality = overrides[label].upper()
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r} for channel {label!r}")
        return modality
    head = label.strip().upper()
    for prefix, modality in MODALITY_PREFIXES:
        if head.startswith(prefix):
            return modality
    return "OTHER"


@dataclass(frozen=True)
class ChannelInfo:
    label: str
    modality: str
    unit: str = "uV"
    sampling_rate: float = 256.0
    # EDF-specific fields; None means "derive from the data when writing"
    physical_min: float = None
    physical_max: float = None
    digital_min: int = DIGITAL_MIN
    digital_max: int = DIGITAL_MAX
    transducer: str = ""
    prefiltering: str = ""

    def __post_init__(self):
        if not self.sampling_rate > 0:
            raise ValueError(f"sampling rate must be positive for {self.label!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @classmethod
    def from_label(cls, label, sampling_rate=256.0, overrides=None, **kwargs):
        return cls(label, infer_modality(label, overrides), sampling_rate=sampling_rate, **kwargs)


class Hypnogram:
    """Sequence of sleep stages over consecutive 30 s epochs."""

    def __init__(self, stages):
        arr = np.asarray([int(SleepStage(s)) for s in stages], dtype=np.int64)
        arr.setflags(write=False)
        self.stages = arr

    @classmethod
    def from_tokens(cls, tokens):
        return cls([SleepStage.from_token(t) for t in tokens])

    def tokens(self):
        return [STAGE_NAMES[s] for s in self.stages]

    def one_hot(self):
        out = np.zeros((len(self), N_STAGES))
        out[np.arange(len(self)), self.stages] = 1.0
        return out

    def __len__(self):
        return len(self.stages)

    def __iter__(self):
        return (SleepStage(s) for s in self.stages)

    def __getitem__(self, i):
        return SleepStage(self.stages[i])

    def __eq__(self, other):
        return isinstance(other, Hypnogram) and np.array_equal(self.stages, other.stages)

    def __repr__(self):
        return f"Hypnogram(n={len(self)})"


@dataclass(frozen=True)
class EdfHeader:
    """Recording-level EDF fields kept so that a read record re-writes to
    the same header bytes."""

    patient: str = ""
    recording: str = ""
    startdate: str = "01.01.00"
    starttime: str = "00.00.00"
    reserved: str = ""
    record_duration: float = 1.0


@dataclass
class Record:
    subject_id: str
    channels: list
    signals: list
    hypnogram: Hypnogram = None
    header: EdfHeader = field(default_factory=EdfHeader)

    def __post_init__(self):
        if len(self.channels) != len(self.signals):
            raise ValueError("one signal buffer is required per channel")
        self.signals = [np.asarray(s, dtype=np.float64) for s in self.signals]
        durations = {len(s) / ch.sampling_rate for ch, s in zip(self.channels, self.signals)}
        if len(durations) > 1:
            raise ValueError(f"channels cover different time spans: {sorted(durations)}")
        if self.hypnogram is not None and self.channels:
            expected = int(math.floor(self.duration / EPOCH_SECONDS + 1e-9))
            if len(self.hypnogram) != expected:
                raise ValueError(
                    f"hypnogram has {len(self.hypnogram)} epochs, record duration implies {expected}"
                )

    @property
    def duration(self):
        if not self.channels:
            return 0.0
        return len(self.signals[0]) / self.channels[0].sampling_rate

    @property
    def labels(self):
        return [ch.label for ch in self.channels]

    def select(self, labels):
        """Sub-record restricted to `labels`, in the given order."""
        index = {ch.label: i for i, ch in enumerate(self.channels)}
        missing = [lab for lab in labels if lab not in index]
        if missing:
            raise ValueError(f"channels not in record {self.subject_id!r}: {missing}")
        idx = [index[lab] for lab in labels]
        return replace(
            self,
            channels=[self.channels[i] for i in idx],
            signals=[self.signals[i] for i in idx],
        )


# ---------------------------------------------------------------------------
# hypnogram sidecar


def hypnogram_path(edf_path):
    edf_path = Path(edf_path)
    return edf_path.with_name(edf_path.stem + ".hypnogram.txt")


def write_hypnogram(hypnogram, path):
    text = "".join(tok + "\n" for tok in hypnogram.tokens())
    Path(path).write_text(text, encoding="utf-8")


def read_hypnogram(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Hypnogram.from_tokens([ln for ln in lines if ln.strip()])


# ---------------------------------------------------------------------------
# EDF

_HEADER_FIELDS = (
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
)

_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("unit", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


def _ascii_field(value, width, name):
    text = str(value)
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError:
        raise ValueError(f"EDF field {name!r} must be ASCII: {text!r}") from None
    if len(raw) > width:
        raise ValueError(f"EDF field {name!r} longer than {width} bytes: {text!r}")
    return raw.ljust(width, b" ")


def _format_number(x, width=8, direction=0):
    """Shortest decimal text of `x` fitting `width` characters.

    direction -1 rounds toward -inf, +1 toward +inf, 0 to nearest, so that
    physical ranges can be widened rather than clipped by formatting.
    """
    x = float(x)
    if x.is_integer() and len(str(int(x))) <= width:
        return str(int(x))
    text = repr(x)
    if len(text) <= width:
        return text
    for decimals in range(width - 2, -1, -1):
        v = round(x, decimals)
        if direction < 0 and v > x:
            v -= 10.0**-decimals
        elif direction > 0 and v < x:
            v += 10.0**-decimals
        text = f"{v:.{decimals}f}"
        if "." in text:
            text = text.rstrip("0").rstrip(".")
        if text == "-0":
            text = "0"
        if len(text) <= width:
            return text
    raise ValueError(f"cannot format {x!r} into {width} characters")


def _record_duration_for(channels, n_samples, preferred):
    """Data-record duration such that every channel has an integer number of
    samples per record and the recording is a whole number of records."""
    candidates = [preferred] + [d for d in (1.0, 0.5, 0.25, 2.0, 5.0, 10.0, 30.0) if d != preferred]
    for d in candidates:
        per = [ch.sampling_rate * d for ch in channels]
        if not all(abs(p - round(p)) < 1e-9 for p in per):
            continue
        if all(n % int(round(p)) == 0 for n, p in zip(n_samples, per)):
            return d
    raise ValueError("channels share no common data-record duration divisor")


def write_edf(record, path, write_sidecar=True):
    """Write `record` as an EDF file (and its hypnogram sidecar, if any)."""
    if not record.channels:
        raise ValueError("cannot write an EDF file without channels")
    n_samples = [len(s) for s in record.signals]
    duration = _record_duration_for(record.channels, n_samples, record.header.record_duration)
    per_record = [int(round(ch.sampling_rate * duration)) for ch in record.channels]
    n_records = n_samples[0] // per_record[0] if per_record[0] else 0

    phys_text, phys_range = [], []
    for ch, sig in zip(record.channels, record.signals):
        lo = ch.physical_min if ch.physical_min is not None else (float(sig.min()) if sig.size else -1.0)
        hi = ch.physical_max if ch.physical_max is not None else (float(sig.max()) if sig.size else 1.0)
        if ch.physical_min is None and ch.physical_max is None:
            # symmetric range so that zero is representable
            peak = max(abs(lo), abs(hi))
            lo, hi = -peak, peak
        lo_txt = _format_number(lo, direction=-1)
        hi_txt = _format_number(hi, direction=+1)
        if float(lo_txt) >= float(hi_txt):
            raise ValueError(f"degenerate physical range for channel {ch.label!r}: [{lo_txt}, {hi_txt}]")
        if ch.digital_min >= ch.digital_max:
            raise ValueError(f"degenerate digital range for channel {ch.label!r}")
        phys_text.append((lo_txt, hi_txt))
        phys_range.append((float(lo_txt), float(hi_txt)))

    ns = len(record.channels)
    hdr = record.header
    out = bytearray()
    out += _ascii_field("0", 8, "version")
    out += _ascii_field(hdr.patient or record.subject_id.replace(" ", "_"), 80, "patient")
    out += _ascii_field(hdr.recording, 80, "recording")
    out += _ascii_field(hdr.startdate, 8, "startdate")
    out += _ascii_field(hdr.starttime, 8, "starttime")
    out += _ascii_field(256 * (ns + 1), 8, "header_bytes")
    out += _ascii_field(hdr.reserved, 44, "reserved")
    out += _ascii_field(n_records, 8, "n_records")
    out += _ascii_field(_format_number(duration), 8, "record_duration")
    out += _ascii_field(ns, 4, "n_signals")
    columns = {
        "label": [ch.label for ch in record.channels],
        "transducer": [ch.transducer for ch in record.channels],
        "unit": [ch.unit for ch in record.channels],
        "physical_min": [t[0] for t in phys_text],
        "physical_max": [t[1] for t in phys_text],
        "digital_min": [ch.digital_min for ch in record.channels],
        "digital_max": [ch.digital_max for ch in record.channels],
        "prefiltering": [ch.prefiltering for ch in record.channels],
        "samples_per_record": per_record,
        "reserved": [""] * ns,
    }
    for name, width in _SIGNAL_FIELDS:
        for value in columns[name]:
            out += _ascii_field(value, width, name)

    digital = []
    for ch, sig, (lo, hi) in zip(record.channels, record.signals, phys_range):
        gain = (ch.digital_max - ch.digital_min) / (hi - lo)
        d = np.rint((sig - lo) * gain + ch.digital_min)
        d = np.clip(d, ch.digital_min, ch.digital_max).astype("<i2")
        digital.append(d.reshape(n_records, -1))
    data = np.concatenate(digital, axis=1) if digital else np.zeros((0, 0), "<i2")
    out += data.astype("<i2").tobytes()

    path = Path(path)
    path.write_bytes(bytes(out))
    if write_sidecar and record.hypnogram is not None:
        write_hypnogram(record.hypnogram, hypnogram_path(path))


def _parse_number(raw, offset, name, kind=float):
    text = raw.decode("ascii", errors="replace").strip()
    try:
        return kind(text)
    except ValueError:
        raise EdfParseError(f"field {name!r} is not a valid number: {text!r}", offset) from None


def read_edf(path, modality_overrides=None, keep_other=False, read_sidecar=True):
    """Read an EDF/EDF+C file into a :class:`Record`.

    Samples are mapped to physical units with each channel's affine
    digital-to-physical map. Channels whose modality is OTHER are dropped
    with a warning unless `keep_other` is set.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 256:
        raise EdfParseError("file shorter than the 256-byte fixed header", len(raw))

    fields, pos = {}, 0
    for name, width in _HEADER_FIELDS:
        fields[name] = (raw[pos : pos + width], pos)
        pos += width
    version, _ = fields["version"]
    if version != b"0       ":
        raise EdfParseError(f"unsupported version field {version!r}", 0)
    reserved = fields["reserved"][0].decode("ascii", errors="replace")
    if reserved.startswith("EDF+D"):
        raise EdfParseError("discontinuous EDF+ files are not supported", fields["reserved"][1])
    ns = _parse_number(*fields["n_signals"], "n_signals", int)
    header_bytes = _parse_number(*fields["header_bytes"], "header_bytes", int)
    if ns < 0 or header_bytes != 256 * (ns + 1):
        raise EdfParseError(
            f"header size {header_bytes} inconsistent with {ns} signals", fields["header_bytes"][1]
        )
    if len(raw) < header_bytes:
        raise EdfParseError("signal header truncated", len(raw))
    n_records = _parse_number(*fields["n_records"], "n_records", int)
    duration = _parse_number(*fields["record_duration"], "record_duration", float)
    if duration <= 0:
        raise EdfParseError("data record duration must be positive", fields["record_duration"][1])

    sig = {}
    for name, width in _SIGNAL_FIELDS:
        vals = []
        for _ in range(ns):
            vals.append((raw[pos : pos + width], pos))
            pos += width
        sig[name] = vals

    def text(name, i):
        return sig[name][i][0].decode("ascii", errors="replace").rstrip(" ")

    per_record = [_parse_number(*sig["samples_per_record"][i], "samples_per_record", int) for i in range(ns)]
    record_bytes = 2 * sum(per_record)
    available = len(raw) - header_bytes
    if n_records == -1:
        n_records = available // record_bytes if record_bytes else 0
    if record_bytes * n_records > available:
        complete = available // record_bytes if record_bytes else 0
        raise EdfParseError(
            f"truncated data: header declares {n_records} data records, file holds {complete}",
            header_bytes + complete * record_bytes,
        )

    data = np.frombuffer(raw, dtype="<i2", count=record_bytes // 2 * n_records, offset=header_bytes)
    data = data.reshape(n_records, record_bytes // 2) if n_records else data.reshape(0, record_bytes // 2)

    channels, signals, start = [], [], 0
    for i in range(ns):
        label = text("label", i)
        n = per_record[i]
        block = data[:, start : start + n]
        start += n
        if label.startswith("EDF Annotations"):
            continue
        dmin = _parse_number(*sig["digital_min"][i], "digital_min", int)
        dmax = _parse_number(*sig["digital_max"][i], "digital_max", int)
        pmin = _parse_number(*sig["physical_min"][i], "physical_min", float)
        pmax = _parse_number(*sig["physical_max"][i], "physical_max", float)
        if dmin == dmax:
            raise EdfParseError(f"digital min equals digital max for channel {label!r}", sig["digital_min"][i][1])
        modality = infer_modality(label, modality_overrides)
        if modality == "OTHER" and not keep_other:
            logger.warning("dropping channel %r of unknown modality in %s", label, path.name)
            continue
        gain = (pmax - pmin) / (dmax - dmin)
        values = pmin + (block.reshape(-1).astype(np.float64) - dmin) * gain
        channels.append(
            ChannelInfo(
                label=label,
                modality=modality,
                unit=text("unit", i),
                sampling_rate=n / duration,
                physical_min=pmin,
                physical_max=pmax,
                digital_min=dmin,
                digital_max=dmax,
                transducer=text("transducer", i),
                prefiltering=text("prefiltering", i),
            )
        )
        signals.append(values)

    header = EdfHeader(
        patient=fields["patient"][0].decode("ascii", errors="replace").rstrip(" "),
        recording=fields["recording"][0].decode("ascii", errors="replace").rstrip(" "),
        startdate=fields["startdate"][0].decode("ascii", errors="replace").rstrip(" "),
        starttime=fields["starttime"][0].decode("ascii", errors="replace").rstrip(" "),
        reserved=reserved.rstrip(" "),
        record_duration=duration,
    )
    hypnogram = None
    side = hypnogram_path(path)
    if read_sidecar and side.exists():
        hypnogram = read_hypnogram(side)
    subject = header.patient.split(" ")[0] if header.patient else path.stem
    return Record(subject, channels, signals, hypnogram, header)


# ---------------------------------------------------------------------------
# synthetic data

# EMG amplitude per stage: high muscle tone awake, atonia in REM
EMG_GAIN = {
    SleepStage.W: 3.0,
    SleepStage.N1: 1.5,
    SleepStage.N2: 1.0,
    SleepStage.N3: 0.8,
    SleepStage.REM: 0.25,
}


def _band_noise(rng, n, rate, low, high):
    """Unit-variance Gaussian noise with its spectrum confined to [low, high] Hz."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(freqs < low) | (freqs > high)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / x.std()


def _channel_specs(channels_spec, rate_hz):
    specs = []
    for ch in channels_spec:
        if isinstance(ch, ChannelInfo):
            specs.append(replace(ch, sampling_rate=rate_hz))
        else:
            specs.append(ChannelInfo.from_label(ch, sampling_rate=rate_hz))
    if not specs:
        raise ValueError("at least one channel is required")
    return specs


def synthesize_record(hypnogram, channels_spec, rng, rate_hz=256.0, amplitude_uv=25.0,
                      noise_db=-10.0, subject_id="synth"):
    """Generate signals whose spectral content follows `hypnogram`.

    Each epoch carries one band-limited source in the stage's signature band,
    mixed into every channel with a channel-specific gain, plus independent
    white noise `noise_db` below the source power. EMG channels are further
    scaled by a stage-dependent muscle tone.
    """
    rng = make_rng(rng)
    if not isinstance(hypnogram, Hypnogram):
        hypnogram = Hypnogram(hypnogram)
    channels = _channel_specs(channels_spec, rate_hz)
    n_per_epoch = int(round(EPOCH_SECONDS * rate_hz))
    if abs(n_per_epoch - EPOCH_SECONDS * rate_hz) > 1e-9:
        raise ValueError("sampling rate must give an integer number of samples per epoch")
    gains = rng.uniform(0.7, 1.3, size=len(channels))
    noise_std = math.sqrt(10.0 ** (noise_db / 10.0))
    signals = np.zeros((len(channels), n_per_epoch * len(hypnogram)))
    for e, stage in enumerate(hypnogram):
        low, high = BANDS[STAGE_BAND[stage]]
        source = _band_noise(rng, n_per_epoch, rate_hz, low, high)
        sl = slice(e * n_per_epoch, (e + 1) * n_per_epoch)
        for c, ch in enumerate(channels):
            x = gains[c] * (source + noise_std * rng.standard_normal(n_per_epoch))
            if ch.modality == "EMG":
                x = x * EMG_GAIN[stage]
            signals[c, sl] = amplitude_uv * x
    return Record(subject_id, channels, list(signals), hypnogram)


def make_synthetic_record(n_epochs_per_class, channels_spec, rng, rate_hz=256.0, subject_id="synth", **kwargs):
    """Synthetic night with every stage appearing `n_epochs_per_class` times
    in a random order."""
    if n_epochs_per_class < 1:
        raise ValueError("n_epochs_per_class must be at least 1")
    rng = make_rng(rng)
    stages = np.repeat(np.arange(N_STAGES), n_epochs_per_class)
    rng.shuffle(stages)
    return synthesize_record(stages, channels_spec, rng, rate_hz=rate_hz, subject_id=subject_id, **kwargs)


def markov_hypnogram(n_epochs, rng, stay=0.9):
    """Stage sequence from a sticky Markov chain with a uniform stationary
    distribution: stay with probability `stay`, otherwise jump uniformly to
    one of the other four stages."""
    if n_epochs < 1:
        raise ValueError("n_epochs must be at least 1")
    if not 0.0 <= stay < 1.0:
        raise ValueError("stay must lie in [0, 1)")
    rng = make_rng(rng)
    stages = np.empty(n_epochs, dtype=np.int64)
    stages[0] = rng.integers(N_STAGES)
    for t in range(1, n_epochs):
        if rng.random() < stay:
            stages[t] = stages[t - 1]
        else:
            stages[t] = (stages[t - 1] + rng.integers(1, N_STAGES)) % N_STAGES
    return Hypnogram(stages)


def make_markov_record(n_epochs, channels_spec, rng, stay=0.9, rate_hz=256.0, subject_id="synth", **kwargs):
    rng = make_rng(rng)
    hyp = markov_hypnogram(n_epochs, rng, stay=stay)
    return synthesize_record(hyp, channels_spec, rng, rate_hz=rate_hz, subject_id=subject_id, **kwargs)


def split_records(record_ids, n_train, n_val, n_test, rng):
    """Random record-wise split into disjoint train/validation/test lists."""
    ids = list(record_ids)
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_val + n_test > len(ids):
        raise ValueError(
            f"requested {n_train}+{n_val}+{n_test} records but only {len(ids)} are available"
        )
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    order = make_rng(rng).permutation(len(ids))
    chosen = [ids[i] for i in order]
    return (
        chosen[:n_train],
        chosen[n_train : n_train + n_val],
        chosen[n_train + n_val : n_train + n_val + n_test],
    )


def list_edf(directory):
    """Sorted EDF paths in `directory`."""
    return sorted(Path(directory).glob("*.edf"), key=lambda p: os.fspath(p))
