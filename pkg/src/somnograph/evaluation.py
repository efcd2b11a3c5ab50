"""Classification metrics, averaged confusion matrices, transition matrices,
sleep fragmentation and the frequency-band occlusion probe."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .stages import BAND_NAMES, EPOCH_SECONDS, N_STAGES, STAGE_NAMES, SleepStage

__all__ = [
    "MetricsReport",
    "confusion_matrix",
    "compute_metrics",
    "averaged_confusion",
    "transition_matrix",
    "fragmentation_index",
    "occlusion_probe",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_metrics_json",
]


def _labels(x):
    stages = getattr(x, "stages", x)
    return np.asarray(stages, dtype=np.int64).reshape(-1)


def confusion_matrix(true, pred):
    """5x5 counts, rows = true stage, columns = predicted stage."""
    true, pred = _labels(true), _labels(pred)
    if true.shape != pred.shape:
        raise ValueError(f"length mismatch: {true.size} true vs {pred.size} predicted labels")
    if np.any((true < 0) | (true >= N_STAGES) | (pred < 0) | (pred >= N_STAGES)):
        raise ValueError("labels must be stage ordinals 0..4")
    return np.bincount(true * N_STAGES + pred, minlength=N_STAGES * N_STAGES).reshape(N_STAGES, N_STAGES)


def _ratio(num, den):
    return float(num / den) if den else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    cohen_kappa: float
    macro_f1: float
    per_class: dict
    n_classes_present: int
    n_epochs: int
    confusion: list = field(repr=False)
    fragmentation_index: float = None

    def to_dict(self):
        return asdict(self)


def compute_metrics(true, pred):
    """Accuracy, balanced accuracy, Cohen's kappa, macro F1 and per-class
    precision/sensitivity/specificity/F1.

    Balanced accuracy and macro F1 average over the classes present in
    `true`. Ratios with an empty denominator are reported as 0.
    """
    true, pred = _labels(true), _labels(pred)
    if true.size == 0:
        raise ValueError("cannot score an empty prediction")
    cm = confusion_matrix(true, pred).astype(np.float64)
    n = cm.sum()
    diag = np.diag(cm)
    row = cm.sum(axis=1)  # true counts
    col = cm.sum(axis=0)  # predicted counts
    present = row > 0

    accuracy = diag.sum() / n
    recall = np.divide(diag, row, out=np.zeros(N_STAGES), where=row > 0)
    precision = np.divide(diag, col, out=np.zeros(N_STAGES), where=col > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(N_STAGES), where=denom > 0)
    tn = n - row - col + diag
    fp = col - diag
    specificity = np.divide(tn, tn + fp, out=np.zeros(N_STAGES), where=(tn + fp) > 0)

    p_e = float(np.dot(row, col)) / (n * n)
    kappa = 1.0 if p_e == 1.0 else (accuracy - p_e) / (1.0 - p_e)

    per_class = {
        STAGE_NAMES[c]: {
            "f1": float(f1[c]),
            "precision": float(precision[c]),
            "sensitivity": float(recall[c]),
            "specificity": float(specificity[c]),
        }
        for c in range(N_STAGES)
    }
    return MetricsReport(
        accuracy=float(accuracy),
        balanced_accuracy=float(recall[present].mean()),
        cohen_kappa=float(kappa),
        macro_f1=float(f1[present].mean()),
        per_class=per_class,
        n_classes_present=int(present.sum()),
        n_epochs=int(n),
        confusion=cm.astype(np.int64).tolist(),
        fragmentation_index=fragmentation_index(true),
    )


def averaged_confusion(per_subject):
    """Mean of row-normalized confusion matrices over subjects.

    `per_subject` holds (true, pred) pairs or 5x5 count matrices. A row with
    no true epochs for a subject is left out of that row's average; a row no
    subject contributes to stays zero.
    """
    per_subject = list(per_subject)
    if not per_subject:
        raise ValueError("at least one subject is required")
    total = np.zeros((N_STAGES, N_STAGES))
    contributors = np.zeros(N_STAGES)
    for item in per_subject:
        if isinstance(item, tuple):
            cm = confusion_matrix(*item)
        else:
            cm = np.asarray(item)
        cm = cm.astype(np.float64)
        sums = cm.sum(axis=1)
        has = sums > 0
        total[has] += cm[has] / sums[has, None]
        contributors += has
    return np.divide(total, contributors[:, None], out=np.zeros_like(total), where=contributors[:, None] > 0)


def transition_matrix(hypnogram):
    """Row-stochastic empirical transition probabilities between consecutive
    epochs; rows of stages never left stay zero."""
    s = _labels(hypnogram)
    if s.size < 2:
        raise ValueError("a transition matrix needs at least two epochs")
    counts = np.bincount(s[:-1] * N_STAGES + s[1:], minlength=N_STAGES * N_STAGES).reshape(N_STAGES, N_STAGES)
    counts = counts.astype(np.float64)
    out_deg = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, out_deg, out=np.zeros_like(counts), where=out_deg > 0)


def fragmentation_index(hypnogram, epoch_seconds=EPOCH_SECONDS):
    """(awakenings + stage shifts) per hour of sleep.

    An awakening is any sleep -> W transition and is also counted as a
    shift; sleep time is the duration of non-W epochs. Returns None when
    there is no sleep.
    """
    s = _labels(hypnogram)
    if s.size == 0:
        raise ValueError("empty hypnogram")
    sleep_hours = np.count_nonzero(s != SleepStage.W) * epoch_seconds / 3600.0
    if sleep_hours == 0:
        return None
    prev, nxt = s[:-1], s[1:]
    shifts = np.count_nonzero(prev != nxt)
    awakenings = np.count_nonzero((prev != SleepStage.W) & (nxt == SleepStage.W))
    return float((awakenings + shifts) / sleep_hours)


def occlusion_probe(net, records, band=None, batch_size=256, **preprocess_kwargs):
    """Confusion counts of a trained network on records reduced to one band.

    Each raw record is band-pass filtered (band None skips this), then goes
    through the ordinary preprocessing chain before prediction.
    """
    from .model import predict_record
    from .preprocess import preprocess_record

    if not getattr(net, "trained", False):
        raise ValueError("occlusion probing needs a trained network")
    if band is not None and band not in BAND_NAMES:
        raise ValueError(f"unknown band {band!r}")
    cfg = net.extractor.config
    cm = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    for record in records:
        es = preprocess_record(record, band=band, **preprocess_kwargs)
        if es.labels is None:
            raise ValueError(f"record {record.subject_id!r} has no hypnogram")
        if es.data.shape[-1] != cfg.n_times:
            raise ValueError("epoch length of the record does not match the model")
        hyp, _ = predict_record(net, es, batch_size)
        cm += confusion_matrix(es.labels, hyp.stages)
    return cm


def write_matrix_csv(path, matrix, fmt="{:.12g}"):
    """CSV with a stage-name header row and a leading stage-name column."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *STAGE_NAMES])
        for name, row in zip(STAGE_NAMES, matrix):
            w.writerow([name, *(fmt.format(v) for v in row)])


def read_matrix_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0][1:] != list(STAGE_NAMES):
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_metrics_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
