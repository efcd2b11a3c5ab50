"""
Training the multivariate network and probing it band by band
=============================================================

Train the k = 0 network on a small synthetic benchmark, score it and run
the occlusion probe: keep a single frequency band of the input and see
which stage the network then predicts.
"""

import numpy as np

from somnograph.evaluation import compute_metrics, occlusion_probe
from somnograph.model import ModelConfig, MultivariateNet, TrainSpec, predict_record, train_stage1
from somnograph.preprocess import preprocess_record
from somnograph.signal_io import make_synthetic_record
from somnograph.stages import BAND_NAMES, STAGE_NAMES

channels = ["EEG Fpz-Cz", "EEG Pz-Oz"]
seeds = np.random.SeedSequence(7).spawn(3)
train = preprocess_record(make_synthetic_record(100, channels, seeds[0], subject_id="train"))
val = preprocess_record(make_synthetic_record(30, channels, seeds[1], subject_id="val"))
test_record = make_synthetic_record(30, channels, seeds[2], subject_id="test")
test = preprocess_record(test_record)

net = MultivariateNet(ModelConfig(n_eeg=2, seed=0))
print("parameters per layer:", net.param_counts(), "total", net.n_params)

net, history = train_stage1(net, train, val, TrainSpec(batch_size=64, max_epochs=10, patience=3))
for h in history:
    print(f"epoch {h['epoch']:2d}  train {h['train_loss']:.4f}  val {h['val_loss']:.4f}  "
          f"val bacc {h['val_balanced_accuracy']:.3f}")

hyp, _ = predict_record(net, test)
report = compute_metrics(test.labels, hyp)
print(f"\ntest accuracy {report.accuracy:.3f}, balanced {report.balanced_accuracy:.3f}, "
      f"kappa {report.cohen_kappa:.3f}, macro F1 {report.macro_f1:.3f}")

# rows: band kept; columns: share of predictions per stage
print("\nkept band  " + "  ".join(f"{s:>5}" for s in STAGE_NAMES))
for band in BAND_NAMES:
    cm = occlusion_probe(net, [test_record], band)
    share = cm.sum(axis=0) / cm.sum()
    print(f"{band:9}  " + "  ".join(f"{v:5.2f}" for v in share))
