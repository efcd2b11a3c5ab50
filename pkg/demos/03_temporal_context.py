"""
Temporal context on Markov-structured nights
============================================

Stage 2 freezes the trained feature extractor, applies it to the 2k+1
epochs around each target epoch and retrains only the classifier. On nights
with persistent stages the neighbours carry information; here the signal is
made noisy so the single-epoch model has room to improve. Wider windows
are not automatically better: the classifier input grows with k.
"""

import numpy as np

from somnograph.evaluation import compute_metrics, fragmentation_index, transition_matrix
from somnograph.model import ModelConfig, MultivariateNet, TrainSpec, predict_record, train_stage1, train_stage2
from somnograph.preprocess import preprocess_record
from somnograph.signal_io import make_markov_record

channels = ["EEG Fpz-Cz"]
seeds = np.random.SeedSequence(11).spawn(3)
# noise 10 dB above the planted source blurs single epochs
make = lambda n, s, name: preprocess_record(  # noqa: E731
    make_markov_record(n, channels, s, stay=0.9, subject_id=name, noise_db=10.0))
train, val, test = make(600, seeds[0], "train"), make(200, seeds[1], "val"), make(300, seeds[2], "test")

print("true transition matrix of the test night:")
print(np.round(transition_matrix(test.labels), 2))
print(f"fragmentation index {fragmentation_index(test.labels):.1f} events/hour of sleep")

spec = TrainSpec(batch_size=64, max_epochs=8, patience=3)
base, _ = train_stage1(MultivariateNet(ModelConfig(n_eeg=1, seed=1)), train, val, spec)
scores = {0: compute_metrics(test.labels, predict_record(base, test)[0]).balanced_accuracy}
for k in (1, 2):
    td, _ = train_stage2(base, k, [train], [val], TrainSpec(batch_size=64, max_epochs=40, patience=5))
    hyp, _ = predict_record(td, test)
    scores[k] = compute_metrics(test.labels, hyp).balanced_accuracy

for k, s in scores.items():
    print(f"k = {k}: balanced accuracy {s:.3f}")
