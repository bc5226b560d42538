"""
Training an audio model and looking at its attention
====================================================

An attention-pooled GRU over MFCC chunks learns the end-of-utterance pitch
movement. The learned weights show where it looks.
"""

import numpy as np

from qdetect.data import SynthConfig, collate, generate_synthetic, materialize_features, split_dataset
from qdetect.models import ModelConfig, build_model
from qdetect.training import TrainConfig, evaluate_f1, fit

examples = generate_synthetic(SynthConfig(n_examples=800, seed=0))
materialize_features(examples)
splits = split_dataset(examples, seed=0)
print("train / valid / test:", len(splits.train), len(splits.valid), len(splits.test))

model = build_model(ModelConfig.for_row("audio-c2", hidden=16, attention_dim=16, seed=0))
log = fit(model, splits, TrainConfig(max_epochs=25, patience=10, seed=0))
for e in log.epochs:
    print(f"epoch {e['epoch']}: loss {e['train_loss']:.4f}  valid F1 {e['valid_f1']:.3f}")

report = evaluate_f1(model, splits.test)
print(report.summary())

# attention over the chunks of a few test utterances, split into quarters
batch = collate(splits.test[:8])
_, outs = model.contexts(batch)
alphas = outs["audio"].alphas
for i, L in enumerate(batch.audio_lengths):
    quarters = [alphas[i, :L][q * L // 4:(q + 1) * L // 4].sum() for q in range(4)]
    print(f"{batch.ids[i]:<12} label {int(batch.labels[i])}  mass per quarter",
          np.round(quarters, 2))
