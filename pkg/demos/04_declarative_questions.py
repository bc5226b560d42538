"""
Declarative questions need the audio
====================================

A declarative question has the words of a statement, so a text-only model
cannot tell them apart. Fused models also hear the rising pitch.
"""

from qdetect.data import SynthConfig, generate_synthetic, materialize_features, split_dataset
from qdetect.experiments import declarative_analysis, emit_table
from qdetect.features import build_vocab
from qdetect.models import ModelConfig, build_model
from qdetect.training import TrainConfig, evaluate_f1, fit

train = generate_synthetic(SynthConfig(n_examples=600, seed=0))
test = generate_synthetic(SynthConfig(n_examples=100, seed=100, proportions={
    "declarative-question": 0.5, "statement": 0.5}))
materialize_features(train + test)
splits = split_dataset(train, seed=0)
vocab = build_vocab([e.text for e in splits.train])

models = {}
for row in ("text-c2", "audio-c2", "combination-c2", "condition-c2"):
    cfg = ModelConfig.for_row(row, hidden=32, embed_dim=32, attention_dim=32,
                              vocab_size=len(vocab), seed=0)
    models[row] = build_model(cfg, vocab)
    fit(models[row], splits, TrainConfig(max_epochs=8, patience=3, seed=0))
    print(f"{row:<16} F1 on declarative questions vs statements:"
          f" {evaluate_f1(models[row], test).f1:.3f}")

# question scores for the first few declarative questions
fused = {k: v for k, v in models.items() if k != "text-c2"}
decl = [e for e in test if e.meta["type"] == "declarative-question"][:6]
print(emit_table(declarative_analysis(fused, decl), "declarative", "text"))
