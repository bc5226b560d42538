"""
From a waveform to 52-dim audio chunks
======================================

A synthetic utterance is turned into MFCC frames and then into the
four-frame chunks the audio branch reads.
"""

import numpy as np

from qdetect.data import SynthConfig, generate_synthetic
from qdetect.features import MfccConfig, audio_features, mel_energies, mel_filter_centers, mfcc

# one yes-no question and one statement from the generator
question, = generate_synthetic(SynthConfig(n_examples=1, seed=4, proportions={"yes-no": 1.0}))
statement, = generate_synthetic(SynthConfig(n_examples=1, seed=4, proportions={"statement": 1.0}))
print("question: ", question.text)
print("statement:", statement.text)

# 40 ms frames with a 25 ms hop: 640 and 400 samples at 16 kHz
cfg = MfccConfig()
signal = question.meta["signal"]
print("seconds:", signal.samples.size / signal.sample_rate)
print("frame / hop samples:", cfg.frame_length(16000), cfg.hop_length(16000))

frames = mfcc(signal)
chunks = audio_features(signal)
print("MFCC frames:", frames.shape, " chunks:", chunks.shape)

# The generator's pitch rises at the end of a question and falls at the end
# of a statement. The energy-weighted mel centre of the voiced band follows it.
centers = mel_filter_centers(26, 16000)[1:-1]
band = centers < 1200.0
for ex in (question, statement):
    p = np.exp(mel_energies(ex.meta["signal"])[:, band])
    centroid = (p * centers[band]).sum(axis=1) / p.sum(axis=1)
    q = len(centroid) // 4
    print(f"{ex.meta['type']:<10} first quarter {centroid[:q].mean():7.1f} Hz,"
          f" last quarter {centroid[-q:].mean():7.1f} Hz")
