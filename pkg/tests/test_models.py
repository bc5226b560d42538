import json

import numpy as np
import pytest

from qdetect import autodiff as ad
from qdetect.data import SequenceBatch
from qdetect.errors import ConfigurationError, InputError, ModelLoadError
from qdetect.features import Vocab
from qdetect.models import (MODEL_ROWS, ModelConfig, all_configs, build_model, load_model,
                            predict, save_model)
from qdetect.training import bce_loss

SMALL = dict(hidden=4, embed_dim=5, attention_dim=3, vocab_size=12)


def make_batch(text_lengths=(3, 5), audio_lengths=(4, 6), seed=0, V=12):
    rng = np.random.default_rng(seed)
    n = len(text_lengths)
    ids = np.zeros((n, max(text_lengths)), dtype=np.int64)
    for i, L in enumerate(text_lengths):
        ids[i, :L] = rng.integers(1, V, L)
    audio = np.zeros((n, max(audio_lengths), 52))
    for i, L in enumerate(audio_lengths):
        audio[i, :L] = rng.standard_normal((L, 52))
    return SequenceBatch(labels=np.arange(n) % 2 * 1.0, ids=[f"x{i}" for i in range(n)],
                         token_ids=ids, text_lengths=np.array(text_lengths), audio=audio,
                         audio_lengths=np.array(audio_lengths))


def test_grid_has_42_candidates():
    configs = all_configs()
    assert len(configs) == 42
    assert len({(c.row, c.cell, c.regularizer) for c in configs}) == 42


def test_conditional_requires_attention():
    with pytest.raises(ConfigurationError):
        ModelConfig(input_mode="both", fusion="conditional", context_fn="c1")
    with pytest.raises(ConfigurationError):
        ModelConfig(input_mode="text", fusion="combinational")
    with pytest.raises(ConfigurationError):
        ModelConfig.for_row("video-c1")


def test_text_c1_parameter_set():
    model = build_model(ModelConfig.for_row("text-c1", **SMALL))
    names = set(model.parameters())
    gru = {f"text_rnn.{d}.{k}_{g}" for d in ("fwd", "bwd") for k in "WUb" for g in "ruc"}
    assert names == {"text_embed.E", "text_h.W", "text_h.b", "clf.w", "clf.b"} | gru


def test_conditional_lstm_bn_wiring():
    model = build_model(ModelConfig.for_row("condition-c2", cell="lstm", regularizer="batchnorm",
                                            **SMALL))
    names = set(model.parameters())
    assert "text_att.U_a" in names and "audio_att.U_a" not in names
    assert model.parameters()["text_att.U_a"].value.shape == (8, 3)
    bns = {bn.name for bn in model.batchnorm_layers()}
    assert bns == {"text_h_bn", "audio_f_bn", "audio_h_bn", "clf_bn"}
    assert model.parameters()["clf.w"].value.shape == (16,)


def test_same_seed_same_parameters():
    cfg = ModelConfig.for_row("combination-c2", cell="lstm", seed=9, **SMALL)
    a, b = build_model(cfg).parameters(), build_model(cfg).parameters()
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)


def test_zero_classifier_gives_half():
    model = build_model(ModelConfig.for_row("audio-c2", **SMALL))
    model.parameters()["clf.w"].value[:] = 0.0
    scores = model.forward(make_batch()).value
    assert np.array_equal(scores, [0.5, 0.5])


@pytest.mark.parametrize("row", list(MODEL_ROWS))
def test_scores_in_open_interval(row):
    model = build_model(ModelConfig.for_row(row, regularizer="batchnorm", **SMALL))
    batch = make_batch((3, 7, 2), (5, 12, 3))
    for mode in ("train", "infer"):
        s = model.forward(batch, mode).value
        assert s.shape == (3,) and np.all((s > 0) & (s < 1))


def test_combination_equals_manual_composition():
    model = build_model(ModelConfig.for_row("combination-c2", cell="gru", seed=3, **SMALL))
    batch = make_batch()
    z_t = model.text.annotations(batch.token_ids, batch.text_mask, "infer", None, None)
    z_a = model.audio.annotations(batch.audio, batch.audio_mask, "infer", None, None)
    c_t = model.text.context(z_t, batch.text_mask).context.value
    c_a = model.audio.context(z_a, batch.audio_mask).context.value
    logits = np.concatenate([c_t, c_a], axis=1) @ model.w.value + model.b.value
    expected = 1 / (1 + np.exp(-logits))
    assert np.max(np.abs(model.forward(batch).value - expected)) < 1e-12


def test_missing_modality():
    model = build_model(ModelConfig.for_row("combination-c1", **SMALL))
    batch = make_batch()
    batch.audio = None
    with pytest.raises(InputError):
        model.forward(batch)


def test_predict_threshold_convention():
    model = build_model(ModelConfig.for_row("text-c1", **SMALL))
    model.parameters()["clf.w"].value[:] = 0.0
    batch = make_batch()
    assert predict(model, batch, 0.5).tolist() == [1, 1]
    model.b.value[:] = -3.0
    assert predict(model, batch, 0.0).tolist() == [1, 1]
    scores = model.forward(batch).value
    assert predict(model, batch, 0.3).tolist() == [int(s >= 0.3) for s in scores]


def test_conditional_model_grad_check():
    # full conditional model, batch 2, text lengths {3, 5}
    cfg = ModelConfig.for_row("condition-c2", cell="gru", seed=2, **SMALL)
    model = build_model(cfg)
    rng = np.random.default_rng(1)
    for p in model.parameters().values():
        p.value = p.value + rng.uniform(-0.25, 0.25, p.value.shape)
    batch = make_batch((3, 5), (5, 8), seed=4)
    f = lambda: bce_loss(model.forward(batch, "train"), batch.labels)
    report = ad.grad_check(f, model.parameters(), eps=1e-2, stencil=4, max_entries=6)
    assert report.passed, report


def test_save_load_round_trip(tmp_path):
    cfg = ModelConfig.for_row("condition-c2", cell="lstm", regularizer="batchnorm", **SMALL)
    model = build_model(cfg, Vocab([f"w{i}" for i in range(10)]))
    batch = make_batch()
    model.forward(batch, "train")   # move the running statistics away from defaults
    before = model.forward(batch, "infer").value
    save_model(model, tmp_path / "m.npz")
    loaded = load_model(tmp_path / "m.npz")
    assert np.array_equal(loaded.forward(batch, "infer").value, before)
    assert loaded.vocab == model.vocab and loaded.config == model.config


def test_truncated_model_file(tmp_path):
    model = build_model(ModelConfig.for_row("text-c2", **SMALL))
    save_model(model, tmp_path / "m.npz")
    data = (tmp_path / "m.npz").read_bytes()
    (tmp_path / "bad.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "bad.npz")


def test_vocab_size_mismatch_on_load(tmp_path):
    model = build_model(ModelConfig.for_row("text-c2", **SMALL))
    save_model(model, tmp_path / "m.npz")
    with np.load(tmp_path / "m.npz") as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays["__meta__"].tobytes())
    meta["config"]["vocab_size"] = 20
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "other.npz", **arrays)
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "other.npz")
