import csv
import io
import json

import numpy as np
import pytest

from qdetect import experiments
from qdetect.data import SynthConfig, generate_synthetic, materialize_features, write_corpus
from qdetect.errors import ConfigurationError, ContractError, DatasetError
from qdetect.experiments import (COLUMNS, C2_ROWS, MISSING, GridResult, GridSpec,
                                 declarative_analysis, emit_table, load_grid_result, run_grid,
                                 table_cells)
from qdetect.features import build_vocab
from qdetect.models import MODEL_ROWS, ModelConfig, build_model


def fake_result(f1=0.90123, skip=()):
    records = []
    for row in MODEL_ROWS:
        for cell, reg in COLUMNS:
            ok = (row, cell, reg) not in skip
            rec = {"row": row, "cell": cell, "reg": reg, "seed": 0,
                   "status": "ok" if ok else "failed"}
            if ok:
                rec.update(test_f1=f1, buckets={"short": 0.5, "intermediate": 0.75, "long": 1.0},
                           declarative={"d1": 0.25, "d2": 0.75}, texts={"d1": "a b c", "d2": "x y z"})
            records.append(rec)
    return GridResult(records, [0])


def test_full_spec_has_42_candidates(tmp_path):
    spec = GridSpec(data=str(tmp_path))
    assert len(spec.candidates()) == 42


def test_spec_rejects_identity_overrides():
    with pytest.raises(ConfigurationError):
        GridSpec(data="x", model={"cell": "gru"})
    with pytest.raises(ConfigurationError):
        GridSpec(data="x", rows=["text-c3"])


def test_f1_formatting():
    header, body = table_cells(fake_result(), "main")
    assert len(body) == 7 and all(len(r) == 7 for r in body) and len(header) == 7
    assert body[0][1] == "90.1"


def test_length_table_shape():
    _, body = table_cells(fake_result(), "length")
    numeric = [c for row in body for c in row[1:]]
    assert len(body) == 3 and len(numeric) == 12
    assert body[0][1:] == ["50.0"] * 4


def test_csv_and_text_numbers_agree():
    result = fake_result(0.877)
    rows = list(csv.reader(io.StringIO(emit_table(result, "main", "csv"))))
    text = emit_table(result, "main", "text")
    csv_numbers = [c for r in rows[1:] for c in r[1:]]
    text_numbers = [c.strip() for line in text.splitlines()[2:] for c in line.split("|")[1:]]
    assert csv_numbers == text_numbers == ["87.7"] * 42


def test_missing_cells_rendered_with_footnote():
    result = fake_result(skip={("audio-c1", "lstm", "batchnorm")})
    for fmt in ("text", "csv", "latex"):
        out = emit_table(result, "main", fmt)
        assert "missing or failed" in out
    assert MISSING in emit_table(result, "main", "text")
    assert "--" in emit_table(result, "main", "latex")


def test_declarative_table_layout():
    _, body = table_cells(fake_result(), "declarative")
    assert body[0] == ["a b c"] + ["0.25"] * 4
    assert body[-1] == ["mean"] + ["0.50"] * 4


def test_grid_result_json_round_trip(tmp_path):
    result = fake_result()
    (tmp_path / "r.json").write_text(json.dumps(result.to_dict()))
    assert emit_table(load_grid_result(tmp_path / "r.json"), "main") == emit_table(result, "main")


# --- declarative analysis -------------------------------------------------

@pytest.fixture(scope="module")
def small_models():
    exs = generate_synthetic(SynthConfig(n_examples=16, seed=8, max_words=6,
                                         proportions={"declarative-question": 0.5,
                                                      "statement": 0.5}))
    materialize_features(exs)
    vocab = build_vocab([e.text for e in exs])
    models = {row: build_model(ModelConfig.for_row(row, hidden=4, embed_dim=4, attention_dim=4,
                                                   vocab_size=len(vocab)), vocab)
              for row in C2_ROWS}
    return exs, models


def test_declarative_analysis_scores_everything(small_models):
    exs, models = small_models
    table = declarative_analysis(models, exs)
    assert len(table.rows) == len(exs)
    for _, _, scores in table.rows:        # statements get scores too
        assert all(0 < scores[f] < 1 for f in C2_ROWS)
    decl = {e.id for e in exs if e.meta["type"] == "declarative-question"}
    for f in C2_ROWS:
        recomputed = np.mean([s[f] for i, _, s in table.rows if i in decl])
        assert abs(recomputed - table.means[f]) < 1e-15


def test_declarative_analysis_needs_declaratives(small_models):
    exs, models = small_models
    statements = [e for e in exs if e.meta["type"] == "statement"]
    with pytest.raises(ContractError):
        declarative_analysis(models, statements)


# --- running the grid -----------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(generate_synthetic(SynthConfig(n_examples=50, seed=1, max_words=8)), root)
    return root


def tiny_spec(corpus, **kw):
    d = dict(data=str(corpus), seeds=[0], rows=["text-c1", "audio-c2"], cells=["gru"],
             regularizers=["none", "dropout"],
             model={"hidden": 4, "embed_dim": 4, "attention_dim": 4},
             train={"max_epochs": 2, "patience": 1, "batch_size": 16})
    d.update(kw)
    return GridSpec(**d)


def test_grid_runs_resumes_and_is_deterministic(corpus, tmp_path):
    spec = tiny_spec(corpus)
    first = run_grid(spec, tmp_path / "a")
    assert len(first.records) == 4 and len(first.trained) == 4 and not first.failures()
    again = run_grid(spec, tmp_path / "a", resume=True)
    assert again.trained == []
    assert [r["test_f1"] for r in again.records] == [r["test_f1"] for r in first.records]
    fresh = run_grid(spec, tmp_path / "b")
    assert [r["test_f1"] for r in fresh.records] == [r["test_f1"] for r in first.records]
    assert [r["losses"] for r in fresh.records] == [r["losses"] for r in first.records]


def test_resume_retrains_only_missing_cells(corpus, tmp_path):
    spec = tiny_spec(corpus)
    first = run_grid(spec, tmp_path)
    victim = sorted((tmp_path / "cells").iterdir())[0]
    victim.unlink()
    again = run_grid(spec, tmp_path, resume=True)
    assert again.trained == [victim.stem]


def test_failed_cell_is_recorded(corpus, tmp_path, monkeypatch):
    real_fit = experiments.fit

    def flaky_fit(model, *args, **kw):
        if model.config.row == "audio-c2":
            raise RuntimeError("boom")
        return real_fit(model, *args, **kw)

    monkeypatch.setattr(experiments, "fit", flaky_fit)
    result = run_grid(tiny_spec(corpus), tmp_path)
    failed = result.failures()
    assert len(failed) == 2 and all("boom" in r["error"] for r in failed)
    assert len([r for r in result.records if r["status"] == "ok"]) == 2
    assert MISSING in emit_table(result, "main")


def test_missing_dataset_aborts(tmp_path):
    with pytest.raises(DatasetError):
        run_grid(GridSpec(data=str(tmp_path / "nope")), tmp_path / "out")
