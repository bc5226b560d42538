"""The 42-candidate grid, result tables, and the declarative-question analysis."""

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (BUCKETS, dataset_hash, filter_by_length, load_dataset, materialize_features,
                   split_dataset)
from .errors import ConfigurationError, ContractError, DatasetError
from .features import MfccConfig, build_vocab
from .models import CELLS, MODEL_ROWS, REGULARIZERS, ModelConfig, build_model, load_model
from .training import TrainConfig, evaluate_f1, fit, score_examples

log = logging.getLogger(__name__)

C2_ROWS = ("text-c2", "audio-c2", "combination-c2", "condition-c2")
COLUMNS = [(c, r) for r in REGULARIZERS for c in CELLS]
_COL_LABEL = {("gru", "none"): "GRU", ("lstm", "none"): "LSTM",
              ("gru", "dropout"): "GRU, D", ("lstm", "dropout"): "LSTM, D",
              ("gru", "batchnorm"): "GRU, BN", ("lstm", "batchnorm"): "LSTM, BN"}
_ROW_LABEL = {"text-c1": "text, c1", "text-c2": "text, c2", "audio-c1": "audio, c1",
              "audio-c2": "audio, c2", "combination-c1": "combination, c1",
              "combination-c2": "combination, c2", "condition-c2": "condition, c2"}
MISSING = "—"


@dataclass
class GridSpec:
    data: str
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    rows: list = field(default_factory=lambda: list(MODEL_ROWS))
    cells: list = field(default_factory=lambda: list(CELLS))
    regularizers: list = field(default_factory=lambda: list(REGULARIZERS))
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    split_seed: int = 0
    length_cell: str = "gru"

    def __post_init__(self):
        for row in self.rows:
            if row not in MODEL_ROWS:
                raise ConfigurationError(f"unknown model row {row!r}")
        bad = set(self.model) & {"input_mode", "fusion", "context_fn", "cell", "regularizer",
                                 "seed", "vocab_size"}
        if bad:
            raise ConfigurationError(f"grid model overrides may not set {sorted(bad)}")
        TrainConfig(**self.train)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        spec = cls(**d)
        if not Path(spec.data).is_absolute():
            spec.data = str((path.parent / spec.data).resolve())
        return spec

    def candidates(self):
        """(row, cell, regularizer) triples; 42 for the full grid."""
        return [(row, cell, reg) for row in self.rows for cell in self.cells
                for reg in self.regularizers]


# ---------------------------------------------------------------------------
# per-cell work

_PREPARED = {}


def prepare_data(data, split_seed=0, mfcc_config=MfccConfig()):
    """Load, length-filter, split, build the vocabulary and compute audio features.

    Cached per process, keyed by (path, split seed).
    """
    key = (str(data), split_seed)
    if key not in _PREPARED:
        examples = filter_by_length(load_dataset(data))
        if not examples:
            raise DatasetError(f"no usable examples in {data}")
        splits = split_dataset(examples, seed=split_seed)
        materialize_features(splits.train + splits.valid + splits.test, mfcc_config)
        vocab = build_vocab([ex.text for ex in splits.train])
        _PREPARED[key] = (splits, vocab)
    return _PREPARED[key]


def cell_key(model_config, train_config, data_hash, seed, split_seed=0):
    blob = json.dumps({"model": model_config.to_dict(), "train": asdict(train_config),
                       "data": data_hash, "seed": seed, "split_seed": split_seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def cell_configs(spec, row, cell, reg, seed, vocab_size):
    mcfg = ModelConfig.for_row(row, cell=cell, regularizer=reg, seed=seed,
                               vocab_size=vocab_size, **spec.model)
    tcfg = TrainConfig(**dict(spec.train, seed=seed))
    return mcfg, tcfg


def train_cell(task):
    """Train and evaluate one (row, cell, regularizer, seed); never raises."""
    out = Path(task["out"])
    record = {k: task[k] for k in ("key", "row", "cell", "reg", "seed")}
    t0 = time.perf_counter()
    try:
        splits, vocab = prepare_data(task["data"], task["split_seed"])
        mcfg = ModelConfig.from_dict(task["model_config"])
        tcfg = TrainConfig(**task["train_config"])
        model = build_model(mcfg, vocab if mcfg.uses_text else None)
        if model.vocab is None:
            model.vocab = vocab
        model_path = out / "models" / f"{task['key']}.npz"
        trainlog = fit(model, splits, tcfg, model_path=model_path,
                       log_path=out / "logs" / f"{task['key']}.jsonl")
        report = evaluate_f1(model, splits.test)
        declarative = [ex for ex in splits.test if ex.meta.get("type") == "declarative-question"]
        record.update(
            status="ok", test_f1=report.f1, precision=report.precision, recall=report.recall,
            valid_f1=trainlog.best_valid_f1, best_epoch=trainlog.best_epoch,
            epochs=len(trainlog.epochs), losses=trainlog.losses,
            buckets={b: m["f1"] for b, m in report.buckets.items()},
            declarative={ex.id: report.scores[ex.id] for ex in declarative},
            texts={ex.id: ex.text for ex in declarative}, model_path=str(model_path))
    except Exception as exc:  # a failed cell is recorded, the grid continues
        log.exception("cell %s failed", task["key"])
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    record["seconds"] = time.perf_counter() - t0
    path = out / "cells" / f"{task['key']}.json"
    path.write_text(json.dumps(record, indent=1))
    return record


# ---------------------------------------------------------------------------
# grid


@dataclass
class GridResult:
    records: list
    seeds: list
    rows: list = field(default_factory=lambda: list(MODEL_ROWS))
    length_cell: str = "gru"
    trained: list = field(default_factory=list)

    def _matching(self, row, cell, reg):
        return [r for r in self.records
                if (r["row"], r["cell"], r["reg"]) == (row, cell, reg) and r["status"] == "ok"]

    def seed_f1(self, row, cell, reg):
        return {r["seed"]: r["test_f1"] for r in self._matching(row, cell, reg)}

    def mean_f1(self, row, cell, reg):
        vals = list(self.seed_f1(row, cell, reg).values())
        return float(np.mean(vals)) if vals else None

    def bucket_f1(self, row, bucket, cell=None, reg="none"):
        vals = [r["buckets"][bucket] for r in self._matching(row, cell or self.length_cell, reg)
                if bucket in r["buckets"]]
        return float(np.mean(vals)) if vals else None

    def failures(self):
        return [r for r in self.records if r["status"] != "ok"]

    def declarative_table(self, cell=None, reg="none"):
        cell = cell or self.length_cell
        scores, texts = {}, {}
        for row in C2_ROWS:
            per_id = {}
            for r in self._matching(row, cell, reg):
                for ex_id, s in r["declarative"].items():
                    per_id.setdefault(ex_id, []).append(s)
                texts.update(r["texts"])
            scores[row] = {k: float(np.mean(v)) for k, v in per_id.items()}
        return DeclarativeTable.from_scores(scores, texts)

    def to_dict(self):
        return asdict(self)


def run_grid(spec, out_dir, jobs=1, resume=False):
    """Train every (candidate, seed) cell of ``spec``; returns a GridResult.

    Cells whose result file already exists are reused when ``resume`` is set.
    A failing cell is recorded and the rest of the grid still runs.
    """
    out = Path(out_dir)
    for sub in ("cells", "models", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if not Path(spec.data).exists():
        raise DatasetError(f"dataset not found: {spec.data}")
    data_hash = dataset_hash(spec.data)
    splits, vocab = prepare_data(spec.data, spec.split_seed)

    tasks, cached = [], []
    for seed in spec.seeds:
        for row, cell, reg in spec.candidates():
            mcfg, tcfg = cell_configs(spec, row, cell, reg, seed, len(vocab))
            key = cell_key(mcfg, tcfg, data_hash, seed, spec.split_seed)
            path = out / "cells" / f"{key}.json"
            if resume and path.exists():
                rec = json.loads(path.read_text())
                if rec.get("status") == "ok":
                    cached.append(rec)
                    continue
            tasks.append({"key": key, "row": row, "cell": cell, "reg": reg, "seed": seed,
                          "data": spec.data, "split_seed": spec.split_seed, "out": str(out),
                          "model_config": mcfg.to_dict(), "train_config": asdict(tcfg)})
    log.info("grid: %d cells to train, %d cached", len(tasks), len(cached))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fresh = list(pool.map(train_cell, tasks))
    else:
        fresh = []
        for i, task in enumerate(tasks, 1):
            rec = train_cell(task)
            log.info("[%d/%d] %s %s %s seed %d: %s", i, len(tasks), task["row"], task["cell"],
                     task["reg"], task["seed"], rec.get("test_f1", rec["status"]))
            fresh.append(rec)
    order = {(r, c, g, s): i for i, (r, c, g, s) in enumerate(
        (row, cell, reg, seed) for seed in spec.seeds for row, cell, reg in spec.candidates())}
    records = sorted(cached + fresh, key=lambda r: order[(r["row"], r["cell"], r["reg"], r["seed"])])
    result = GridResult(records, list(spec.seeds), list(spec.rows), spec.length_cell,
                        [t["key"] for t in tasks])
    (out / "grid_result.json").write_text(json.dumps(result.to_dict(), indent=1))
    return result


def load_grid_result(path):
    d = json.loads(Path(path).read_text())
    return GridResult(**d)


# ---------------------------------------------------------------------------
# declarative analysis


@dataclass
class DeclarativeTable:
    rows: list   # [(id, text, {family: score})]
    means: dict  # family -> mean score over the declarative rows
    families: list

    @classmethod
    def from_scores(cls, scores, texts, types=None):
        families = [f for f in scores if scores[f]]
        ids = sorted(set().union(*(scores[f].keys() for f in families))) if families else []
        rows = [(i, texts.get(i, ""), {f: scores[f].get(i) for f in families}) for i in ids]
        decl = [i for i in ids if types is None or types.get(i) == "declarative-question"]
        means = {}
        for f in families:
            vals = [scores[f][i] for i in decl if i in scores[f]]
            means[f] = float(np.mean(vals)) if vals else None
        return cls(rows, means, families)


def declarative_analysis(models, examples):
    """Score ``examples`` with each family's model; aggregate over declarative questions.

    ``models`` maps a family name (e.g. ``"audio-c2"``) to a trained model.
    """
    types = {ex.id: ex.meta.get("type") for ex in examples}
    if "declarative-question" not in types.values():
        raise ContractError("declarative analysis needs examples tagged declarative-question")
    scores = {name: score_examples(model, examples) for name, model in models.items()}
    return DeclarativeTable.from_scores(scores, {ex.id: ex.text for ex in examples}, types)


# ---------------------------------------------------------------------------
# tables


def _fmt_f1(v):
    return MISSING if v is None else f"{100 * v:.1f}"


def _fmt_score(v):
    return MISSING if v is None else f"{v:.2f}"


def table_cells(result, which):
    """(header, rows) of strings for ``which`` in {main, length, declarative}."""
    if which == "main":
        header = [""] + [_COL_LABEL[c] for c in COLUMNS]
        body = [[_ROW_LABEL[row]] + [_fmt_f1(result.mean_f1(row, c, r)) for c, r in COLUMNS]
                for row in MODEL_ROWS]
    elif which == "length":
        header = [""] + [_ROW_LABEL[r] for r in C2_ROWS]
        body = [[f"{b.capitalize()} Sequences"] + [_fmt_f1(result.bucket_f1(row, b)) for row in C2_ROWS]
                for b in BUCKETS]
    elif which == "declarative":
        table = result if isinstance(result, DeclarativeTable) else result.declarative_table()
        header = ["Test Examples"] + [_ROW_LABEL[f] for f in table.families]
        body = [[text] + [_fmt_score(s[f]) for f in table.families] for _, text, s in table.rows]
        body.append(["mean"] + [_fmt_score(table.means[f]) for f in table.families])
    else:
        raise ValueError(f"unknown table {which!r}")
    return header, body


def emit_table(result, which="main", fmt="text"):
    header, body = table_cells(result, which)
    missing = any(MISSING in row for row in body)
    note = f"{MISSING}: cell missing or failed" if missing else None
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        if note:
            buf.write(f"# {note}\n")
        return buf.getvalue()
    if fmt == "latex":
        cols = "| c || " + " | ".join("c" for _ in header[1:]) + " |"
        lines = [f"\\begin{{tabular}}{{{cols}}}", "\\hline",
                 " & ".join(_tex(h) for h in header) + " \\\\", "\\hline", "\\hline"]
        for row in body:
            lines += [" & ".join(_tex(c) for c in row) + " \\\\", "\\hline"]
        lines.append("\\end{tabular}")
        if note:
            lines.append(f"% {note}")
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    if note:
        lines.append(note)
    return "\n".join(lines) + "\n"


def _tex(s):
    return s.replace("—", "--").replace("_", "\\_").replace("%", "\\%").replace("&", "\\&")


def write_tables(result, out_dir):
    out = Path(out_dir)
    for which in ("main", "length", "declarative"):
        for fmt, ext in (("text", "txt"), ("csv", "csv"), ("latex", "tex")):
            try:
                (out / f"table_{which}.{ext}").write_text(emit_table(result, which, fmt))
            except ContractError:
                pass
