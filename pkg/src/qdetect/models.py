"""The seven question-detection model families and their (de)serialization."""

import io
import json
import zipfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .context import AttentionScorer, context_attention, context_last
from .errors import ConfigurationError, InputError, ModelLoadError
from .features import Vocab
from .layers import BatchNormLayer, DenseLayer, Dropout, EmbeddingTable, uniform_init
from .recurrent import BiRnn

FORMAT_NAME = "qdetect-model"
FORMAT_VERSION = 1

# row name -> (input_mode, fusion, context_fn), in table order
MODEL_ROWS = {
    "text-c1": ("text", "none", "c1"),
    "text-c2": ("text", "none", "c2"),
    "audio-c1": ("audio", "none", "c1"),
    "audio-c2": ("audio", "none", "c2"),
    "combination-c1": ("both", "combinational", "c1"),
    "combination-c2": ("both", "combinational", "c2"),
    "condition-c2": ("both", "conditional", "c2"),
}
CELLS = ("gru", "lstm")
REGULARIZERS = ("none", "dropout", "batchnorm")


@dataclass(frozen=True)
class ModelConfig:
    input_mode: str = "text"
    fusion: str = "none"
    context_fn: str = "c1"
    cell: str = "gru"
    regularizer: str = "none"
    hidden: int = 200
    embed_dim: int = 200
    attention_dim: int = 200
    dropout_rate: float = 0.2
    seed: int = 0
    vocab_size: int = 2
    audio_dim: int = 52
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    orthogonal: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        choices = {"input_mode": ("text", "audio", "both"),
                   "fusion": ("none", "combinational", "conditional"),
                   "context_fn": ("c1", "c2"), "cell": CELLS, "regularizer": REGULARIZERS}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigurationError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.fusion == "conditional" and self.context_fn != "c2":
            raise ConfigurationError("conditional fusion requires context_fn=c2 (attention)")
        if (self.fusion == "none") != (self.input_mode != "both"):
            raise ConfigurationError(
                "fusion must be 'none' exactly when a single modality is used "
                f"(input_mode={self.input_mode!r}, fusion={self.fusion!r})")
        if min(self.hidden, self.embed_dim, self.attention_dim, self.audio_dim) < 1:
            raise ConfigurationError("layer sizes must be positive")
        if self.uses_text and self.vocab_size < 2:
            raise ConfigurationError("vocab_size must include the PAD and UNK ids")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")

    @property
    def uses_text(self):
        return self.input_mode in ("text", "both")

    @property
    def uses_audio(self):
        return self.input_mode in ("audio", "both")

    @property
    def row(self):
        for name, spec in MODEL_ROWS.items():
            if spec == (self.input_mode, self.fusion, self.context_fn):
                return name
        raise ConfigurationError("configuration matches no model row")

    @property
    def context_dim(self):
        return (4 if self.input_mode == "both" else 2) * self.hidden

    @classmethod
    def for_row(cls, row, **kwargs):
        try:
            mode, fusion, ctx = MODEL_ROWS[row]
        except KeyError:
            raise ConfigurationError(f"unknown model row {row!r}; choose from {list(MODEL_ROWS)}") from None
        return cls(input_mode=mode, fusion=fusion, context_fn=ctx, **kwargs)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def all_configs(**kwargs):
    """The 42 (row, cell, regularizer) candidates."""
    return [ModelConfig.for_row(row, cell=cell, regularizer=reg, **kwargs)
            for row in MODEL_ROWS for cell in CELLS for reg in REGULARIZERS]


class _Branch:
    """pre-RNN layer -> BiRnn -> dense h, with optional dropout / batch norm."""

    def __init__(self, kind, config, rng, cond_dim=None):
        H, reg = config.hidden, config.regularizer
        self.kind = kind
        if kind == "text":
            self.embed = EmbeddingTable(config.vocab_size, config.embed_dim, rng, name="text_embed")
            rnn_in = config.embed_dim
        else:
            self.f = DenseLayer(config.audio_dim, H, "relu", rng, name="audio_f")
            rnn_in = H
        self.rnn = BiRnn(rnn_in, H, config.cell, rng, name=f"{kind}_rnn",
                         orthogonal=config.orthogonal)
        self.h = DenseLayer(2 * H, 2 * H, "relu", rng, name=f"{kind}_h")
        self.scorer = (AttentionScorer(2 * H, config.attention_dim, cond_dim, rng, name=f"{kind}_att")
                       if config.context_fn == "c2" else None)
        self.bn_f = self.bn_h = None
        if reg == "batchnorm":
            if kind == "audio":
                self.bn_f = BatchNormLayer(H, config.bn_momentum, config.bn_eps, name="audio_f_bn")
            self.bn_h = BatchNormLayer(2 * H, config.bn_momentum, config.bn_eps, name=f"{kind}_h_bn")

    def modules(self):
        mods = [self.embed if self.kind == "text" else self.f, self.bn_f, self.rnn, self.h,
                self.bn_h, self.scorer]
        return [m for m in mods if m is not None]

    def annotations(self, x, mask, mode, dropout, rng):
        if self.kind == "text":
            a = self.embed(x)
        else:
            a = self.f(x)
            if self.bn_f is not None:
                a = self.bn_f(a, mode, mask)
        if dropout is not None:
            a = dropout(a, mode, rng)
        z = self.h(self.rnn(a, mask))
        if self.bn_h is not None:
            z = self.bn_h(z, mode, mask)
        return z

    def context(self, z, mask, condition=None):
        if self.scorer is None:
            return context_last(z, mask)
        return context_attention(z, mask, self.scorer, condition)


class QuestionDetector:
    """Text / audio / fused RNN classifier producing one question score per example."""

    def __init__(self, config):
        self.config = config
        self.vocab = None
        rng = np.random.default_rng(config.seed)
        H = config.hidden
        self.text = _Branch("text", config, rng, 2 * H if config.fusion == "conditional" else None) \
            if config.uses_text else None
        self.audio = _Branch("audio", config, rng) if config.uses_audio else None
        D = config.context_dim
        self.clf_bn = (BatchNormLayer(D, config.bn_momentum, config.bn_eps, name="clf_bn")
                       if config.regularizer == "batchnorm" else None)
        self.w = Parameter(uniform_init(rng, (D,)), "clf.w")
        self.b = Parameter(np.zeros(1), "clf.b")
        self.dropout = (Dropout(config.dropout_rate, seed=config.seed + 7919)
                        if config.regularizer == "dropout" else None)
        self._params = {}
        for mod in self._modules():
            for p in mod.parameters():
                if p.name in self._params:
                    raise ConfigurationError(f"duplicate parameter name {p.name}")
                self._params[p.name] = p
        for p in (self.w, self.b):
            self._params[p.name] = p

    def _modules(self):
        mods = []
        for branch in (self.text, self.audio):
            if branch is not None:
                mods.extend(branch.modules())
        if self.clf_bn is not None:
            mods.append(self.clf_bn)
        return mods

    def parameters(self):
        """name -> Parameter, in construction order."""
        return dict(self._params)

    def batchnorm_layers(self):
        return [m for m in self._modules() if isinstance(m, BatchNormLayer)]

    def state(self):
        out = {}
        for bn in self.batchnorm_layers():
            out.update(bn.state())
        return out

    def load_state(self, state):
        for bn in self.batchnorm_layers():
            bn.running_mean = np.array(state[f"{bn.name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{bn.name}.running_var"], dtype=np.float64)

    def num_parameters(self):
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def contexts(self, batch, mode="infer", rng=None):
        """Return (classifier input node, {branch: ContextOutput})."""
        cfg = self.config
        outs = {}
        if cfg.uses_text and batch.token_ids is None:
            raise InputError("model needs text input but the batch has no token ids")
        if cfg.uses_audio and batch.audio is None:
            raise InputError("model needs audio input but the batch has no audio features")
        if self.audio is not None:
            z_a = self.audio.annotations(batch.audio, batch.audio_mask, mode, self.dropout, rng)
            outs["audio"] = self.audio.context(z_a, batch.audio_mask)
        if self.text is not None:
            z_t = self.text.annotations(batch.token_ids, batch.text_mask, mode, self.dropout, rng)
            cond = outs["audio"].context if cfg.fusion == "conditional" else None
            outs["text"] = self.text.context(z_t, batch.text_mask, cond)
        parts = [outs[k].context for k in ("text", "audio") if k in outs]
        c = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        return c, outs

    def logits(self, batch, mode="infer", rng=None):
        c, _ = self.contexts(batch, mode, rng)
        if self.clf_bn is not None:
            c = self.clf_bn(c, mode)
        if self.dropout is not None:
            c = self.dropout(c, mode, rng)
        D = self.config.context_dim
        out = ad.add(ad.matmul(c, ad.reshape(self.w, (D, 1))), self.b)
        return ad.reshape(out, (len(batch),))

    def forward(self, batch, mode="infer", rng=None):
        """Scores in (0, 1), shape [batch]. ``rng`` overrides the dropout generator."""
        return ad.sigmoid(self.logits(batch, mode, rng))

    __call__ = forward


def build_model(config, vocab=None):
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    config.validate()
    model = QuestionDetector(config)
    if vocab is not None:
        if len(vocab) != config.vocab_size:
            raise ConfigurationError(
                f"vocabulary has {len(vocab)} entries but config declares {config.vocab_size}")
        model.vocab = vocab
    return model


def predict(model, batch, threshold=0.5):
    """Binary labels, 1 iff score >= threshold."""
    scores = model.forward(batch, "infer").value
    return (scores >= threshold).astype(np.int64)


def save_model(model, path):
    meta = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "config": model.config.to_dict(),
            "vocab": None if model.vocab is None else model.vocab.itos[2:]}
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, p in model.parameters().items():
        arrays[f"param/{name}"] = p.value
    for name, v in model.state().items():
        arrays[f"state/{name}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
        with np.load(io.BytesIO(raw), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
    if meta.get("format") != FORMAT_NAME:
        raise ModelLoadError(f"{path} is not a {FORMAT_NAME} archive")
    if meta.get("version") != FORMAT_VERSION:
        raise ModelLoadError(
            f"{path}: format version {meta.get('version')} unsupported (expected {FORMAT_VERSION})")
    config = ModelConfig.from_dict(meta["config"])
    model = QuestionDetector(config)
    params = model.parameters()
    stored = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(stored) != set(params):
        raise ConfigurationError(
            f"{path}: stored parameters {sorted(set(stored) ^ set(params))} do not match the config")
    for name, p in params.items():
        if stored[name].shape != p.value.shape:
            raise ConfigurationError(
                f"{path}: parameter {name} has shape {stored[name].shape}, config implies "
                f"{p.value.shape} (e.g. vocab_size={config.vocab_size})")
        p.value = np.array(stored[name], dtype=np.float64)
    state = {k[len("state/"):]: v for k, v in arrays.items() if k.startswith("state/")}
    try:
        model.load_state(state)
    except KeyError as exc:
        raise ModelLoadError(f"{path}: missing batch-norm statistic {exc}") from None
    if meta.get("vocab") is not None:
        vocab = Vocab(meta["vocab"])
        if len(vocab) != config.vocab_size:
            raise ConfigurationError(
                f"{path}: stored vocabulary has {len(vocab)} entries, config declares {config.vocab_size}")
        model.vocab = vocab
    return model
