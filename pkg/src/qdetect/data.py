"""Dataset records, splitting, batching and the synthetic multimodal corpus."""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetError, SchemaError
from .features import AudioSignal, MfccConfig, audio_features, clean_and_tokenize, read_wav, write_wav
from .layers import PAD_ID

RECORDS_FILE = "records.jsonl"
QUESTION_TYPES = ("yes-no", "wh", "declarative-question")
TYPES = QUESTION_TYPES + ("statement",)
BUCKETS = ("short", "intermediate", "long")


@dataclass
class Example:
    id: str
    text: str
    label: int
    wav: str = None
    features: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def tokens(self):
        return clean_and_tokenize(self.text)

    def to_record(self):
        rec = {"id": self.id, "text": self.text, "label": int(self.label)}
        if self.wav is not None:
            rec["wav"] = self.wav
        else:
            rec["features"] = np.asarray(self.features).tolist()
        if self.meta:
            rec["meta"] = self.meta
        return rec


def _parse_record(obj, lineno, require_label=True):
    if not isinstance(obj, dict):
        raise SchemaError("record is not an object", lineno)
    for key, typ in (("id", str), ("text", str)):
        if key not in obj:
            raise SchemaError(f"missing field {key!r}", lineno)
        if not isinstance(obj[key], typ):
            raise SchemaError(f"field {key!r} must be a string", lineno)
    if "label" not in obj:
        if require_label:
            raise SchemaError("missing field 'label'", lineno)
        obj = dict(obj, label=0)
    if obj["label"] not in (0, 1) or isinstance(obj["label"], bool):
        raise SchemaError(f"label must be 0 or 1, got {obj['label']!r}", lineno)
    has_wav, has_feat = "wav" in obj, "features" in obj
    if has_wav == has_feat:
        raise SchemaError("exactly one of 'wav' or 'features' is required", lineno)
    feats = None
    if has_feat:
        feats = np.asarray(obj["features"], dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise SchemaError(f"features must be a non-empty [T x D] array", lineno)
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise SchemaError("meta must be an object", lineno)
    return Example(obj["id"], obj["text"], int(obj["label"]), obj.get("wav"), feats, meta)


def _records_path(path):
    path = Path(path)
    return path / RECORDS_FILE if path.is_dir() else path


def load_dataset(path, require_label=True):
    """Parse a line-delimited record file (or a directory holding ``records.jsonl``).

    With ``require_label=False`` unlabeled records are accepted (label 0),
    which is what prediction on new data needs.
    """
    path = _records_path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None
            ex = _parse_record(obj, lineno, require_label)
            if ex.wav is not None:
                ex.meta.setdefault("_root", str(path.parent))
            examples.append(ex)
    return examples


def write_dataset(examples, path):
    path = _records_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = ex.to_record()
            if "meta" in rec:
                rec["meta"] = {k: v for k, v in rec["meta"].items() if not k.startswith("_")}
                if not rec["meta"]:
                    del rec["meta"]
            fh.write(json.dumps(rec) + "\n")
    return path


def dataset_hash(path):
    """Content hash of the record file plus every referenced WAV."""
    path = _records_path(path)
    h = hashlib.sha256(path.read_bytes())
    for ex in load_dataset(path):
        if ex.wav is not None:
            h.update((path.parent / ex.wav).read_bytes())
    return h.hexdigest()


def example_features(ex, config=MfccConfig()):
    """Chunked MFCC features for ``ex``, computed from its WAV once and cached."""
    if ex.features is None:
        if "signal" in ex.meta:
            ex.features = audio_features(ex.meta["signal"], config)
        elif ex.wav is not None:
            root = Path(ex.meta.get("_root", "."))
            ex.features = audio_features(read_wav(root / ex.wav), config)
        else:
            raise DatasetError(f"example {ex.id} has no audio")
    return ex.features


def filter_by_length(examples, min_words=3, max_words=25):
    return [ex for ex in examples if min_words <= len(ex.tokens) <= max_words]


def length_bucket(example_or_count):
    n = example_or_count if isinstance(example_or_count, int) else len(example_or_count.tokens)
    if n < 5:
        return "short"
    if n <= 20:
        return "intermediate"
    return "long"


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list
    fractions: tuple = (0.8, 0.1, 0.1)


def split_dataset(examples, fractions=(0.8, 0.1, 0.1), seed=0):
    """Stratified by label: each class is shuffled and cut at the same fractions."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"split fractions must be three non-negatives summing to 1: {fractions}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for label in (0, 1):
        group = [ex for ex in examples if ex.label == label]
        order = rng.permutation(len(group))
        n = len(group)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        for k, idx in enumerate((order[:a], order[a:b], order[b:])):
            parts[k].extend(group[i] for i in idx)
    split = []
    for part in parts:
        part = [part[i] for i in rng.permutation(len(part))]
        split.append(part)
    if any(not p for p in split):
        raise ConfigurationError(
            f"split of {len(examples)} examples with fractions {fractions} leaves a part empty")
    return DatasetSplit(*split, fractions=fractions)


@dataclass
class SequenceBatch:
    labels: np.ndarray
    ids: list
    token_ids: np.ndarray = None
    text_lengths: np.ndarray = None
    audio: np.ndarray = None
    audio_lengths: np.ndarray = None

    def __len__(self):
        return len(self.labels)

    @staticmethod
    def _mask(lengths, T):
        return np.arange(T)[None, :] < np.asarray(lengths)[:, None]

    @property
    def text_mask(self):
        return self._mask(self.text_lengths, self.token_ids.shape[1])

    @property
    def audio_mask(self):
        return self._mask(self.audio_lengths, self.audio.shape[1])


def collate(examples, vocab=None, audio=True, mfcc_config=MfccConfig()):
    """Pad a list of examples into one SequenceBatch (PAD_ID / zero frames)."""
    n = len(examples)
    batch = SequenceBatch(labels=np.array([ex.label for ex in examples], dtype=np.float64),
                          ids=[ex.id for ex in examples])
    if vocab is not None:
        seqs = [vocab.encode(ex.tokens) for ex in examples]
        lengths = np.array([len(s) for s in seqs])
        ids = np.full((n, max(1, lengths.max())), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        batch.token_ids, batch.text_lengths = ids, lengths
    if audio:
        feats = [example_features(ex, mfcc_config) for ex in examples]
        lengths = np.array([f.shape[0] for f in feats])
        arr = np.zeros((n, lengths.max(), feats[0].shape[1]))
        for i, f in enumerate(feats):
            arr[i, : len(f)] = f
        batch.audio, batch.audio_lengths = arr, lengths
    return batch


def make_batches(examples, batch_size, vocab=None, shuffle_seed=None, sort_by_length=False,
                 audio=True, mfcc_config=MfccConfig()):
    """Split ``examples`` into padded batches.

    ``shuffle_seed`` shuffles first; ``sort_by_length`` then groups examples
    of similar text length so that batches carry little padding (batch order
    is still shuffled when a seed is given).
    """
    order = np.arange(len(examples))
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    if rng is not None:
        order = rng.permutation(len(examples))
    if sort_by_length:
        order = sorted(order, key=lambda i: len(examples[i].tokens))
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if sort_by_length and rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([examples[i] for i in g], vocab, audio, mfcc_config) for g in groups]


# ---------------------------------------------------------------------------
# synthetic corpus

YES_NO = [
    "did you attend the meeting", "do you like the new office", "can you call me later",
    "is she coming home tonight", "are they still at the office", "have you seen the report",
    "will he join the team", "could we meet tomorrow morning", "does the train stop here",
    "was it raining in the city", "should i bring the documents", "would you like some coffee",
    "has the package arrived", "were you at the party", "may i ask a question",
]
WH = [
    "where have you been", "what did you eat for lunch", "why are you late again",
    "who called you this morning", "how was the trip to the coast", "when does the train leave",
    "which one do you want", "what time is the meeting", "where did they put the keys",
    "how many people came", "why did she leave early", "who is going to drive",
    "what are you doing tonight", "how do you know him", "whose bag is this",
]
DECLARATIVE = [
    "you are at the meeting", "she likes the new house", "they moved to the city",
    "we are going home", "he finished the report", "the train leaves at noon",
    "your sister called again", "any other questions", "and your cats", "oh the bird",
    "you already paid the bill", "the office is closed today", "he knows the answer",
    "they will come with us", "it was a good movie", "you saw him yesterday",
    "the kids are asleep", "she is your manager", "we have enough time", "the food is ready",
]
FILLERS = [
    "with my friend", "right now", "in the morning", "after work", "at the station",
    "this weekend", "for a while", "near the park", "with the kids", "in the afternoon",
    "before dinner", "on the phone", "at home", "by the river", "last night", "again",
    "you know", "for the project", "with everyone", "in the kitchen",
]
_TEMPLATES = {"yes-no": YES_NO, "wh": WH, "declarative": DECLARATIVE}


@dataclass
class SynthConfig:
    n_examples: int = 2000
    proportions: dict = field(default_factory=lambda: {
        "yes-no": 0.2, "wh": 0.2, "declarative-question": 0.1, "statement": 0.5})
    sample_rate: int = 16000
    seed: int = 0
    min_words: int = 3
    max_words: int = 25
    seconds_per_word: float = 0.2
    min_seconds: float = 0.5
    f0_range: tuple = (110.0, 220.0)
    rise: tuple = (0.3, 0.5)    # relative f0 rise over the final quarter (questions)
    fall: tuple = (0.15, 0.3)   # relative f0 fall over the final quarter (statements)
    noise: float = 0.02

    def __post_init__(self):
        unknown = set(self.proportions) - set(TYPES)
        if unknown:
            raise ConfigurationError(f"unknown example types {sorted(unknown)}")
        total = sum(self.proportions.values())
        if abs(total - 1.0) > 1e-9 or any(v < 0 for v in self.proportions.values()):
            raise ConfigurationError(f"type proportions must be non-negative and sum to 1, got {total}")
        if self.rise[0] < 0.2 or self.fall[0] < 0.1:
            raise ConfigurationError("question rise must be >= 20% and statement fall >= 10%")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigurationError("need 1 <= min_words <= max_words")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("f0_range", "rise", "fall"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def template_family(qtype):
    return "declarative" if qtype in ("declarative-question", "statement") else qtype


def _stream(*keys):
    h = hashlib.sha256(repr(keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def synth_text(family, index, seed, min_words=3, max_words=25):
    """Text for example ``index``; depends only on (family, index, seed)."""
    rng = _stream("text", seed, family, index)
    templates = _TEMPLATES[family]
    t = int(rng.integers(len(templates)))
    words = templates[t].split()
    target = int(rng.integers(min_words, max_words + 1))
    while len(words) < target:
        words += FILLERS[int(rng.integers(len(FILLERS)))].split()
    return " ".join(words[:target]), t


def pitch_contour(n, rising, rng, config):
    """f0 in Hz per sample: gentle drift, then the final quarter rises or falls."""
    f0 = rng.uniform(*config.f0_range)
    drift = rng.uniform(-0.05, 0.05)
    t = np.linspace(0.0, 1.0, n, endpoint=False)
    contour = f0 * (1.0 + drift * t)
    end = contour[int(0.75 * n)] if n else f0
    amount = rng.uniform(*(config.rise if rising else config.fall))
    tail = np.clip((t - 0.75) / 0.25, 0.0, 1.0)
    target = end * (1.0 + amount) if rising else end * (1.0 - amount)
    return np.where(t < 0.75, contour, end + (target - end) * tail)


def synth_audio(n_words, rising, rng, config):
    """Voiced-style carrier: f0 sine plus two harmonics, word-rate envelope, white noise."""
    sr = config.sample_rate
    seconds = max(config.min_seconds, n_words * config.seconds_per_word * rng.uniform(0.9, 1.1))
    n = int(round(seconds * sr))
    f0 = pitch_contour(n, rising, rng, config)
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    wave_ = np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)
    t = np.arange(n) / sr
    envelope = 0.6 + 0.4 * np.abs(np.sin(np.pi * t * n_words / seconds))
    x = 0.3 * envelope * wave_ + config.noise * rng.standard_normal(n)
    return AudioSignal(np.clip(x, -1.0, 1.0), sr), f0


def generate_synthetic(config=None):
    """Examples whose declarative questions and statements share text templates.

    Text depends only on (template family, index, seed), so switching an
    example between declarative-question and statement changes only its
    pitch contour. Audio is returned in memory (``Example.meta['signal']``);
    use :func:`write_corpus` to store WAVs and the record file.
    """
    config = config or SynthConfig()
    type_rng = _stream("types", config.seed)
    names = list(config.proportions)
    probs = np.array([config.proportions[k] for k in names], dtype=np.float64)
    counts = np.floor(probs * config.n_examples).astype(int)
    # largest remainders get the leftover examples, so counts sum exactly
    rest = config.n_examples - counts.sum()
    counts[np.argsort(-(probs * config.n_examples - counts), kind="stable")[:rest]] += 1
    kinds = np.repeat(np.arange(len(names)), counts)
    kinds = kinds[type_rng.permutation(len(kinds))]
    short = {"yes-no": "yn", "wh": "wh", "declarative-question": "dq", "statement": "st"}
    examples = []
    for i, k in enumerate(kinds):
        qtype = names[k]
        family = template_family(qtype)
        text, template = synth_text(family, i, config.seed, config.min_words, config.max_words)
        rising = qtype != "statement"
        audio_rng = _stream("audio", config.seed, qtype, i)
        signal, _ = synth_audio(len(text.split()), rising, audio_rng, config)
        examples.append(Example(
            id=f"{short[qtype]}-{config.seed}-{i:05d}", text=text, label=int(rising),
            meta={"type": qtype, "template": f"{family}:{template}", "signal": signal}))
    return examples


def write_corpus(examples, out_dir, wav_dir="wav"):
    """Write WAVs plus ``records.jsonl`` under ``out_dir``; returns the record path."""
    out = Path(out_dir)
    (out / wav_dir).mkdir(parents=True, exist_ok=True)
    stored = []
    for ex in examples:
        meta = {k: v for k, v in ex.meta.items() if k != "signal"}
        if "signal" in ex.meta:
            rel = f"{wav_dir}/{ex.id}.wav"
            write_wav(out / rel, ex.meta["signal"])
            stored.append(Example(ex.id, ex.text, ex.label, wav=rel, meta=meta))
        else:
            stored.append(Example(ex.id, ex.text, ex.label, ex.wav, ex.features, meta))
    return write_dataset(stored, out)


def materialize_features(examples, config=MfccConfig()):
    for ex in examples:
        example_features(ex, config)
    return examples
