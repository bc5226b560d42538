"""Text tokenization / vocabulary and the MFCC audio front end."""

import re
import wave
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, WavFormatError
from .layers import PAD_ID, UNK_ID

PAD, UNK = "<pad>", "<unk>"

_DASHES = re.compile("[—–]")
_STRIP = re.compile("[.,?!;:\"'()‘’“”]")


def clean_and_tokenize(text):
    """Lowercase, drop punctuation, split on whitespace. "don't" -> "dont"."""
    text = _DASHES.sub(" ", text.lower())
    return _STRIP.sub("", text).split()


class Vocab:
    def __init__(self, tokens):
        """``tokens`` lists the non-reserved entries in id order (starting at id 2)."""
        self.itos = [PAD, UNK] + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def encode_text(self, text):
        return self.encode(clean_and_tokenize(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, t in enumerate(self.itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path):
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if not tok or not idx.isdigit():
                    raise ConfigurationError(f"{path}:{lineno}: expected 'token<TAB>id'")
                entries.append((int(idx), tok))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))) or len(entries) < 2:
            raise ConfigurationError(f"{path}: ids must be contiguous from 0")
        if entries[PAD_ID][1] != PAD or entries[UNK_ID][1] != UNK:
            raise ConfigurationError(f"{path}: ids 0 and 1 must be {PAD} and {UNK}")
        return cls([t for _, t in entries[2:]])


def build_vocab(texts, min_count=1):
    """Ids ordered by descending frequency, ties broken alphabetically."""
    counts = Counter()
    for text in texts:
        counts.update(clean_and_tokenize(text))
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


# ---------------------------------------------------------------------------
# audio


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path):
    """Read 16-bit PCM mono WAV, scaled to [-1, 1) by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: format tag / header: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels}, expected mono")
    if width != 2:
        raise WavFormatError(f"{path}: sample width={8 * width} bits, expected 16")
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: data chunk truncated ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples, rate)


def write_wav(path, signal):
    pcm = np.clip(np.round(np.asarray(signal.samples) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(signal.sample_rate))
        wf.writeframes(pcm.astype("<i2").tobytes())


@dataclass(frozen=True)
class MfccConfig:
    frame_ms: float = 40.0
    overlap_ms: float = 15.0
    n_mels: int = 26
    n_coeffs: int = 13
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    chunk: int = 4
    sample_rate: int = 16000

    def __post_init__(self):
        if self.hop_ms <= 0:
            raise ConfigurationError("overlap must be shorter than the frame")
        if self.n_coeffs > self.n_mels:
            raise ConfigurationError("n_coeffs cannot exceed n_mels")

    @property
    def hop_ms(self):
        return self.frame_ms - self.overlap_ms

    @property
    def feature_dim(self):
        return self.n_coeffs * self.chunk

    def frame_length(self, sr):
        return int(round(self.frame_ms * sr / 1000))

    def hop_length(self, sr):
        return int(round(self.hop_ms * sr / 1000))

    def fft_size(self, sr):
        return 1 << (self.frame_length(sr) - 1).bit_length()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(n_mels, sr):
    """Edge and center frequencies (Hz), n_mels + 2 points evenly spaced in mel."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))


def mel_filterbank(n_mels, n_fft, sr):
    """Triangular filters with unit peak, evaluated at the rfft bin frequencies."""
    pts = mel_filter_centers(n_mels, sr)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for j in range(n_mels):
        lo, mid, hi = pts[j], pts[j + 1], pts[j + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[j] = np.maximum(0.0, np.minimum(up, down))
    return fb


def dct_matrix(n):
    """Orthonormal DCT-II matrix D with (D @ x) the transform of x."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    D[0] /= np.sqrt(2.0)
    return D


def frame_signal(x, frame, hop):
    n_frames = (len(x) - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def mel_energies(signal, config=MfccConfig()):
    """Log mel filterbank energies [frames x n_mels] (before the DCT)."""
    sr = signal.sample_rate
    x = np.asarray(signal.samples, dtype=np.float64)
    frame, hop, nfft = config.frame_length(sr), config.hop_length(sr), config.fft_size(sr)
    if len(x) < frame:
        raise InputError(f"signal of {len(x)} samples is shorter than one frame ({frame})")
    x = np.append(x[0], x[1:] - config.pre_emphasis * x[:-1])
    frames = frame_signal(x, frame, hop) * np.hamming(frame)
    power = np.abs(np.fft.rfft(frames, nfft)) ** 2 / nfft
    energies = power @ mel_filterbank(config.n_mels, nfft, sr).T
    return np.log(np.maximum(energies, config.log_floor))


def mfcc(signal, config=MfccConfig()):
    """MFCC matrix [frames x n_coeffs]; frames = floor((N - frame) / hop) + 1."""
    logmel = mel_energies(signal, config)
    return logmel @ dct_matrix(config.n_mels)[: config.n_coeffs].T


def chunk_frames(frames, chunk=4):
    """Concatenate each run of ``chunk`` frames; the tail is padded by repeating the last frame."""
    frames = np.asarray(frames, dtype=np.float64)
    F, d = frames.shape
    n_chunks = -(-F // chunk)
    pad = n_chunks * chunk - F
    if pad:
        frames = np.vstack([frames, np.repeat(frames[-1:], pad, axis=0)])
    return frames.reshape(n_chunks, chunk * d)


def audio_features(signal, config=MfccConfig()):
    """MFCC followed by chunking: [chunks x chunk * n_coeffs]."""
    if signal.sample_rate != config.sample_rate:
        raise InputError(
            f"sample rate {signal.sample_rate} Hz does not match the configured "
            f"{config.sample_rate} Hz (resampling is not supported)")
    return chunk_frames(mfcc(signal, config), config.chunk)
