import wave

import numpy as np
import pytest

from qdetect.errors import ConfigurationError, InputError, WavFormatError
from qdetect.features import (AudioSignal, MfccConfig, Vocab, audio_features, build_vocab,
                              chunk_frames, clean_and_tokenize, dct_matrix, mel_energies,
                              mel_filter_centers, mel_filterbank, mfcc, read_wav, write_wav)


# --- text ----------------------------------------------------------------

def test_tokenize_question():
    assert clean_and_tokenize("Did you attend the meeting?") == ["did", "you", "attend", "the",
                                                                 "meeting"]


def test_tokenize_short_question():
    assert clean_and_tokenize("any other questions?") == ["any", "other", "questions"]


def test_tokenize_empty():
    assert clean_and_tokenize("") == []


def test_tokenize_dashes_and_quotes():
    assert clean_and_tokenize("Well—“don't” go") == ["well", "dont", "go"]


def test_vocab_counting_and_ties():
    vocab = build_vocab(["a b", "a"])
    assert vocab.stoi["a"] == 2 and vocab.stoi["b"] == 3
    assert vocab.stoi["<pad>"] == 0 and vocab.stoi["<unk>"] == 1


def test_vocab_unknown_token():
    assert build_vocab(["a b", "a"]).encode_text("c") == [1]


def test_vocab_deterministic():
    texts = ["the cat", "a dog", "the dog barks", "cat"]
    assert build_vocab(texts).stoi == build_vocab(texts).stoi


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["x y z", "y"])
    vocab.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt") == vocab


def test_vocab_file_without_reserved_ids(tmp_path):
    (tmp_path / "v.txt").write_text("a\t0\nb\t1\n")
    with pytest.raises(ConfigurationError):
        Vocab.load(tmp_path / "v.txt")


# --- WAV -----------------------------------------------------------------

def _write_raw(path, samples, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def test_one_second_file(tmp_path):
    _write_raw(tmp_path / "a.wav", np.zeros(16000))
    sig = read_wav(tmp_path / "a.wav")
    assert sig.samples.size == 16000 and sig.sample_rate == 16000


def test_stereo_rejected(tmp_path):
    _write_raw(tmp_path / "s.wav", np.zeros(200), channels=2)
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "s.wav")


def test_int16_min_scales_to_minus_one(tmp_path):
    _write_raw(tmp_path / "m.wav", [-32768, 0, 16384])
    assert read_wav(tmp_path / "m.wav").samples.tolist() == [-1.0, 0.0, 0.5]


def test_truncated_file(tmp_path):
    _write_raw(tmp_path / "t.wav", np.zeros(1000))
    data = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(data[:500])
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "t.wav")


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 800)
    write_wav(tmp_path / "r.wav", AudioSignal(x, 16000))
    assert np.max(np.abs(read_wav(tmp_path / "r.wav").samples - x)) <= 0.5 / 32768


# --- MFCC ----------------------------------------------------------------

def tone(freq, seconds=1.0, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return AudioSignal(amp * np.sin(2 * np.pi * freq * t), sr)


def test_frame_count_one_second():
    cfg = MfccConfig()
    assert cfg.frame_length(16000) == 640 and cfg.hop_length(16000) == 400
    assert mfcc(tone(300), cfg).shape == (39, 13)


def test_440_tone_peaks_in_nearest_filter():
    energies = mel_energies(tone(440))
    centers = mel_filter_centers(26, 16000)[1:-1]
    expected = int(np.argmin(np.abs(centers - 440)))
    assert np.all(energies.argmax(axis=1) == expected)


def test_dct_orthonormal():
    D = dct_matrix(26)
    assert np.max(np.abs(D @ D.T - np.eye(26))) < 1e-10


def test_filterbank_unit_peaks():
    fb = mel_filterbank(26, 1024, 16000)
    assert fb.shape == (26, 513)
    assert np.all(fb.max(axis=1) <= 1.0) and np.all(fb.max(axis=1) > 0.5)


def test_amplitude_invariance_of_higher_coefficients():
    rng = np.random.default_rng(1)
    x = 0.3 * np.sin(2 * np.pi * 200 * np.arange(16000) / 16000) + 0.05 * rng.standard_normal(16000)
    a = mfcc(AudioSignal(x, 16000))
    b = mfcc(AudioSignal(0.25 * x, 16000))
    assert np.max(np.abs(a[:, 1:] - b[:, 1:])) < 1e-6
    assert not np.allclose(a[:, 0], b[:, 0])


def test_chunks_of_thirty_nine_frames():
    frames = np.arange(39 * 13, dtype=float).reshape(39, 13)
    chunks = chunk_frames(frames, 4)
    assert chunks.shape == (10, 52)
    tail = chunks[-1].reshape(4, 13)
    assert np.array_equal(tail[0], frames[36]) and np.array_equal(tail[2], frames[38])
    assert np.array_equal(tail[3], frames[38])


def test_four_frames_one_chunk():
    frames = np.arange(52.0).reshape(4, 13)
    assert np.array_equal(chunk_frames(frames, 4), frames.reshape(1, 52))


def test_one_frame_repeated():
    frame = np.arange(13.0).reshape(1, 13)
    assert np.array_equal(chunk_frames(frame, 4), np.tile(frame, (1, 4)))


def test_audio_features_shape_and_rate_check():
    assert audio_features(tone(250)).shape == (10, 52)
    with pytest.raises(InputError):
        audio_features(tone(250, sr=8000))


def test_too_short_signal():
    with pytest.raises(InputError):
        mfcc(AudioSignal(np.zeros(100), 16000))
