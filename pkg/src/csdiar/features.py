"""Waveform ingestion and log-mel feature extraction.

Features are 23 log-mel energies over 25 ms Hann windows with a 10 ms hop at
16 kHz. Binary caches for features (``MELF``) and pretrained-encoder
embeddings (``EMBD``) share a tiny header layout: magic, u32 rows, u32 cols,
then row-major little-endian float32 values.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import MalformedFile, ShapeMismatch, TooShort, WrongChannelCount, WrongSampleRate

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
HOP = 160  # 10 ms


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise WrongSampleRate(f"sample_rate={self.sample_rate}, expected {SAMPLE_RATE}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise MalformedFile(f"samples must be a non-empty 1-d sequence, got shape {self.samples.shape}")
        if np.max(np.abs(self.samples)) > 1.0:
            raise MalformedFile("samples exceed the [-1, 1] range")

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 512
    n_mels: int = 23
    fmin: float = 0.0
    fmax: float = 8000.0
    floor_eps: float = 1e-10
    window: str = "hann"
    frame_len: int = FRAME_LEN
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    mean_norm: bool = False

    def __post_init__(self):
        if self.fmax > self.sample_rate / 2:
            raise ValueError(f"fmax={self.fmax} exceeds Nyquist {self.sample_rate / 2}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.n_fft < self.frame_len:
            raise ValueError("n_fft must be at least frame_len")


@dataclass
class MelFeatures:
    values: np.ndarray
    frame_len_samples: int = FRAME_LEN
    hop_samples: int = HOP

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


def load_wav(path: str | Path, utt_id: str | None = None) -> Waveform:
    """Read a mono 16 kHz PCM16 WAV file. No resampling is ever done."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise MalformedFile(f"{path}: not a RIFF/WAVE PCM file ({exc})") from exc
    if channels != 1:
        raise WrongChannelCount(f"{path}: {channels} channels, expected mono")
    if rate != SAMPLE_RATE:
        raise WrongSampleRate(f"{path}: {rate} Hz, expected {SAMPLE_RATE} Hz")
    if width != 2:
        raise MalformedFile(f"{path}: sample width {8 * width} bits, expected 16")
    if len(raw) == 0:
        raise TooShort(f"{path}: no samples")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE, utt_id or path.stem)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """HTK-scale triangular filters, shape (n_mels, n_fft // 2 + 1), unit peak."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    bins = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, cfg: MelConfig = MelConfig()) -> int:
    if n_samples < cfg.frame_len:
        return 0
    return 1 + (n_samples - cfg.frame_len) // cfg.hop


def mel_spectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> MelFeatures:
    x = w.samples
    if x.size < cfg.frame_len:
        raise TooShort(f"{x.size} samples, need at least {cfg.frame_len} for one frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[:: cfg.hop]
    window = get_window(cfg.window, cfg.frame_len, fftbins=True)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel, cfg.floor_eps))
    if cfg.mean_norm:
        values = values - values.mean(axis=0, keepdims=True)
    return MelFeatures(values, cfg.frame_len, cfg.hop)


# binary matrix caches

def _write_matrix(path: str | Path, magic: bytes, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d matrix, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", *values.shape))
        fh.write(values.tobytes())


def _read_matrix(path: str | Path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise MalformedFile(f"{path}: missing {magic.decode()} header")
    rows, cols = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * rows * cols:
        raise MalformedFile(f"{path}: expected {rows}x{cols} floats, file has {len(data) - 12} payload bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).copy()


def write_features(path: str | Path, feats: MelFeatures) -> None:
    _write_matrix(path, b"MELF", feats.values)


def read_features(path: str | Path) -> MelFeatures:
    return MelFeatures(_read_matrix(path, b"MELF"))


def write_embeddings(path: str | Path, values: np.ndarray) -> None:
    _write_matrix(path, b"EMBD", values)


def read_embeddings(path: str | Path) -> np.ndarray:
    return _read_matrix(path, b"EMBD")
