"""Synthetic code-switched corpus.

Each synthetic "language" is a stationary process: white noise through three
resonant peaks plus a noise floor. Utterances concatenate segments of
different languages with exact sample boundaries. Every utterance also gets a
random vocal-tract scale that shifts all its peaks together, and each segment
jitters every peak independently. The per-peak jitter is what makes the two
close-spectra languages genuinely confusable: they differ in one peak only, and
a common scale shift could be undone from the shared peaks.

A mock encoder-embedding generator stands in for pretrained contextual
representations at 20 ms per frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import SpanMismatch
from .features import SAMPLE_RATE, Waveform, write_embeddings, write_wav
from .labels import (
    LANGUAGES,
    BoundarySegment,
    Manifest,
    ManifestEntry,
    boundaries_to_samples,
    downsample_labels,
)

EMBED_HOP = 320


@dataclass(frozen=True)
class SynthLanguageSpec:
    lang_index: int
    formant_centers: tuple[float, float, float]
    bandwidths: tuple[float, float, float] = (80.0, 120.0, 160.0)
    noise_floor_db: float = -20.0

    def scaled(self, factor) -> SynthLanguageSpec:
        """Multiply the peaks by one factor or by one factor per peak."""
        factors = np.broadcast_to(np.asarray(factor, dtype=float), (len(self.formant_centers),))
        return replace(self, formant_centers=tuple(float(f * k) for f, k in zip(self.formant_centers, factors)))


# index order follows the five-class taxonomy: eng, zul, xho, tsn, sot.
# zul/xho differ by 250 Hz in the second peak only.
DEFAULT_LANGUAGES = (
    SynthLanguageSpec(0, (500.0, 1500.0, 2500.0)),
    SynthLanguageSpec(1, (700.0, 1150.0, 2900.0)),
    SynthLanguageSpec(2, (700.0, 1400.0, 2900.0)),
    SynthLanguageSpec(3, (300.0, 2100.0, 3400.0)),
    SynthLanguageSpec(4, (950.0, 1800.0, 3800.0)),
)
CLOSE_PAIR = (1, 2)


def check_language_specs(specs) -> None:
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            gap = max(abs(x - y) for x, y in zip(a.formant_centers, b.formant_centers))
            if gap < 200.0:
                raise ValueError(f"languages {a.lang_index} and {b.lang_index} are only {gap:.0f} Hz apart")


@dataclass(frozen=True)
class SynthCorpusConfig:
    n_train: int = 400
    n_dev: int = 50
    n_test: int = 50
    min_duration: float = 2.0
    max_duration: float = 8.0
    max_switches: int = 4
    min_segment: float = 0.4
    seed: int = 42
    snr_db: float = 20.0
    vtl_jitter: float = 0.05  # per-utterance common scale, relative std
    formant_jitter: float = 0.06  # per-segment, per-peak scale, relative std
    embed_dim: int = 768  # 0 disables mock embeddings
    embed_distance: float = 4.0
    embed_noise: float = 1.0  # expected norm of the per-frame noise vector
    languages: tuple = field(default=DEFAULT_LANGUAGES, compare=False)

    def __post_init__(self):
        if self.min_segment < 0.4:
            raise ValueError("min_segment below 0.4 s lets a 200 ms window straddle two short segments")
        if not 0 < self.min_duration <= self.max_duration:
            raise ValueError("need 0 < min_duration <= max_duration")
        if self.min_duration < self.min_segment:
            raise ValueError("min_duration shorter than min_segment")
        check_language_specs(self.languages)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("languages")
        return d


def synth_signal(spec: SynthLanguageSpec, n_samples: int, rng: np.random.Generator) -> Waveform:
    """Resonant-noise signal for one language, peak-normalised to 0.9."""
    pad = 2048  # discarded filter warm-up
    excitation = rng.standard_normal(n_samples + pad)
    out = np.zeros(n_samples)
    for k, (fc, bw) in enumerate(zip(spec.formant_centers, spec.bandwidths)):
        r = np.exp(-np.pi * bw / SAMPLE_RATE)
        theta = 2 * np.pi * fc / SAMPLE_RATE
        y = lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], excitation)[pad:]
        out += (0.8**k) * y / (np.std(y) + 1e-12)
    floor = 10.0 ** (spec.noise_floor_db / 20.0) * np.std(out)
    out += floor * rng.standard_normal(n_samples)
    return Waveform(0.9 * out / np.max(np.abs(out)))


def _segment_lengths(n: int, k: int, min_len: int, rng: np.random.Generator) -> list[int]:
    spare = n - k * min_len
    shares = rng.dirichlet(np.ones(k))
    extra = np.floor(shares * spare).astype(int)
    extra[-1] += spare - extra.sum()
    return [min_len + int(e) for e in extra]


def synth_utterance(cfg: SynthCorpusConfig, rng: np.random.Generator, utt_id: str = "") -> tuple[Waveform, list[BoundarySegment]]:
    n = int(round(rng.uniform(cfg.min_duration, cfg.max_duration) * SAMPLE_RATE))
    min_len = int(round(cfg.min_segment * SAMPLE_RATE))
    switches = int(rng.integers(0, cfg.max_switches + 1))
    switches = min(switches, n // min_len - 1)
    lengths = _segment_lengths(n, switches + 1, min_len, rng)

    n_lang = len(cfg.languages)
    seq = [int(rng.integers(n_lang))]
    for _ in range(switches):
        nxt = int(rng.integers(n_lang - 1))
        seq.append(nxt if nxt < seq[-1] else nxt + 1)

    scale = 1.0 + cfg.vtl_jitter * rng.standard_normal()
    parts, bounds, start = [], [], 0
    for lang, length in zip(seq, lengths):
        spec = cfg.languages[lang].scaled(scale)
        if cfg.formant_jitter > 0:
            spec = spec.scaled(1.0 + cfg.formant_jitter * rng.standard_normal(len(spec.formant_centers)))
        parts.append(synth_signal(spec, length, rng).samples)
        bounds.append(BoundarySegment(start, start + length, LANGUAGES[lang]))
        start += length
    x = np.concatenate(parts)
    x = x + 10.0 ** (-cfg.snr_db / 20.0) * np.std(x) * rng.standard_normal(n)
    return Waveform(0.9 * x / np.max(np.abs(x)), SAMPLE_RATE, utt_id), bounds


def class_means(dim: int, num: int = 5, distance: float = 4.0, seed: int = 0) -> np.ndarray:
    """``num`` points in R^dim with every pairwise distance equal to ``distance``."""
    if dim < num:
        raise ValueError(f"need dim >= {num} for a regular simplex")
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, num)))
    return (distance / np.sqrt(2.0)) * q.T


def mock_embeddings(bounds: list[BoundarySegment], T: int, D: int, rng: np.random.Generator,
                    means: np.ndarray | None = None, noise: float = 1.0) -> np.ndarray:
    """Per-frame language mean plus isotropic noise of expected norm ``noise``."""
    n = bounds[-1].end
    if T != n // EMBED_HOP:
        raise SpanMismatch(f"{n} samples give {n // EMBED_HOP} frames at 20 ms, not {T}")
    if means is None:
        means = class_means(D)
    labels = downsample_labels(boundaries_to_samples(bounds, n, 3), T)
    x = means[labels]
    if noise > 0:
        x = x + (noise / np.sqrt(D)) * rng.standard_normal((T, D))
    return x.astype(np.float32)


def utterance_rng(corpus_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([corpus_seed, index]))


def generate_corpus(cfg: SynthCorpusConfig, out_dir: str | Path) -> Manifest:
    """Write wav/, emb/ and manifest.jsonl under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    if cfg.embed_dim:
        (out / "emb").mkdir(exist_ok=True)
        means = class_means(cfg.embed_dim, len(cfg.languages), cfg.embed_distance, cfg.seed)
    entries = []
    index = 0
    for split, count in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        for i in range(count):
            utt_id = f"{split}_{i:04d}"
            rng = utterance_rng(cfg.seed, index)
            index += 1
            wav, bounds = synth_utterance(cfg, rng, utt_id)
            write_wav(out / "wav" / f"{utt_id}.wav", wav)
            emb = None
            if cfg.embed_dim:
                T = len(wav) // EMBED_HOP
                values = mock_embeddings(bounds, T, cfg.embed_dim, rng, means, cfg.embed_noise)
                emb = f"emb/{utt_id}.emb"
                write_embeddings(out / emb, values)
            entries.append(ManifestEntry(utt_id, f"wav/{utt_id}.wav", split, bounds, emb))
    manifest = Manifest(entries, out)
    manifest.save(out / "manifest.jsonl")
    (out / "corpus.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    return manifest
