"""Turning manifest entries into model-ready examples and padded batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptySplit, SpanMismatch, TooShort
from .features import MelConfig, load_wav, mel_spectrogram, read_embeddings
from .labels import Manifest, ManifestEntry, Taxonomy, boundaries_to_samples, downsample_labels, get_taxonomy

EMBED_HOP = 320


@dataclass
class Example:
    utt_id: str
    inputs: np.ndarray  # (T_in, d) float32
    labels: np.ndarray  # (T_out,) class indices at the model's output rate
    num_samples: int


@dataclass
class Batch:
    inputs: torch.Tensor  # (B, T_in, d), zero padded
    lengths: torch.Tensor  # (B,) input lengths
    labels: torch.Tensor  # (B, T_out), zero padded
    mask: torch.Tensor  # (B, T_out), True where position < output length
    utt_ids: list[str]

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())


def output_length(kind: str, n_in: int, segment_frames: int = 19) -> int:
    return n_in // segment_frames if kind == "xsa" else n_in


def load_inputs(entry: ManifestEntry, manifest: Manifest, input_kind: str,
                mel_cfg: MelConfig = MelConfig()) -> np.ndarray:
    if input_kind == "emb":
        if entry.emb is None:
            raise SpanMismatch(f"{entry.utt_id}: no embedding file in manifest")
        emb = read_embeddings(manifest.resolve(entry.emb))
        expected = entry.num_samples // EMBED_HOP
        if emb.shape[0] != expected:
            raise SpanMismatch(f"{entry.utt_id}: {emb.shape[0]} embedding frames, expected {expected}")
        return emb
    wav = load_wav(manifest.resolve(entry.wav), entry.utt_id)
    return mel_spectrogram(wav, mel_cfg).values.astype(np.float32)


def make_example(entry: ManifestEntry, inputs: np.ndarray, kind: str, tax: Taxonomy | int,
                 segment_frames: int = 19) -> Example:
    t_out = output_length(kind, inputs.shape[0], segment_frames)
    if t_out < 1:
        raise TooShort(f"{entry.utt_id}: {inputs.shape[0]} input frames give no {kind} output segments")
    samples = boundaries_to_samples(entry.boundaries, entry.num_samples, tax)
    return Example(entry.utt_id, inputs, downsample_labels(samples, t_out), entry.num_samples)


def prepare_examples(manifest: Manifest, kind: str, tax: Taxonomy | int, mel_cfg: MelConfig = MelConfig(),
                     segment_frames: int = 19, cache: dict | None = None) -> list[Example]:
    """Examples for every entry; ``cache`` (utt_id -> inputs) avoids recomputing features."""
    tax = get_taxonomy(tax)
    input_kind = "emb" if kind == "encoder-head" else "mel"
    out = []
    for entry in manifest:
        key = (entry.utt_id, input_kind)
        if cache is not None and key in cache:
            inputs = cache[key]
        else:
            inputs = load_inputs(entry, manifest, input_kind, mel_cfg)
            if cache is not None:
                cache[key] = inputs
        out.append(make_example(entry, inputs, kind, tax, segment_frames))
    return out


def collate(examples: list[Example], dtype=torch.float32) -> Batch:
    B = len(examples)
    t_in = max(e.inputs.shape[0] for e in examples)
    t_out = max(e.labels.shape[0] for e in examples)
    d = examples[0].inputs.shape[1]
    inputs = torch.zeros(B, t_in, d, dtype=dtype)
    labels = torch.zeros(B, t_out, dtype=torch.long)
    lengths = torch.zeros(B, dtype=torch.long)
    out_lengths = torch.zeros(B, dtype=torch.long)
    for i, e in enumerate(examples):
        inputs[i, : e.inputs.shape[0]] = torch.from_numpy(np.asarray(e.inputs)).to(dtype)
        labels[i, : e.labels.shape[0]] = torch.from_numpy(np.asarray(e.labels, dtype=np.int64))
        lengths[i] = e.inputs.shape[0]
        out_lengths[i] = e.labels.shape[0]
    mask = torch.arange(t_out)[None, :] < out_lengths[:, None]
    return Batch(inputs, lengths, labels, mask, [e.utt_id for e in examples])


def batch_order(examples: list[Example], batch_size: int, seed: int, epoch: int = 0,
                bucket_size: int = 64, shuffle: bool = True) -> list[list[int]]:
    """Index groups for one epoch.

    Utterances are shuffled by (seed, epoch), cut into buckets of
    ``bucket_size``, sorted by length inside each bucket to limit padding, and
    the resulting batches are shuffled again.
    """
    if not examples:
        raise EmptySplit("no utterances in split")
    idx = np.arange(len(examples))
    rng = np.random.default_rng([seed, epoch])
    if shuffle:
        rng.shuffle(idx)
    groups = []
    for start in range(0, len(idx), bucket_size):
        bucket = sorted(idx[start:start + bucket_size], key=lambda i: examples[i].inputs.shape[0])
        groups.extend([int(i) for i in bucket[j:j + batch_size]] for j in range(0, len(bucket), batch_size))
    if shuffle:
        perm = rng.permutation(len(groups))
        groups = [groups[i] for i in perm]
    return groups


def make_batches(examples: list[Example], batch_size: int, seed: int, epoch: int = 0,
                 bucket_size: int = 64, shuffle: bool = True, dtype=torch.float32) -> list[Batch]:
    return [collate([examples[i] for i in g], dtype)
            for g in batch_order(examples, batch_size, seed, epoch, bucket_size, shuffle)]
