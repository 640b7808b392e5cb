"""Language labels: taxonomies, sample/segment tracks and corpus manifests.

Label tracks are plain integer numpy arrays of class indices. A manifest is a
JSON Lines file, one utterance per line::

    {"utt_id": "u1", "wav": "wav/u1.wav", "split": "train",
     "labels": [[0, 32000, "eng"], [32000, 64000, "zul"]]}

Boundaries are stored in samples (end exclusive). An optional ``"emb"`` key
points at the utterance's EMBD embedding file.
"""

from __future__ import annotations

import enum
import json
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    CoverageError,
    EmptyTrack,
    GapError,
    IncompatibleTaxonomies,
    OverlapError,
    ParseError,
)

SPLITS = ("train", "dev", "test")


class Language(enum.Enum):
    ENGLISH = "eng"
    ISIZULU = "zul"
    ISIXHOSA = "xho"
    SETSWANA = "tsn"
    SESOTHO = "sot"


LANGUAGES = tuple(Language)


@dataclass(frozen=True)
class Taxonomy:
    task: int
    classes: tuple[str, ...]
    groups: dict[Language, int] = field(hash=False, compare=False)

    def map(self, lang: Language) -> int:
        return self.groups[lang]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


TAXONOMIES = {
    1: Taxonomy(1, ("English", "Bantu"), {
        Language.ENGLISH: 0, Language.ISIZULU: 1, Language.ISIXHOSA: 1,
        Language.SETSWANA: 1, Language.SESOTHO: 1,
    }),
    2: Taxonomy(2, ("English", "Nguni", "SothoTswana"), {
        Language.ENGLISH: 0, Language.ISIZULU: 1, Language.ISIXHOSA: 1,
        Language.SETSWANA: 2, Language.SESOTHO: 2,
    }),
    3: Taxonomy(3, ("English", "isiZulu", "isiXhosa", "Setswana", "Sesotho"), {
        Language.ENGLISH: 0, Language.ISIZULU: 1, Language.ISIXHOSA: 2,
        Language.SETSWANA: 3, Language.SESOTHO: 4,
    }),
}


def get_taxonomy(task: int | Taxonomy) -> Taxonomy:
    if isinstance(task, Taxonomy):
        return task
    try:
        return TAXONOMIES[int(task)]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; expected 1, 2 or 3") from None


class BoundarySegment(NamedTuple):
    start: int
    end: int
    lang: Language


def seconds_to_samples(t: float, sample_rate: int = 16000) -> int:
    """Round half up, so 0.5-sample ties always move later."""
    return int(np.floor(t * sample_rate + 0.5))


def check_boundaries(bounds: Sequence[BoundarySegment], n: int | None = None) -> None:
    """Raise on the first gap, overlap or coverage problem."""
    if not bounds:
        raise CoverageError("no boundary segments", 0)
    if bounds[0].start != 0:
        cls = GapError if bounds[0].start > 0 else CoverageError
        raise cls(f"first segment starts at {bounds[0].start}, not 0", 0)
    for i, b in enumerate(bounds):
        if b.start >= b.end:
            raise OverlapError(f"segment {i} is empty or reversed ({b.start}, {b.end})", i)
        if i > 0:
            prev = bounds[i - 1].end
            if b.start > prev:
                raise GapError(f"gap between segment {i - 1} (end {prev}) and {i} (start {b.start})", i)
            if b.start < prev:
                raise OverlapError(f"segment {i} starts at {b.start} before segment {i - 1} ends at {prev}", i)
    if n is not None and bounds[-1].end != n:
        raise CoverageError(f"segments cover [0, {bounds[-1].end}) but utterance has {n} samples", len(bounds) - 1)


def boundaries_to_samples(bounds: Sequence[BoundarySegment], n: int, tax: Taxonomy | int) -> np.ndarray:
    """Per-sample class indices for contiguous boundary segments covering [0, n)."""
    tax = get_taxonomy(tax)
    check_boundaries(bounds, n)
    labels = np.empty(n, dtype=np.int64)
    for b in bounds:
        labels[b.start:b.end] = tax.map(b.lang)
    return labels


def segment_windows(n: int, t: int) -> list[tuple[int, int]]:
    """Sample windows of T contiguous blocks of floor(n/t) samples.

    The final block also takes the n - t*floor(n/t) leftover samples so that
    the windows tile [0, n).
    """
    if t < 1 or n < t:
        raise ValueError(f"cannot split {n} samples into {t} segments")
    block = n // t
    return [(i * block, n if i == t - 1 else (i + 1) * block) for i in range(t)]


def downsample_labels(labels: np.ndarray, t: int) -> np.ndarray:
    """Majority class per window; ties go to the class seen first in the window."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise EmptyTrack("cannot downsample an empty label track")
    windows = segment_windows(n, t)
    num_classes = int(labels.max()) + 1
    starts = np.array([w[0] for w in windows])
    ends = np.array([w[1] for w in windows])

    onehot_cum = np.zeros((n + 1, num_classes), dtype=np.int64)
    np.cumsum(np.eye(num_classes, dtype=np.int64)[labels], axis=0, out=onehot_cum[1:])
    counts = onehot_cum[ends] - onehot_cum[starts]

    # first position >= start of each class, per window
    first = np.full((t, num_classes), n, dtype=np.int64)
    for c in range(num_classes):
        pos = np.flatnonzero(labels == c)
        if pos.size:
            idx = np.searchsorted(pos, starts)
            ok = idx < pos.size
            first[ok, c] = pos[idx[ok]]

    best = counts == counts.max(axis=1, keepdims=True)
    return np.where(best, first, n + 1).argmin(axis=1)


def class_map(src: Taxonomy | int, dst: Taxonomy | int) -> np.ndarray:
    """Index table sending every class of ``src`` to its class in ``dst``."""
    src, dst = get_taxonomy(src), get_taxonomy(dst)
    if dst.task > src.task:
        raise IncompatibleTaxonomies(f"Task{src.task} cannot be mapped to the finer Task{dst.task}")
    table = np.full(src.num_classes, -1, dtype=np.int64)
    for lang in LANGUAGES:
        s, d = src.map(lang), dst.map(lang)
        if table[s] not in (-1, d):
            raise IncompatibleTaxonomies(f"class {src.classes[s]} splits across Task{dst.task} classes")
        table[s] = d
    return table


def map_taxonomy(labels: np.ndarray, src: Taxonomy | int, dst: Taxonomy | int) -> np.ndarray:
    return class_map(src, dst)[np.asarray(labels, dtype=np.int64)]


# manifests

@dataclass
class ManifestEntry:
    utt_id: str
    wav: str
    split: str
    boundaries: list[BoundarySegment]
    emb: str | None = None

    @property
    def is_monolingual_english(self) -> bool:
        return all(b.lang is Language.ENGLISH for b in self.boundaries)

    @property
    def num_samples(self) -> int:
        return self.boundaries[-1].end if self.boundaries else 0

    def to_json(self) -> dict:
        row = {
            "utt_id": self.utt_id,
            "wav": self.wav,
            "split": self.split,
            "labels": [[b.start, b.end, b.lang.value] for b in self.boundaries],
        }
        if self.emb is not None:
            row["emb"] = self.emb
        return row


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> Manifest:
        return Manifest([e for e in self.entries if e.split == name], self.root)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json()) + "\n")


def _parse_entry(row: object, lineno: int) -> ManifestEntry:
    if not isinstance(row, dict):
        raise ParseError("expected a JSON object", lineno)
    missing = {"utt_id", "wav", "split", "labels"} - row.keys()
    if missing:
        raise ParseError(f"missing keys {sorted(missing)}", lineno)
    if row["split"] not in SPLITS:
        raise ParseError(f"split {row['split']!r} not in {SPLITS}", lineno)
    bounds = []
    for item in row["labels"]:
        try:
            start, end, code = item
            bounds.append(BoundarySegment(int(start), int(end), Language(code)))
        except ValueError as exc:
            raise ParseError(f"bad label entry {item!r}: {exc}", lineno) from None
    return ManifestEntry(str(row["utt_id"]), str(row["wav"]), row["split"], bounds, row.get("emb"))


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            entries.append(_parse_entry(row, lineno))
    return Manifest(entries, path.parent)


def validate_manifest(m: Manifest, check_files: bool = True) -> list[str]:
    """Human-readable issues; an empty list means the manifest is usable."""
    issues = []
    seen: set[str] = set()
    for e in m.entries:
        if e.utt_id in seen:
            issues.append(f"duplicate utt_id {e.utt_id!r}")
        seen.add(e.utt_id)
        try:
            check_boundaries(e.boundaries)
        except (GapError, OverlapError, CoverageError) as exc:
            issues.append(f"{e.utt_id}: boundary {exc.index}: {exc}")
            continue
        if not check_files:
            continue
        wav_path = m.resolve(e.wav)
        if not wav_path.exists():
            issues.append(f"{e.utt_id}: missing wav file {wav_path}")
        else:
            try:
                with wave.open(str(wav_path), "rb") as fh:
                    n = fh.getnframes()
            except (wave.Error, EOFError) as exc:
                issues.append(f"{e.utt_id}: unreadable wav {wav_path}: {exc}")
            else:
                if n != e.num_samples:
                    issues.append(f"{e.utt_id}: labels cover {e.num_samples} samples, wav has {n}")
        if e.emb is not None and not m.resolve(e.emb).exists():
            issues.append(f"{e.utt_id}: missing embedding file {m.resolve(e.emb)}")
    return issues


def filter_training_manifest(m: Manifest, task: Taxonomy | int) -> Manifest:
    """Drop monolingual English training utterances for tasks 2 and 3."""
    task = get_taxonomy(task)
    if task.task == 1:
        return m
    kept = [e for e in m.entries if not (e.split == "train" and e.is_monolingual_english)]
    return replace(m, entries=kept)
