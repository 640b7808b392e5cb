"""Error rates and confusion matrices.

GER pools every valid prediction in the evaluation set; MER averages the
per-utterance error rates with equal weight per utterance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AllMasked, EmptyEvaluation, LabelOutOfRange, LengthMismatch
from .labels import class_map, get_taxonomy


@dataclass
class UtteranceScore:
    utt_id: str
    errors: int
    length: int

    @property
    def error_rate(self) -> float:
        return self.errors / self.length


def _valid(pred, truth, mask):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"prediction length {pred.shape} vs truth {truth.shape}")
    if mask is None:
        return pred, truth
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise LengthMismatch(f"mask shape {mask.shape} vs prediction {pred.shape}")
    return pred[mask], truth[mask]


def score_utterance(utt_id: str, pred, truth, mask=None) -> UtteranceScore:
    pred, truth = _valid(pred, truth, mask)
    if pred.size == 0:
        raise AllMasked(f"{utt_id}: no valid positions")
    return UtteranceScore(utt_id, int(np.count_nonzero(pred != truth)), int(pred.size))


def error_rate(pred, truth, mask=None) -> float:
    """Incorrect predictions / total predictions over valid positions."""
    return score_utterance("", pred, truth, mask).error_rate


def aggregate(scores: Sequence[UtteranceScore]) -> tuple[float, float]:
    """(GER, MER)."""
    if not scores:
        raise EmptyEvaluation("no utterances to aggregate")
    ger = sum(s.errors for s in scores) / sum(s.length for s in scores)
    mer = float(np.mean([s.error_rate for s in scores]))
    return ger, mer


def confusion_matrix(pairs: Iterable[tuple[np.ndarray, np.ndarray]], num_classes: int) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for truth, pred in pairs:
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if truth.shape != pred.shape:
            raise LengthMismatch(f"truth {truth.shape} vs prediction {pred.shape}")
        for arr in (truth, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise LabelOutOfRange(f"labels must lie in [0, {num_classes}), got [{arr.min()}, {arr.max()}]")
        np.add.at(counts, (truth, pred), 1)
    return counts


def normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros(counts.shape, dtype=np.float64), where=totals > 0)


@dataclass
class EvalReport:
    ger: float
    mer: float
    per_utterance: list[UtteranceScore]
    confusion: np.ndarray
    classes: tuple[str, ...] = field(default=())

    @classmethod
    def from_predictions(cls, items: Sequence[tuple[str, np.ndarray, np.ndarray]], num_classes: int,
                         classes: Sequence[str] = ()) -> EvalReport:
        """``items`` are ``(utt_id, pred, truth)`` triples over valid positions only."""
        scores = [score_utterance(u, p, t) for u, p, t in items]
        ger, mer = aggregate(scores)
        conf = confusion_matrix(((t, p) for _, p, t in items), num_classes)
        return cls(ger, mer, scores, conf, tuple(classes))

    def to_json(self) -> dict:
        return {
            "ger": self.ger,
            "mer": self.mer,
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "confusion_normalized": normalize_rows(self.confusion).tolist(),
            "per_utterance": [
                {"utt_id": s.utt_id, "error_rate": s.error_rate, "errors": s.errors, "length": s.length}
                for s in self.per_utterance
            ],
        }

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2))
        if csv_path is None:
            csv_path = Path(json_path).with_suffix(".confusion.csv")
        names = list(self.classes) or [str(i) for i in range(self.confusion.shape[0])]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth"] + names)
            for name, row in zip(names, self.confusion):
                w.writerow([name] + row.tolist())


def predict(model, examples, batch_size: int = 16) -> list[np.ndarray]:
    """Argmax class per output segment (first maximum wins ties)."""
    import torch

    from .data import collate

    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                chunk = examples[start:start + batch_size]
                batch = collate(chunk, dtype)
                out = model(batch.inputs, batch.lengths)
                best = out.logits_main.argmax(dim=-1)
                for i, e in enumerate(chunk):
                    preds.append(best[i, : e.labels.shape[0]].numpy())
    finally:
        model.train(was_training)
    return preds


def evaluate_model(model, examples, task, remap_task=None, predictions=None) -> EvalReport:
    """Score a model on prepared examples whose labels follow ``task``.

    ``remap_task`` coarsens both predictions and truth before scoring.
    ``predictions`` substitutes precomputed per-utterance predictions (used to
    inject oracle labels).
    """
    tax = get_taxonomy(task)
    preds = predict(model, examples) if predictions is None else predictions
    table = None
    out_tax = tax
    if remap_task is not None:
        out_tax = get_taxonomy(remap_task)
        table = class_map(tax, out_tax)
    items = []
    for e, p in zip(examples, preds):
        truth = np.asarray(e.labels)
        p = np.asarray(p)
        if table is not None:
            truth, p = table[truth], table[p]
        items.append((e.utt_id, p, truth))
    return EvalReport.from_predictions(items, out_tax.num_classes, out_tax.classes)
