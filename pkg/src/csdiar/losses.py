"""Training objectives.

Cross-entropy is averaged over valid (unpadded) positions. The deep-clustering
term is computed per utterance and averaged over utterances. Both accept an
explicit denominator so a trainer accumulating gradients over several
micro-batches can reproduce the large-batch loss exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import AllMasked, MissingAuxHead, NonUnitRows
from .models import ModelOutput


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)


def _valid_mask(labels: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return torch.ones_like(labels, dtype=torch.bool)
    return mask.bool()


def ce_label_smoothing(logits, labels, smoothing: float = 0.1, mask=None, denominator: float | None = None):
    """Mean over valid positions of -sum_c q_c log p_c.

    q = (1 - smoothing) * onehot + smoothing / C. Masked positions are
    excluded through ``torch.where`` so they get exactly zero gradient.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    valid = _valid_mask(labels, mask)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllMasked("no valid positions for cross-entropy")
    C = logits.shape[-1]
    logp = torch.log_softmax(logits, dim=-1)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    nll = -logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    per_pos = (1.0 - smoothing) * nll - smoothing / C * logp.sum(dim=-1)
    per_pos = torch.where(valid, per_pos, torch.zeros_like(per_pos))
    return per_pos.sum() / (n_valid if denominator is None else denominator)


def _dc_single(v: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    t = v.shape[0]
    vv = (v.T @ v).pow(2).sum()
    vy = (v.T @ y).pow(2).sum()
    yy = (y.T @ y).pow(2).sum()
    return (vv - 2.0 * vy + yy) / (t * t)


def dc_loss(embeddings, labels, mask=None, num_classes: int | None = None,
            denominator: float | None = None):
    """Deep-clustering loss ||V V^T - Y Y^T||_F^2 / T^2 via the low-rank expansion.

    Accepts a single utterance ``(T, H)`` or a batch ``(B, T, H)``; batches
    average the per-utterance losses.
    """
    if embeddings.dim() == 2:
        embeddings, labels = embeddings[None], labels[None]
        mask = None if mask is None else mask[None]
    valid = _valid_mask(labels, mask)
    if int(valid.sum()) == 0:
        raise AllMasked("no valid positions for deep clustering")
    C = num_classes if num_classes is not None else int(labels[valid].max()) + 1
    with torch.no_grad():
        norms = embeddings[valid].norm(dim=-1)
        if norms.numel() and float((norms - 1.0).abs().max()) > 1e-3:
            raise NonUnitRows(f"embedding row norms span [{float(norms.min()):.4f}, {float(norms.max()):.4f}]")
    total = embeddings.new_zeros(())
    count = 0
    for emb, lab, ok in zip(embeddings, labels, valid):
        if not bool(ok.any()):
            continue
        v = emb[ok]
        y = torch.nn.functional.one_hot(lab[ok], C).to(emb.dtype)
        total = total + _dc_single(v, y)
        count += 1
    return total / (count if denominator is None else denominator)


def dc_loss_naive(embeddings, labels, num_classes: int) -> torch.Tensor:
    """Materialises the T x T affinities; reference only."""
    y = torch.nn.functional.one_hot(labels, num_classes).to(embeddings.dtype)
    t = embeddings.shape[0]
    return ((embeddings @ embeddings.T - y @ y.T) ** 2).sum() / (t * t)


def bilstm_loss(out: ModelOutput, labels, mask=None, alpha: float = 0.5, smoothing: float = 0.1,
                ce_denominator=None, dc_denominator=None) -> LossValue:
    mask = out.mask if mask is None else mask
    ce = ce_label_smoothing(out.logits_main, labels, smoothing, mask, ce_denominator)
    dc = dc_loss(out.embeddings, labels, mask, out.logits_main.shape[-1], dc_denominator)
    return LossValue(alpha * ce + (1.0 - alpha) * dc, {"ce": ce, "dc": dc})


def xsa_loss(out: ModelOutput, labels, mask=None, alpha: float = 0.5, smoothing: float = 0.1,
             ce_denominator=None) -> LossValue:
    if out.logits_aux is None:
        raise MissingAuxHead("XSA loss needs the x-vector head logits")
    mask = out.mask if mask is None else mask
    main = ce_label_smoothing(out.logits_main, labels, smoothing, mask, ce_denominator)
    aux = ce_label_smoothing(out.logits_aux, labels, smoothing, mask, ce_denominator)
    return LossValue(alpha * main + (1.0 - alpha) * aux, {"ce_transformer": main, "ce_xvector": aux})


def encoder_head_loss(out: ModelOutput, labels, mask=None, smoothing: float = 0.1,
                      ce_denominator=None) -> LossValue:
    mask = out.mask if mask is None else mask
    ce = ce_label_smoothing(out.logits_main, labels, smoothing, mask, ce_denominator)
    return LossValue(ce, {"ce": ce})


def model_loss(kind: str, out: ModelOutput, labels, mask=None, alpha: float = 0.5,
               smoothing: float = 0.1, ce_denominator=None, dc_denominator=None) -> LossValue:
    if kind == "bilstm":
        return bilstm_loss(out, labels, mask, alpha, smoothing, ce_denominator, dc_denominator)
    if kind == "xsa":
        return xsa_loss(out, labels, mask, alpha, smoothing, ce_denominator)
    return encoder_head_loss(out, labels, mask, smoothing, ce_denominator)
