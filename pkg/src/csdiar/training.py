"""Optimisation: AdamW, warmup + exponential decay, gradient accumulation, train loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .checkpoint import Checkpoint, decode_rng, encode_rng, make_checkpoint, save_checkpoint
from .data import Batch, Example, batch_order, collate
from .errors import DivergedLoss, EmptySplit, NonFiniteGradient
from .losses import model_loss
from .metrics import evaluate_model
from .models import Diarizer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "lr", "train_loss", "dev_ger", "dev_mer")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 1000
    final_lr_ratio: float = 0.01
    decay_gamma: float | None = None  # overrides final_lr_ratio when set
    batch_size: int = 64
    grad_accum: int = 1
    epochs: int = 30
    label_smoothing: float = 0.1
    alpha: float = 0.5
    seed: int = 0
    task: int = 3
    bucket_size: int = 64
    patience: int | None = None  # early stopping on dev GER
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 0  # optimizer steps; 0 = epoch ends only

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lr", "batch_size", "grad_accum", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be non-negative")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum


def steps_per_epoch(n_utts: int, cfg: TrainConfig) -> int:
    return math.ceil(math.ceil(n_utts / cfg.batch_size) / cfg.grad_accum)


def decay_gamma(cfg: TrainConfig, total_steps: int) -> float:
    if cfg.decay_gamma is not None:
        return cfg.decay_gamma
    span = total_steps - cfg.warmup_steps
    return cfg.final_lr_ratio ** (1.0 / span) if span > 0 else 1.0


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``cfg.lr``, then exponential decay to ``final_lr_ratio * lr`` at ``total_steps``."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * decay_gamma(cfg, total_steps) ** (step - cfg.warmup_steps)


def new_optimizer_state(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: torch.zeros_like(p) for k, p in params.items()},
        "v": {k: torch.zeros_like(p) for k, p in params.items()},
    }


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: dict, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place decoupled-weight-decay Adam update."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)


def accumulate_step(model: Diarizer, batches: list[Batch], opt_state: dict, cfg: TrainConfig, lr: float) -> float:
    """One optimizer step over ``batches`` treated as a single large batch.

    Each micro-batch loss is normalised by the window's total valid positions
    (cross-entropy) and utterances (deep clustering), so the accumulated
    gradient equals the gradient of the concatenated batch.
    """
    model.train()
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    for p in params.values():
        p.grad = None
    n_valid = sum(b.num_valid for b in batches)
    n_utts = sum(len(b.utt_ids) for b in batches)
    total = 0.0
    for b in batches:
        out = model(b.inputs, b.lengths)
        loss = model_loss(model.kind, out, b.labels, b.mask, cfg.alpha, cfg.label_smoothing,
                          ce_denominator=n_valid, dc_denominator=n_utts)
        value = float(loss.total.detach())
        if not math.isfinite(value):
            raise DivergedLoss(f"loss became {value}")
        loss.total.backward()
        total += value
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    adamw_step(params, grads, opt_state, lr, cfg.weight_decay, cfg.betas, cfg.eps)
    return total


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_dev_ger: float = math.inf
    best_state: dict | None = None
    best_epoch: int = -1


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in LOG_COLUMNS})


def train(model: Diarizer, train_set: list[Example], dev_set: list[Example] | None, cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None,
          on_step: Callable[[int, float], None] | None = None, max_steps: int | None = None,
          meta: dict | None = None) -> TrainResult:
    """Train in place; the model ends with its final (not best) weights.

    Checkpoints ``last.ckpt``, ``best.ckpt`` and ``metrics.csv`` are written to
    ``out_dir`` when given. ``resume`` continues from a checkpoint written by
    this function, reproducing the uninterrupted loss trace. ``max_steps``
    stops early after that many optimizer steps (schedule is unaffected).
    ``meta`` is copied into every checkpoint's metadata.
    """
    if not train_set:
        raise EmptySplit("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    total_steps = cfg.epochs * steps_per_epoch(len(train_set), cfg)
    result = TrainResult()

    if resume is not None:
        model.load_state_dict(resume.model_state())
        opt_state = resume.optimizer_state()
        opt_state["m"] = {k: opt_state["m"][k].to(dtype) for k in params}
        opt_state["v"] = {k: opt_state["v"][k].to(dtype) for k in params}
        torch.set_rng_state(decode_rng(resume.meta["rng"]))
        start_epoch = resume.meta["epoch"]
        start_window = resume.meta["window"]
        result.history = list(resume.meta.get("history", []))
        result.step_losses = list(resume.meta.get("step_losses", []))
        best = resume.meta.get("best_dev_ger")
        result.best_dev_ger = math.inf if best is None else best
        result.best_epoch = resume.meta.get("best_epoch", -1)
    else:
        torch.manual_seed(cfg.seed)
        opt_state = new_optimizer_state(params)
        start_epoch, start_window = 0, 0

    def snapshot(epoch: int, window: int) -> Checkpoint:
        info = {
            **(meta or {}),
            "train_config": asdict(cfg),
            "epoch": epoch,
            "window": window,
            "rng": encode_rng(torch.get_rng_state()),
            "history": result.history,
            "step_losses": result.step_losses,
            "best_dev_ger": result.best_dev_ger if math.isfinite(result.best_dev_ger) else None,
            "best_epoch": result.best_epoch,
            "task": cfg.task,
        }
        return make_checkpoint(model, info, opt_state)

    stale = 0
    for epoch in range(start_epoch, cfg.epochs):
        groups = batch_order(train_set, cfg.batch_size, cfg.seed, epoch, cfg.bucket_size)
        windows = [groups[i:i + cfg.grad_accum] for i in range(0, len(groups), cfg.grad_accum)]
        epoch_losses = []
        first = start_window if epoch == start_epoch else 0
        lr = lr_at(max(opt_state["step"], 1), cfg, total_steps)
        for w in range(first, len(windows)):
            step = opt_state["step"] + 1
            lr = lr_at(step, cfg, total_steps)
            batches = [collate([train_set[i] for i in g], dtype) for g in windows[w]]
            loss = accumulate_step(model, batches, opt_state, cfg, lr)
            epoch_losses.append(loss)
            result.step_losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{step}.ckpt", snapshot(epoch, w + 1))
            if max_steps is not None and opt_state["step"] >= max_steps:
                return result

        row = {"epoch": epoch + 1, "step": opt_state["step"], "lr": lr,
               "train_loss": sum(epoch_losses) / max(len(epoch_losses), 1),
               "dev_ger": float("nan"), "dev_mer": float("nan")}
        if dev_set:
            report = evaluate_model(model, dev_set, cfg.task)
            row["dev_ger"], row["dev_mer"] = report.ger, report.mer
        result.history.append(row)
        log.info("epoch %d step %d loss %.4f dev GER %.4f", row["epoch"], row["step"], row["train_loss"], row["dev_ger"])

        improved = dev_set and row["dev_ger"] < result.best_dev_ger
        if improved:
            result.best_dev_ger = row["dev_ger"]
            result.best_epoch = epoch + 1
            result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
        if out is not None:
            ckpt = snapshot(epoch + 1, 0)
            save_checkpoint(out / "last.ckpt", ckpt)
            if improved or not dev_set:
                save_checkpoint(out / "best.ckpt", ckpt)
            _write_log(out / "metrics.csv", result.history)
        if cfg.patience is not None and stale >= cfg.patience:
            log.info("early stop after %d epochs without dev improvement", stale)
            break
    return result
