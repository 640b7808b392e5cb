"""Command-line entry point: ``csdiar <command> ...``.

Exit codes: 0 success, 2 usage/config/input error, 3 runtime failure
(diverged training, failed self-check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import load_config
from .data import EMBED_HOP, prepare_examples
from .errors import ArchitectureMismatch, ConfigError, DiarizationError, DivergedLoss, EmptySplit, NonFiniteGradient, SpanMismatch
from .features import MelConfig, load_wav, mel_spectrogram, read_embeddings
from .labels import filter_training_manifest, get_taxonomy, load_manifest, segment_windows, validate_manifest
from .metrics import evaluate_model
from .models import build_model, init_cascade
from .synth import generate_corpus
from .training import train

log = logging.getLogger("csdiar")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(Exception):
    pass


def _open_corpus(path: Path):
    manifest_path = path / "manifest.jsonl" if path.is_dir() else path
    if not manifest_path.exists():
        raise ConfigError(f"no manifest at {manifest_path}")
    m = load_manifest(manifest_path)
    issues = validate_manifest(m)
    if issues:
        raise ConfigError(f"{manifest_path}: {len(issues)} manifest issue(s), first: {issues[0]}")
    return m


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def cmd_gen_corpus(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    m = generate_corpus(cfg.corpus, out)
    counts = {s: len(m.split(s).entries) for s in ("train", "dev", "test")}
    mono = sum(e.is_monolingual_english for e in m.entries)
    print(f"wrote {len(m.entries)} utterances to {out} "
          f"(train {counts['train']}, dev {counts['dev']}, test {counts['test']}; {mono} monolingual English)")
    print(f"sha256 {_tree_digest(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    task = get_taxonomy(args.task)
    train_cfg = cfg.train
    train_cfg.task = task.task
    corpus = Path(args.corpus) if args.corpus else cfg.resolve(cfg.paths.corpus)
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.runs) / f"{args.model}-task{task.task}"
    m = _open_corpus(corpus)

    model_cfg = dict(cfg.model_config(args.model), num_classes=task.num_classes)
    model = build_model(args.model, seed=train_cfg.seed, **model_cfg)
    if args.init_from:
        ck = load_checkpoint(args.init_from)
        src_kind = ck.meta.get("model", {}).get("kind")
        if src_kind != args.model:
            raise ArchitectureMismatch(f"{args.init_from} holds a {src_kind!r} model, not {args.model!r}")
        src_classes = ck.meta["model"]["config"]["num_classes"]
        template = build_model(args.model, **dict(model_cfg, num_classes=src_classes))
        model = init_cascade(template, ck.model_state(), task.num_classes, seed=train_cfg.seed)
        print(f"initialised from {args.init_from} (task {ck.meta.get('task')})")

    seg = getattr(model.config, "segment_frames", 19)
    filtered = filter_training_manifest(m, task)
    cache: dict = {}
    tr = prepare_examples(filtered.split("train"), args.model, task, cfg.mel, seg, cache)
    dev = prepare_examples(m.split("dev"), args.model, task, cfg.mel, seg, cache)
    dropped = len(m.split("train").entries) - len(tr)
    print(f"training {args.model} on task {task.task}: {len(tr)} train utterances"
          f" ({dropped} monolingual English removed), {len(dev)} dev")
    meta = {"corpus": str(corpus.resolve()), "mel": asdict(cfg.mel)}
    try:
        res = train(model, tr, dev, train_cfg, out_dir=out, meta=meta)
    except (DivergedLoss, NonFiniteGradient) as exc:
        raise RuntimeFailure(str(exc)) from exc
    last = res.history[-1]
    print(f"done: {len(res.history)} epochs, best dev GER {res.best_dev_ger:.4f} (epoch {res.best_epoch}), "
          f"final train loss {last['train_loss']:.4f}")
    print(f"checkpoints and metrics.csv in {out}")
    return EXIT_OK


def _load_for_ckpt(args):
    ck = load_checkpoint(args.ckpt)
    model = ck.build_model()
    task = ck.meta.get("task")
    if task is None:
        raise ConfigError(f"{args.ckpt}: checkpoint does not record its task")
    mel = MelConfig(**ck.meta["mel"]) if "mel" in ck.meta else MelConfig()
    return ck, model, task, mel


def cmd_evaluate(args) -> int:
    ck, model, task, mel = _load_for_ckpt(args)
    corpus = Path(args.corpus) if args.corpus else Path(ck.meta.get("corpus", "."))
    m = _open_corpus(corpus).split(args.split)
    if not m.entries:
        raise EmptySplit(f"split {args.split!r} is empty in {corpus}")
    seg = getattr(model.config, "segment_frames", 19)
    examples = prepare_examples(m, model.kind, task, mel, seg)
    preds = [e.labels for e in examples] if args.oracle else None
    report = evaluate_model(model, examples, task, remap_task=args.remap_task, predictions=preds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(f"{args.split}: GER {report.ger:.4f} MER {report.mer:.4f} over {len(examples)} utterances -> {out}")
    return EXIT_OK


def merge_runs(pred: np.ndarray, n_samples: int) -> list[tuple[int, int, int]]:
    """Run-length merge per-segment predictions into (start, end, class) sample spans."""
    windows = segment_windows(n_samples, len(pred))
    runs = []
    for (start, end), c in zip(windows, pred):
        c = int(c)
        if runs and runs[-1][2] == c:
            runs[-1] = (runs[-1][0], end, c)
        else:
            runs.append((start, end, c))
    return runs


def cmd_diarize(args) -> int:
    ck, model, task, mel = _load_for_ckpt(args)
    wav = load_wav(args.wav)
    n = len(wav)
    if model.input_kind == "emb":
        if not args.embeddings:
            raise ConfigError("the encoder-head model needs --embeddings")
        inputs = read_embeddings(args.embeddings)
        if inputs.shape[0] != n // EMBED_HOP:
            raise SpanMismatch(f"{inputs.shape[0]} embedding frames for {n} samples, expected {n // EMBED_HOP}")
    else:
        inputs = mel_spectrogram(wav, mel).values.astype(np.float32)
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(inputs))[None]
        pred = model(x).logits_main[0].argmax(-1).numpy()
    if len(pred) == 0:
        raise DiarizationError("model produced no output segments")
    classes = get_taxonomy(task).classes
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    runs = merge_runs(pred, n)
    with open(out, "w") as fh:
        for start, end, c in runs:
            fh.write(json.dumps({"utt_id": wav.id, "start": start, "end": end, "label": classes[c]}) + "\n")
    print(f"{wav.id}: {len(runs)} segment(s) over {n} samples -> {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    dc_fn = selfcheck.faulty_dc_loss if args.inject_fault == "dc-grad" else selfcheck.dc_loss
    results = selfcheck.run_selfcheck(dc_fn)
    for r in results:
        print(r.line())
    worst = max(r.grad_error for r in results if r.grad_error is not None)
    print(f"max grad-check relative error: {worst:.3e}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csdiar", description="Language diarization for code-switched speech.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic code-switched corpus")
    g.add_argument("--config", help="TOML run config (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory (created if missing)")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a diarizer")
    t.add_argument("--model", required=True, choices=["bilstm", "xsa", "encoder-head"])
    t.add_argument("--task", required=True, type=int, choices=[1, 2, 3])
    t.add_argument("--config", help="TOML run config")
    t.add_argument("--init-from", help="checkpoint of the same architecture trained on a coarser task")
    t.add_argument("--corpus", help="corpus directory or manifest (overrides paths.corpus)")
    t.add_argument("--out", help="run directory (default: paths.runs/<model>-task<task>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", required=True, choices=["dev", "test"])
    e.add_argument("--remap-task", type=int, choices=[1, 2], help="coarsen predictions and truth first")
    e.add_argument("--out", required=True, help="report JSON path; confusion CSV goes alongside")
    e.add_argument("--corpus", help="corpus directory (default: the one recorded in the checkpoint)")
    e.add_argument("--oracle", action="store_true", help="score the reference labels as predictions")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("diarize", help="label one waveform")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--wav", required=True)
    d.add_argument("--embeddings", help="EMBD file of 20 ms encoder embeddings (encoder-head models)")
    d.add_argument("--out", required=True, help="output JSONL of merged segments")
    d.set_defaults(func=cmd_diarize)

    s = sub.add_parser("selfcheck", help="run gradient, loss, metric and parameter-count checks")
    s.add_argument("--inject-fault", choices=["dc-grad"],
                   help="corrupt the deep-clustering gradient to confirm the checks catch it")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DiarizationError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
