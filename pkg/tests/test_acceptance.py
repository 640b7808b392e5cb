"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are also
printed without ``-s``). Training budgets are measured in process CPU time.
"""

import math
import time

import numpy as np
import pytest
import torch

from csdiar import ops
from csdiar.checkpoint import load_checkpoint, make_checkpoint, save_checkpoint
from csdiar.data import Example, collate, prepare_examples
from csdiar.labels import (
    boundaries_to_samples,
    downsample_labels,
    filter_training_manifest,
    segment_windows,
)
from csdiar.losses import ce_label_smoothing, dc_loss, dc_loss_naive, model_loss
from csdiar.metrics import aggregate, confusion_matrix, evaluate_model, score_utterance
from csdiar.models import build_model, init_cascade, param_count
from csdiar.selfcheck import GRAD_EPS, TINY_CONFIGS, full_model_problem
from csdiar.synth import CLOSE_PAIR, SynthCorpusConfig, generate_corpus
from csdiar.training import TrainConfig, accumulate_step, new_optimizer_state, train

RESULTS: dict[int, list[tuple[bool, str]]] = {}

# desk-scale recipes (full-scale defaults live in TrainConfig)
BILSTM_RECIPE = dict(lr=2e-3, warmup_steps=20, batch_size=16, epochs=4, seed=0)
XSA_RECIPE = dict(lr=1e-3, warmup_steps=50, batch_size=16, epochs=12, seed=0)
ENCODER_RECIPE = dict(lr=1e-2, warmup_steps=5, batch_size=4, grad_accum=16, epochs=16, seed=0)
CASCADE_MODEL = dict(H=64)
CASCADE_RECIPE = dict(lr=2e-3, warmup_steps=10, batch_size=16, seed=0)


def record(capsys, n: int, ok: bool, detail: str) -> None:
    RESULTS.setdefault(n, []).append((ok, detail))
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


def cpu_time() -> float:
    return time.process_time()


# ---------------------------------------------------------------- criterion 1
def test_c1_parameter_counts(capsys):
    t0 = time.perf_counter()
    counts = {k: param_count(build_model(k, num_classes=3)) for k in ("bilstm", "xsa")}
    elapsed = time.perf_counter() - t0
    ok_b = abs(counts["bilstm"] - 9e6) <= 0.25 * 9e6
    ok_x = abs(counts["xsa"] - 12e6) <= 0.25 * 12e6
    ok = ok_b and ok_x and elapsed < 1.0
    record(capsys, 1, ok, f"BiLSTM {counts['bilstm']:,} (9M ±25%), XSA {counts['xsa']:,} (12M ±25%), {elapsed:.2f} s (< 1 s)")
    assert ok


# ---------------------------------------------------------------- criterion 2
def test_c2_gradient_integrity(capsys):
    t0 = time.perf_counter()
    errs = {}
    for kind in TINY_CONFIGS:
        loss, params = full_model_problem(kind, seed=1)
        errs[kind] = ops.grad_check(loss, params, eps=GRAD_EPS[kind])
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(capsys, 2, ok, f"max rel err {worst:.2e} (< 1e-4) [{detail}], {elapsed:.1f} s (< 300 s)")
    assert ok


# ---------------------------------------------------------------- criterion 3
def test_c3_loss_oracles(capsys):
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        T, H, C = int(torch.randint(1, 40, (1,), generator=g)), int(torch.randint(1, 16, (1,), generator=g)), \
            int(torch.randint(1, 6, (1,), generator=g))
        v = torch.randn(T, H, generator=g, dtype=torch.float64)
        v = v / v.norm(dim=-1, keepdim=True)
        y = torch.randint(0, C, (T,), generator=g)
        worst = max(worst, abs(float(dc_loss(v, y, num_classes=C)) - float(dc_loss_naive(v, y, C))))
    hand = float(dc_loss(torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64), torch.tensor([0, 1]), num_classes=2))
    ce = float(ce_label_smoothing(torch.zeros(1, 5, 2, dtype=torch.float64), torch.tensor([[0, 1, 1, 0, 1]]), 0.1))
    ok = worst < 1e-6 and abs(hand - 0.5) <= 1e-9 and abs(ce - math.log(2)) <= 1e-9
    record(capsys, 3, ok, f"expanded vs naive max diff {worst:.1e} (< 1e-6); hand case {hand:.9f} (0.5 ± 1e-9); "
                          f"uniform CE {ce:.9f} (ln 2 ± 1e-9)")
    assert ok


# ---------------------------------------------------------------- criterion 4
def test_c4_metric_oracles(capsys):
    rng = np.random.default_rng(0)
    exact = True
    for _ in range(1000):
        C = int(rng.integers(2, 6))
        n_utt = int(rng.integers(1, 6))
        truths = [rng.integers(0, C, int(rng.integers(1, 30))) for _ in range(n_utt)]
        preds = [rng.integers(0, C, t.size) for t in truths]
        scores = [score_utterance(str(i), p, t) for i, (p, t) in enumerate(zip(preds, truths))]
        ger, mer = aggregate(scores)
        errs = [sum(int(a != b) for a, b in zip(p, t)) for p, t in zip(preds, truths)]
        lens = [t.size for t in truths]
        conf = confusion_matrix(zip(truths, preds), C)
        brute = np.zeros((C, C), dtype=np.int64)
        for p, t in zip(preds, truths):
            for a, b in zip(t, p):
                brute[a, b] += 1
        exact &= ger == sum(errs) / sum(lens)
        exact &= mer == float(np.mean([e / n for e, n in zip(errs, lens)]))
        exact &= np.array_equal(conf, brute)
        exact &= ger == (conf.sum() - np.trace(conf)) / conf.sum()
    a = score_utterance("a", np.r_[np.ones(5, int), np.zeros(5, int)], np.zeros(10, int))
    b = score_utterance("b", np.zeros(2, int), np.zeros(2, int))
    ger, mer = aggregate([a, b])
    worked = ger == 5 / 12 and mer == 0.25
    ok = bool(exact) and worked
    record(capsys, 4, ok, f"1000 random instances exact: {bool(exact)}; worked case GER {ger!r} (5/12), MER {mer!r} (0.25)")
    assert ok


# ---------------------------------------------------------------- criterion 7
def test_c7_pipeline_invariants(capsys, tmp_path):
    checks = {}
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(200):
        n = int(rng.integers(50, 2000))
        t = int(rng.integers(1, n // 2))
        lab = rng.integers(0, 5, n)
        got = downsample_labels(lab, t)
        for (s, e), g in zip(segment_windows(n, t), got):
            counts = np.bincount(lab[s:e], minlength=5)
            best = counts.max()
            first = next(int(v) for v in lab[s:e] if counts[v] == best)
            ok &= g == first
    checks["downsampling == counting oracle"] = bool(ok)

    from csdiar.errors import CoverageError, GapError, OverlapError
    from csdiar.labels import BoundarySegment, Language

    E, Z = Language.ENGLISH, Language.ISIZULU
    raised = []
    for bounds, n, exc in (([BoundarySegment(0, 5, E), BoundarySegment(6, 10, Z)], 10, GapError),
                           ([BoundarySegment(0, 6, E), BoundarySegment(5, 10, Z)], 10, OverlapError),
                           ([BoundarySegment(0, 5, E), BoundarySegment(5, 9, Z)], 10, CoverageError)):
        try:
            boundaries_to_samples(bounds, n, 3)
            raised.append(False)
        except exc:
            raised.append(True)
    checks["boundary precondition errors"] = all(raised)

    def examples(n, kind, seed):
        r = np.random.default_rng(seed)
        out = []
        for i in range(n):
            t = int(r.integers(8, 30))
            out.append(Example(f"u{i}", r.standard_normal((t, 23)).astype(np.float32),
                               r.integers(0, 3, t // 4 if kind == "xsa" else t), t * 160))
        return out

    tiny = {"bilstm": dict(H=4), "xsa": dict(TINY_CONFIGS["xsa"]), "encoder-head": dict(embed_dim=23)}
    zero_grad = True
    for kind, cfg in tiny.items():
        model = build_model(kind, seed=0, **cfg)
        ex = examples(3, kind, 1)

        def grads(batch):
            model.zero_grad()
            model_loss(kind, model(batch.inputs, batch.lengths), batch.labels, batch.mask).total.backward()
            return [p.grad.clone() for p in model.parameters()]

        clean = collate(ex)
        noisy = collate(ex)
        for i, e in enumerate(ex):
            noisy.inputs[i, e.inputs.shape[0]:] = 50 * torch.randn_like(noisy.inputs[i, e.inputs.shape[0]:])
            noisy.labels[i, e.labels.shape[0]:] = 2
        zero_grad &= all(torch.allclose(a, b, atol=1e-6) for a, b in zip(grads(clean), grads(noisy)))
    checks["padding-mask zero gradient"] = bool(zero_grad)

    worst = 0.0
    cfg = TrainConfig(lr=1e-3)
    for kind, mcfg in tiny.items():
        ex = examples(64, kind, 2)
        big, small = build_model(kind, seed=0, **mcfg), build_model(kind, seed=0, **mcfg)
        accumulate_step(big, [collate(ex)], new_optimizer_state(dict(big.named_parameters())), cfg, cfg.lr)
        accumulate_step(small, [collate(ex[i:i + 4]) for i in range(0, 64, 4)],
                        new_optimizer_state(dict(small.named_parameters())), cfg, cfg.lr)
        worst = max(worst, max(float((a - b).detach().abs().max()) for a, b in zip(big.parameters(), small.parameters())))
    checks[f"batch 4x16 == batch 64 (max diff {worst:.1e})"] = worst < 1e-5

    model = build_model("xsa", seed=3, **tiny["xsa"])
    save_checkpoint(tmp_path / "m.ckpt", make_checkpoint(model))
    back = load_checkpoint(tmp_path / "m.ckpt").build_model()
    checks["checkpoint round trip bit-identical"] = all(
        torch.equal(a, b) for a, b in zip(model.state_dict().values(), back.state_dict().values()))

    logs = []
    for run in ("a", "b"):
        tr, dev = examples(12, "xsa", 5), examples(4, "xsa", 6)
        xcfg = dict(tiny["xsa"], dropout=0.1)
        train(build_model("xsa", seed=0, **xcfg), tr, dev, TrainConfig(lr=1e-2, warmup_steps=2, batch_size=4, epochs=2, seed=4),
              out_dir=tmp_path / run)
        logs.append((tmp_path / run / "metrics.csv").read_bytes())
    checks["same-seed metric log identical"] = logs[0] == logs[1]

    ok = all(checks.values())
    record(capsys, 7, ok, "; ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- shared corpus
@pytest.fixture(scope="module")
def corpus42(tmp_path_factory):
    return generate_corpus(SynthCorpusConfig(seed=42), tmp_path_factory.mktemp("corpus42"))


@pytest.fixture(scope="module")
def mel_cache():
    return {}


def _sets(manifest, kind, task, cache, segment_frames=19):
    m = filter_training_manifest(manifest, task)
    return [prepare_examples(m.split(s), kind, task, segment_frames=segment_frames, cache=cache)
            for s in ("train", "dev", "test")]


def _fit(kind, task, sets, recipe, model_cfg=None, tax_classes=None):
    tr, dev, te = sets
    from csdiar.labels import get_taxonomy

    C = get_taxonomy(task).num_classes
    model = build_model(kind, seed=recipe["seed"], num_classes=C, **(model_cfg or {}))
    t0 = cpu_time()
    res = train(model, tr, dev, TrainConfig(task=task, **recipe))
    if res.best_state is not None:
        model.load_state_dict(res.best_state)
    elapsed = cpu_time() - t0
    return model, elapsed, res


@pytest.fixture(scope="module")
def bilstm_task3(corpus42, mel_cache):
    sets = _sets(corpus42, "bilstm", 3, mel_cache)
    model, elapsed, res = _fit("bilstm", 3, sets, BILSTM_RECIPE)
    return model, elapsed, sets[2]


# ---------------------------------------------------------------- criterion 5
def test_c5_bilstm_end_to_end(capsys, bilstm_task3):
    model, elapsed, test = bilstm_task3
    rep = evaluate_model(model, test, 3)
    ok = rep.ger < 0.10 and elapsed < 30 * 60
    record(capsys, 5, ok, f"BiLSTM test GER {rep.ger:.4f} (< 0.10) in {elapsed / 60:.1f} CPU-min (< 30)")
    assert ok


def test_c5_encoder_head_end_to_end(capsys, corpus42):
    sets = _sets(corpus42, "encoder-head", 3, {})
    model, elapsed, _ = _fit("encoder-head", 3, sets, ENCODER_RECIPE)
    rep = evaluate_model(model, sets[2], 3)
    ok = rep.ger < 0.05 and elapsed < 5 * 60
    record(capsys, 5, ok, f"encoder-head test GER {rep.ger:.4f} (< 0.05) in {elapsed / 60:.1f} CPU-min (< 5)")
    assert ok


def test_c5_xsa_end_to_end(capsys, corpus42, mel_cache):
    sets = _sets(corpus42, "xsa", 3, mel_cache)
    model, elapsed, _ = _fit("xsa", 3, sets, XSA_RECIPE)
    rep = evaluate_model(model, sets[2], 3)
    ok = rep.ger < 0.15 and elapsed < 60 * 60
    record(capsys, 5, ok, f"XSA test GER {rep.ger:.4f} (< 0.15) in {elapsed / 60:.1f} CPU-min (< 60)")
    assert ok


# ---------------------------------------------------------------- criterion 6
def test_c6_confusion_structure(capsys, bilstm_task3):
    model, _, test = bilstm_task3
    rep = evaluate_model(model, test, 3)
    conf = rep.confusion
    a, b = CLOSE_PAIR
    within = int(conf[a, b] + conf[b, a])
    cross = [int(conf[i, j]) for i in range(5) for j in range(5) if i != j and {i, j} != {a, b}]
    coarse = evaluate_model(model, test, 3, remap_task=1)
    ok = within > max(cross) and coarse.ger < rep.ger
    record(capsys, 6, ok, f"within-pair confusion {within} vs largest cross cell {max(cross)}; "
                          f"Task3 GER {rep.ger:.4f} -> remapped to Task1 {coarse.ger:.4f}")
    assert ok


# ---------------------------------------------------------------- criterion 8
def test_c8_cascade_initialisation(capsys, corpus42, mel_cache):
    task1 = _sets(corpus42, "bilstm", 1, mel_cache)
    parent, _, _ = _fit("bilstm", 1, task1, dict(CASCADE_RECIPE, epochs=3), CASCADE_MODEL)
    tr, dev, _ = _sets(corpus42, "bilstm", 2, mel_cache)
    state = parent.state_dict()
    copied = True
    cascade_ger, random_ger = [], []
    for seed in (0, 1, 2):
        child = init_cascade(parent, state, 3, seed=seed)
        copied &= all(torch.equal(v, state[k]) for k, v in child.state_dict().items() if not child.is_head(k))
        cfg = TrainConfig(task=2, epochs=1, **dict(CASCADE_RECIPE, seed=seed))
        cascade_ger.append(train(child, tr, dev, cfg).history[0]["dev_ger"])
        fresh = build_model("bilstm", seed=seed, num_classes=3, **CASCADE_MODEL)
        random_ger.append(train(fresh, tr, dev, cfg).history[0]["dev_ger"])
    c, r = float(np.mean(cascade_ger)), float(np.mean(random_ger))
    ok = bool(copied) and c < r
    record(capsys, 8, ok, f"non-head tensors copied bit-exactly: {bool(copied)}; first-epoch dev GER "
                          f"cascade {c:.4f} vs random init {r:.4f} (mean of 3 seeds)")
    assert ok


def test_summary(capsys):
    with capsys.disabled():
        print("\nacceptance summary")
        for n in sorted(RESULTS):
            status = "PASS" if all(ok for ok, _ in RESULTS[n]) else "FAIL"
            print(f"  criterion {n}: {status}")
