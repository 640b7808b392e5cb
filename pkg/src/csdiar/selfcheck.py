"""Built-in consistency checks run by ``csdiar selfcheck``.

Every check returns a :class:`CheckResult`. Gradient checks run in float64 on
tiny model configurations; parameter-count checks use the default configs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import ops
from .losses import ce_label_smoothing, dc_loss, dc_loss_naive, model_loss
from .metrics import aggregate, confusion_matrix, score_utterance
from .models import build_model, param_count

GRAD_TOL = 1e-4
TINY_CONFIGS = {
    "bilstm": dict(H=3, num_classes=3),
    "xsa": dict(H=4, M_blocks=1, segment_frames=4, tdnn_spec=((5, (-1, 0, 1)), (6, (0,))),
                xvector_hidden=5, n_heads=2, ff_dim=8, dropout=0.0, num_classes=3),
    "encoder-head": dict(embed_dim=6, num_classes=3),
}
# one ulp of the loss over 2*eps bounds the smallest gradient entry that can be
# resolved; the smooth BiLSTM tolerates a larger step than XSA with its ReLU kinks
GRAD_EPS = {"bilstm": 1e-4, "xsa": 1e-5, "encoder-head": 1e-5}
GRAD_PARAM_SCALE = 0.5
REFERENCE_PARAMS = {"bilstm": 9e6, "xsa": 12e6}


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    grad_error: float | None = None

    def line(self) -> str:
        return f"{'ok  ' if self.ok else 'FAIL'} {self.name}: {self.detail}"


class _SkewedBackward(torch.autograd.Function):
    """Identity forward, backward scaled by 1.1; used to corrupt a gradient on purpose."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 1.1 * g


def faulty_dc_loss(embeddings, labels, *args, **kwargs):
    return dc_loss(_SkewedBackward.apply(embeddings), labels, *args, **kwargs)


def _grad(name: str, f: Callable[[], torch.Tensor], params, eps: float = 1e-6) -> CheckResult:
    err = ops.grad_check(f, params, eps)
    return CheckResult(name, err < GRAD_TOL, f"max rel err {err:.2e}", err)


def full_model_problem(kind: str, seed: int = 0, dc_fn=dc_loss):
    """Float64 tiny model at a random parameter point with a 12-frame input.

    Parameters are redrawn from N(0, GRAD_PARAM_SCALE^2): at init the biases are
    zero and deep layers carry almost no signal, so many gradient entries sit
    below what central differences can resolve.
    """
    g = torch.Generator().manual_seed(seed)
    dbl = dict(dtype=torch.float64)
    cfg = TINY_CONFIGS[kind]
    model = build_model(kind, **cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(GRAD_PARAM_SCALE * torch.randn(p.shape, generator=g, **dbl))
    xb = torch.randn(1, 12, cfg.get("embed_dim", 23), generator=g, **dbl)
    T = model.output_lengths(torch.tensor([12])).item()
    yb = torch.randint(0, 3, (1, T), generator=g)

    def loss():
        o = model(xb)
        if kind == "bilstm" and dc_fn is not dc_loss:
            ce = ce_label_smoothing(o.logits_main, yb, 0.1)
            return ce + 0.5 * dc_fn(o.embeddings, yb, num_classes=3)
        return model_loss(kind, o, yb).total

    return loss, list(model.parameters())


def grad_checks(dc_fn=dc_loss) -> list[CheckResult]:
    g = torch.Generator().manual_seed(0)
    dbl = dict(dtype=torch.float64)
    out = []

    def leaf(*shape):
        return torch.randn(*shape, generator=g, **dbl).requires_grad_()

    x, w, b = leaf(4, 5), leaf(5, 3), leaf(3)
    out.append(_grad("grad affine+tanh", lambda: ops.tanh(ops.affine(x, w, b)).sum(), [x, w, b]))
    out.append(_grad("grad log_softmax", lambda: (ops.log_softmax(x) * w.T[0]).sum(), [x]))
    gain, bias = leaf(5), leaf(5)
    out.append(_grad("grad layer_norm", lambda: (ops.layer_norm(x, gain, bias) ** 2).sum(), [x, gain, bias]))
    q, k, v = leaf(2, 4, 3), leaf(2, 4, 3), leaf(2, 4, 3)
    out.append(_grad("grad attention", lambda: ops.scaled_dot_attention(q, k, v).pow(2).sum(), [q, k, v]))

    emb = torch.randn(2, 7, 4, generator=g, **dbl)
    emb = (emb / emb.norm(dim=-1, keepdim=True)).requires_grad_()
    lab = torch.randint(0, 3, (2, 7), generator=g)
    out.append(_grad("grad dc_loss", lambda: dc_fn(emb, lab, num_classes=3), [emb]))

    for kind in TINY_CONFIGS:
        loss, params = full_model_problem(kind, seed=0, dc_fn=dc_fn)
        out.append(_grad(f"grad full {kind} loss", loss, params, GRAD_EPS[kind]))
    return out


def loss_oracles() -> list[CheckResult]:
    res = []
    v = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    val = float(dc_loss(v, torch.tensor([0, 1]), num_classes=2))
    res.append(CheckResult("dc hand case", abs(val - 0.5) < 1e-9, f"{val:.9f} (expect 0.5)"))
    val = float(ce_label_smoothing(torch.zeros(1, 3, 2, dtype=torch.float64), torch.tensor([[0, 1, 0]]), 0.1))
    res.append(CheckResult("ce uniform logits", abs(val - math.log(2)) < 1e-9, f"{val:.9f} (expect ln 2)"))
    g = torch.Generator().manual_seed(3)
    worst = 0.0
    for _ in range(20):
        T, H, C = (int(n) for n in torch.randint(2, 9, (3,), generator=g))
        e = torch.randn(T, H, generator=g, dtype=torch.float64)
        e = e / e.norm(dim=-1, keepdim=True)
        y = torch.randint(0, C, (T,), generator=g)
        worst = max(worst, abs(float(dc_loss(e, y, num_classes=C)) - float(dc_loss_naive(e, y, C))))
    res.append(CheckResult("dc expanded vs naive", worst < 1e-6, f"max abs diff {worst:.1e}"))
    return res


def metric_oracles() -> list[CheckResult]:
    res = []
    a = score_utterance("a", np.r_[np.ones(5, int), np.zeros(5, int)], np.zeros(10, int))
    b = score_utterance("b", np.zeros(2, int), np.zeros(2, int))
    ger, mer = aggregate([a, b])
    res.append(CheckResult("ger/mer worked case", ger == 5 / 12 and mer == 0.25, f"GER {ger:.6f} MER {mer:.6f}"))
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(50):
        t, p = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
        conf = confusion_matrix([(t, p)], 3)
        ok &= int(conf.sum() - np.trace(conf)) == int(np.sum(t != p))
    res.append(CheckResult("confusion off-diagonal == errors", bool(ok), "50 random cases"))
    return res


def param_checks() -> list[CheckResult]:
    res = []
    for kind, ref in REFERENCE_PARAMS.items():
        n = param_count(build_model(kind, num_classes=3))
        ok = abs(n - ref) <= 0.25 * ref
        res.append(CheckResult(f"{kind} param count", ok, f"{n:,} vs reference {ref:,.0f} (±25%)"))
    return res


def run_selfcheck(dc_fn=dc_loss) -> list[CheckResult]:
    return grad_checks(dc_fn) + loss_oracles() + metric_oracles() + param_checks()
