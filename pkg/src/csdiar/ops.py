"""Tensor operations used by the diarizers, on top of torch autograd.

Most functions are thin, shape-checked wrappers. The recurrent and attention
pieces are written out explicitly so their masking behaviour is ours rather
than a library default; the models call the fast ``torch.nn.LSTM`` kernel and
the tests pin it against :func:`bidirectional_lstm` here.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import NonFiniteValue, OddDimension, ShapeMismatch

Tensor = torch.Tensor


def _need(cond: bool, a, b, what: str) -> None:
    if not cond:
        raise ShapeMismatch(f"{what}: {tuple(a)} vs {tuple(b)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape[-1] == b.shape[-2], a.shape, b.shape, "matmul inner dimensions")
    return a @ b


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w stored (in, out)."""
    _need(x.shape[-1] == w.shape[0], x.shape, w.shape, "affine input/weight")
    y = x @ w
    if b is not None:
        _need(b.shape == w.shape[1:], b.shape, w.shape, "affine bias/weight")
        y = y + b
    return y


tanh = torch.tanh
sigmoid = torch.sigmoid
relu = torch.relu


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _need(gain.shape == x.shape[-1:] and bias.shape == x.shape[-1:], x.shape, gain.shape, "layer_norm")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def dropout(x: Tensor, p: float, training: bool) -> Tensor:
    return F.dropout(x, p, training) if p > 0 else x


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None, context: Sequence[int]) -> Tensor:
    """TDNN layer over time without padding.

    ``x`` is (batch, time, in); ``kernels`` is (out, in, len(context)) and
    ``context`` lists frame offsets, evenly spaced (e.g. -2, 0, 2). Output
    frames exist only where the full context fits inside the input.
    """
    context = list(context)
    _need(kernels.shape[1] == x.shape[-1] and kernels.shape[2] == len(context),
          x.shape, kernels.shape, "conv1d input/kernel")
    dilation = context[1] - context[0] if len(context) > 1 else 1
    if any(b - a != dilation for a, b in zip(context, context[1:])):
        raise ValueError(f"context offsets {context} are not evenly spaced")
    span = context[-1] - context[0] + 1
    if x.shape[1] < span:
        raise ShapeMismatch(f"conv1d needs {span} frames, got {x.shape[1]}")
    y = F.conv1d(x.transpose(1, 2), kernels, bias, dilation=dilation)
    return y.transpose(1, 2)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step, gates ordered (input, forget, cell, output) as in torch."""
    _need(w_ih.shape[1] == x.shape[-1], x.shape, w_ih.shape, "lstm input weight")
    gates = x @ w_ih.T + h @ w_hh.T + b
    i, f, g, o = gates.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def _run_direction(x: Tensor, lengths: Tensor, w_ih, w_hh, b, reverse: bool) -> Tensor:
    batch, steps, _ = x.shape
    hidden = w_hh.shape[1]
    h = x.new_zeros(batch, hidden)
    c = x.new_zeros(batch, hidden)
    out = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        valid = (t < lengths).unsqueeze(-1)
        h_new, c_new = lstm_cell(x[:, t], h, c, w_ih, w_hh, b)
        # padded steps keep the state untouched, so the reverse pass starts fresh at each sequence end
        h = torch.where(valid, h_new, h)
        c = torch.where(valid, c_new, c)
        out[t] = torch.where(valid, h, torch.zeros_like(h))
    return torch.stack(out, dim=1)


def bidirectional_lstm(x: Tensor, params: Sequence[dict], lengths: Tensor | None = None) -> Tensor:
    """Stacked bidirectional LSTM, reference implementation.

    ``params`` holds one dict per layer with keys ``fw`` and ``bw``, each a
    ``(w_ih, w_hh, bias)`` triple. Returns (batch, time, 2 * hidden) with zeros
    at padded steps.
    """
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
    out = x
    for layer in params:
        fw = _run_direction(out, lengths, *layer["fw"], reverse=False)
        bw = _run_direction(out, lengths, *layer["bw"], reverse=True)
        out = torch.cat([fw, bw], dim=-1)
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v; ``key_mask`` is (batch, keys), True = attend."""
    _need(q.shape[-1] == k.shape[-1], q.shape, k.shape, "attention query/key")
    _need(k.shape[-2] == v.shape[-2], k.shape, v.shape, "attention key/value")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        mask = key_mask[:, None, None, :] if scores.dim() == 4 else key_mask[:, None, :]
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def mean_var_pool(x: Tensor, axis: int = 1, mask: Tensor | None = None) -> Tensor:
    """Concatenate mean and (biased) variance over ``axis``."""
    if mask is None:
        mean = x.mean(dim=axis)
        var = ((x - mean.unsqueeze(axis)) ** 2).mean(dim=axis)
    else:
        w = mask.to(x.dtype).unsqueeze(-1)
        count = w.sum(dim=axis).clamp_min(1.0)
        mean = (x * w).sum(dim=axis) / count
        var = (((x - mean.unsqueeze(axis)) ** 2) * w).sum(dim=axis) / count
    return torch.cat([mean, var], dim=-1)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> Tensor:
    if dim % 2:
        raise OddDimension(f"positional encoding dimension must be even, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rates = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * rates)
    pe[:, 1::2] = torch.cos(pos * rates)
    return pe.to(dtype)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``f`` recomputes the scalar loss from the current parameter values. The
    error per entry is |a - n| / max(|a|, |n|, 1e-8).
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteValue(f"loss is {loss.item()}")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            a = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NonFiniteValue("loss became non-finite under perturbation")
                num = (hi - lo) / (2 * eps)
                ai = a[i].item()
                err = abs(ai - num) / max(abs(ai), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
