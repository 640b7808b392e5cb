"""Diarizer architectures.

* :class:`BiLSTMDiarizer` - two BiLSTM stages over log-mel frames, with a
  unit-norm embedding branch on the first stage for the deep-clustering term.
* :class:`XSADiarizer` - TDNN x-vectors over 19-frame segments, then a
  transformer encoder over the x-vector sequence. A second head on the raw
  x-vectors is used only as an auxiliary training target.
* :class:`EncoderHeadDiarizer` - a single linear layer over precomputed 20 ms
  contextual embeddings from a pretrained speech encoder.

All models take a zero-padded batch ``(B, T, d)`` plus the true lengths and
return per-segment logits at their own output rate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import ClassVar

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ops
from .errors import ArchitectureMismatch, ShapeMismatch, TooShort

DEFAULT_TDNN = (
    (512, (-2, -1, 0, 1, 2)),
    (512, (-2, 0, 2)),
    (512, (-3, 0, 3)),
    (512, (0,)),
    (1500, (0,)),
)


@dataclass(frozen=True)
class BiLSTMConfig:
    H: int = 256
    N_stage1: int = 2
    M_stage2: int = 3
    input_dim: int = 23
    num_classes: int = 3


@dataclass(frozen=True)
class XSAConfig:
    H: int = 256
    M_blocks: int = 4
    segment_frames: int = 19
    input_dim: int = 23
    num_classes: int = 3
    tdnn_spec: tuple = DEFAULT_TDNN
    xvector_hidden: int = 512
    n_heads: int = 4
    ff_dim: int = 2048
    dropout: float = 0.1

    def __post_init__(self):
        # JSON round trips turn tuples into lists
        spec = tuple((int(w), tuple(int(c) for c in ctx)) for w, ctx in self.tdnn_spec)
        object.__setattr__(self, "tdnn_spec", spec)


@dataclass(frozen=True)
class EncoderHeadConfig:
    embed_dim: int = 768
    num_classes: int = 3
    framerate_ms: int = 20
    downsample_factor: int = 320

    def __post_init__(self):
        if self.downsample_factor != 320:
            raise ValueError("encoder embeddings are fixed at 320 samples (20 ms) per frame")


@dataclass
class ModelOutput:
    logits_main: torch.Tensor  # (B, S, C)
    mask: torch.Tensor  # (B, S) valid output positions
    logits_aux: torch.Tensor | None = None
    embeddings: torch.Tensor | None = None  # (B, S, H), unit rows


def _xavier(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LSTM):
            for name, p in m.named_parameters():
                if name.startswith("weight_ih"):
                    nn.init.xavier_uniform_(p)
                elif name.startswith("weight_hh"):
                    nn.init.orthogonal_(p)
                else:
                    nn.init.zeros_(p)
                    if name.startswith("bias_ih"):
                        # forget gate (second block) starts open so stacked layers don't shrink the signal
                        nn.init.ones_(p[m.hidden_size:2 * m.hidden_size])


class Diarizer(nn.Module):
    kind: ClassVar[str]
    input_kind: ClassVar[str] = "mel"
    head_prefixes: ClassVar[tuple[str, ...]] = ("head.",)

    def __init__(self, config):
        super().__init__()
        self.config = config

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return lengths

    def _check_input(self, x: torch.Tensor, dim: int) -> None:
        if x.dim() != 3 or x.shape[-1] != dim:
            raise ShapeMismatch(f"expected (batch, time, {dim}) input, got {tuple(x.shape)}")

    def is_head(self, name: str) -> bool:
        return name.startswith(self.head_prefixes)


def reverse_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence in ``(B, T, d)`` within its own length; padding stays in place."""
    t = torch.arange(x.shape[1])[None, :]
    idx = torch.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return x.gather(1, idx[:, :, None].expand(-1, -1, x.shape[2]))


class BiLSTMStack(nn.Module):
    """Stacked bidirectional LSTM over zero-padded batches.

    Each direction of each layer is a single-layer ``nn.LSTM`` run on the padded
    tensor; the backward direction sees every sequence reversed within its
    length, so padding never reaches a valid output (equivalent to a packed
    bidirectional LSTM, but avoids the slow packed backward pass on CPU).
    """

    def __init__(self, input_dim: int, hidden: int, num_layers: int):
        super().__init__()
        self.fw = nn.ModuleList()
        self.bw = nn.ModuleList()
        for i in range(num_layers):
            d = input_dim if i == 0 else 2 * hidden
            self.fw.append(nn.LSTM(d, hidden, batch_first=True))
            self.bw.append(nn.LSTM(d, hidden, batch_first=True))

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        for fw, bw in zip(self.fw, self.bw):
            a, _ = fw(x)
            b, _ = bw(reverse_padded(x, lengths))
            x = torch.cat([a, reverse_padded(b, lengths)], dim=-1)
        mask = torch.arange(x.shape[1])[None, :] < lengths[:, None]
        return x * mask[:, :, None].to(x.dtype)


class BiLSTMDiarizer(Diarizer):
    kind = "bilstm"

    def __init__(self, config: BiLSTMConfig = BiLSTMConfig()):
        super().__init__(config)
        H = config.H
        self.stage1 = BiLSTMStack(config.input_dim, H, config.N_stage1)
        self.embed = nn.Linear(2 * H, H)
        self.stage2 = BiLSTMStack(2 * H, H, config.M_stage2)
        self.head = nn.Linear(2 * H, config.num_classes)
        _xavier(self)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> ModelOutput:
        self._check_input(x, self.config.input_dim)
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        b = self.stage1(x, lengths)
        emb = F.normalize(self.embed(b), dim=-1)
        logits = self.head(self.stage2(b, lengths))
        mask = torch.arange(x.shape[1])[None, :] < lengths[:, None]
        return ModelOutput(logits, mask, embeddings=emb)


class TransformerBlock(nn.Module):
    """Pre-norm encoder block with key padding mask."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int, dropout: float):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"H={dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        # no key bias: it shifts every score in a row equally, which softmax ignores
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        h = self.norm1(x)
        zero = torch.zeros_like(self.q_bias)
        qkv = self.qkv(h) + torch.cat([self.q_bias, zero, self.v_bias])
        q, k, v = qkv.view(B, S, 3, self.n_heads, D // self.n_heads).permute(2, 0, 3, 1, 4)
        att = ops.scaled_dot_attention(q, k, v, mask).transpose(1, 2).reshape(B, S, D)
        x = x + ops.dropout(self.proj(att), self.dropout, self.training)
        h = self.ff2(ops.dropout(ops.gelu(self.ff1(self.norm2(x))), self.dropout, self.training))
        return x + ops.dropout(h, self.dropout, self.training)


class XSADiarizer(Diarizer):
    kind = "xsa"
    head_prefixes = ("head.", "aux_head.")

    def __init__(self, config: XSAConfig = XSAConfig()):
        super().__init__(config)
        c = config
        self.tdnn_contexts = [ctx for _, ctx in c.tdnn_spec]
        span = 1 + sum(ctx[-1] - ctx[0] for ctx in self.tdnn_contexts)
        if span > c.segment_frames:
            raise ValueError(f"TDNN context spans {span} frames, more than a {c.segment_frames}-frame segment")
        self.tdnn_weights = nn.ParameterList()
        self.tdnn_biases = nn.ParameterList()
        self.tdnn_norms = nn.ModuleList()
        width_in = c.input_dim
        for width, ctx in c.tdnn_spec:
            w = torch.empty(width, width_in, len(ctx))
            fan_in, fan_out = width_in * len(ctx), width * len(ctx)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            nn.init.uniform_(w, -bound, bound)
            self.tdnn_weights.append(nn.Parameter(w))
            self.tdnn_biases.append(nn.Parameter(torch.zeros(width)))
            self.tdnn_norms.append(nn.LayerNorm(width))
            width_in = width
        pooled = 2 * width_in
        if c.xvector_hidden:
            self.xvector = nn.Sequential(nn.Linear(pooled, c.xvector_hidden), nn.ReLU(), nn.Linear(c.xvector_hidden, c.H))
        else:
            self.xvector = nn.Linear(pooled, c.H)
        self.aux_head = nn.Linear(c.H, c.num_classes)
        self.blocks = nn.ModuleList(TransformerBlock(c.H, c.n_heads, c.ff_dim, c.dropout) for _ in range(c.M_blocks))
        self.final_norm = nn.LayerNorm(c.H)
        self.head = nn.Linear(c.H, c.num_classes)
        _xavier(self)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return lengths // self.config.segment_frames

    def xvectors(self, segments: torch.Tensor) -> torch.Tensor:
        """(n, segment_frames, d) -> (n, H)."""
        h = segments
        for w, b, norm, ctx in zip(self.tdnn_weights, self.tdnn_biases, self.tdnn_norms, self.tdnn_contexts):
            h = norm(ops.relu(ops.conv1d(h, w, b, ctx)))
        return self.xvector(ops.mean_var_pool(h, axis=1))

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> ModelOutput:
        c = self.config
        self._check_input(x, c.input_dim)
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        seg_lengths = self.output_lengths(lengths)
        if int(seg_lengths.min()) < 1:
            raise TooShort(f"XSA needs at least {c.segment_frames} frames per utterance")
        B = x.shape[0]
        S = int(seg_lengths.max())
        segs = x[:, : S * c.segment_frames].reshape(B * S, c.segment_frames, c.input_dim)
        xv = self.xvectors(segs).view(B, S, c.H)
        mask = torch.arange(S)[None, :] < seg_lengths[:, None]

        h = xv + ops.sinusoidal_positions(S, c.H, dtype=xv.dtype)
        for block in self.blocks:
            h = block(h, mask)
        logits = self.head(self.final_norm(h))
        return ModelOutput(logits, mask, logits_aux=self.aux_head(xv))


class EncoderHeadDiarizer(Diarizer):
    kind = "encoder-head"
    input_kind = "emb"

    def __init__(self, config: EncoderHeadConfig = EncoderHeadConfig()):
        super().__init__(config)
        self.head = nn.Linear(config.embed_dim, config.num_classes)
        _xavier(self)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> ModelOutput:
        self._check_input(x, self.config.embed_dim)
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        mask = torch.arange(x.shape[1])[None, :] < lengths[:, None]
        return ModelOutput(self.head(x), mask)


MODELS = {cls.kind: (cls, cfg) for cls, cfg in (
    (BiLSTMDiarizer, BiLSTMConfig),
    (XSADiarizer, XSAConfig),
    (EncoderHeadDiarizer, EncoderHeadConfig),
)}


def build_model(kind: str, seed: int | None = None, **config) -> Diarizer:
    try:
        cls, cfg_cls = MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown model {kind!r}; expected one of {sorted(MODELS)}") from None
    if seed is not None:
        torch.manual_seed(seed)
    return cls(cfg_cls(**config))


def model_spec(model: Diarizer) -> dict:
    return {"kind": model.kind, "config": asdict(model.config)}


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_cascade(model: Diarizer, state: dict[str, torch.Tensor], new_num_classes: int,
                 seed: int | None = None) -> Diarizer:
    """Model for ``new_num_classes`` carrying every non-head tensor from ``state``.

    ``state`` is a trained model's state dict (e.g. from a checkpoint) for the
    same architecture as ``model``; only the classification heads may differ.
    """
    if seed is not None:
        torch.manual_seed(seed)
    target = type(model)(replace(model.config, num_classes=new_num_classes))
    own = target.state_dict()
    body = {k for k in own if not target.is_head(k)}
    theirs = {k for k in state if not target.is_head(k)}
    if body != theirs:
        diff = sorted(body.symmetric_difference(theirs))
        raise ArchitectureMismatch(f"parameter names differ: {diff[:5]}")
    for k in body:
        if own[k].shape != state[k].shape:
            raise ArchitectureMismatch(f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(own[k].shape)}")
    with torch.no_grad():
        for k in body:
            own[k].copy_(state[k])
        if new_num_classes == model.config.num_classes:
            for k in own:
                if target.is_head(k):
                    if k not in state or state[k].shape != own[k].shape:
                        raise ArchitectureMismatch(f"{k}: head missing or reshaped in checkpoint")
                    own[k].copy_(state[k])
    return target
