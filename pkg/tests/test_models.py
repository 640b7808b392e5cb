import numpy as np
import pytest
import torch

from csdiar import ops
from csdiar.errors import ArchitectureMismatch, ShapeMismatch, TooShort
from csdiar.losses import encoder_head_loss
from csdiar.models import build_model, init_cascade, param_count
from csdiar.selfcheck import GRAD_EPS, full_model_problem

TINY_XSA = dict(H=4, M_blocks=2, segment_frames=4, tdnn_spec=((5, (-1, 0, 1)), (6, (0,))),
                xvector_hidden=5, n_heads=2, ff_dim=8, dropout=0.0)


def test_bilstm_shapes_and_unit_embeddings():
    model = build_model("bilstm", seed=0, num_classes=3).eval()
    out = model(torch.randn(1, 50, 23))
    assert out.logits_main.shape == (1, 50, 3)
    assert out.embeddings.shape == (1, 50, 256)
    assert torch.allclose(out.embeddings.norm(dim=-1), torch.ones(1, 50), atol=1e-5)


def test_bilstm_eval_deterministic():
    model = build_model("bilstm", seed=0, H=8, num_classes=3).eval()
    x = torch.randn(2, 20, 23)
    assert torch.equal(model(x).logits_main, model(x).logits_main)


def test_bilstm_rejects_wrong_dim():
    with pytest.raises(ShapeMismatch):
        build_model("bilstm", H=4)(torch.randn(1, 5, 20))


@pytest.mark.parametrize("kind,cfg,rate", [
    ("bilstm", dict(H=4), lambda t: t),
    ("xsa", dict(TINY_XSA, segment_frames=19), lambda t: t // 19),
    ("encoder-head", dict(embed_dim=23), lambda t: t),
])
def test_output_counts_for_random_lengths(kind, cfg, rate):
    model = build_model(kind, seed=0, **cfg).eval()
    rng = np.random.default_rng(0)
    lengths = torch.tensor(sorted(rng.integers(19, 120, size=4).tolist(), reverse=True))
    out = model(torch.randn(4, int(lengths.max()), 23), lengths)
    assert out.mask.sum(dim=1).tolist() == [rate(int(t)) for t in lengths]


def test_xsa_segment_count_and_too_short():
    model = build_model("xsa", seed=0, **dict(TINY_XSA, segment_frames=19)).eval()
    out = model(torch.randn(1, 95, 23))
    assert out.logits_main.shape[1] == 5 and out.logits_aux.shape[1] == 5
    with pytest.raises(TooShort):
        model(torch.randn(1, 18, 23))


def test_xsa_default_forward_shape():
    model = build_model("xsa", seed=0).eval()
    out = model(torch.randn(1, 95, 23))
    assert out.logits_main.shape == (1, 5, 3)


def test_xsa_aux_head_is_per_segment():
    model = build_model("xsa", seed=0, **TINY_XSA).eval()
    x = torch.randn(1, 12, 23)
    swapped = torch.cat([x[:, 4:8], x[:, 0:4], x[:, 8:12]], dim=1)
    a = model(x).logits_aux[0]
    b = model(swapped).logits_aux[0]
    assert torch.allclose(b, a[[1, 0, 2]], atol=1e-6)


def test_xsa_padding_invariance():
    model = build_model("xsa", seed=0, **TINY_XSA).eval()
    x = torch.randn(1, 12, 23)
    base = model(x).logits_main[0]
    for extra in (4, 9, 20):
        padded = torch.cat([x, torch.zeros(1, extra, 23)], dim=1)
        other = torch.randn(1, 12 + extra, 23)
        batch = torch.cat([padded, other])
        out = model(batch, torch.tensor([12, 12 + extra])).logits_main[0, :3]
        assert torch.allclose(out, base, atol=1e-5)


def test_bilstm_padding_invariance():
    model = build_model("bilstm", seed=0, H=6).eval()
    x = torch.randn(1, 9, 23)
    base = model(x).logits_main[0]
    batch = torch.cat([torch.cat([x, torch.zeros(1, 5, 23)], 1), torch.randn(1, 14, 23)])
    out = model(batch, torch.tensor([9, 14])).logits_main[0, :9]
    assert torch.allclose(out, base, atol=1e-5)


def test_encoder_head_zero_weights_uniform():
    model = build_model("encoder-head", embed_dim=768, num_classes=5)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    out = model(torch.randn(1, 100, 768))
    assert out.logits_main.shape == (1, 100, 5)
    assert torch.allclose(torch.softmax(out.logits_main, -1), torch.full((1, 100, 5), 0.2))


def test_param_counts():
    assert param_count(build_model("encoder-head", embed_dim=768, num_classes=5)) == 768 * 5 + 5
    # stage LSTMs carry torch's two bias vectors per gate block
    H, d, C = 4, 23, 3
    lstm = lambda i: 2 * (4 * H * (i + H) + 8 * H)
    expect = lstm(d) + lstm(2 * H) + 3 * lstm(2 * H) + (2 * H * H + H) + (2 * H * C + C)
    assert param_count(build_model("bilstm", H=H, N_stage1=2, M_stage2=3, num_classes=C)) == expect


def test_encoder_head_fits_separable_clusters():
    rng = np.random.default_rng(0)
    D, C = 12, 4
    means = rng.standard_normal((C, D)) * 3
    y = rng.integers(0, C, 400)
    x = means[y] + 0.3 * rng.standard_normal((400, D))
    # oracle: the nearest-mean rule is a linear classifier; perfect accuracy proves separability
    scores = x @ means.T - 0.5 * (means**2).sum(1)
    assert np.all(scores.argmax(1) == y)

    torch.manual_seed(0)
    model = build_model("encoder-head", embed_dim=D, num_classes=C)
    opt = torch.optim.Adam(model.parameters(), lr=0.05)
    xt, yt = torch.tensor(x, dtype=torch.float32)[None], torch.tensor(y)[None]
    for _ in range(300):
        opt.zero_grad()
        encoder_head_loss(model(xt), yt, smoothing=0.0).total.backward()
        opt.step()
    assert torch.equal(model(xt).logits_main.argmax(-1), yt)


@pytest.mark.parametrize("kind", ["bilstm", "xsa", "encoder-head"])
def test_full_model_grad_check(kind):
    loss, params = full_model_problem(kind, seed=2)
    assert ops.grad_check(loss, params, eps=GRAD_EPS[kind]) < 1e-4


def test_cascade_copies_body():
    src = build_model("bilstm", seed=1, H=6, num_classes=2)
    dst = init_cascade(src, src.state_dict(), 3, seed=5)
    assert dst.config.num_classes == 3
    for name, t in dst.state_dict().items():
        if name.startswith("head."):
            assert t.shape[0] == 3
        else:
            assert torch.equal(t, src.state_dict()[name])


def test_cascade_same_classes_is_identity():
    src = build_model("xsa", seed=1, **TINY_XSA)
    dst = init_cascade(src, src.state_dict(), 3)
    for name, t in dst.state_dict().items():
        assert torch.equal(t, src.state_dict()[name])


def test_cascade_rejects_other_width():
    src = build_model("bilstm", seed=1, H=6, num_classes=2)
    other = build_model("bilstm", seed=1, H=8, num_classes=2)
    with pytest.raises(ArchitectureMismatch):
        init_cascade(other, src.state_dict(), 3)


def test_bilstm_stack_matches_packed_lstm():
    from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

    from csdiar.models import BiLSTMStack

    torch.manual_seed(0)
    ref = torch.nn.LSTM(5, 6, 2, batch_first=True, bidirectional=True).double()
    stack = BiLSTMStack(5, 6, 2).double()
    with torch.no_grad():
        for layer in range(2):
            for direction, suffix in ((stack.fw, ""), (stack.bw, "_reverse")):
                for name in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"):
                    getattr(direction[layer], f"{name}_l0").copy_(getattr(ref, f"{name}_l{layer}{suffix}"))
    x = torch.randn(3, 7, 5, dtype=torch.float64)
    lengths = torch.tensor([7, 4, 2])
    packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
    expect, _ = pad_packed_sequence(ref(packed)[0], batch_first=True, total_length=7)
    assert torch.allclose(stack(x, lengths), expect, atol=1e-12)
