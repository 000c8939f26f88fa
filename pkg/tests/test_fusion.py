import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from coresleep import autodiff as ad
from coresleep.backbone import MultiHeadAttention, UnimodalModel
from coresleep.config import ModelConfig
from coresleep.errors import ConfigError, ShapeError
from coresleep.fusion import (
    CoReModel,
    EarlyModel,
    MidLateModel,
    UnimodalWrapper,
    build_model,
    cross_attention,
    infer_with_missing,
)
from helpers import rand_windows


def _model(kind, cfg, seed=0):
    return build_model(ModelConfig(**{**cfg.__dict__, "fusion": kind}), seed).eval()


def test_cross_attention_single_key_and_zero_key_weights(tiny_cfg):
    torch.manual_seed(0)
    mha = MultiHeadAttention(tiny_cfg).double()
    q = torch.randn(5, tiny_cfg.d_model, dtype=torch.float64)
    other = torch.randn(1, tiny_cfg.d_model, dtype=torch.float64)
    out = cross_attention(q, other, mha)
    assert torch.allclose(out, out[0].expand_as(out), atol=1e-14)
    with torch.no_grad():
        mha.w_k.zero_()
    ctx = torch.randn(4, tiny_cfg.d_model, dtype=torch.float64)
    a = cross_attention(q, ctx, mha)
    ctx_scaled_keys_only = ctx.clone()
    # with W^K = 0 the logits ignore the keys entirely
    assert torch.allclose(mha.attention_logits(q, ctx), mha.attention_logits(q, 3 * ctx_scaled_keys_only))
    assert torch.allclose(a, a[0].expand_as(a), atol=1e-12)
    with pytest.raises(ShapeError):
        cross_attention(q, ctx[:0], mha)


def test_cross_attention_gradient(tiny_cfg):
    torch.manual_seed(1)
    mha = MultiHeadAttention(tiny_cfg).double()
    q = torch.nn.Parameter(torch.randn(4, tiny_cfg.d_model, dtype=torch.float64))
    ctx = torch.nn.Parameter(torch.randn(3, tiny_cfg.d_model, dtype=torch.float64))
    f = lambda: (cross_attention(q, ctx, mha) ** 2).sum()
    assert ad.finite_diff_check(f, [q, ctx, *mha.parameters()]) < 1e-4


@pytest.mark.parametrize("kind", ["core", "midlate", "early"])
def test_output_shapes_and_probabilities(kind):
    cfg = ModelConfig.reduced(dropout=0.0)
    model = _model(kind, cfg)
    eeg, eog = rand_windows(cfg, 2, 21, 1), rand_windows(cfg, 2, 21, 2)
    with torch.no_grad():
        out = model(eeg=eeg, eog=eog)
    for key in ("logits_mm", "logits_eeg", "logits_eog"):
        assert out[key].shape == (2, 21, 5)
        assert (ad.softmax(out[key]).sum(-1) - 1).abs().max() < 1e-12
    assert out["outer_eeg"].shape == out["outer_eog"].shape == (2, 21, 16)
    with pytest.raises(ShapeError):
        model(eeg=eeg, eog=eog[:, :20])


def test_core_ca_ablation_reduces_to_unimodal_branches(tiny_cfg):
    model = _model("core", tiny_cfg)
    with torch.no_grad():
        for g in model.grounded.values():
            for layer in [*g.inner_layers, *g.outer_layers]:
                layer.cross.w_o.zero_()
                layer.norm_cross.gamma.fill_(1.0)
                layer.norm_cross.beta.zero_()
    eeg, eog = rand_windows(tiny_cfg, 2, 3, 1), rand_windows(tiny_cfg, 2, 3, 2)
    with torch.no_grad():
        out = model(eeg=eeg, eog=eog)
        # with W^O = 0 the CA sublayer adds nothing; its norm re-normalizes an already normalized vector
        rep_eeg = model.grounded["eeg"](eeg, *_states(model, "eog", eog))
        rep_eog = model.grounded["eog"](eog, *_states(model, "eeg", eeg))
        eog_changed = model.grounded["eeg"](eeg, *_states(model, "eog", eog * 2))
    assert torch.allclose(eog_changed, rep_eeg, atol=1e-6)
    assert torch.allclose(model.heads.mm(rep_eeg + rep_eog), out["logits_mm"], atol=1e-12)
    assert torch.allclose(rep_eeg, out["outer_eeg"], atol=1e-6)


def _states(model, m, x):
    inner, outer = model.unimodal[m](x)
    return inner, outer


def test_core_weight_sharing_and_disjoint_cross_attention(tiny_cfg):
    model = _model("core", tiny_cfg)
    eeg, eog = rand_windows(tiny_cfg, 1, 3, 1), rand_windows(tiny_cfg, 1, 3, 2)
    g = model.grounded["eeg"]
    assert g.inner_layers[0].attn is model.unimodal["eeg"].inner.layers[0].attn
    assert g.outer_layers[-1].ff is model.unimodal["eeg"].outer.layers[-1].ff
    with torch.no_grad():
        before = g(eeg, *_states(model, "eog", eog))
        model.unimodal["eeg"].inner.layers[0].attn.w_q.add_(0.05)
        after = g(eeg, *_states(model, "eog", eog))
        w1 = model.unimodal["eeg"].outer.layers[0].ff.w1
        w1.add_(0.05 * torch.randn_like(w1))
        after_ff = g(eeg, *_states(model, "eog", eog))
    assert (before - after).abs().max() > 1e-6 and (after - after_ff).abs().max() > 1e-6
    sa = {p.data_ptr() for p in model.unimodal.parameters()}
    ca = [p for m in model.grounded.values() for l in [*m.inner_layers, *m.outer_layers] for p in l.cross.parameters()]
    assert ca and not {p.data_ptr() for p in ca} & sa


def test_core_gradient_step_on_unimodal_loss_moves_grounded_branch(tiny_cfg):
    model = _model("core", tiny_cfg)
    eeg, eog = rand_windows(tiny_cfg, 1, 3, 1), rand_windows(tiny_cfg, 1, 3, 2)
    shared = model.unimodal["eeg"].inner.layers[0].attn.w_v
    loss = ad.cross_entropy(model(eeg=eeg)["logits_eeg"].reshape(-1, 5), torch.tensor([0, 1, 2]))
    ad.backward(loss)
    g = model.grounded["eeg"].inner_layers[0].attn.w_v
    assert g is shared and g.grad is not None and g.grad.abs().sum() > 0


@pytest.mark.parametrize("kind", ["core", "midlate"])
def test_single_modality_inference_equals_standalone_unimodal(kind, tiny_cfg):
    model = _model(kind, tiny_cfg)
    for m in ("eeg", "eog"):
        standalone = UnimodalModel(tiny_cfg).double().eval()
        standalone.load_state_dict(model.unimodal_model(m).state_dict())
        for seed in range(10):
            x = rand_windows(tiny_cfg, 2, 3, seed)
            with torch.no_grad():
                got = infer_with_missing(model, {m}, **{m: x})
                ref = standalone(x)["logits"]
            assert torch.equal(got, ref)


def test_infer_with_missing_routing(tiny_cfg):
    model = _model("core", tiny_cfg)
    eeg, eog = rand_windows(tiny_cfg, 1, 3, 1), rand_windows(tiny_cfg, 1, 3, 2)
    with torch.no_grad():
        assert torch.equal(infer_with_missing(model, {"eeg", "eog"}, eeg=eeg, eog=eog), model(eeg=eeg, eog=eog)["logits_mm"])
    with pytest.raises(ConfigError):
        infer_with_missing(model, set(), eeg=eeg)
    with pytest.raises(ShapeError):
        infer_with_missing(model, {"eog"}, eeg=eeg)


def test_early_joint_length_embeddings_and_eog_invariance(tiny_cfg):
    model = _model("early", tiny_cfg)
    assert model.inner.max_len == 2 * tiny_cfg.n_frames + 1
    full = EarlyModel(ModelConfig.reduced(fusion="early"))
    assert full.inner.max_len == 59
    eeg, eog = rand_windows(tiny_cfg, 1, 3, 1), rand_windows(tiny_cfg, 1, 3, 2)
    with torch.no_grad():
        base = model(eeg=eeg, eog=eog)
        e, o = model.modality_emb["eeg"].clone(), model.modality_emb["eog"].clone()
        model.modality_emb["eeg"].copy_(o)
        model.modality_emb["eog"].copy_(e)
        swapped = model(eeg=eeg, eog=eog)
        model.modality_emb["eeg"].copy_(e)
        model.modality_emb["eog"].copy_(o)
        other = model(eeg=eeg, eog=eog * 3)
        single = infer_with_missing(model, {"eog"}, eog=eog)
    assert (base["logits_mm"] - swapped["logits_mm"]).abs().max() > 1e-9
    assert torch.equal(base["logits_eeg"], other["logits_eeg"])
    assert torch.equal(single, base["logits_eog"])


def test_midlate_sum_symmetry_zero_branch_and_gradients(tiny_cfg):
    model = _model("midlate", tiny_cfg)
    eeg, eog = rand_windows(tiny_cfg, 1, 3, 1), rand_windows(tiny_cfg, 1, 3, 2)
    out = model(eeg=eeg, eog=eog)
    assert torch.equal(model.heads.mm(out["outer_eog"] + out["outer_eeg"]), out["logits_mm"])
    with torch.no_grad():
        zero_eog = model(eeg=eeg, eog=torch.zeros_like(eog))
        assert (zero_eog["logits_mm"] - zero_eog["logits_eeg"]).abs().max() > 1e-9
        assert torch.equal(model.heads.mm(out["outer_eeg"] + 0.0 * out["outer_eog"]), model.heads.mm(out["outer_eeg"]))
    ad.backward(out["logits_mm"].pow(2).sum())
    for m in ("eeg", "eog"):
        assert model.unimodal[m].w_in.grad.abs().sum() > 0


@given(st.sampled_from(["core", "midlate", "early", "unimodal"]), st.integers(1, 3), st.integers(0, 10**6))
def test_all_variants_emit_normalized_probabilities(kind, l, seed):
    cfg = ModelConfig.reduced(n_frames=5, n_features=6, max_windows=3, dropout=0.0)
    model = _model(kind, cfg, seed % 7)
    with torch.no_grad():
        out = model(eeg=rand_windows(cfg, 1, l, seed), eog=rand_windows(cfg, 1, l, seed + 1))
    assert out["logits_mm"].shape == (1, l, 5)
    assert (ad.softmax(out["logits_mm"]).sum(-1) - 1).abs().max() < 1e-12


def test_build_model_is_seeded_and_shared_heads(tiny_cfg):
    a, b = _model("core", tiny_cfg, 3), _model("core", tiny_cfg, 3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    shared = build_model(ModelConfig(**{**tiny_cfg.__dict__, "share_predictors": True}))
    assert shared.heads.mm is shared.heads.eeg is shared.heads.eog


def test_unimodal_wrapper_refuses_wrong_modality(tiny_cfg):
    model = _model("unimodal", tiny_cfg)
    assert isinstance(model, UnimodalWrapper)
    with pytest.raises(ConfigError):
        infer_with_missing(model, {"eog"}, eog=rand_windows(tiny_cfg, 1, 3))
