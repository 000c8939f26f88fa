import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from coresleep.config import LossConfig, ModelConfig, RunConfig, TrainConfig
from coresleep.datapipe import SynthSpec, assemble_batches, preprocess_recording, synth_generate
from coresleep.datapipe.batching import Batch
from coresleep.errors import CheckpointError, ConfigError, NonFiniteError
from coresleep.fusion import build_model
from coresleep.training import (
    TrainState,
    batch_loss,
    early_stop,
    init_state,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def seqs():
    recs = synth_generate(SynthSpec(seed=11), 6, 60)
    return [preprocess_recording(r) for r in recs]


def _cfg(steps=10, lr=1e-3, ms=True, al=True, seed=0, **kw):
    return RunConfig(
        ModelConfig.reduced(**kw),
        LossConfig(ms_enabled=ms, al_enabled=al),
        TrainConfig(base_lr=lr, warmup_steps=2, validate_every=5, patience_steps=100, max_steps=steps,
                    batch_size=4, span=5, seed=seed),
    )


def test_lr_schedule_examples():
    cfg = TrainConfig(base_lr=1e-4, warmup_steps=100, max_steps=1100)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == 1e-4
    assert lr_schedule(600, cfg) == pytest.approx(5e-5, abs=1e-18)
    assert lr_schedule(1100, cfg) == 0.0 and lr_schedule(5000, cfg) == 0.0
    assert TrainConfig(peak_is_max_lr=True).peak_lr == 0.03
    assert TrainConfig(warmup_steps=20000, scale=0.01).scaled_warmup == 200
    with pytest.raises(ConfigError):
        lr_schedule(-1, cfg)


@given(st.integers(0, 500), st.integers(501, 5000), st.integers(0, 6000))
def test_lr_schedule_continuous_and_nonnegative(warm, total, step):
    cfg = TrainConfig(base_lr=1e-3, warmup_steps=warm, max_steps=total, validate_every=1, patience_steps=1)
    lr = lr_schedule(step, cfg)
    assert 0.0 <= lr <= 1e-3 + 1e-18
    if warm:
        assert abs(lr_schedule(warm, cfg) - lr_schedule(warm - 1, cfg)) <= 1e-3 / warm + 1e-12


def _state_at(step, best):
    s = TrainState(step, {}, None)
    s.best_step = best
    return s


def test_early_stop_boundaries():
    assert not early_stop(_state_at(199, 100), 100)
    assert early_stop(_state_at(200, 100), 100)
    assert not any(early_stop(_state_at(k, k), 10) for k in range(50))
    assert early_stop(_state_at(10, 0), 10) and not early_stop(_state_at(9, 0), 10)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(validate_every=10, patience_steps=5)


def test_ten_steps_reduce_training_loss(seqs):
    cfg = _cfg(steps=10, lr=3e-3)
    model = build_model(cfg.model, 0)
    assert batch_loss(model.eval(), Batch(0, tuple()), seqs, cfg) is None
    batch = assemble_batches(seqs, 4, 5, seed=0)[0]
    with torch.no_grad():
        before = float(batch_loss(model.eval(), batch, seqs, cfg).total)
    state = train(model, seqs, [], cfg)
    with torch.no_grad():
        after = float(batch_loss(model.eval(), batch, seqs, cfg).total)
    assert state.step == 10 and after < before


def test_same_seed_same_trace(seqs):
    traces = []
    for _ in range(2):
        cfg = _cfg(steps=6)
        traces.append(train(build_model(cfg.model, 0), seqs, seqs[:1], cfg).loss_history)
    assert traces[0] == traces[1]


def test_eeg_only_batch_never_touches_eog_branch(seqs):
    cfg = _cfg(ms=True, al=True)
    model = build_model(cfg.model, 0)
    eeg_only = [s.without("eog") for s in seqs]
    batch = assemble_batches(eeg_only, 4, 5, seed=0)[0]
    loss = batch_loss(model, batch, eeg_only, cfg)
    assert loss.al_value is None and set(loss.ce_per_modality) == {"eeg"}
    loss.total.backward()
    for name, p in model.named_parameters():
        if name.startswith(("unimodal.eog", "heads.eog", "grounded", "heads.mm")):
            assert p.grad is None or not p.grad.any(), name
    assert model.unimodal["eeg"].w_in.grad.abs().sum() > 0


def test_zero_lr_ce_only_keeps_parameters(seqs):
    cfg = _cfg(steps=4, lr=0.0, ms=False, al=False)
    model = build_model(cfg.model, 0)
    before = {k: v.detach().clone() for k, v in model.named_parameters()}
    train(model, seqs, [], cfg)
    assert all(torch.equal(before[k], v) for k, v in model.named_parameters())


def test_checkpoint_resume_is_bitwise(seqs, tmp_path):
    cfg = _cfg(steps=8, precision="float32")
    full = train(build_model(cfg.model, 0), seqs, seqs[:1], cfg)
    model = build_model(cfg.model, 0)
    half = train(model, seqs, seqs[:1], cfg, max_new_steps=4)
    path = save_checkpoint(half, model, cfg, tmp_path / "ck.crsc")
    model2, resumed = load_checkpoint(path, cfg)
    resumed = train(model2, seqs, seqs[:1], cfg, state=resumed)
    assert resumed.loss_history == full.loss_history
    assert resumed.val_history == full.val_history
    assert all(torch.equal(a, b) for a, b in zip(model2.parameters(), full.params.values()))


def test_checkpoint_rejects_mismatch_and_truncation(seqs, tmp_path):
    cfg = _cfg(steps=2)
    model = build_model(cfg.model, 0)
    state = train(model, seqs, [], cfg)
    path = save_checkpoint(state, model, cfg, tmp_path / "ck.crsc")
    with pytest.raises(CheckpointError, match="different config"):
        load_checkpoint(path, _cfg(steps=3))
    blob = path.read_bytes()
    for cut in (10, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path, cfg)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, cfg)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.crsc", cfg)


def test_non_finite_loss_aborts_with_batch_id(seqs):
    cfg = _cfg(steps=3)
    model = build_model(cfg.model, 0)
    with torch.no_grad():
        model.heads.mm.b2.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match=r"batch \d+"):
        train(model, seqs, [], cfg)


def test_init_state_tracks_live_parameters():
    model = build_model(ModelConfig.reduced(), 0)
    state = init_state(model)
    assert state.step == 0 and all(p is q for p, q in zip(state.params.values(), model.parameters()))
    assert state.best_metric == -math.inf
