"""Masked-token generator: schedule, masking, loss, conditioning, critic."""

import math

import numpy as np
import pytest

from echosynth.autodiff import Tensor
from echosynth.ecg import EcgPatchEmbedder
from echosynth.generator import (CriticScores, GeneratorConfig,
                                 GeneratorTrainState, GeneratorTrainer,
                                 TokenCritic, TokenGenerator, critic_loss,
                                 load_generator_checkpoint, mask_schedule,
                                 mask_tokens, mvtm_loss,
                                 save_generator_checkpoint)


def tiny_cfg(**kw):
    base = dict(vocab=97, dim=32, depth=1, heads=4, head_dim=8, ff_mult=2,
                seq_len=12, cond_len=8, critic_depth=1)
    base.update(kw)
    return GeneratorConfig(**base)


def make_model(seed=0, **kw):
    cfg = tiny_cfg(**kw)
    return cfg, TokenGenerator(cfg, np.random.default_rng(seed))


# -- schedule -----------------------------------------------------------------


def test_schedule_endpoints_and_midpoint():
    assert mask_schedule(0, 10) == 1.0
    # exactly zero, not cos(pi/2) rounding dust: ceil arithmetic depends on it
    assert mask_schedule(10, 10) == 0.0
    assert mask_schedule(5, 10) == pytest.approx(math.sqrt(2.0) / 2.0,
                                                 abs=1e-7)


def test_schedule_strictly_decreasing():
    vals = [mask_schedule(t, 24) for t in range(25)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_schedule_range_errors():
    with pytest.raises(ValueError):
        mask_schedule(-1, 10)
    with pytest.raises(ValueError):
        mask_schedule(11, 10)
    with pytest.raises(ValueError):
        mask_schedule(0, 0)


# -- masking ------------------------------------------------------------------


def test_mask_tokens_ceil_rule():
    toks = np.arange(7)
    masked, ind = mask_tokens(toks, 0.5, mask_token_id=99,
                              rng=np.random.default_rng(3))
    assert int(ind.sum()) == 4          # ceil(0.5 * 7)
    assert np.all(masked[ind > 0] == 99)
    assert np.array_equal(masked[ind == 0], toks[ind == 0])


def test_mask_tokens_extremes():
    toks = np.arange(10)
    rng = np.random.default_rng(0)
    m0, i0 = mask_tokens(toks, 0.0, 99, rng)
    assert np.array_equal(m0, toks) and i0.sum() == 0
    m1, i1 = mask_tokens(toks, 1.0, 99, rng)
    assert np.all(m1 == 99) and i1.sum() == 10


def test_mask_tokens_batch_rows_differ():
    toks = np.tile(np.arange(16), (6, 1))
    masked, ind = mask_tokens(toks, 0.25, 99, np.random.default_rng(5))
    assert ind.shape == (6, 16)
    assert np.all(ind.sum(axis=1) == 4)
    # with 16C4 patterns per row, six identical rows would be a bug
    assert len({tuple(np.flatnonzero(r)) for r in ind}) > 1


def test_mask_tokens_ratio_error():
    with pytest.raises(ValueError):
        mask_tokens(np.arange(4), 1.5, 9, np.random.default_rng(0))


# -- loss ---------------------------------------------------------------------


def test_mvtm_loss_uniform_logits_closed_form():
    vocab = 8192
    logits = Tensor(np.zeros((1, 5, vocab), dtype=np.float32))
    targets = np.array([[3, 1, 4, 1, 5]])
    mask = np.array([[1.0, 0.0, 1.0, 0.0, 1.0]])
    loss = float(mvtm_loss(logits, targets, mask).data)
    expect = 3.0 * math.log(vocab)
    assert abs(loss - expect) / expect < 1e-4


def test_mvtm_loss_batch_denominator():
    vocab = 64
    logits = Tensor(np.zeros((2, 4, vocab), dtype=np.float32))
    targets = np.zeros((2, 4), dtype=np.int64)
    mask = np.ones((2, 4), dtype=np.float32)
    # 8 masked positions, each ln V, divided by batch size 2
    loss = float(mvtm_loss(logits, targets, mask).data)
    assert loss == pytest.approx(4.0 * math.log(vocab), rel=1e-6)


def test_mvtm_loss_empty_mask_is_zero():
    logits = Tensor(np.random.default_rng(0)
                    .normal(size=(1, 4, 16)).astype(np.float32))
    loss = mvtm_loss(logits, np.zeros((1, 4), dtype=np.int64),
                     np.zeros((1, 4)))
    assert float(loss.data) == 0.0


def test_mvtm_loss_zero_grad_at_unmasked_positions():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(1, 6, 11)).astype(np.float32),
                    requires_grad=True)
    targets = rng.integers(0, 11, size=(1, 6))
    mask = np.array([[1, 0, 0, 1, 0, 1]], dtype=np.float32)
    mvtm_loss(logits, targets, mask).backward()
    unmasked = logits.grad[0, mask[0] == 0]
    masked = logits.grad[0, mask[0] == 1]
    assert np.all(unmasked == 0.0)
    assert np.any(masked != 0.0)


# -- generator forward --------------------------------------------------------


def test_forward_logits_shapes_single_and_batch():
    cfg, model = make_model()
    toks = np.full(cfg.seq_len, cfg.mask_token_id)
    out = model.forward_logits(toks)
    assert out.shape == (cfg.seq_len, cfg.vocab)
    outb = model.forward_logits(np.tile(toks, (3, 1)))
    assert outb.shape == (3, cfg.seq_len, cfg.vocab)


def test_forward_logits_rejects_bad_inputs():
    cfg, model = make_model()
    with pytest.raises(ValueError):
        model.forward_logits(np.zeros(cfg.seq_len + 1, dtype=np.int64))
    bad = np.zeros(cfg.seq_len, dtype=np.int64)
    bad[0] = cfg.vocab + 1          # beyond the mask sentinel
    with pytest.raises(ValueError):
        model.forward_logits(bad)


def test_mask_token_id_is_vocab():
    cfg = tiny_cfg()
    assert cfg.mask_token_id == cfg.vocab


def test_frame_prefix_equals_manual_overwrite():
    cfg, model = make_model(seed=2)
    toks = np.full(cfg.seq_len, cfg.mask_token_id)
    prefix = np.array([5, 2, 9])
    a = model.forward_logits(toks, frame_prefix=prefix)
    manual = toks.copy()
    manual[:3] = prefix
    b = model.forward_logits(manual)
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_deterministic():
    cfg, model = make_model(seed=4)
    toks = np.random.default_rng(0).integers(0, cfg.vocab,
                                             size=cfg.seq_len)
    a = model.forward_logits(toks)
    b = model.forward_logits(toks)
    assert a.data.tobytes() == b.data.tobytes()


def cond_pair(cfg, batch=1, n=4, seed=9, last_invalid=False):
    rng = np.random.default_rng(seed)
    emb = Tensor(rng.normal(size=(batch, n, cfg.dim)).astype(np.float32))
    valid = np.ones((batch, n), dtype=bool)
    if last_invalid:
        valid[:, -1] = False
    return emb, valid


def test_conditioning_changes_logits():
    cfg, model = make_model(seed=1)
    toks = np.full(cfg.seq_len, cfg.mask_token_id)
    nul = model.forward_logits(toks, None)
    con = model.forward_logits(toks, cond_pair(cfg))
    assert nul.data.tobytes() != con.data.tobytes()


def test_conditioning_length_overflow():
    cfg, model = make_model()
    toks = np.full(cfg.seq_len, cfg.mask_token_id)
    with pytest.raises(ValueError):
        model.forward_logits(toks, cond_pair(cfg, n=cfg.cond_len + 1))


def test_padded_patches_never_contribute():
    """Rewriting the embedding of an invalid patch must not move one bit."""
    cfg, model = make_model(seed=3)
    toks = np.full((2, cfg.seq_len), cfg.mask_token_id)
    emb, valid = cond_pair(cfg, batch=2, n=5, last_invalid=True)
    base = model.forward_logits(toks, (emb, valid))
    wild = emb.data.copy()
    wild[:, -1, :] = 1e4 * np.random.default_rng(1).normal(
        size=(2, cfg.dim)).astype(np.float32)
    other = model.forward_logits(toks, (Tensor(wild), valid))
    assert base.data.tobytes() == other.data.tobytes()
    # flipping a *valid* patch must move the logits
    wild2 = emb.data.copy()
    wild2[:, 0, :] += 1.0
    moved = model.forward_logits(toks, (Tensor(wild2), valid))
    assert base.data.tobytes() != moved.data.tobytes()


# -- condition dropout --------------------------------------------------------


def test_condition_dropout_full_drop_matches_null_forward():
    cfg, model = make_model(seed=6)
    toks = np.full(cfg.seq_len, cfg.mask_token_id)
    cond = cond_pair(cfg)
    dropped = model.condition_dropout(cond, p_drop=1.0, patch_mask_rate=0.25,
                                      rng=np.random.default_rng(11))
    assert dropped is None
    a = model.forward_logits(toks, dropped)
    b = model.forward_logits(toks, None)
    assert a.data.tobytes() == b.data.tobytes()


def test_condition_dropout_identity_when_disabled():
    cfg, model = make_model(seed=6)
    cond = cond_pair(cfg)
    out = model.condition_dropout(cond, p_drop=0.0, patch_mask_rate=0.0,
                                  rng=np.random.default_rng(0))
    assert out is not None
    emb, valid = out
    assert emb.data.tobytes() == cond[0].data.tobytes()
    assert np.array_equal(valid, cond[1])


def test_condition_dropout_rate():
    cfg, model = make_model()
    cond = cond_pair(cfg)
    rng = np.random.default_rng(123)
    drops = sum(model.condition_dropout(cond, 0.1, 0.0, rng) is None
                for _ in range(10000))
    assert 0.08 <= drops / 10000 <= 0.12


def test_condition_dropout_patch_masking():
    cfg, model = make_model(seed=8)
    cond = cond_pair(cfg, n=6)
    out = model.condition_dropout(cond, p_drop=0.0, patch_mask_rate=1.0,
                                  rng=np.random.default_rng(2))
    emb, valid = out
    expect = np.broadcast_to(model.cond_mask_emb.data, (1, 6, cfg.dim))
    assert np.array_equal(emb.data, expect)
    assert np.array_equal(valid, cond[1])    # validity untouched


def test_condition_dropout_probability_validation():
    cfg, model = make_model()
    with pytest.raises(ValueError):
        model.condition_dropout(cond_pair(cfg), -0.1, 0.0,
                                np.random.default_rng(0))


# -- step-zero calibration ----------------------------------------------------


def test_initial_loss_near_log_vocab():
    cfg, model = make_model(seed=12)
    rng = np.random.default_rng(0)
    toks = rng.integers(0, cfg.vocab, size=(2, cfg.seq_len))
    masked, ind = mask_tokens(toks, 1.0, cfg.mask_token_id, rng)
    loss = float(mvtm_loss(model.forward_logits(masked), toks, ind).data)
    per_token = loss / cfg.seq_len
    assert abs(per_token - math.log(cfg.vocab)) / math.log(cfg.vocab) < 0.2


# -- critic -------------------------------------------------------------------


def test_critic_scores_shape_and_range():
    cfg = tiny_cfg()
    critic = TokenCritic(cfg, np.random.default_rng(0))
    toks = np.random.default_rng(1).integers(0, cfg.vocab,
                                             size=(3, cfg.seq_len))
    scores = critic(toks)
    assert scores.probs.shape == (3, cfg.seq_len)
    assert scores.probs.data.min() >= 0.0
    assert scores.probs.data.max() <= 1.0


def test_critic_scores_validation():
    with pytest.raises(ValueError):
        CriticScores(Tensor(np.array([[0.5, 1.5]], dtype=np.float32)))


def test_critic_loss_half_confidence_is_ln2():
    loss = critic_loss(Tensor(np.array([0.5], dtype=np.float32)),
                       Tensor(np.zeros(0, dtype=np.float32)))
    assert abs(float(loss.data) - math.log(2.0)) < 1e-6


def test_critic_loss_perfect_prediction_is_tiny():
    loss = critic_loss(Tensor(np.array([1.0], dtype=np.float32)),
                       Tensor(np.array([0.0], dtype=np.float32)))
    assert 0.0 <= float(loss.data) <= 1e-6


def test_critic_loss_six_score_oracle():
    real = np.array([0.9, 0.6, 0.99], dtype=np.float32)
    fake = np.array([0.2, 0.45, 0.05], dtype=np.float32)
    loss = float(critic_loss(Tensor(real), Tensor(fake)).data)
    expect = -(np.log(real.astype(np.float64)).sum()
               + np.log1p(-fake.astype(np.float64)).sum()) / 6.0
    assert loss == pytest.approx(expect, rel=1e-5)


def test_critic_loss_clamps_extreme_scores():
    loss = critic_loss(Tensor(np.array([0.0], dtype=np.float32)),
                       Tensor(np.zeros(0, dtype=np.float32)))
    assert np.isfinite(loss.data)
    assert float(loss.data) == pytest.approx(-math.log(1e-7), rel=1e-3)


def test_critic_loss_rejects_empty():
    empty = Tensor(np.zeros(0, dtype=np.float32))
    with pytest.raises(ValueError):
        critic_loss(empty, empty)


# -- trainer ------------------------------------------------------------------


def make_trainer(seed=0, **state_kw):
    cfg = tiny_cfg()
    rng = np.random.default_rng(seed)
    model = TokenGenerator(cfg, rng)
    embedder = EcgPatchEmbedder(patch_size=10, dim=cfg.dim, max_patches=8,
                                max_leads=2, rng=rng)
    critic = TokenCritic(cfg, rng)
    state = GeneratorTrainState(**state_kw)
    return cfg, GeneratorTrainer(model, embedder, critic, state, seed=seed)


def make_batch(cfg, b=2, leads=1, n=4, p=10, seed=0):
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, cfg.vocab, size=(b, cfg.seq_len))
    patches = rng.normal(size=(b, leads, n, p)).astype(np.float32)
    valid = np.ones((b, leads * n), dtype=bool)
    return toks, patches, valid


def test_train_step_record_and_progress():
    cfg, tr = make_trainer(seed=3, lr=1e-2, ema_every=2)
    toks, patches, valid = make_batch(cfg)
    first = tr.train_step(toks, patches, valid)
    assert set(first) >= {"step", "mvtm", "critic", "mask_ratio", "masked",
                          "aborted"}
    assert not first["aborted"]
    assert first["masked"] >= 1
    losses = [first["mvtm"]]
    for _ in range(39):
        losses.append(tr.train_step(toks, patches, valid)["mvtm"])
    assert tr.step_count == 40
    # overfitting one tiny batch must clearly beat the uniform level
    assert min(losses[-5:]) < losses[0]
    assert all(np.isfinite(l) for l in losses)


def test_train_step_updates_ema_shadows():
    cfg, tr = make_trainer(seed=1, ema_every=1)
    toks, patches, valid = make_batch(cfg)
    before = {k: v.copy() for k, v in tr.ema.shadow.items()}
    tr.train_step(toks, patches, valid)
    changed = any(not np.array_equal(before[k], tr.ema.shadow[k])
                  for k in before)
    assert changed


def test_train_step_aborts_on_poisoned_weights():
    cfg, tr = make_trainer(seed=2)
    toks, patches, valid = make_batch(cfg)
    name = next(iter(tr.gen_params))
    tr.gen_params[name].data[...] = np.nan
    rec = tr.train_step(toks, patches, valid)
    assert rec["aborted"]


def test_trainer_deterministic():
    cfg, tr1 = make_trainer(seed=5)
    _, tr2 = make_trainer(seed=5)
    toks, patches, valid = make_batch(cfg)
    r1 = [tr1.train_step(toks, patches, valid) for _ in range(3)]
    r2 = [tr2.train_step(toks, patches, valid) for _ in range(3)]
    for a, b in zip(r1, r2):
        assert a == b
    for k in tr1.gen_params:
        assert tr1.gen_params[k].data.tobytes() == \
            tr2.gen_params[k].data.tobytes()


# -- checkpointing ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg, tr = make_trainer(seed=7)
    toks, patches, valid = make_batch(cfg)
    tr.train_step(toks, patches, valid)
    ck = tmp_path / "gen_ck"
    save_generator_checkpoint(ck, tr, seed=7)
    model, embedder, critic, ema, meta = load_generator_checkpoint(ck)
    assert meta["step"] == "1" and meta["seed"] == "7"
    assert model.cfg == cfg
    for k, p in tr.model.param_dict().items():
        assert model.param_dict()[k].data.tobytes() == p.data.tobytes()
    for k, p in tr.embedder.param_dict().items():
        assert embedder.param_dict()[k].data.tobytes() == p.data.tobytes()
    assert critic is not None
    assert set(ema) == set(tr.ema.shadow)
    toks2 = np.full(cfg.seq_len, cfg.mask_token_id)
    a = tr.model.forward_logits(toks2)
    b = model.forward_logits(toks2)
    assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_kind_guard(tmp_path):
    from echosynth.container import save_checkpoint
    save_checkpoint(tmp_path / "bad", {}, {"kind": "tokenizer"})
    with pytest.raises(ValueError):
        load_generator_checkpoint(tmp_path / "bad")


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(dim=33)
    with pytest.raises(ValueError):
        tiny_cfg(vocab=1)
    with pytest.raises(ValueError):
        tiny_cfg(seq_len=0)
