"""Progressive decoding: state setup, guidance, schedule compliance,
extrapolation stitching."""

import math

import numpy as np
import pytest

from echosynth.autodiff import Tensor
from echosynth.ecg import ECGSignal, EcgPatchEmbedder
from echosynth.generator import GeneratorConfig, TokenCritic, TokenGenerator
from echosynth.sampler import (CONTINUATION, ECG_ONLY, IMAGE_PLUS_ECG,
                               DecodeState, GenerationRequest, decode_step,
                               extrapolate, generate, generate_long,
                               generate_with_state, guided_logits, init_state)
from echosynth.tokenizer import TokenizerConfig, VideoTokenizer, grid_to_seq


def small_stack(seed=0):
    """Tokenizer + generator + embedder pair small enough for fast decoding."""
    tcfg = TokenizerConfig(height=16, width=16, frames=5, patch=8, patch_t=2,
                           dim=32, depth_spatial=1, depth_temporal=1, heads=4,
                           head_dim=8, ff_mult=2, quantizer="lfq", code_bits=4)
    rng = np.random.default_rng(seed)
    tok = VideoTokenizer(tcfg, rng)
    gcfg = GeneratorConfig(vocab=tcfg.vocab, dim=32, depth=1, heads=4,
                           head_dim=8, ff_mult=2, seq_len=tcfg.seq_len,
                           cond_len=8, critic_depth=1)
    model = TokenGenerator(gcfg, rng)
    embedder = EcgPatchEmbedder(patch_size=10, dim=32, max_patches=8,
                                max_leads=2, rng=rng)
    return tok, model, embedder


def one_lead_ecg(seed=0, samples=50):
    rng = np.random.default_rng(seed)
    sig = rng.normal(size=(1, samples)).astype(np.float32)
    return ECGSignal(sig, sample_rate_hz=100, lead_names=("I",))


def ecg_request(mode=ECG_ONLY, **kw):
    base = dict(mode=mode, ecg=one_lead_ecg(), lambda_cfg=1.0, steps=3,
                seed=0)
    base.update(kw)
    return GenerationRequest(**base)


# -- request and state invariants ---------------------------------------------


def test_request_validation():
    with pytest.raises(ValueError):
        ecg_request(mode="SOMETHING_ELSE")
    with pytest.raises(ValueError):
        ecg_request(mode=IMAGE_PLUS_ECG)            # first_frame missing
    with pytest.raises(ValueError):
        ecg_request(mode=CONTINUATION)              # prev_clip missing
    with pytest.raises(ValueError):
        ecg_request(steps=0)
    with pytest.raises(ValueError):
        ecg_request(lambda_cfg=-0.5)
    with pytest.raises(ValueError):
        ecg_request(temperature=0.0)


def test_decode_state_rejects_masked_pinned_position():
    toks = np.array([16, 3, 16, 16])
    fixed = np.array([True, False, False, False])
    with pytest.raises(ValueError):
        DecodeState(toks, fixed, mask_token_id=16)


def test_decode_state_shape_mismatch():
    with pytest.raises(ValueError):
        DecodeState(np.zeros(4, dtype=np.int64), np.zeros(5, dtype=bool), 16)


# -- init_state ---------------------------------------------------------------


def test_init_state_ecg_only_all_masked():
    tok, _, _ = small_stack()
    st = init_state(ecg_request(), tok)
    assert st.tokens.shape == (tok.cfg.seq_len,)
    assert st.n_masked == tok.cfg.seq_len
    assert not st.fixed.any()


def test_init_state_image_pins_first_frame_row():
    tok, _, _ = small_stack()
    frame = np.random.default_rng(3).uniform(
        size=(16, 16, 1)).astype(np.float32)
    st = init_state(ecg_request(mode=IMAGE_PLUS_ECG, first_frame=frame), tok)
    sites = tok.cfg.sites
    assert st.fixed[:sites].all() and not st.fixed[sites:].any()
    assert st.n_masked == tok.cfg.seq_len - sites
    clip = np.zeros((tok.cfg.frames, 16, 16, 1), dtype=np.float32)
    clip[0] = frame
    expect = grid_to_seq(tok.tokenize(clip))[:sites]
    assert np.array_equal(st.tokens[:sites], expect)


def test_init_state_image_shape_error():
    tok, _, _ = small_stack()
    bad = np.zeros((8, 8, 1), dtype=np.float32)
    with pytest.raises(ValueError):
        init_state(ecg_request(mode=IMAGE_PLUS_ECG, first_frame=bad), tok)


def test_init_state_continuation_pins_tail_rows():
    tok, _, _ = small_stack()
    prev = np.random.default_rng(4).uniform(
        size=(7, 16, 16, 1)).astype(np.float32)
    st = init_state(ecg_request(mode=CONTINUATION, prev_clip=prev), tok)
    # default overlap = 1 + patch_t = 3 frames -> first-frame row + one block
    n_pin = 2 * tok.cfg.sites
    assert st.fixed[:n_pin].all() and not st.fixed[n_pin:].any()
    clip = np.zeros((tok.cfg.frames, 16, 16, 1), dtype=np.float32)
    clip[:3] = prev[-3:]
    expect = grid_to_seq(tok.tokenize(clip))[:n_pin]
    assert np.array_equal(st.tokens[:n_pin], expect)


def test_init_state_continuation_overlap_errors():
    tok, _, _ = small_stack()
    prev = np.zeros((5, 16, 16, 1), dtype=np.float32)
    with pytest.raises(ValueError):
        init_state(ecg_request(mode=CONTINUATION, prev_clip=prev,
                               k_overlap=2), tok)      # not 1 + m*patch_t
    with pytest.raises(ValueError):
        init_state(ecg_request(mode=CONTINUATION, prev_clip=prev[:2],
                               k_overlap=3), tok)      # too few frames


# -- guided logits ------------------------------------------------------------


def test_guided_logits_identities_and_arithmetic():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(4, 9)).astype(np.float32)
    u = rng.normal(size=(4, 9)).astype(np.float32)
    assert guided_logits(c, u, 1.0) is c
    assert guided_logits(c, u, 0.0) is u
    out = guided_logits(np.full((2, 2), 2.0), np.full((2, 2), 1.0), 3.0)
    assert np.allclose(out, 4.0)
    with pytest.raises(ValueError):
        guided_logits(c, u[:2], 1.5)


# -- decode_step with a stub model -------------------------------------------


class UniformStub:
    """Logit oracle: all tokens equally likely, so ranking is pure noise."""

    def __init__(self, vocab):
        self.vocab = vocab
        self.calls = 0

    def forward_logits(self, toks, cond=None, frame_prefix=None):
        self.calls += 1
        return Tensor(np.zeros((len(toks), self.vocab), dtype=np.float32))


def all_masked_state(n=8, vocab=16):
    return DecodeState(np.full(n, vocab, dtype=np.int64),
                       np.zeros(n, dtype=bool), vocab)


def test_single_step_fills_everything():
    st = decode_step(all_masked_state(), UniformStub(16), None, 0, 1,
                     np.random.default_rng(0), lambda_cfg=1.0)
    assert st.n_masked == 0
    assert st.step == 1


def test_mask_counts_follow_ceil_schedule():
    # free count 32, four steps: ceil(cos(pi (t+1)/8) * 32) = 30, 23, 13, 0
    st = all_masked_state(n=32)
    stub = UniformStub(16)
    rng = np.random.default_rng(1)
    seen = []
    for t in range(4):
        st = decode_step(st, stub, None, t, 4, rng, lambda_cfg=1.0)
        seen.append(st.n_masked)
    assert seen == [30, 23, 13, 0]


def test_masked_sets_nested_and_strictly_shrinking():
    st = all_masked_state(n=24)
    stub = UniformStub(16)
    rng = np.random.default_rng(2)
    prev = set(np.flatnonzero(st.masked))
    for t in range(6):
        st = decode_step(st, stub, None, t, 6, rng, lambda_cfg=1.0)
        cur = set(np.flatnonzero(st.masked))
        assert cur < prev                  # strict subset every step
        prev = cur
    assert not prev


def test_strict_shrink_under_plateauing_ceiling():
    # 12 free positions over 12 steps: the raw ceiling repeats values, the
    # clamp must still force one reveal per step
    st = all_masked_state(n=12)
    stub = UniformStub(16)
    rng = np.random.default_rng(3)
    counts = []
    for t in range(12):
        st = decode_step(st, stub, None, t, 12, rng, lambda_cfg=1.0)
        counts.append(st.n_masked)
    assert counts[-1] == 0
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_tie_break_prefers_lowest_index():
    # uniform logits + zero ranking noise: every confidence is equal, so
    # the positions revealed first must be exactly the lowest indices
    st = all_masked_state(n=8)
    out = decode_step(st, UniformStub(16), None, 0, 2,
                      np.random.default_rng(5), lambda_cfg=1.0,
                      choice_noise=0.0)
    # schedule: ceil(cos(pi/4) * 8) = 6 stay masked, 2 revealed
    assert np.array_equal(np.flatnonzero(~out.masked), [0, 1])


def test_decode_step_requires_masked_positions():
    st = DecodeState(np.arange(4, dtype=np.int64), np.zeros(4, dtype=bool),
                     16)
    with pytest.raises(ValueError):
        decode_step(st, UniformStub(16), None, 0, 2,
                    np.random.default_rng(0))


def test_decode_step_deterministic():
    a = decode_step(all_masked_state(), UniformStub(16), None, 0, 3,
                    np.random.default_rng(9), lambda_cfg=1.0)
    b = decode_step(all_masked_state(), UniformStub(16), None, 0, 3,
                    np.random.default_rng(9), lambda_cfg=1.0)
    assert np.array_equal(a.tokens, b.tokens)


def test_pinned_positions_bit_identical_through_steps():
    vocab = 16
    toks = np.full(12, vocab, dtype=np.int64)
    toks[:4] = [3, 1, 2, 7]
    fixed = np.zeros(12, dtype=bool)
    fixed[:4] = True
    st = DecodeState(toks, fixed, vocab)
    stub = UniformStub(vocab)
    rng = np.random.default_rng(11)
    for t in range(3):
        st = decode_step(st, stub, None, t, 3, rng, lambda_cfg=1.0)
        assert np.array_equal(st.tokens[:4], [3, 1, 2, 7])
        assert st.fixed[:4].all()
    assert st.n_masked == 0


# -- full generation ----------------------------------------------------------


def test_generate_shape_range_and_determinism():
    tok, model, emb = small_stack(seed=1)
    req = ecg_request(steps=4, seed=42)
    a = generate(req, tok, model, emb)
    assert a.shape == (tok.cfg.frames, 16, 16, 1)
    assert a.min() >= 0.0 and a.max() <= 1.0
    b = generate(ecg_request(steps=4, seed=42), tok, model, emb)
    assert a.tobytes() == b.tobytes()
    c = generate(ecg_request(steps=4, seed=43), tok, model, emb)
    assert a.tobytes() != c.tobytes()


def test_generate_flat_ecg_is_valid():
    tok, model, emb = small_stack(seed=2)
    flat = ECGSignal(np.zeros((1, 50), dtype=np.float32), 100, ("I",))
    clip = generate(ecg_request(ecg=flat, steps=3), tok, model, emb)
    assert clip.shape == (tok.cfg.frames, 16, 16, 1)
    assert np.isfinite(clip).all()
    assert clip.min() >= 0.0 and clip.max() <= 1.0


def count_forward_passes(model):
    orig = model.forward_logits
    calls = {"cond": 0, "uncond": 0}

    def spy(toks, cond=None, frame_prefix=None):
        calls["uncond" if cond is None else "cond"] += 1
        return orig(toks, cond, frame_prefix)

    model.forward_logits = spy
    return calls


def test_step_count_single_branch_without_cfg():
    tok, model, emb = small_stack(seed=3)
    calls = count_forward_passes(model)
    generate(ecg_request(lambda_cfg=1.0, steps=5), tok, model, emb)
    assert calls == {"cond": 5, "uncond": 0}


def test_step_count_two_branches_with_cfg():
    tok, model, emb = small_stack(seed=3)
    calls = count_forward_passes(model)
    generate(ecg_request(lambda_cfg=1.5, steps=5), tok, model, emb)
    assert calls == {"cond": 5, "uncond": 5}


def test_step_count_unconditional_only():
    tok, model, emb = small_stack(seed=3)
    calls = count_forward_passes(model)
    generate(ecg_request(lambda_cfg=0.0, steps=5), tok, model, emb)
    assert calls == {"cond": 0, "uncond": 5}


def test_lambda_one_ignores_unconditional_branch_bitwise():
    tok, model, emb = small_stack(seed=4)
    req = ecg_request(lambda_cfg=1.0, steps=4, seed=7)
    base = generate(req, tok, model, emb)
    # poison the unconditional branch; lambda = 1 must never touch it
    orig = model.forward_logits

    def poisoned(toks, cond=None, frame_prefix=None):
        if cond is None:
            return Tensor(np.full((len(toks), model.cfg.vocab), 1e4,
                                  dtype=np.float32))
        return orig(toks, cond, frame_prefix)

    model.forward_logits = poisoned
    again = generate(ecg_request(lambda_cfg=1.0, steps=4, seed=7), tok,
                     model, emb)
    assert base.tobytes() == again.tobytes()


def test_lambda_zero_ignores_ecg_bitwise():
    tok, model, emb = small_stack(seed=5)
    a = generate(ecg_request(lambda_cfg=0.0, steps=4, seed=3,
                             ecg=one_lead_ecg(seed=1)), tok, model, emb)
    b = generate(ecg_request(lambda_cfg=0.0, steps=4, seed=3,
                             ecg=one_lead_ecg(seed=2)), tok, model, emb)
    assert a.tobytes() == b.tobytes()


def test_conditioning_changes_generation():
    tok, model, emb = small_stack(seed=6)
    a = generate(ecg_request(steps=4, seed=3, ecg=one_lead_ecg(seed=1)),
                 tok, model, emb)
    b = generate(ecg_request(steps=4, seed=3, ecg=one_lead_ecg(seed=2)),
                 tok, model, emb)
    assert a.tobytes() != b.tobytes()


def test_generate_rejects_mismatched_models():
    tok, model, emb = small_stack(seed=0)
    bad = TokenGenerator(GeneratorConfig(vocab=32, dim=32, depth=1, heads=4,
                                         head_dim=8, seq_len=tok.cfg.seq_len,
                                         cond_len=8),
                         np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate(ecg_request(), tok, bad, emb)


def test_critic_guided_decode_runs():
    tok, model, emb = small_stack(seed=8)
    critic = TokenCritic(model.cfg, np.random.default_rng(1))
    req = ecg_request(steps=3, use_critic=True)
    clip = generate(req, tok, model, emb, critic=critic)
    assert clip.shape == (tok.cfg.frames, 16, 16, 1)


# -- extrapolation ------------------------------------------------------------


def test_extrapolate_frame_arithmetic():
    tok, model, emb = small_stack(seed=9)
    first = generate(ecg_request(steps=3, seed=1), tok, model, emb)
    new = extrapolate(first, one_lead_ecg(seed=3), tok, model, emb,
                      lambda_cfg=1.0, steps=3, seed=2)
    # 5-frame clips, 3-frame overlap: each continuation adds 2 frames
    assert new.shape == (2, 16, 16, 1)
    assert new.min() >= 0.0 and new.max() <= 1.0


def test_generate_long_three_chunk_frame_count():
    tok, model, emb = small_stack(seed=10)
    req = ecg_request(steps=3, seed=5)
    video = generate_long(req, tok, model, emb,
                          [one_lead_ecg(seed=6), one_lead_ecg(seed=7)])
    t = tok.cfg.frames
    k = 1 + tok.cfg.patch_t
    assert video.shape == (t + 2 * (t - k), 16, 16, 1)
    assert video.min() >= 0.0 and video.max() <= 1.0


def test_continuation_pinned_rows_survive_decoding():
    tok, model, emb = small_stack(seed=11)
    prev = generate(ecg_request(steps=3, seed=1), tok, model, emb)
    req = ecg_request(mode=CONTINUATION, prev_clip=prev, steps=3, seed=2)
    _, final = generate_with_state(req, tok, model, emb)
    start = init_state(req, tok)
    n_pin = int(start.fixed.sum())
    assert n_pin == 2 * tok.cfg.sites
    assert np.array_equal(final.tokens[:n_pin], start.tokens[:n_pin])
    # and those rows are the re-encoded tail, by construction
    clip = np.zeros((tok.cfg.frames, 16, 16, 1), dtype=np.float32)
    clip[:3] = prev[-3:]
    assert np.array_equal(start.tokens[:n_pin],
                          grid_to_seq(tok.tokenize(clip))[:n_pin])


def test_generate_long_deterministic():
    tok, model, emb = small_stack(seed=12)
    wins = [one_lead_ecg(seed=6)]
    a = generate_long(ecg_request(steps=3, seed=5), tok, model, emb, wins)
    b = generate_long(ecg_request(steps=3, seed=5), tok, model, emb, wins)
    assert a.tobytes() == b.tobytes()
