"""Progressive parallel decoding of token grids from ECG conditioning.

Decoding starts from a fully or partially masked token sequence and runs a
fixed number of refinement steps.  Every step samples all masked positions
at once from guidance-merged, temperature-scaled logits, ranks the samples
by confidence (sampled-token log-probability plus annealed Gumbel noise),
and keeps the weakest ones masked so the masked count follows the cosine
schedule down to zero.  Conditioning tokens (a first frame, or frames
re-encoded from a previous clip) are pinned and never touched.

Classifier-free guidance merges a conditional and an unconditional logit
branch as u + lambda * (c - u); the lambda = 1 and lambda = 0 settings
short-circuit to a single branch, bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .ecg import ECGSignal, EcgPatchEmbedder, encode_ecg
from .generator import TokenCritic, TokenGenerator, mask_schedule
from .tokenizer import VideoTokenizer, grid_to_seq, seq_to_grid

ECG_ONLY = "ECG_ONLY"
IMAGE_PLUS_ECG = "IMAGE_PLUS_ECG"
CONTINUATION = "CONTINUATION"
MODES = (ECG_ONLY, IMAGE_PLUS_ECG, CONTINUATION)


@dataclass
class GenerationRequest:
    mode: str
    ecg: ECGSignal
    first_frame: np.ndarray | None = None
    prev_clip: np.ndarray | None = None
    lambda_cfg: float = 1.5
    steps: int = 12
    temperature: float = 1.0
    k_overlap: int | None = None     # None -> 1 + patch_t from the tokenizer
    seed: int = 0
    choice_noise: float = 1.0        # ranking-noise scale before annealing
    use_critic: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of "
                             f"{MODES}")
        if self.mode == IMAGE_PLUS_ECG and self.first_frame is None:
            raise ValueError("IMAGE_PLUS_ECG requires first_frame")
        if self.mode == CONTINUATION and self.prev_clip is None:
            raise ValueError("CONTINUATION requires prev_clip")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lambda_cfg < 0:
            raise ValueError(f"lambda_cfg must be >= 0, got "
                             f"{self.lambda_cfg}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got "
                             f"{self.temperature}")


@dataclass
class DecodeState:
    """Token sequence mid-decode, with sentinel ids at masked positions."""
    tokens: np.ndarray           # (seq_len,) int64, sentinel = mask_token_id
    fixed: np.ndarray            # (seq_len,) bool, pinned by conditioning
    mask_token_id: int
    step: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.fixed = np.asarray(self.fixed, dtype=bool)
        if self.tokens.ndim != 1 or self.tokens.shape != self.fixed.shape:
            raise ValueError(f"token/fixed shapes {self.tokens.shape} / "
                             f"{self.fixed.shape} inconsistent")
        if np.any(self.tokens[self.fixed] == self.mask_token_id):
            raise ValueError("pinned positions must hold real tokens")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @property
    def masked(self) -> np.ndarray:
        return self.tokens == self.mask_token_id

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def _resolve_k_overlap(request: GenerationRequest, cfg) -> int:
    k = request.k_overlap
    if k is None:
        k = 1 + cfg.patch_t
    if k < 1 or (k - 1) % cfg.patch_t:
        raise ValueError(f"k_overlap {k} must be 1 plus a whole number of "
                         f"temporal blocks of {cfg.patch_t}")
    if k > cfg.frames:
        raise ValueError(f"k_overlap {k} exceeds clip length {cfg.frames}")
    return k


def init_state(request: GenerationRequest,
               tokenizer: VideoTokenizer) -> DecodeState:
    """Build the starting token sequence for the requested mode.

    Conditioning pixels are embedded in an otherwise-empty clip and pushed
    through the tokenizer; the leading rows of the result depend only on
    those pixels, so they are valid pinned tokens.
    """
    cfg = tokenizer.cfg
    sentinel = cfg.vocab
    tokens = np.full(cfg.seq_len, sentinel, dtype=np.int64)
    fixed = np.zeros(cfg.seq_len, dtype=bool)
    frame_shape = (cfg.height, cfg.width, cfg.channels)

    if request.mode == IMAGE_PLUS_ECG:
        frame = np.asarray(request.first_frame, dtype=np.float32)
        if frame.shape != frame_shape:
            raise ValueError(f"first frame shape {frame.shape} != "
                             f"{frame_shape}")
        clip = np.zeros((cfg.frames, *frame_shape), dtype=np.float32)
        clip[0] = frame
        seq = grid_to_seq(tokenizer.tokenize(clip))
        tokens[:cfg.sites] = seq[:cfg.sites]
        fixed[:cfg.sites] = True
    elif request.mode == CONTINUATION:
        prev = np.asarray(request.prev_clip, dtype=np.float32)
        k = _resolve_k_overlap(request, cfg)
        if prev.ndim != 4 or prev.shape[1:] != frame_shape:
            raise ValueError(f"prev clip frame shape {prev.shape} != "
                             f"(frames, {cfg.height}, {cfg.width}, "
                             f"{cfg.channels})")
        if prev.shape[0] < k:
            raise ValueError(f"prev clip has {prev.shape[0]} frames, "
                             f"k_overlap needs {k}")
        clip = np.zeros((cfg.frames, *frame_shape), dtype=np.float32)
        clip[:k] = prev[-k:]
        seq = grid_to_seq(tokenizer.tokenize(clip))
        n_pin = (1 + (k - 1) // cfg.patch_t) * cfg.sites
        tokens[:n_pin] = seq[:n_pin]
        fixed[:n_pin] = True
    return DecodeState(tokens, fixed, sentinel)


def guided_logits(cond_logits: np.ndarray, uncond_logits: np.ndarray,
                  lambda_cfg: float) -> np.ndarray:
    """u + lambda * (c - u); lambda 1 and 0 return a branch untouched."""
    cond_logits = np.asarray(cond_logits)
    uncond_logits = np.asarray(uncond_logits)
    if cond_logits.shape != uncond_logits.shape:
        raise ValueError(f"branch shapes differ: {cond_logits.shape} vs "
                         f"{uncond_logits.shape}")
    if lambda_cfg == 1.0:
        return cond_logits
    if lambda_cfg == 0.0:
        return uncond_logits
    return uncond_logits + lambda_cfg * (cond_logits - uncond_logits)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def decode_step(state: DecodeState, model: TokenGenerator, cond, t: int,
                total_steps: int, rng: np.random.Generator, *,
                lambda_cfg: float = 1.5, temperature: float = 1.0,
                choice_noise: float = 1.0,
                critic: TokenCritic | None = None) -> DecodeState:
    """One refinement step; returns the next state (input left untouched).

    The number of positions left masked afterwards is
    ceil(schedule((t+1)/total) * n_free), clamped one below the current
    count so the masked set strictly shrinks even when the ceiling
    plateaus at small sequence lengths.
    """
    masked = state.masked
    n_masked = int(masked.sum())
    if n_masked == 0:
        raise ValueError("nothing left to decode")
    n_free = int((~state.fixed).sum())

    with no_grad():
        if lambda_cfg == 0.0:
            merged = model.forward_logits(state.tokens, None).data
        elif lambda_cfg == 1.0:
            merged = model.forward_logits(state.tokens, cond).data
        else:
            c = model.forward_logits(state.tokens, cond).data
            u = model.forward_logits(state.tokens, None).data
            merged = guided_logits(c, u, lambda_cfg)

    rows = np.flatnonzero(masked)
    logp = _log_softmax_rows(merged[rows] / temperature)
    g_sample = rng.gumbel(size=logp.shape)
    sampled = np.argmax(logp + g_sample, axis=-1)
    g_rank = rng.gumbel(size=rows.size)
    anneal = choice_noise * (1.0 - (t + 1) / total_steps)

    if critic is not None:
        filled = state.tokens.copy()
        filled[rows] = sampled
        with no_grad():
            real_prob = critic(filled).probs.data[0]
        conf = np.log(np.clip(real_prob[rows].astype(np.float64),
                              1e-7, 1.0)) + anneal * g_rank
    else:
        conf = logp[np.arange(rows.size), sampled] + anneal * g_rank

    m_next = math.ceil(mask_schedule(t + 1, total_steps) * n_free)
    m_next = max(0, min(m_next, n_masked - 1))
    # high confidence first; ties resolved toward the lowest position index
    order = np.lexsort((rows, -conf))
    reveal = order[:n_masked - m_next]

    tokens = state.tokens.copy()
    tokens[rows[reveal]] = sampled[reveal]
    return DecodeState(tokens, state.fixed.copy(), state.mask_token_id,
                       state.step + 1)


def _check_compatible(tokenizer: VideoTokenizer, model: TokenGenerator):
    tc, mc = tokenizer.cfg, model.cfg
    if tc.vocab != mc.vocab:
        raise ValueError(f"tokenizer vocab {tc.vocab} != generator vocab "
                         f"{mc.vocab}")
    if tc.seq_len != mc.seq_len:
        raise ValueError(f"tokenizer seq_len {tc.seq_len} != generator "
                         f"seq_len {mc.seq_len}")


def generate_with_state(request: GenerationRequest,
                        tokenizer: VideoTokenizer, model: TokenGenerator,
                        embedder: EcgPatchEmbedder,
                        critic: TokenCritic | None = None):
    """Full decode returning (clip, final DecodeState)."""
    _check_compatible(tokenizer, model)
    rng = np.random.default_rng(request.seed)
    with no_grad():
        cond = encode_ecg(request.ecg, embedder.patch_size, embedder)
    state = init_state(request, tokenizer)
    use_critic = critic if request.use_critic else None
    for t in range(request.steps):
        state = decode_step(state, model, cond, t, request.steps, rng,
                            lambda_cfg=request.lambda_cfg,
                            temperature=request.temperature,
                            choice_noise=request.choice_noise,
                            critic=use_critic)
    assert state.n_masked == 0, "schedule must finish at zero masked"
    grid = seq_to_grid(state.tokens, tokenizer.cfg)
    return tokenizer.decode(grid), state


def generate(request: GenerationRequest, tokenizer: VideoTokenizer,
             model: TokenGenerator, embedder: EcgPatchEmbedder,
             critic: TokenCritic | None = None) -> np.ndarray:
    """Decode one clip; (frames, H, W, C) float32 in [0, 1]."""
    clip, _ = generate_with_state(request, tokenizer, model, embedder,
                                  critic)
    return clip


def extrapolate(prev_clip: np.ndarray, ecg_next: ECGSignal,
                tokenizer: VideoTokenizer, model: TokenGenerator,
                embedder: EcgPatchEmbedder, *, lambda_cfg: float = 1.5,
                steps: int = 12, temperature: float = 1.0,
                k_overlap: int | None = None, seed: int = 0,
                choice_noise: float = 1.0, use_critic: bool = False,
                critic: TokenCritic | None = None) -> np.ndarray:
    """Decode the continuation of prev_clip; returns only the new frames.

    The last k_overlap frames of prev_clip are re-encoded and pinned, the
    rest of the grid is decoded against ecg_next, and the overlapped frames
    are dropped so the result concatenates directly onto prev_clip.
    """
    request = GenerationRequest(
        mode=CONTINUATION, ecg=ecg_next, prev_clip=prev_clip,
        lambda_cfg=lambda_cfg, steps=steps, temperature=temperature,
        k_overlap=k_overlap, seed=seed, choice_noise=choice_noise,
        use_critic=use_critic)
    k = _resolve_k_overlap(request, tokenizer.cfg)
    clip = generate(request, tokenizer, model, embedder, critic)
    return clip[k:]


def generate_long(request: GenerationRequest, tokenizer: VideoTokenizer,
                  model: TokenGenerator, embedder: EcgPatchEmbedder,
                  ecg_windows: list[ECGSignal],
                  critic: TokenCritic | None = None) -> np.ndarray:
    """First clip from the request, then one extrapolation per ECG window.

    Chunk i uses seed request.seed + i + 1, so the whole sequence is a pure
    function of the request.  Output frame count is
    frames + len(ecg_windows) * (frames - k_overlap).
    """
    video = generate(request, tokenizer, model, embedder, critic)
    for i, win in enumerate(ecg_windows):
        new = extrapolate(video, win, tokenizer, model, embedder,
                          lambda_cfg=request.lambda_cfg,
                          steps=request.steps,
                          temperature=request.temperature,
                          k_overlap=request.k_overlap,
                          seed=request.seed + i + 1,
                          choice_noise=request.choice_noise,
                          use_critic=request.use_critic, critic=critic)
        video = np.concatenate([video, new], axis=0)
    return video
