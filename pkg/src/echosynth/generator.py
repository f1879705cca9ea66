"""Masked-token video generator conditioned on ECG embeddings.

A bidirectional transformer sees the ECG conditioning as a prefix (with its
own modality and position embeddings) followed by the video token sequence.
Video tokens carry one extra vocabulary row used as the mask sentinel.
Training replaces a cosine-scheduled fraction of token positions with the
sentinel and minimizes the negative log-likelihood of the originals at
exactly those positions; the conditioning is sometimes dropped entirely
(enabling classifier-free guidance at sampling time) and otherwise has
random patches hidden behind a learned mask embedding.

A small token critic scores each position of a filled-in sequence with the
probability that it holds a real rather than model-predicted token; it is
trained with binary cross-entropy against the ground-truth mask pattern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, embedding, masked_nll
from .ecg import ECGEmbeddingSeq, EcgPatchEmbedder
from .layers import (LayerNorm, Linear, Module, ModuleList, TransformerBlock,
                     key_padding_mask, param)
from .optim import AdamState, EmaState, adam_step, ema_init, ema_update


@dataclass
class GeneratorConfig:
    vocab: int                 # real token vocabulary; the mask id is vocab
    dim: int = 64
    depth: int = 3
    heads: int = 4
    head_dim: int = 16
    ff_mult: int = 4
    seq_len: int = 48          # video token positions, matches the tokenizer
    cond_len: int = 16         # maximum conditioning prefix length
    critic_depth: int = 2

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError(f"vocab {self.vocab} too small")
        if self.dim != self.heads * self.head_dim:
            raise ValueError(f"dim {self.dim} must equal heads*head_dim "
                             f"{self.heads * self.head_dim}")
        if self.seq_len < 1 or self.cond_len < 1:
            raise ValueError("seq_len and cond_len must be positive")
        if self.depth < 1 or self.critic_depth < 1:
            raise ValueError("depth must be positive")

    @property
    def mask_token_id(self) -> int:
        return self.vocab


@dataclass
class MaskPlan:
    """One decoding step's masking bookkeeping."""
    step: int
    total_steps: int
    masked: np.ndarray         # (seq_len,) bool
    ratio: float

    def __post_init__(self):
        if not (0 <= self.step <= self.total_steps):
            raise ValueError(f"step {self.step} outside [0, "
                             f"{self.total_steps}]")
        if not (0.0 <= self.ratio <= 1.0):
            raise ValueError(f"ratio {self.ratio} outside [0, 1]")


@dataclass
class CriticScores:
    """Per-position probability that a token is real (not model output)."""
    probs: Tensor              # (B, seq_len), values in [0, 1]

    def __post_init__(self):
        p = self.probs.data
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("critic scores must lie in [0, 1]")


def mask_schedule(t: float, total_steps: float) -> float:
    """Masked fraction after t of total_steps: cos(pi*t / (2*total)).

    The endpoint is pinned to exactly 0.0; float cos(pi/2) is ~6e-17, and
    any positive residue would leave ceil(fraction * n) at one forever.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= t <= total_steps):
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if t == total_steps:
        return 0.0
    return math.cos(math.pi * t / (2.0 * total_steps))


def mask_tokens(tokens: np.ndarray, ratio: float, mask_token_id: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace ceil(ratio * seq_len) positions per row with the sentinel.

    Returns (masked_tokens, indicator); the indicator is 1.0 exactly where a
    replacement happened.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    toks = np.asarray(tokens)
    squeeze = toks.ndim == 1
    if squeeze:
        toks = toks[None]
    b, s = toks.shape
    count = math.ceil(ratio * s)
    out = toks.copy()
    ind = np.zeros((b, s), dtype=np.float32)
    for i in range(b):
        if count:
            picks = rng.choice(s, size=count, replace=False)
            out[i, picks] = mask_token_id
            ind[i, picks] = 1.0
    if squeeze:
        return out[0], ind[0]
    return out, ind


class TokenGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg
        self.token_emb = param(rng, (c.vocab + 1, c.dim))
        self.pos_video = param(rng, (c.seq_len, c.dim))
        self.pos_cond = param(rng, (c.cond_len, c.dim))
        self.modality_video = param(rng, (c.dim,))
        self.modality_cond = param(rng, (c.dim,))
        self.null_cond = param(rng, (1, c.dim))
        self.cond_mask_emb = param(rng, (1, c.dim))
        self.blocks = ModuleList(
            TransformerBlock(c.dim, c.heads, c.head_dim, c.ff_mult, rng)
            for _ in range(c.depth))
        self.norm = LayerNorm(c.dim)
        self.head = Linear(c.dim, c.vocab, rng)

    # -- conditioning plumbing ------------------------------------------------

    def _cond_prefix(self, cond, batch: int):
        """Normalize the conditioning argument to ((B, C, D), (B, C) valid).

        None selects the learned null-condition slot.  An embedding sequence
        is broadcast across the batch; a (tensor, valid) pair is taken as
        an already-batched prefix.
        """
        c = self.cfg
        if cond is None:
            emb = self.null_cond.reshape(1, 1, c.dim).expand(batch, 1, c.dim)
            valid = np.ones((batch, 1), dtype=bool)
            return emb, valid
        if isinstance(cond, ECGEmbeddingSeq):
            flat, valid_row = cond.flat()
            n = flat.shape[0]
            emb = flat.reshape(1, n, c.dim).expand(batch, n, c.dim)
            valid = np.broadcast_to(valid_row[None], (batch, n)).copy()
        else:
            emb, valid = cond
            valid = np.asarray(valid, dtype=bool)
            if emb.data.ndim != 3 or valid.shape != emb.shape[:2]:
                raise ValueError(f"batched condition shapes {emb.shape} / "
                                 f"{valid.shape} inconsistent")
        if emb.shape[1] > c.cond_len:
            raise ValueError(f"conditioning length {emb.shape[1]} exceeds "
                             f"cond_len {c.cond_len}")
        if emb.shape[0] != batch:
            raise ValueError(f"condition batch {emb.shape[0]} != token "
                             f"batch {batch}")
        return emb, valid

    def condition_dropout(self, cond, p_drop: float, patch_mask_rate: float,
                          rng: np.random.Generator):
        """Training-time conditioning corruption.

        With probability p_drop the whole condition is discarded (the
        forward pass then uses the null slot, the same path sampling uses
        for the unconditional branch).  Otherwise each patch embedding is
        independently replaced by a learned hidden-patch embedding with the
        given rate.
        """
        if not (0.0 <= p_drop <= 1.0 and 0.0 <= patch_mask_rate <= 1.0):
            raise ValueError("dropout probabilities must lie in [0, 1]")
        if cond is None or rng.uniform() < p_drop:
            return None
        emb, valid = cond
        if patch_mask_rate > 0.0:
            b, n, d = emb.shape
            hide = (rng.uniform(size=(b, n)) < patch_mask_rate)
            m = Tensor(hide.astype(np.float32).reshape(b, n, 1)
                       .repeat(d, axis=2))
            replace = self.cond_mask_emb.reshape(1, 1, d).expand(b, n, d)
            emb = emb * (1.0 - m) + replace * m
        return emb, valid

    # -- forward --------------------------------------------------------------

    def forward_logits(self, tokens: np.ndarray, cond=None,
                       frame_prefix: np.ndarray | None = None) -> Tensor:
        """Token ids (with mask sentinels) -> logits at video positions only.

        tokens: (seq_len,) or (B, seq_len) integers in [0, vocab].  The
        optional frame_prefix overwrites the first positions of every row
        with fixed token ids before embedding.
        """
        c = self.cfg
        toks = np.asarray(tokens)
        squeeze = toks.ndim == 1
        if squeeze:
            toks = toks[None]
        if toks.ndim != 2 or toks.shape[1] != c.seq_len:
            raise ValueError(f"token shape {np.asarray(tokens).shape} != "
                             f"(batch, {c.seq_len})")
        if toks.size and (toks.min() < 0 or toks.max() > c.mask_token_id):
            raise ValueError(f"token id outside [0, {c.mask_token_id}]")
        if frame_prefix is not None:
            fp = np.asarray(frame_prefix)
            if fp.ndim != 1 or fp.size > c.seq_len:
                raise ValueError(f"frame prefix shape {fp.shape} invalid for "
                                 f"seq_len {c.seq_len}")
            toks = toks.copy()
            toks[:, :fp.size] = fp
        b = toks.shape[0]

        vid = embedding(self.token_emb, toks) + self.pos_video
        vid = vid + self.modality_video
        cond_emb, cond_valid = self._cond_prefix(cond, b)
        n_cond = cond_emb.shape[1]
        pref = cond_emb + self.pos_cond[:n_cond]
        pref = pref + self.modality_cond
        x = concat([pref, vid], axis=1)                 # (B, C+S, D)

        n_all = n_cond + c.seq_len
        valid_all = np.concatenate(
            [cond_valid, np.ones((b, c.seq_len), dtype=bool)], axis=1)
        mask = key_padding_mask(valid_all, c.heads, n_all)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        logits = self.head(x[:, n_cond:])               # video positions only
        if squeeze:
            return logits.reshape(c.seq_len, c.vocab)
        return logits

    __call__ = forward_logits


def mvtm_loss(logits: Tensor, targets: np.ndarray,
              mask_indicator: np.ndarray) -> Tensor:
    """Negative log-likelihood of the original tokens at masked positions,
    summed, divided by the batch size."""
    targets = np.asarray(targets)
    mask = np.asarray(mask_indicator, dtype=np.float32)
    if logits.data.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = targets[None]
        mask = mask[None]
    if targets.shape != logits.shape[:2] or mask.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets "
                         f"{targets.shape}, mask {mask.shape}")
    return masked_nll(logits, targets, mask, denom=float(logits.shape[0]))


# -- token critic -------------------------------------------------------------


class TokenCritic(Module):
    """Scores each position of a filled token sequence as real vs predicted."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg
        self.token_emb = param(rng, (c.vocab + 1, c.dim))
        self.pos = param(rng, (c.seq_len, c.dim))
        self.blocks = ModuleList(
            TransformerBlock(c.dim, c.heads, c.head_dim, c.ff_mult, rng)
            for _ in range(c.critic_depth))
        self.norm = LayerNorm(c.dim)
        self.head = Linear(c.dim, 1, rng)

    def forward(self, tokens: np.ndarray) -> CriticScores:
        c = self.cfg
        toks = np.asarray(tokens)
        if toks.ndim == 1:
            toks = toks[None]
        if toks.shape[1] != c.seq_len:
            raise ValueError(f"token shape {toks.shape} != (batch, "
                             f"{c.seq_len})")
        x = embedding(self.token_emb, toks) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        b = toks.shape[0]
        probs = self.head(x).reshape(b, c.seq_len).sigmoid()
        return CriticScores(probs)

    __call__ = forward


def critic_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Binary cross-entropy: real tokens labeled 1, predicted tokens 0.

    Scores are clamped to [1e-7, 1 - 1e-7] so the logs stay finite.
    """
    n = real_scores.size + fake_scores.size
    if n == 0:
        raise ValueError("no scores to train on")
    lo, hi = 1e-7, 1.0 - 1e-7
    r = real_scores.clip(lo, hi)
    f = fake_scores.clip(lo, hi)
    return -(r.log().sum() + (1.0 - f).log().sum()) * (1.0 / n)


# -- training -----------------------------------------------------------------


@dataclass
class GeneratorTrainState:
    """Trainer knobs; the paper-level defaults live in the run config."""
    p_drop: float = 0.1
    patch_mask_rate: float = 0.25
    lr: float = 1e-3
    critic_lr: float = 1e-3
    ema_decay: float = 0.995
    ema_every: int = 10
    train_critic: bool = True


class GeneratorTrainer:
    """Joint training of generator, ECG embedder, and token critic.

    The tokenizer is frozen upstream; batches arrive already tokenized.
    One step: draw a schedule position, mask, predict, update the generator
    (and embedder) on the masked NLL; then fill the masked sites with
    sampled predictions and update the critic on real-vs-predicted labels.
    """

    def __init__(self, model: TokenGenerator, embedder: EcgPatchEmbedder,
                 critic: TokenCritic | None, state: GeneratorTrainState,
                 seed: int):
        self.model = model
        self.embedder = embedder
        self.critic = critic
        self.state = state
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        gen_params = dict(model.named_parameters())
        gen_params.update({f"embedder.{k}": v
                           for k, v in embedder.named_parameters()})
        self.gen_params = gen_params
        self.opt = AdamState(lr=state.lr)
        self.ema = EmaState(decay=state.ema_decay,
                            update_every=state.ema_every)
        ema_init(self.ema, gen_params)
        if critic is not None and state.train_critic:
            self.critic_params = dict(critic.named_parameters())
            self.critic_opt = AdamState(lr=state.critic_lr)
        else:
            self.critic_params = None
            self.critic_opt = None

    @staticmethod
    def _zero(params):
        for p in params.values():
            p.grad = None

    @staticmethod
    def _grads(params):
        return {k: p.grad for k, p in params.items() if p.grad is not None}

    def _embed_cond(self, patches: np.ndarray, valid: np.ndarray):
        """(B, L, n, p) patches -> batched conditioning prefix."""
        b, l, n, p = patches.shape
        emb = self.embedder.embed_batch(patches)
        v = np.asarray(valid, dtype=bool)
        if v.shape != (b, l * n):
            raise ValueError(f"validity shape {v.shape} != ({b}, {l * n})")
        return emb, v

    def train_step(self, tokens: np.ndarray, cond_patches: np.ndarray,
                   cond_valid: np.ndarray) -> dict:
        """One optimization step; returns a scalar record for logging."""
        toks = np.asarray(tokens)
        b, s = toks.shape
        u = self.rng.uniform()
        ratio = mask_schedule(u, 1.0)
        masked, indicator = mask_tokens(toks, ratio,
                                        self.model.cfg.mask_token_id,
                                        self.rng)
        cond = self._embed_cond(cond_patches, cond_valid)
        cond = self.model.condition_dropout(cond, self.state.p_drop,
                                            self.state.patch_mask_rate,
                                            self.rng)
        logits = self.model.forward_logits(masked, cond)
        loss = mvtm_loss(logits, toks, indicator)
        record = {"step": self.step_count, "mask_ratio": ratio,
                  "masked": int(indicator.sum()),
                  "mvtm": float(loss.data), "critic": 0.0, "aborted": False}
        if not np.isfinite(loss.data):
            record["aborted"] = True
            self.step_count += 1
            return record
        self._zero(self.gen_params)
        loss.backward()
        try:
            adam_step(self.gen_params, self._grads(self.gen_params), self.opt)
        except FloatingPointError:
            record["aborted"] = True
            self.step_count += 1
            return record
        if self.opt.step % self.ema.update_every == 0:
            ema_update(self.ema, self.gen_params)

        if self.critic_params is not None and record["masked"] > 0:
            record["critic"] = self._critic_step(toks, logits.data, indicator)
        self.step_count += 1
        return record

    def _critic_step(self, tokens: np.ndarray, logits: np.ndarray,
                     indicator: np.ndarray) -> float:
        # fill masked sites with sampled predictions (gumbel-max), then
        # teach the critic to tell them from the originals
        g = self.rng.gumbel(size=logits.shape)
        sampled = np.argmax(logits + g, axis=-1)
        filled = np.where(indicator > 0, sampled, tokens)
        scores = self.critic(filled)
        flat = scores.probs.reshape(filled.size)
        fake_pos = indicator.reshape(-1) > 0
        loss = critic_loss(flat[~fake_pos], flat[fake_pos])
        if not np.isfinite(loss.data):
            return float("nan")
        self._zero(self.critic_params)
        loss.backward()
        try:
            adam_step(self.critic_params, self._grads(self.critic_params),
                      self.critic_opt)
        except FloatingPointError:
            return float("nan")
        return float(loss.data)


# -- checkpointing -------------------------------------------------------------


def save_generator_checkpoint(dirpath, trainer: GeneratorTrainer,
                              seed: int) -> None:
    """Persist generator + embedder + critic weights, EMA shadows, config."""
    from .container import save_checkpoint
    m = trainer.model
    e = trainer.embedder
    tensors: dict[str, np.ndarray] = {}
    tensors.update({f"gen.{k}": v for k, v in m.state_arrays().items()})
    tensors.update({f"embedder.{k}": v
                    for k, v in e.state_arrays().items()})
    tensors.update({f"ema.{k}": v for k, v in trainer.ema.shadow.items()})
    if trainer.critic is not None:
        tensors.update({f"critic.{k}": v
                        for k, v in trainer.critic.state_arrays().items()})
    c = m.cfg
    meta = {
        "kind": "generator",
        "step": str(trainer.step_count),
        "seed": str(seed),
        "ema_decay": repr(trainer.ema.decay),
        "vocab": str(c.vocab), "dim": str(c.dim), "depth": str(c.depth),
        "heads": str(c.heads), "head_dim": str(c.head_dim),
        "ff_mult": str(c.ff_mult), "seq_len": str(c.seq_len),
        "cond_len": str(c.cond_len), "critic_depth": str(c.critic_depth),
        "has_critic": str(int(trainer.critic is not None)),
        "ecg_patch_size": str(e.patch_size),
        "ecg_max_patches": str(e.max_patches),
        "ecg_max_leads": str(e.max_leads),
    }
    save_checkpoint(dirpath, tensors, meta)


def load_generator_checkpoint(dirpath):
    """Restore (model, embedder, critic_or_none, ema_shadows, meta)."""
    from .container import load_checkpoint
    tensors, meta = load_checkpoint(dirpath)
    if meta.get("kind") != "generator":
        raise ValueError(f"{dirpath}: checkpoint kind "
                         f"{meta.get('kind')!r} is not 'generator'")
    cfg = GeneratorConfig(
        vocab=int(meta["vocab"]), dim=int(meta["dim"]),
        depth=int(meta["depth"]), heads=int(meta["heads"]),
        head_dim=int(meta["head_dim"]), ff_mult=int(meta["ff_mult"]),
        seq_len=int(meta["seq_len"]), cond_len=int(meta["cond_len"]),
        critic_depth=int(meta["critic_depth"]))
    rng = np.random.default_rng(0)    # shapes only; data is overwritten
    model = TokenGenerator(cfg, rng)
    embedder = EcgPatchEmbedder(int(meta["ecg_patch_size"]), cfg.dim,
                                int(meta["ecg_max_patches"]),
                                int(meta["ecg_max_leads"]), rng)
    critic = (TokenCritic(cfg, rng)
              if meta.get("has_critic") == "1" else None)

    def subset(prefix):
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in tensors.items()
                if k.startswith(prefix + ".")}

    model.load_state(subset("gen"))
    embedder.load_state(subset("embedder"))
    if critic is not None:
        critic.load_state(subset("critic"))
    ema = {k[len("ema."):]: v for k, v in tensors.items()
           if k.startswith("ema.")}
    return model, embedder, critic, ema, meta
