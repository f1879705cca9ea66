"""Tokenizer training objective.

Four terms: pixel reconstruction (mean squared error), a feature-space
perceptual distance over a few randomly chosen frames, a codebook pull term
with a stop-gradient on the encoder side, and a hinge adversarial term scored
by a small patch discriminator.  The adversarial term is weighted by the
ratio of perceptual to adversarial gradient norms at the decoder's last
layer, so the discriminator can never dominate the pixel objective.

All loss functions take and return autodiff tensors so they can sit inside a
training graph; plain arrays are promoted to constants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .layers import Linear, Module, ModuleList

log = logging.getLogger(__name__)

LAMBDA_MAX = 1e4


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


@dataclass
class LossBreakdown:
    """One training step's loss components, all plain finite floats."""
    recon: float
    percep: float
    vq: float
    gan_gen: float
    lambda_adaptive: float
    total: float
    disc_loss: float

    CSV_HEADER = "step,recon,percep,vq,gan_gen,lambda_adaptive,total,disc_loss"

    @classmethod
    def assemble(cls, recon: float, percep: float, vq: float, gan_gen: float,
                 lambda_adaptive: float, disc_loss: float) -> "LossBreakdown":
        parts = {"recon": recon, "percep": percep, "vq": vq,
                 "gan_gen": gan_gen, "lambda_adaptive": lambda_adaptive,
                 "disc_loss": disc_loss}
        for name, value in parts.items():
            if not np.isfinite(value):
                raise ValueError(f"non-finite loss component '{name}': "
                                 f"{value}")
        total = recon + percep + vq + lambda_adaptive * gan_gen
        return cls(recon=float(recon), percep=float(percep), vq=float(vq),
                   gan_gen=float(gan_gen),
                   lambda_adaptive=float(lambda_adaptive),
                   total=float(total), disc_loss=float(disc_loss))

    def csv_row(self, step: int) -> str:
        return (f"{step},{self.recon:.8g},{self.percep:.8g},{self.vq:.8g},"
                f"{self.gan_gen:.8g},{self.lambda_adaptive:.8g},"
                f"{self.total:.8g},{self.disc_loss:.8g}")


def total_loss(parts: LossBreakdown) -> float:
    """Recompute the weighted sum from the components (weight held fixed)."""
    return (parts.recon + parts.percep + parts.vq
            + parts.lambda_adaptive * parts.gan_gen)


def recon_loss(target, recon) -> Tensor:
    """Mean squared pixel error: sum of squared differences over the element
    count."""
    t = _as_tensor(target)
    r = _as_tensor(recon)
    if t.shape != r.shape:
        raise ValueError(f"reconstruction shape {r.shape} != target shape "
                         f"{t.shape}")
    diff = r - t
    return (diff * diff).mean()


def perceptual_loss(target, recon, extractor, m_frames: int,
                    rng: np.random.Generator) -> Tensor:
    """Feature-space distance over a few frames per clip.

    For each clip, ``m_frames`` frame indices are drawn without replacement;
    the extractor maps each frame to a feature tensor and the loss is the
    mean squared feature difference over every selected feature element.
    With an identity extractor this reduces to the pixel loss restricted to
    the selected frames.
    """
    t = _as_tensor(target)
    r = _as_tensor(recon)
    if t.shape != r.shape:
        raise ValueError(f"reconstruction shape {r.shape} != target shape "
                         f"{t.shape}")
    if t.data.ndim == 4:                       # single clip -> batch of one
        t = t.reshape(1, *t.shape)
        r = r.reshape(1, *r.shape)
    b, f = t.shape[0], t.shape[1]
    if not (1 <= m_frames <= f):
        raise ValueError(f"m_frames {m_frames} out of range [1, {f}]")
    total: Tensor | None = None
    count = 0
    for i in range(b):
        picks = rng.choice(f, size=m_frames, replace=False)
        for j in picks:
            j = int(j)
            ft = extractor(t[i, j])
            fr = extractor(r[i, j])
            for side, feat in (("target", ft), ("reconstruction", fr)):
                if not np.all(np.isfinite(feat.data)):
                    raise ValueError(
                        f"feature extractor produced non-finite values on "
                        f"the {side} branch, clip {i} frame {j}")
            d = fr - ft
            sq = (d * d).sum()
            total = sq if total is None else total + sq
            count += d.size
    return total * (1.0 / count)


class RandomProjectionExtractor:
    """Frozen random linear frame features.

    Stands in for a pretrained feature network: a fixed Gaussian projection
    preserves squared distances in expectation, so matching projections is a
    soft proxy for matching frames without training anything.
    """

    def __init__(self, frame_shape: tuple[int, int, int], feat_dim: int = 64,
                 seed: int = 0):
        h, w, c = frame_shape
        n = h * w * c
        rng = np.random.default_rng(seed)
        m = rng.normal(0.0, 1.0 / math.sqrt(n), size=(n, feat_dim))
        self.matrix = Tensor(m.astype(np.float32))
        self.frame_shape = (h, w, c)

    def __call__(self, frame: Tensor) -> Tensor:
        if tuple(frame.shape) != self.frame_shape:
            raise ValueError(f"frame shape {frame.shape} != extractor shape "
                             f"{self.frame_shape}")
        flat = frame.reshape(1, self.matrix.shape[0])
        return (flat @ self.matrix).reshape(self.matrix.shape[1])


def identity_extractor(frame: Tensor) -> Tensor:
    return frame.reshape(frame.size)


def vq_loss(z_e, e, beta: float = 0.25) -> Tensor:
    """Quantization pull term: beta * ||stop_grad(z_e) - e||^2 (summed).

    The gradient reaches only the second argument.  For a codebook
    bottleneck that is the selected codebook rows; for the sign bottleneck
    the caller passes the quantized targets first and the pre-quantization
    latents second, which turns the same expression into a commitment pull
    on the encoder.
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    z = _as_tensor(z_e).detach()
    q = _as_tensor(e)
    if z.shape != q.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {q.shape}")
    d = q - z
    return (d * d).sum() * beta


def gan_generator_loss(disc_scores) -> Tensor:
    """Generator side of the hinge objective: negated mean critic score."""
    s = _as_tensor(disc_scores)
    if not np.all(np.isfinite(s.data)):
        raise ValueError("non-finite discriminator scores")
    return -s.mean()


def discriminator_loss(real_scores, fake_scores) -> Tensor:
    """Hinge loss: mean(relu(1 - real)) + mean(relu(1 + fake))."""
    r = _as_tensor(real_scores)
    f = _as_tensor(fake_scores)
    for name, s in (("real", r), ("fake", f)):
        if not np.all(np.isfinite(s.data)):
            raise ValueError(f"non-finite {name} discriminator scores")
    return (1.0 - r).relu().mean() + (1.0 + f).relu().mean()


def adaptive_weight(percep_grad_norm: float, gan_grad_norm: float,
                    eps: float = 1e-6) -> float:
    """Gradient-ratio weight for the adversarial term, clamped to [0, 1e4].

    Non-finite norms force the weight to zero for the step rather than
    poisoning the update; the event is logged.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    p, g = float(percep_grad_norm), float(gan_grad_norm)
    if not (math.isfinite(p) and math.isfinite(g)):
        log.warning("non-finite gradient norm (percep=%r, gan=%r); "
                    "adaptive weight forced to 0 this step", p, g)
        return 0.0
    if p < 0 or g < 0:
        raise ValueError(f"gradient norms must be nonnegative, got "
                         f"({p}, {g})")
    return min(p / (g + eps), LAMBDA_MAX)


def grad_norm(params) -> float:
    """Euclidean norm over the concatenated gradients of ``params``.

    Parameters without a gradient contribute nothing.  Accumulated in double
    precision so the ratio in adaptive_weight is stable.
    """
    acc = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            acc += float((g * g).sum())
    return math.sqrt(acc)


# -- patch discriminator ------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    """Strided per-frame patch scorer pooled to one score per video.

    ``strides[0]`` is the initial non-overlapping patch size; each later
    stride merges that many neighboring sites per axis.  ``widths`` gives the
    feature width after each stage.
    """
    strides: tuple[int, ...] = (8, 2)
    widths: tuple[int, ...] = (32, 64)
    temporal_pool: str = "mean"

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.strides) != len(self.widths):
            raise ValueError(f"{len(self.strides)} strides vs "
                             f"{len(self.widths)} widths")
        if not self.strides:
            raise ValueError("at least one stage required")
        if any(s < 1 for s in self.strides) or any(w < 1 for w in self.widths):
            raise ValueError("strides and widths must be positive")
        if self.temporal_pool != "mean":
            raise ValueError(f"unsupported temporal pool "
                             f"{self.temporal_pool!r}")


class PatchDiscriminator(Module):
    """Scores a video batch with one real/fake logit per clip."""

    def __init__(self, cfg: DiscriminatorConfig, channels: int,
                 rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        d_in = cfg.strides[0] * cfg.strides[0] * channels
        stages = [Linear(d_in, cfg.widths[0], rng)]
        for i in range(1, len(cfg.strides)):
            s = cfg.strides[i]
            stages.append(Linear(cfg.widths[i - 1] * s * s, cfg.widths[i],
                                 rng))
        self.stages = ModuleList(stages)
        self.head = Linear(cfg.widths[-1], 1, rng)

    def forward(self, clips) -> Tensor:
        """(B, F, H, W, C) pixels -> (B,) scores."""
        x = _as_tensor(clips)
        if x.data.ndim != 5 or x.shape[4] != self.channels:
            raise ValueError(f"expected (B, F, H, W, {self.channels}), got "
                             f"{x.shape}")
        b, f, h, w, c = x.shape
        cfg = self.cfg
        hp, wp = h, w
        x = x.reshape(b * f, h, w, c)
        for i, s in enumerate(cfg.strides):
            if hp % s or wp % s:
                raise ValueError(f"stage {i}: grid {hp}x{wp} not divisible "
                                 f"by stride {s}")
            d = x.shape[-1]
            x = x.reshape(b * f, hp // s, s, wp // s, s, d)
            x = x.permute(0, 1, 3, 2, 4, 5)
            hp, wp = hp // s, wp // s
            x = x.reshape(b * f, hp * wp, s * s * d)
            x = self.stages[i](x).gelu()
            x = x.reshape(b * f, hp, wp, x.shape[-1])
        x = x.reshape(b * f, hp * wp, x.shape[-1]).mean(axis=1)  # (BF, d)
        x = x.reshape(b, f, x.shape[-1]).mean(axis=1)            # (B, d)
        return self.head(x).reshape(b)

    __call__ = forward
