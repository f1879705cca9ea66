"""ECG conditioning: signals, per-lead normalization, patching, and a
trainable patch embedder.

The embedder stands in for a frozen pretrained ECG encoder: it keeps the
same interface (patches in, one D-dimensional embedding per patch out) so a
real encoder could be dropped in, but its projection, position table, and
lead table are ordinary trainable parameters learned with the generator.

Signals whose length is not a multiple of the patch size are zero-padded to
a full final patch; the accompanying validity mask tells the generator which
patches are real, and padded patches are masked out of attention entirely.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .container import read_tensor, write_tensor
from .layers import Linear, Module, param


@dataclass
class ECGSignal:
    """Multi-lead ECG: samples (L, T) in millivolts at a fixed rate."""
    samples: np.ndarray
    sample_rate_hz: int
    lead_names: tuple[str, ...]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be (leads, time), got shape "
                             f"{self.samples.shape}")
        l, t = self.samples.shape
        if l < 1 or t < 1:
            raise ValueError(f"empty signal: shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite ECG samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got "
                             f"{self.sample_rate_hz}")
        self.lead_names = tuple(str(n) for n in self.lead_names)
        if len(self.lead_names) != l:
            raise ValueError(f"{len(self.lead_names)} lead names for {l} "
                             f"leads")

    @property
    def n_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sample_rate_hz


def normalize(sig: ECGSignal) -> ECGSignal:
    """Per-lead z-score with the standard deviation floored at 1e-6.

    A constant lead maps to zeros; applying twice is the identity within
    float tolerance.
    """
    if sig.n_samples < 2:
        raise ValueError("normalization needs at least 2 samples per lead")
    x = sig.samples
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    scaled = (x - mean) / np.maximum(std, 1e-6)
    return ECGSignal(scaled.astype(np.float32), sig.sample_rate_hz,
                     sig.lead_names)


def patchify_ecg(sig: ECGSignal, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut each lead into contiguous length-p windows.

    Returns (patches, valid): patches is (L, n, p) with n = ceil(T/p) and a
    zero-padded tail when T is ragged; valid is an (n,) boolean row that is
    False exactly on the padded final patch.
    """
    if p <= 0:
        raise ValueError(f"patch size must be positive, got {p}")
    l, t = sig.samples.shape
    if p > t:
        raise ValueError(f"patch size {p} exceeds signal length {t}")
    n = math.ceil(t / p)
    padded = np.zeros((l, n * p), dtype=np.float32)
    padded[:, :t] = sig.samples
    patches = padded.reshape(l, n, p)
    valid = np.ones(n, dtype=bool)
    if t % p:
        valid[-1] = False
    return patches, valid


class EcgPatchEmbedder(Module):
    """Patches -> embeddings: linear projection + position + lead tables."""

    def __init__(self, patch_size: int, dim: int, max_patches: int,
                 max_leads: int, rng: np.random.Generator):
        super().__init__()
        self.patch_size = patch_size
        self.dim = dim
        self.max_patches = max_patches
        self.max_leads = max_leads
        self.proj = Linear(patch_size, dim, rng)
        self.pos = param(rng, (max_patches, dim))
        self.lead = param(rng, (max_leads, dim))

    def forward(self, patches: np.ndarray) -> Tensor:
        """(L, n, p) -> (L, n, D)."""
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim != 3 or patches.shape[2] != self.patch_size:
            raise ValueError(f"expected (leads, patches, {self.patch_size}), "
                             f"got {patches.shape}")
        l, n, _ = patches.shape
        if n > self.max_patches:
            raise ValueError(f"{n} patches exceeds position table size "
                             f"{self.max_patches}")
        if l > self.max_leads:
            raise ValueError(f"{l} leads exceeds lead table size "
                             f"{self.max_leads}")
        x = self.proj(Tensor(patches))              # (L, n, D)
        x = x + self.pos[:n]                        # broadcast over leads
        return x + self.lead[:l].reshape(l, 1, self.dim).expand(l, n, self.dim)

    __call__ = forward

    def embed_batch(self, patches: np.ndarray) -> Tensor:
        """Batched variant: (B, L, n, p) -> (B, L*n, D), lead-major rows."""
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim != 4 or patches.shape[3] != self.patch_size:
            raise ValueError(f"expected (batch, leads, patches, "
                             f"{self.patch_size}), got {patches.shape}")
        b, l, n, _ = patches.shape
        if n > self.max_patches:
            raise ValueError(f"{n} patches exceeds position table size "
                             f"{self.max_patches}")
        if l > self.max_leads:
            raise ValueError(f"{l} leads exceeds lead table size "
                             f"{self.max_leads}")
        x = self.proj(Tensor(patches))              # (B, L, n, D)
        x = x + self.pos[:n]
        lead = self.lead[:l].reshape(1, l, 1, self.dim).expand(b, l, n,
                                                               self.dim)
        return (x + lead).reshape(b, l * n, self.dim)


@dataclass
class ECGEmbeddingSeq:
    """Embedded conditioning sequence plus its patch validity row."""
    embeddings: Tensor            # (L, n, D)
    patch_size: int
    valid: np.ndarray             # (n,) bool, False on the padded tail patch
    source_samples: int           # T before padding

    def __post_init__(self):
        l, n, d = self.embeddings.shape
        expect_n = math.ceil(self.source_samples / self.patch_size)
        if n != expect_n:
            raise ValueError(f"{n} patches inconsistent with "
                             f"{self.source_samples} samples at patch size "
                             f"{self.patch_size}")
        if self.valid.shape != (n,):
            raise ValueError(f"validity shape {self.valid.shape} != ({n},)")

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[1]

    def flat(self) -> tuple[Tensor, np.ndarray]:
        """Lead-major flattening to ((L*n, D), (L*n,) validity)."""
        l, n, d = self.embeddings.shape
        return (self.embeddings.reshape(l * n, d),
                np.tile(self.valid, l))


def encode_ecg(sig: ECGSignal, patch_size: int,
               embedder: EcgPatchEmbedder) -> ECGEmbeddingSeq:
    """Normalize, patch, and embed one signal."""
    normed = normalize(sig)
    patches, valid = patchify_ecg(normed, patch_size)
    emb = embedder(patches)
    return ECGEmbeddingSeq(emb, patch_size, valid, sig.n_samples)


# -- file formats -------------------------------------------------------------


def _sidecar_path(path) -> str:
    return str(path) + ".meta"


def write_ecg(path: str, sig: ECGSignal) -> None:
    """Tensor container (L, T) float32 plus a one-line text sidecar."""
    for name in sig.lead_names:
        if "," in name or ";" in name or "=" in name:
            raise ValueError(f"lead name {name!r} contains a reserved "
                             f"character")
    write_tensor(path, sig.samples)
    with open(_sidecar_path(path), "w", encoding="ascii") as fh:
        fh.write(f"sample_rate_hz={sig.sample_rate_hz};"
                 f"leads={','.join(sig.lead_names)}\n")


def read_ecg(path: str) -> ECGSignal:
    samples = read_tensor(path)
    side = _sidecar_path(path)
    if not os.path.exists(side):
        raise FileNotFoundError(f"missing ECG sidecar {side}")
    with open(side, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
    fields = dict(part.split("=", 1) for part in line.split(";") if part)
    if "sample_rate_hz" not in fields or "leads" not in fields:
        raise ValueError(f"malformed ECG sidecar {side}: {line!r}")
    leads = tuple(fields["leads"].split(","))
    return ECGSignal(samples, int(fields["sample_rate_hz"]), leads)


def read_ecg_csv(path: str, sample_rate_hz: int) -> ECGSignal:
    """CSV with a header row of lead names and one column per lead."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one sample")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]],
                        dtype=np.float32)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric sample ({exc})") from exc
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: {data.shape[1]} columns vs "
                         f"{len(header)} header names")
    return ECGSignal(data.T, sample_rate_hz, tuple(header))
