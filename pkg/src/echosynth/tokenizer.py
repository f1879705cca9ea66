"""Factorized spatiotemporal video tokenizer with a discrete bottleneck.

The first frame is embedded on its own so a clip can be conditioned on a
single still image; the remaining T frames are grouped into temporal blocks
of P_t frames.  Each (block, site) patch is flattened, linearly projected to
the model width, and run through full spatial self-attention within its time
row followed by causal attention across time rows.  Row i of the token grid
therefore never depends on frames later than its own block, bitwise: masked
attention scores are driven to exactly zero probability (see layers.NEG_MASK).

Two interchangeable bottlenecks:

- ``vq``: nearest-neighbor lookup into a learned codebook of 2^K entries,
  ties resolved to the lowest index, straight-through gradient to the
  encoder, codebook trained by the quantization loss alone.
- ``lfq``: a learned D->K projection followed by per-coordinate sign
  quantization to {-1,+1}; the code id packs the sign bits (bit i set iff
  z_i > 0, zero goes to the minus branch).  A learned K->D projection feeds
  the decoder.

The decoder mirrors the encoder (causal temporal attention, then spatial)
and projects back to pixel patches.  ``decode`` clamps to [0, 1]; training
uses the raw reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, embedding, no_grad
from .layers import (Linear, LayerNorm, Module, ModuleList, TransformerBlock,
                     causal_mask, param)


@dataclass
class TokenizerConfig:
    height: int = 32
    width: int = 32
    channels: int = 1
    frames: int = 5            # T + 1, including the independent first frame
    patch: int = 8             # P_h = P_w
    patch_t: int = 2           # P_t, temporal block size
    dim: int = 64              # D
    depth_spatial: int = 2
    depth_temporal: int = 2
    heads: int = 4
    head_dim: int = 16
    ff_mult: int = 4
    quantizer: str = "lfq"     # "vq" | "lfq"
    code_bits: int = 10        # K; vocabulary is 2^K

    def __post_init__(self):
        if self.height % self.patch:
            raise ValueError(f"height {self.height} not divisible by patch "
                             f"{self.patch}")
        if self.width % self.patch:
            raise ValueError(f"width {self.width} not divisible by patch "
                             f"{self.patch}")
        if self.frames < 2:
            raise ValueError("frames must be at least 2 (first frame plus "
                             "one temporal block)")
        if (self.frames - 1) % self.patch_t:
            raise ValueError(f"frames beyond the first ({self.frames - 1}) "
                             f"not divisible by patch_t {self.patch_t}")
        if self.dim != self.heads * self.head_dim:
            raise ValueError(f"dim {self.dim} must equal heads*head_dim "
                             f"{self.heads * self.head_dim}")
        if self.quantizer not in ("vq", "lfq"):
            raise ValueError(f"unknown quantizer {self.quantizer!r}")
        if not (1 <= self.code_bits <= 24):
            raise ValueError(f"code_bits {self.code_bits} out of range")

    @property
    def h_sites(self) -> int:
        return self.height // self.patch

    @property
    def w_sites(self) -> int:
        return self.width // self.patch

    @property
    def sites(self) -> int:
        return self.h_sites * self.w_sites

    @property
    def t_rows(self) -> int:
        # one row for the standalone first frame plus T/P_t block rows
        return 1 + (self.frames - 1) // self.patch_t

    @property
    def seq_len(self) -> int:
        return self.t_rows * self.sites

    @property
    def vocab(self) -> int:
        return 2 ** self.code_bits


@dataclass
class TokenGrid:
    """Discrete clip representation: integer codes on a (rows, H', W') grid."""
    codes: np.ndarray
    vocab: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if not np.issubdtype(self.codes.dtype, np.integer):
            raise TypeError("token codes must be integers")
        if self.codes.ndim != 3:
            raise ValueError(f"token grid must be rank 3 (rows, h, w), got "
                             f"shape {self.codes.shape}")
        if self.codes.size and (self.codes.min() < 0
                                or self.codes.max() >= self.vocab):
            raise ValueError(f"token code out of range [0, {self.vocab})")


def grid_to_seq(grid: TokenGrid) -> np.ndarray:
    """Flatten row-major (t, h, w); inverse of seq_to_grid."""
    return grid.codes.reshape(-1).copy()


def seq_to_grid(seq: np.ndarray, cfg: TokenizerConfig) -> TokenGrid:
    seq = np.asarray(seq)
    if seq.size != cfg.seq_len:
        raise ValueError(f"sequence length {seq.size} != grid size "
                         f"{cfg.seq_len}")
    return TokenGrid(seq.reshape(cfg.t_rows, cfg.h_sites, cfg.w_sites).copy(),
                     cfg.vocab)


# -- patch extraction (pure shape arithmetic on pixel arrays) -----------------


def extract_image_patches(frames: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, S, patch*patch*C), sites in row-major (h', w')."""
    b, h, w, c = frames.shape
    hp, wp = h // patch, w // patch
    x = frames.reshape(b, hp, patch, wp, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, hp * wp, patch * patch * c))


def extract_video_patches(frames: np.ndarray, patch: int,
                          patch_t: int) -> np.ndarray:
    """(B, T, H, W, C) -> (B, T', S, patch_t*patch*patch*C).

    Patch layout is (t, h, w, c) flattened innermost-last, matching the
    decoder's unpatchify.
    """
    b, t, h, w, c = frames.shape
    tp, hp, wp = t // patch_t, h // patch, w // patch
    x = frames.reshape(b, tp, patch_t, hp, patch, wp, patch, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)  # b, t', h', w', pt, ph, pw, c
    return np.ascontiguousarray(
        x.reshape(b, tp, hp * wp, patch_t * patch * patch * c))


# -- quantizers (pure) --------------------------------------------------------


def vq_quantize(z: np.ndarray, codebook: np.ndarray,
                chunk: int = 2048) -> np.ndarray:
    """Nearest code by squared Euclidean distance; ties go to the lowest index.

    z: (..., D); codebook: (V, D).  Distances are evaluated directly as
    sum((z - c)^2) so that ties resolve identically to a brute-force scan.
    """
    z = np.asarray(z)
    if z.shape[-1] != codebook.shape[1]:
        raise ValueError(f"latent dim {z.shape[-1]} != codebook dim "
                         f"{codebook.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i in range(0, flat.shape[0], chunk):
        part = flat[i:i + chunk]
        d = ((part[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
        out[i:i + chunk] = np.argmin(d, axis=1)  # argmin takes first == lowest
    return out.reshape(z.shape[:-1])


def lfq_quantize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign quantization: bit i of the code is 1 iff z_i > 0 (zero -> 0).

    Returns (codes, q) with q in {-1, +1}^K.
    """
    z = np.asarray(z)
    bits = z > 0
    k = z.shape[-1]
    weights = (1 << np.arange(k, dtype=np.int64))
    codes = (bits.astype(np.int64) * weights).sum(axis=-1)
    q = np.where(bits, 1.0, -1.0).astype(np.float32)
    return codes, q


def lfq_dequantize(codes: np.ndarray, code_bits: int) -> np.ndarray:
    """Inverse of the bit packing: codes -> {-1, +1}^K vectors."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << code_bits)):
        raise ValueError(f"code out of range [0, {1 << code_bits})")
    bits = (codes[..., None] >> np.arange(code_bits, dtype=np.int64)) & 1
    return np.where(bits > 0, 1.0, -1.0).astype(np.float32)


# -- the model ----------------------------------------------------------------


class VideoTokenizer(Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg
        pdim_img = c.patch * c.patch * c.channels
        pdim_vid = c.patch_t * pdim_img

        self.img_proj = Linear(pdim_img, c.dim, rng)
        self.vid_proj = Linear(pdim_vid, c.dim, rng)
        self.pos_spatial = param(rng, (c.sites, c.dim))
        self.pos_temporal = param(rng, (c.t_rows, c.dim))
        self.enc_spatial = ModuleList(
            TransformerBlock(c.dim, c.heads, c.head_dim, c.ff_mult, rng)
            for _ in range(c.depth_spatial))
        self.enc_temporal = ModuleList(
            TransformerBlock(c.dim, c.heads, c.head_dim, c.ff_mult, rng)
            for _ in range(c.depth_temporal))
        self.enc_norm = LayerNorm(c.dim)

        if c.quantizer == "lfq":
            self.to_code = Linear(c.dim, c.code_bits, rng)
            self.from_code = Linear(c.code_bits, c.dim, rng)
            self.codebook = None
        else:
            self.to_code = None
            self.from_code = None
            self.codebook = param(rng, (c.vocab, c.dim), std=0.5)

        self.dec_pos_spatial = param(rng, (c.sites, c.dim))
        self.dec_pos_temporal = param(rng, (c.t_rows, c.dim))
        self.dec_temporal = ModuleList(
            TransformerBlock(c.dim, c.heads, c.head_dim, c.ff_mult, rng)
            for _ in range(c.depth_temporal))
        self.dec_spatial = ModuleList(
            TransformerBlock(c.dim, c.heads, c.head_dim, c.ff_mult, rng)
            for _ in range(c.depth_spatial))
        self.dec_norm = LayerNorm(c.dim)
        self.img_out = Linear(c.dim, pdim_img, rng)
        self.vid_out = Linear(c.dim, pdim_vid, rng)

    # -- shared plumbing ------------------------------------------------------

    def _check_clip_batch(self, clips: np.ndarray) -> np.ndarray:
        clips = np.asarray(clips, dtype=np.float32)
        c = self.cfg
        want = (c.frames, c.height, c.width, c.channels)
        if clips.ndim != 5 or clips.shape[1:] != want:
            raise ValueError(f"clip batch shape {clips.shape} does not match "
                             f"(B, {want[0]}, {want[1]}, {want[2]}, {want[3]})")
        return clips

    def _add_positions(self, x: Tensor, spatial: Tensor,
                       temporal: Tensor) -> Tensor:
        b, r, s, d = x.shape
        x = x + spatial                      # (S, D) broadcasts on the tail
        pos_t = temporal.reshape(r, 1, d).expand(r, s, d)
        return x + pos_t

    def _run_spatial(self, x: Tensor, blocks: ModuleList) -> Tensor:
        b, r, s, d = x.shape
        h = x.reshape(b * r, s, d)
        for blk in blocks:
            h = blk(h)
        return h.reshape(b, r, s, d)

    def _run_temporal(self, x: Tensor, blocks: ModuleList) -> Tensor:
        b, r, s, d = x.shape
        h = x.permute(0, 2, 1, 3).reshape(b * s, r, d)
        mask = causal_mask(r)
        for blk in blocks:
            h = blk(h, mask)
        return h.reshape(b, s, r, d).permute(0, 2, 1, 3)

    # -- encoding -------------------------------------------------------------

    def patchify(self, clips: np.ndarray) -> Tensor:
        """(B, T+1, H, W, C) pixels -> (B, rows, S, D) patch embeddings."""
        clips = self._check_clip_batch(clips)
        c = self.cfg
        img = extract_image_patches(clips[:, 0], c.patch)
        vid = extract_video_patches(clips[:, 1:], c.patch, c.patch_t)
        b = clips.shape[0]
        img_e = self.img_proj(Tensor(img)).reshape(b, 1, c.sites, c.dim)
        vid_e = self.vid_proj(Tensor(vid))
        x = concat([img_e, vid_e], axis=1)
        return self._add_positions(x, self.pos_spatial, self.pos_temporal)

    def encode_batch(self, clips: np.ndarray) -> Tensor:
        """Pixels -> continuous latents (B, rows, S, D), pre-quantization."""
        x = self.patchify(clips)
        x = self._run_spatial(x, self.enc_spatial)
        x = self._run_temporal(x, self.enc_temporal)
        return self.enc_norm(x)

    def quantize_latents(self, z_e: Tensor):
        """Latents -> (codes, straight-through decoder input, aux for losses).

        The straight-through tensor carries the exact quantized values bitwise
        (the gradient detour adds z - detach(z), which is exactly zero), so
        training and inference decode identical inputs.
        """
        c = self.cfg
        if c.quantizer == "lfq":
            z_k = self.to_code(z_e)
            codes, q = lfq_quantize(z_k.data)
            q_st = Tensor(q) + (z_k - z_k.detach())
            dec_in = self.from_code(q_st)
            return codes, dec_in, {"z_pre": z_k, "q": Tensor(q)}
        codes = vq_quantize(z_e.data, self.codebook.data)
        e = embedding(self.codebook, codes)
        q_st = e.detach() + (z_e - z_e.detach())
        return codes, q_st, {"z_pre": z_e, "e": e}

    # -- decoding -------------------------------------------------------------

    def decode_latents(self, dec_in: Tensor) -> Tensor:
        """Quantized embeddings (B, rows, S, D) -> raw pixel batch (unclamped)."""
        c = self.cfg
        x = self._add_positions(dec_in, self.dec_pos_spatial,
                                self.dec_pos_temporal)
        x = self._run_temporal(x, self.dec_temporal)
        x = self._run_spatial(x, self.dec_spatial)
        x = self.dec_norm(x)
        b = x.shape[0]
        img_h = x[:, 0]                                  # (B, S, D)
        vid_h = x[:, 1:]                                 # (B, T', S, D)
        img_p = self.img_out(img_h)                      # (B, S, Pd)
        vid_p = self.vid_out(vid_h.reshape(b * (c.t_rows - 1), c.sites, c.dim))
        # unpatchify back to pixels
        hp, wp, p, pt, ch = c.h_sites, c.w_sites, c.patch, c.patch_t, c.channels
        img = img_p.reshape(b, hp, wp, p, p, ch).permute(0, 1, 3, 2, 4, 5)
        img = img.reshape(b, 1, c.height, c.width, ch)
        tp = c.t_rows - 1
        vid = vid_p.reshape(b, tp, hp, wp, pt, p, p, ch)
        vid = vid.permute(0, 1, 4, 2, 5, 3, 6, 7)        # b,t',pt,h',p,w',p,c
        vid = vid.reshape(b, tp * pt, c.height, c.width, ch)
        return concat([img, vid], axis=1)                # (B, T+1, H, W, C)

    def embed_codes(self, codes: np.ndarray) -> Tensor:
        """Token codes (B, rows, S) -> decoder input embeddings."""
        c = self.cfg
        codes = np.asarray(codes)
        if c.quantizer == "lfq":
            q = lfq_dequantize(codes, c.code_bits)
            return self.from_code(Tensor(q))
        return embedding(self.codebook, codes)

    # -- public single-clip API ----------------------------------------------

    def encode(self, clip: np.ndarray) -> np.ndarray:
        """(T+1, H, W, C) -> latents (rows, H', W', D)."""
        c = self.cfg
        with no_grad():
            z = self.encode_batch(clip[None])
        return z.data[0].reshape(c.t_rows, c.h_sites, c.w_sites, c.dim)

    def tokenize(self, clip: np.ndarray) -> TokenGrid:
        c = self.cfg
        with no_grad():
            z_e = self.encode_batch(np.asarray(clip)[None])
            codes, _, _ = self.quantize_latents(z_e)
        return TokenGrid(codes[0].reshape(c.t_rows, c.h_sites, c.w_sites),
                         c.vocab)

    def decode(self, grid: TokenGrid) -> np.ndarray:
        """Token grid -> pixel clip clamped to [0, 1]."""
        c = self.cfg
        if grid.codes.shape != (c.t_rows, c.h_sites, c.w_sites):
            raise ValueError(f"grid shape {grid.codes.shape} != "
                             f"({c.t_rows}, {c.h_sites}, {c.w_sites})")
        if grid.vocab != c.vocab:
            raise ValueError(f"grid vocab {grid.vocab} != config {c.vocab}")
        with no_grad():
            dec_in = self.embed_codes(
                grid.codes.reshape(1, c.t_rows, c.sites))
            recon = self.decode_latents(dec_in)
        return np.clip(recon.data[0], 0.0, 1.0)

    def reconstruct(self, clips: np.ndarray) -> dict:
        """Training path: pixels -> raw reconstruction plus loss ingredients."""
        z_e = self.encode_batch(clips)
        codes, dec_in, aux = self.quantize_latents(z_e)
        recon = self.decode_latents(dec_in)
        out = {"recon": recon, "codes": codes}
        out.update(aux)
        return out


# -- low-rank adaptation ------------------------------------------------------


@dataclass
class LoraAdapter:
    """Adapter for one Linear, addressed by its dotted parameter path."""
    target: str                     # e.g. "enc_spatial.0.attn.wq"
    rank: int
    alpha: float
    a: np.ndarray | None = None     # (rank, d_in)
    b: np.ndarray | None = None     # (d_out, rank)


def _clone_tree(mod):
    if isinstance(mod, ModuleList):
        new = ModuleList()
        for item in mod:
            new.append(_clone_tree(item))
        return new
    new = object.__new__(type(mod))
    object.__setattr__(new, "_params", {})
    object.__setattr__(new, "_children", {})
    for k, v in mod.__dict__.items():
        if k in ("_params", "_children"):
            continue
        if isinstance(v, (Module, ModuleList)):
            setattr(new, k, _clone_tree(v))
        else:
            setattr(new, k, v)   # Tensors shared with the base model
    return new


def _find_linear(model: Module, path: str) -> Linear:
    node = model
    for part in path.split("."):
        if isinstance(node, ModuleList):
            node = node[int(part)]
        elif isinstance(node, Module) and part in node._children:
            node = node._children[part]
        else:
            raise KeyError(f"no module at '{path}' (failed at '{part}')")
    if not isinstance(node, Linear):
        raise TypeError(f"'{path}' is not a Linear layer")
    return node


def apply_lora(model: Module, adapters: list[LoraAdapter],
               merged: bool = False,
               rng: np.random.Generator | None = None) -> Module:
    """Return a view of the model with adapters attached (or folded in).

    The base model is never modified: unaffected parameters are shared
    tensors, affected Linears get fresh weight state.  With ``merged=False``
    the adapter runs alongside the shared base weight; with ``merged=True``
    the view's weight is the materialized W + (alpha/rank) * B @ A.
    """
    view = _clone_tree(model)
    for ad in adapters:
        lin = _find_linear(view, ad.target)
        d_in, d_out = lin.weight.data.shape
        if ad.a is None or ad.b is None:
            if rng is None:
                raise ValueError(f"adapter '{ad.target}' has no matrices and "
                                 f"no rng to initialize them")
            lin.attach_lora(ad.rank, ad.alpha, rng)
        else:
            a = np.asarray(ad.a, dtype=np.float32)
            b = np.asarray(ad.b, dtype=np.float32)
            if a.shape != (ad.rank, d_in):
                raise ValueError(f"adapter '{ad.target}': A shape {a.shape} "
                                 f"!= ({ad.rank}, {d_in})")
            if b.shape != (d_out, ad.rank):
                raise ValueError(f"adapter '{ad.target}': B shape {b.shape} "
                                 f"!= ({d_out}, {ad.rank})")
            lin.lora_a = Tensor(a.copy(), requires_grad=True)
            lin.lora_b = Tensor(b.copy(), requires_grad=True)
            lin.lora_scale = ad.alpha / ad.rank
        if merged:
            # fresh weight tensor so the shared base stays untouched
            base = lin.weight
            lin.weight = Tensor(base.data.copy(), requires_grad=True)
            lin.merge_lora()
    return view
