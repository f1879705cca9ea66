"""Command implementations: corpus generation, two-stage training, video
generation, evaluation, and token inspection.

Each ``cmd_*`` function is a pure function of (config, output directory):
given the same resolved config and seed it reproduces its outputs byte for
byte. Wall-clock timings go to standard output only, never into files.
The tokenizer must be trained (and is then frozen) before the generator;
``cmd_train_generator`` refuses to run without a tokenizer checkpoint.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .autodiff import Tensor, zero_grad_graph
from .config import RunConfig, build_identifier, config_hash, write_resolved
from .container import load_checkpoint, read_clip_pgm, save_checkpoint, \
    write_clip_pgm
from .ecg import EcgPatchEmbedder, normalize, patchify_ecg, read_ecg, write_ecg
from .evalkit import ef_agreement, estimate_ef, mae, mse, ssim_clip, \
    write_report
from .generator import (GeneratorConfig, GeneratorTrainState,
                        GeneratorTrainer, TokenCritic, TokenGenerator,
                        load_generator_checkpoint, save_generator_checkpoint)
from .losses import (DiscriminatorConfig, LossBreakdown,
                     PatchDiscriminator, RandomProjectionExtractor,
                     adaptive_weight, discriminator_loss, gan_generator_loss,
                     grad_norm, perceptual_loss, recon_loss, vq_loss)
from .optim import AdamState, EmaState, adam_step, ema_init, ema_update
from .sampler import (CONTINUATION, ECG_ONLY, IMAGE_PLUS_ECG,
                      GenerationRequest, generate, generate_long,
                      generate_with_state)
from .synthdata import (CorpusSpec, clip_seed_for, ecg_params_for_clip,
                        gen_dataset, gen_ecg, read_manifest)
from .tokenizer import TokenizerConfig, VideoTokenizer, grid_to_seq, \
    seq_to_grid


class PipelineError(RuntimeError):
    """Command failure with a machine-readable category."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


MODE_NAMES = {"ecg_only": ECG_ONLY, "first_frame": IMAGE_PLUS_ECG,
              "continuation": CONTINUATION}


# -- corpus access -------------------------------------------------------------


def corpus_spec_from_config(cfg: RunConfig) -> CorpusSpec:
    return CorpusSpec(
        n_clips=cfg["corpus.n_clips"], frames=cfg["corpus.frames"],
        fps=cfg["corpus.fps"], height=cfg["corpus.height"],
        width=cfg["corpus.width"],
        sample_rate_hz=cfg["corpus.sample_rate_hz"],
        bpm_range=(cfg["corpus.bpm_lo"], cfg["corpus.bpm_hi"]),
        ef_range=(cfg["corpus.ef_lo"], cfg["corpus.ef_hi"]),
        r_ed_range=(cfg["corpus.r_ed_lo"], cfg["corpus.r_ed_hi"]),
        center_jitter=cfg["corpus.center_jitter"],
        noise_range=(cfg["corpus.noise_lo"], cfg["corpus.noise_hi"]),
        contrast_jitter=cfg["corpus.contrast_jitter"])


def load_corpus(corpus_dir) -> list[dict]:
    """Manifest rows with clips and ECGs loaded into memory."""
    root = Path(corpus_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise PipelineError(
            "missing-input",
            f"corpus manifest not found: {manifest} (run datagen first)")
    rows = []
    for row in read_manifest(manifest):
        row = dict(row)
        row["clip"] = read_clip_pgm(root / row["frames_path"])
        row["ecg"] = read_ecg(root / row["ecg_path"])
        rows.append(row)
    return rows


def _holdout_split(rows: list, holdout: int) -> tuple[list, list]:
    if holdout < 1 or holdout >= len(rows):
        raise PipelineError(
            "config", f"eval.holdout = {holdout} must leave at least one "
            f"training clip out of {len(rows)}")
    return rows[:-holdout], rows[-holdout:]


# -- tokenizer training --------------------------------------------------------


def tokenizer_config_from(cfg: RunConfig) -> TokenizerConfig:
    return TokenizerConfig(
        height=cfg["corpus.height"], width=cfg["corpus.width"], channels=1,
        frames=cfg["corpus.frames"], patch=cfg["tokenizer.patch"],
        patch_t=cfg["tokenizer.patch_t"], dim=cfg["tokenizer.dim"],
        depth_spatial=cfg["tokenizer.depth_spatial"],
        depth_temporal=cfg["tokenizer.depth_temporal"],
        heads=cfg["tokenizer.heads"], head_dim=cfg["tokenizer.head_dim"],
        ff_mult=cfg["tokenizer.ff_mult"], quantizer=cfg["tokenizer.quantizer"],
        code_bits=cfg["tokenizer.code_bits"])


class TokenizerTrainer:
    """Full tokenizer objective: pixel + feature + quantization pull terms,
    and after the warm-up a hinge adversarial term with a gradient-ratio
    weight measured at the decoder's output layer.

    One discriminator update per generator update once the adversarial term
    is active; EMA shadows track the tokenizer parameters throughout.
    """

    def __init__(self, model: VideoTokenizer, disc: PatchDiscriminator,
                 extractor, *, lr: float = 1e-3, disc_lr: float = 1e-3,
                 beta: float = 0.25, m_frames: int = 2,
                 gan_start_step: int = 0, ema_decay: float = 0.995,
                 ema_every: int = 10, seed: int = 0):
        self.model = model
        self.disc = disc
        self.extractor = extractor
        self.params = model.param_dict()
        self.disc_params = disc.param_dict()
        self.opt = AdamState(lr=lr)
        self.disc_opt = AdamState(lr=disc_lr)
        self.ema = EmaState(decay=ema_decay, update_every=ema_every)
        ema_init(self.ema, self.params)
        self.rng = np.random.default_rng(seed)
        self.beta = beta
        self.m_frames = m_frames
        self.gan_start_step = gan_start_step
        self.step_count = 0
        out_layers = [model.img_out, model.vid_out]
        self.last_layer = [p for lin in out_layers
                           for p in (lin.weight, lin.bias) if p is not None]

    @staticmethod
    def _grads(params: dict) -> dict:
        return {k: p.grad for k, p in params.items() if p.grad is not None}

    def step(self, batch: np.ndarray) -> LossBreakdown:
        out = self.model.reconstruct(batch)
        recon_t = out["recon"]
        l_rec = recon_loss(batch, recon_t)
        l_per = perceptual_loss(batch, recon_t, self.extractor,
                                self.m_frames, self.rng)
        if "q" in out:
            l_vq = vq_loss(out["q"], out["z_pre"], self.beta)
        else:
            l_vq = vq_loss(out["z_pre"], out["e"], self.beta)

        lam, gan_val, disc_val = 0.0, 0.0, 0.0
        gan_active = self.step_count >= self.gan_start_step
        if gan_active:
            l_gan = gan_generator_loss(self.disc(recon_t))
            # probe each loss separately at the decoder output layer
            zero_grad_graph(l_per)
            l_per.backward()
            p_norm = grad_norm(self.last_layer)
            zero_grad_graph(l_per)
            zero_grad_graph(l_gan)
            l_gan.backward()
            g_norm = grad_norm(self.last_layer)
            zero_grad_graph(l_gan)
            lam = adaptive_weight(p_norm, g_norm)
            total = l_rec + l_per + l_vq + l_gan * lam
            gan_val = float(l_gan.data)
        else:
            total = l_rec + l_per + l_vq

        zero_grad_graph(total)
        total.backward()
        adam_step(self.params, self._grads(self.params), self.opt)
        if self.opt.step % self.ema.update_every == 0:
            ema_update(self.ema, self.params)

        if gan_active:
            disc_val = self._disc_step(batch, recon_t.data)
        self.step_count += 1
        return LossBreakdown.assemble(float(l_rec.data), float(l_per.data),
                                      float(l_vq.data), gan_val, lam,
                                      disc_val)

    def _disc_step(self, real_batch: np.ndarray,
                   fake_pixels: np.ndarray) -> float:
        real_scores = self.disc(real_batch)
        fake_scores = self.disc(Tensor(fake_pixels))   # detached from the model
        d_loss = discriminator_loss(real_scores, fake_scores)
        zero_grad_graph(d_loss)
        d_loss.backward()
        adam_step(self.disc_params, self._grads(self.disc_params),
                  self.disc_opt)
        return float(d_loss.data)


def save_tokenizer_checkpoint(dirpath, model: VideoTokenizer,
                              ema_shadow: dict, *, step: int,
                              seed: int) -> None:
    tensors = {f"tok.{k}": v for k, v in model.state_arrays().items()}
    tensors.update({f"ema.{k}": v for k, v in ema_shadow.items()})
    c = model.cfg
    meta = {
        "kind": "tokenizer", "step": str(step), "seed": str(seed),
        "height": str(c.height), "width": str(c.width),
        "channels": str(c.channels), "frames": str(c.frames),
        "patch": str(c.patch), "patch_t": str(c.patch_t),
        "dim": str(c.dim), "depth_spatial": str(c.depth_spatial),
        "depth_temporal": str(c.depth_temporal), "heads": str(c.heads),
        "head_dim": str(c.head_dim), "ff_mult": str(c.ff_mult),
        "quantizer": c.quantizer, "code_bits": str(c.code_bits),
    }
    save_checkpoint(dirpath, tensors, meta)


def load_tokenizer_checkpoint(dirpath, use_ema: bool = True):
    """Restore (model, meta); with ``use_ema`` the EMA shadows are loaded
    into the model, which is how every downstream consumer uses it."""
    path = Path(dirpath)
    if not (path / "manifest.txt").is_file():
        raise PipelineError(
            "missing-input",
            f"tokenizer checkpoint not found: {path} "
            f"(run train-tokenizer first)")
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise PipelineError("missing-input",
                            f"{path}: checkpoint kind {meta.get('kind')!r} "
                            f"is not 'tokenizer'")
    cfg = TokenizerConfig(
        height=int(meta["height"]), width=int(meta["width"]),
        channels=int(meta["channels"]), frames=int(meta["frames"]),
        patch=int(meta["patch"]), patch_t=int(meta["patch_t"]),
        dim=int(meta["dim"]), depth_spatial=int(meta["depth_spatial"]),
        depth_temporal=int(meta["depth_temporal"]), heads=int(meta["heads"]),
        head_dim=int(meta["head_dim"]), ff_mult=int(meta["ff_mult"]),
        quantizer=meta["quantizer"], code_bits=int(meta["code_bits"]))
    model = VideoTokenizer(cfg, np.random.default_rng(0))
    model.load_state({k[len("tok."):]: v for k, v in tensors.items()
                      if k.startswith("tok.")})
    if use_ema:
        model.load_state({k[len("ema."):]: v for k, v in tensors.items()
                          if k.startswith("ema.")})
    return model, meta


# -- commands ------------------------------------------------------------------


def cmd_datagen(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    spec = corpus_spec_from_config(cfg)
    manifest = gen_dataset(out, spec, seed=cfg["seed"])
    write_resolved(cfg, out)
    print(f"datagen clips={spec.n_clips} seed={cfg['seed']} "
          f"manifest={manifest}")
    return manifest


def cmd_train_tokenizer(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    rows = load_corpus(cfg["paths.corpus"])
    clips = np.stack([r["clip"] for r in rows])
    tok_cfg = tokenizer_config_from(cfg)
    seed = cfg["seed"]
    model = VideoTokenizer(tok_cfg, np.random.default_rng(seed))
    disc = PatchDiscriminator(DiscriminatorConfig(), channels=tok_cfg.channels,
                              rng=np.random.default_rng(seed + 1))
    extractor = RandomProjectionExtractor(
        (tok_cfg.height, tok_cfg.width, tok_cfg.channels),
        feat_dim=cfg["tok_train.percep_feat_dim"], seed=seed + 2)

    steps = cfg["tok_train.steps"]
    warmup = int(round(cfg["tok_train.gan_warmup_frac"] * steps))
    trainer = TokenizerTrainer(
        model, disc, extractor, lr=cfg["tok_train.lr"],
        disc_lr=cfg["tok_train.disc_lr"], beta=cfg["tok_train.beta"],
        m_frames=cfg["tok_train.m_frames"], gan_start_step=warmup,
        ema_decay=cfg["tok_train.ema_decay"],
        ema_every=cfg["tok_train.ema_every"], seed=seed + 3)
    batch_size = min(cfg["tok_train.batch"], len(rows))
    log_every = max(1, cfg["tok_train.log_every"])

    out.mkdir(parents=True, exist_ok=True)
    csv_lines = [LossBreakdown.CSV_HEADER]
    for i in range(steps):
        idx = trainer.rng.choice(len(rows), size=batch_size, replace=False)
        try:
            parts = trainer.step(clips[idx])
        except (FloatingPointError, ValueError) as exc:
            raise PipelineError("training",
                                f"tokenizer step {i}: {exc}") from exc
        csv_lines.append(parts.csv_row(i))
        if i % log_every == 0 or i == steps - 1:
            print(f"tok-train step={i}/{steps} total={parts.total:.5g} "
                  f"recon={parts.recon:.5g} lambda={parts.lambda_adaptive:.3g}")
    (out / "losses.csv").write_text("\n".join(csv_lines) + "\n")

    ckpt = out / "checkpoint"
    save_tokenizer_checkpoint(ckpt, model, trainer.ema.shadow,
                              step=trainer.step_count, seed=seed)
    write_resolved(cfg, out)
    print(f"tok-train done steps={steps} checkpoint={ckpt}")
    return ckpt


def _cond_arrays(rows: list, patch_size: int):
    """Normalized ECG patches for each row: (N, L, n, p) plus (N, L*n) valid."""
    patches, valids = [], []
    for row in rows:
        p, v = patchify_ecg(normalize(row["ecg"]), patch_size)
        patches.append(p)
        valids.append(np.tile(v, p.shape[0]))
    return np.stack(patches), np.stack(valids)


def cmd_train_generator(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    rows = load_corpus(cfg["paths.corpus"])
    tokenizer, _ = load_tokenizer_checkpoint(
        Path(cfg["paths.tokenizer"]) / "checkpoint")
    train_rows, _ = _holdout_split(rows, cfg["eval.holdout"])

    tok_cfg = tokenizer.cfg
    tokens = np.stack([grid_to_seq(tokenizer.tokenize(r["clip"]))
                       for r in train_rows])
    patch_size = cfg["ecg.patch_size"]
    cond_patches, cond_valid = _cond_arrays(train_rows, patch_size)
    cond_width = cond_patches.shape[1] * cond_patches.shape[2]
    if cond_width > cfg["generator.cond_len"]:
        raise PipelineError(
            "config", f"{cond_width} conditioning patches exceed "
            f"generator.cond_len = {cfg['generator.cond_len']}")

    seed = cfg["seed"]
    gen_cfg = GeneratorConfig(
        vocab=tok_cfg.vocab, dim=cfg["generator.dim"],
        depth=cfg["generator.depth"], heads=cfg["generator.heads"],
        head_dim=cfg["generator.head_dim"], ff_mult=cfg["generator.ff_mult"],
        seq_len=tok_cfg.seq_len, cond_len=cfg["generator.cond_len"],
        critic_depth=cfg["generator.critic_depth"])
    rng = np.random.default_rng(seed + 10)
    model = TokenGenerator(gen_cfg, rng)
    embedder = EcgPatchEmbedder(patch_size, gen_cfg.dim,
                                cfg["ecg.max_patches"], cfg["ecg.max_leads"],
                                rng)
    critic = (TokenCritic(gen_cfg, rng)
              if cfg["gen_train.train_critic"] else None)
    state = GeneratorTrainState(
        p_drop=cfg["gen_train.p_drop"],
        patch_mask_rate=cfg["gen_train.patch_mask_rate"],
        lr=cfg["gen_train.lr"], critic_lr=cfg["gen_train.critic_lr"],
        ema_decay=cfg["gen_train.ema_decay"],
        ema_every=cfg["gen_train.ema_every"],
        train_critic=cfg["gen_train.train_critic"])
    trainer = GeneratorTrainer(model, embedder, critic, state, seed + 11)

    steps = cfg["gen_train.steps"]
    batch_size = min(cfg["gen_train.batch"], len(train_rows))
    log_every = max(1, cfg["gen_train.log_every"])
    batch_rng = np.random.default_rng(seed + 12)

    out.mkdir(parents=True, exist_ok=True)
    csv_lines = ["step,mask_ratio,masked,mvtm,critic"]
    for i in range(steps):
        idx = batch_rng.choice(len(train_rows), size=batch_size,
                               replace=False)
        record = trainer.train_step(tokens[idx], cond_patches[idx],
                                    cond_valid[idx])
        if record["aborted"]:
            raise PipelineError("training",
                                f"generator step {i}: non-finite update")
        critic_txt = ("" if record["critic"] is None
                      else f"{record['critic']:.8g}")
        csv_lines.append(f"{i},{record['mask_ratio']:.8g},"
                         f"{record['masked']},{record['mvtm']:.8g},"
                         f"{critic_txt}")
        if i % log_every == 0 or i == steps - 1:
            print(f"gen-train step={i}/{steps} mvtm={record['mvtm']:.5g} "
                  f"masked={record['masked']}")
    (out / "losses.csv").write_text("\n".join(csv_lines) + "\n")

    ckpt = out / "checkpoint"
    save_generator_checkpoint(ckpt, trainer, seed)
    write_resolved(cfg, out)
    print(f"gen-train done steps={steps} checkpoint={ckpt}")
    return ckpt


def _load_generation_stack(cfg: RunConfig):
    tokenizer, _ = load_tokenizer_checkpoint(
        Path(cfg["paths.tokenizer"]) / "checkpoint")
    gen_ckpt = Path(cfg["paths.generator"]) / "checkpoint"
    if not (gen_ckpt / "manifest.txt").is_file():
        raise PipelineError(
            "missing-input", f"generator checkpoint not found: {gen_ckpt} "
            f"(run train-generator first)")
    model, embedder, critic, ema, _ = load_generator_checkpoint(gen_ckpt)
    # sampling always uses the averaged weights
    model.load_state({k: v for k, v in ema.items()
                      if not k.startswith("embedder.")})
    embedder.load_state({k[len("embedder."):]: v for k, v in ema.items()
                         if k.startswith("embedder.")})
    return tokenizer, model, embedder, critic


def _pick_row(rows: list, cfg: RunConfig) -> dict:
    clip_id = cfg["sample.clip"]
    if not clip_id:
        _, holdout = _holdout_split(rows, cfg["eval.holdout"])
        return holdout[0]
    for row in rows:
        if row["id"] == clip_id:
            return row
    raise PipelineError("missing-input",
                        f"clip id {clip_id!r} not in the corpus manifest")


def _request_from_config(cfg: RunConfig, row: dict) -> GenerationRequest:
    mode_name = cfg["sample.mode"]
    if mode_name not in MODE_NAMES:
        raise PipelineError("config", f"sample.mode must be one of "
                            f"{sorted(MODE_NAMES)}, got {mode_name!r}")
    mode = MODE_NAMES[mode_name]
    clip = row["clip"]
    return GenerationRequest(
        mode=mode, ecg=row["ecg"],
        first_frame=clip[0] if mode == IMAGE_PLUS_ECG else None,
        prev_clip=clip if mode == CONTINUATION else None,
        lambda_cfg=cfg["sample.lambda_cfg"], steps=cfg["sample.steps"],
        temperature=cfg["sample.temperature"],
        k_overlap=cfg["sample.k_overlap"], seed=cfg["seed"],
        choice_noise=cfg["sample.choice_noise"],
        use_critic=cfg["sample.use_critic"])


def cmd_generate(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    rows = load_corpus(cfg["paths.corpus"])
    tokenizer, model, embedder, critic = _load_generation_stack(cfg)
    row = _pick_row(rows, cfg)
    request = _request_from_config(cfg, row)
    chunks = cfg["sample.chunks"]
    if chunks < 0:
        raise PipelineError("config", f"sample.chunks must be >= 0, "
                            f"got {chunks}")

    t_start = time.perf_counter()
    if chunks == 0:
        video, state = generate_with_state(request, tokenizer, model,
                                           embedder, critic)
    else:
        video = generate_long(request, tokenizer, model, embedder,
                              [row["ecg"]] * chunks, critic)
        state = None
    t_total = time.perf_counter() - t_start

    # one representative window decode, scaled to the number of windows
    if state is not None:
        grid = seq_to_grid(state.tokens, tokenizer.cfg)
    else:
        grid = tokenizer.tokenize(video[:tokenizer.cfg.frames])
    t0 = time.perf_counter()
    tokenizer.decode(grid)
    decode_s = (time.perf_counter() - t0) * (1 + chunks)
    sample_s = max(t_total - decode_s, 0.0)

    gen_id = f"gen_{cfg['sample.mode']}_{row['id']}"
    clip_dir = out / "clips" / gen_id
    write_clip_pgm(clip_dir / "frames", video)
    write_ecg(clip_dir / "ecg.ept", row["ecg"])
    write_resolved(cfg, out)
    print(f"generate id={gen_id} frames={video.shape[0]} "
          f"sample_s={sample_s:.3f} decode_s={decode_s:.3f}")
    return clip_dir


def _truth_r_frames(cfg: RunConfig, row: dict) -> list[float]:
    """R-peak positions of a corpus row, in frame coordinates."""
    spec = corpus_spec_from_config(cfg)
    params = ecg_params_for_clip(spec, row["bpm"], row["ef_truth"], 0.0)
    truth = gen_ecg(params, seed=row["seed"])
    return [i / spec.sample_rate_hz * spec.fps for i in truth.r_peaks]


def cmd_evaluate(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    rows = load_corpus(cfg["paths.corpus"])
    tokenizer, model, embedder, critic = _load_generation_stack(cfg)
    train_rows, holdout = _holdout_split(rows, cfg["eval.holdout"])

    recon_mse, recon_mae, recon_ssim = [], [], []
    pairs, ids, locked = [], [], 0
    for i, row in enumerate(holdout):
        clip = row["clip"]
        rec = tokenizer.decode(tokenizer.tokenize(clip))
        recon_mse.append(mse(clip, rec))
        recon_mae.append(mae(clip, rec))
        recon_ssim.append(ssim_clip(clip, rec))

        request = GenerationRequest(
            mode=ECG_ONLY, ecg=row["ecg"],
            lambda_cfg=cfg["sample.lambda_cfg"], steps=cfg["sample.steps"],
            temperature=cfg["sample.temperature"],
            seed=cfg["seed"] + 1000 + i,
            choice_noise=cfg["sample.choice_noise"],
            use_critic=cfg["sample.use_critic"])
        video = generate(request, tokenizer, model, embedder, critic)
        try:
            ef_est, ed, _ = estimate_ef(video)
        except ValueError as exc:
            raise PipelineError("evaluation",
                                f"clip {row['id']}: {exc}") from exc
        pairs.append((ef_est, row["ef_truth"]))
        ids.append(row["id"])
        if min(abs(ed - rf) for rf in _truth_r_frames(cfg, row)) <= 1.0:
            locked += 1
        print(f"evaluate clip={row['id']} ef_est={ef_est:.4f} "
              f"ef_truth={row['ef_truth']:.4f} ed={ed}")

    report = ef_agreement(pairs)
    train_mean = float(np.mean([r["ef_truth"] for r in train_rows]))
    baseline_mae = float(np.mean([abs(r["ef_truth"] - train_mean)
                                  for r in holdout]))
    extra = {
        "config_hash": config_hash(cfg),
        "corpus_seed": cfg["seed"],
        "build": build_identifier(),
        "recon_mse": float(np.mean(recon_mse)),
        "recon_mae": float(np.mean(recon_mae)),
        "recon_ssim": float(np.mean(recon_ssim)),
        "baseline_mae": baseline_mae,
        "phase_lock_rate": locked / len(holdout),
    }
    write_report(out, report, clip_ids=ids, extra=extra)
    write_resolved(cfg, out)
    print(f"evaluate n={len(holdout)} ef_mae={report.mae:.4f} "
          f"baseline_mae={baseline_mae:.4f} "
          f"phase_lock={extra['phase_lock_rate']:.2f} "
          f"recon_mse={extra['recon_mse']:.5g}")
    return out / "summary.json"


def cmd_inspect_tokens(cfg: RunConfig, clip_ref: str,
                       out_dir=None) -> np.ndarray:
    """Tokenize a clip (corpus id or frames directory) and dump the grid."""
    tokenizer, _ = load_tokenizer_checkpoint(
        Path(cfg["paths.tokenizer"]) / "checkpoint")
    frames_dir = Path(cfg["paths.corpus"]) / "clips" / clip_ref / "frames"
    if not frames_dir.is_dir():
        frames_dir = Path(clip_ref)
    if not frames_dir.is_dir():
        raise PipelineError("missing-input",
                            f"no corpus clip or frames directory named "
                            f"{clip_ref!r}")
    clip = read_clip_pgm(frames_dir)
    grid = tokenizer.tokenize(clip)
    lines = [f"tokens rows={grid.codes.shape[0]} "
             f"grid={grid.codes.shape[1]}x{grid.codes.shape[2]} "
             f"vocab={grid.vocab}"]
    for r in range(grid.codes.shape[0]):
        flat = " ".join(str(int(c)) for c in grid.codes[r].ravel())
        lines.append(f"row {r}: {flat}")
    text = "\n".join(lines)
    print(text)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tokens.txt").write_text(text + "\n")
        write_resolved(cfg, out)
    return grid.codes
