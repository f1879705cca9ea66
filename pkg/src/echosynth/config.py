"""Flat typed run configuration.

One ``key = value`` pair per line, ``#`` comments, no nesting; dotted key
names group related settings while keeping the file trivially diffable.
Every key has a typed default below; unknown keys and malformed values are
rejected before any work starts. The fully resolved configuration is written
next to every command's outputs together with the build identifier, so a run
can be reproduced from its output directory alone.
"""

from __future__ import annotations

import hashlib
import subprocess
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "load_config",
           "render_config", "config_hash", "build_identifier",
           "write_resolved"]


class ConfigError(ValueError):
    """Raised for unknown keys, bad syntax, or untypeable values."""


# key -> (type, default); file order below is the canonical render order
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),

    "paths.corpus": (str, "runs/corpus"),
    "paths.tokenizer": (str, "runs/tokenizer"),
    "paths.generator": (str, "runs/generator"),

    "corpus.n_clips": (int, 200),
    "corpus.frames": (int, 5),
    "corpus.fps": (float, 8.0),
    "corpus.height": (int, 32),
    "corpus.width": (int, 32),
    "corpus.sample_rate_hz": (int, 100),
    "corpus.bpm_lo": (float, 100.0),
    "corpus.bpm_hi": (float, 140.0),
    "corpus.ef_lo": (float, 0.15),
    "corpus.ef_hi": (float, 0.60),
    "corpus.r_ed_lo": (float, 8.0),
    "corpus.r_ed_hi": (float, 12.0),
    "corpus.center_jitter": (float, 1.5),
    "corpus.noise_lo": (float, 0.0),
    "corpus.noise_hi": (float, 0.02),
    "corpus.contrast_jitter": (float, 0.15),

    "tokenizer.patch": (int, 8),
    "tokenizer.patch_t": (int, 2),
    "tokenizer.dim": (int, 64),
    "tokenizer.depth_spatial": (int, 2),
    "tokenizer.depth_temporal": (int, 2),
    "tokenizer.heads": (int, 4),
    "tokenizer.head_dim": (int, 16),
    "tokenizer.ff_mult": (int, 4),
    "tokenizer.quantizer": (str, "vq"),
    "tokenizer.code_bits": (int, 10),

    "tok_train.steps": (int, 6000),
    "tok_train.batch": (int, 8),
    "tok_train.lr": (float, 3e-3),
    "tok_train.beta": (float, 0.25),
    "tok_train.m_frames": (int, 2),
    "tok_train.percep_feat_dim": (int, 64),
    "tok_train.gan_warmup_frac": (float, 1.0),
    "tok_train.disc_lr": (float, 1e-3),
    "tok_train.ema_decay": (float, 0.995),
    "tok_train.ema_every": (int, 1),
    "tok_train.log_every": (int, 1),

    "ecg.patch_size": (int, 10),
    "ecg.max_patches": (int, 16),
    "ecg.max_leads": (int, 2),

    "generator.dim": (int, 64),
    "generator.depth": (int, 3),
    "generator.heads": (int, 4),
    "generator.head_dim": (int, 16),
    "generator.ff_mult": (int, 4),
    "generator.cond_len": (int, 16),
    "generator.critic_depth": (int, 2),

    "gen_train.steps": (int, 2500),
    "gen_train.batch": (int, 8),
    "gen_train.lr": (float, 1e-3),
    "gen_train.critic_lr": (float, 1e-3),
    "gen_train.p_drop": (float, 0.1),
    "gen_train.patch_mask_rate": (float, 0.25),
    "gen_train.ema_decay": (float, 0.995),
    "gen_train.ema_every": (int, 1),
    "gen_train.train_critic": (bool, True),
    "gen_train.log_every": (int, 1),

    "sample.steps": (int, 12),
    "sample.lambda_cfg": (float, 2.0),
    "sample.temperature": (float, 1.0),
    "sample.choice_noise": (float, 1.0),
    "sample.k_overlap": (int, 3),
    "sample.use_critic": (bool, False),
    "sample.mode": (str, "ecg_only"),
    "sample.chunks": (int, 0),
    "sample.clip": (str, ""),

    "eval.holdout": (int, 20),
}


def _parse_value(key: str, raw: str):
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key '{key}': cannot read {raw!r} as "
                          f"{typ.__name__} ({exc})") from None


class RunConfig:
    """Resolved configuration: every schema key bound to a typed value."""

    def __init__(self, values: dict):
        missing = set(SCHEMA) - set(values)
        if missing:
            raise ConfigError(f"unresolved keys: {sorted(missing)}")
        extra = set(values) - set(SCHEMA)
        if extra:
            raise ConfigError(f"unknown keys: {sorted(extra)}")
        self._values = dict(values)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        return self._values[key]

    def items(self):
        return ((k, self._values[k]) for k in SCHEMA)

    def with_overrides(self, **pairs) -> "RunConfig":
        values = dict(self._values)
        for key, value in pairs.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = value
        return RunConfig(values)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw ``key = value`` lines -> {key: typed value}; strict on everything."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, sets: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    """Defaults, then the config file, then --set overrides, then --seed."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), source=str(p)))
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"--set: unknown key '{key}'")
        values[key] = _parse_value(key, raw)
    if seed is not None:
        values["seed"] = int(seed)
    return RunConfig(values)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form; parsing it back reproduces the same values."""
    lines = []
    prev_section = None
    for key, value in cfg.items():
        section = key.split(".", 1)[0] if "." in key else ""
        if prev_section is not None and section != prev_section:
            lines.append("")
        prev_section = section
        if isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()[:16]


def build_identifier() -> str:
    """Git describe of the installed source tree, or the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True,
            text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    from . import __version__
    return f"echosynth-{__version__}"


def write_resolved(cfg: RunConfig, out_dir) -> None:
    """Drop config.resolved.txt and build.txt into an output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(render_config(cfg))
    (out / "build.txt").write_text(build_identifier() + "\n")
