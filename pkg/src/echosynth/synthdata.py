"""Procedural paired ECG/video corpus with analytically known ejection
fraction.

Each sample couples a phantom ECG (five Gaussian bumps per beat, tiled at
the beat period) with a rendered beating disc whose radius eases between an
end-diastolic value at R peaks and an end-systolic value at T peaks.  The
ejection fraction is exact by construction, 1 - (r_ES/r_ED)^2, so EF
agreement can be scored without any human annotation.  The T-wave amplitude
is tied to the ejection fraction when the corpus is generated, which makes
EF recoverable from the conditioning signal alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .container import write_clip_pgm
from .ecg import ECGSignal, write_ecg

WAVE_NAMES = ("P", "Q", "R", "S", "T")
R_WAVE = 2
T_WAVE = 4


@dataclass
class SyntheticECGParams:
    bpm: float
    duration_s: float
    sample_rate_hz: int = 100
    # per-wave values in beat-fraction units (offsets, widths) and mV-ish
    # amplitude units; order P, Q, R, S, T
    amplitudes: tuple = (0.15, -0.12, 1.0, -0.20, 0.30)
    offsets: tuple = (0.10, 0.22, 0.25, 0.28, 0.45)
    widths: tuple = (0.040, 0.012, 0.018, 0.015, 0.060)
    noise_std: float = 0.0

    def __post_init__(self):
        if self.bpm <= 0:
            raise ValueError(f"bpm must be positive, got {self.bpm}")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("duration and sample rate must be positive")
        if not (len(self.amplitudes) == len(self.offsets)
                == len(self.widths) == 5):
            raise ValueError("exactly five waves (P, Q, R, S, T) expected")
        r_amp = self.amplitudes[R_WAVE]
        others = [a for i, a in enumerate(self.amplitudes) if i != R_WAVE]
        if r_amp <= 0 or r_amp <= max(others):
            raise ValueError("R amplitude must be the per-beat maximum")
        offs = self.offsets
        if any(not (0.0 < o < 1.0) for o in offs):
            raise ValueError("wave offsets must lie strictly inside the beat")
        if any(a >= b for a, b in zip(offs, offs[1:])):
            raise ValueError("wave offsets must be strictly increasing")
        if self.offsets[T_WAVE] <= self.offsets[R_WAVE]:
            raise ValueError("T wave must come after the R wave")
        if any(w <= 0 for w in self.widths):
            raise ValueError("wave widths must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def period_s(self) -> float:
        return 60.0 / self.bpm


@dataclass
class SyntheticECG:
    """Generated signal plus exact ground-truth peak sample indices."""
    signal: ECGSignal
    r_peaks: np.ndarray
    t_peaks: np.ndarray
    params: SyntheticECGParams


def _beat_waveform(phase_s: np.ndarray, p: SyntheticECGParams) -> np.ndarray:
    """Waveform value at a phase within [0, period); neighbors folded in so
    the construction is periodic by definition."""
    period = p.period_s
    out = np.zeros_like(phase_s, dtype=np.float64)
    for amp, off, width in zip(p.amplitudes, p.offsets, p.widths):
        sigma = width * period
        for j in (-1.0, 0.0, 1.0):
            d = phase_s - (off + j) * period
            out += amp * np.exp(-0.5 * (d / sigma) ** 2)
    return out


def _round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def gen_ecg(params: SyntheticECGParams, seed: int = 0) -> SyntheticECG:
    """Render the phantom ECG and record exact R/T peak sample indices."""
    p = params
    period = p.period_s
    if p.duration_s < period:
        raise ValueError(f"duration {p.duration_s} s is shorter than one "
                         f"beat ({period:.4f} s at {p.bpm} bpm)")
    fs = p.sample_rate_hz
    n = int(math.floor(p.duration_s * fs + 0.5))

    period_samples = period * fs
    if abs(period_samples - round(period_samples)) < 1e-9:
        # integer sample period: index arithmetic keeps the tiling exactly
        # periodic, bitwise, which float mod would not guarantee
        np_samples = int(round(period_samples))
        phase = (np.arange(n) % np_samples) / fs
    else:
        phase = np.mod(np.arange(n) / fs, period)
    clean = _beat_waveform(phase, p)

    rng = np.random.default_rng(seed)
    if p.noise_std > 0:
        clean = clean + rng.normal(0.0, p.noise_std, size=n)
    samples = clean.astype(np.float32)[None]     # one lead

    def centers(off):
        k = np.arange(int(math.ceil(p.duration_s / period)) + 1)
        idx = _round_half_up((k + off) * period * fs)
        return idx[idx < n]

    sig = ECGSignal(samples, sample_rate_hz=fs, lead_names=("II",))
    return SyntheticECG(sig, centers(p.offsets[R_WAVE]),
                        centers(p.offsets[T_WAVE]), p)


# -- video --------------------------------------------------------------------


@dataclass
class SyntheticHeartParams:
    center: tuple                 # (cy, cx) in pixels
    r_ed: float                   # end-diastolic radius
    r_es: float                   # end-systolic radius
    softness: float = 1.0         # anti-aliasing edge width in pixels
    texture_seed: int = 0
    contrast_jitter: float = 0.15

    def __post_init__(self):
        if not (0 < self.r_es <= self.r_ed):
            raise ValueError(f"need 0 < r_ES <= r_ED, got r_ES={self.r_es}, "
                             f"r_ED={self.r_ed}")
        if self.softness <= 0:
            raise ValueError("softness must be positive")
        if not (0.0 <= self.contrast_jitter < 1.0):
            raise ValueError("contrast jitter must lie in [0, 1)")


def _cosine_ease(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(np.pi * u))


def radius_track(times: np.ndarray, ecg: SyntheticECG,
                 heart: SyntheticHeartParams) -> np.ndarray:
    """Disc radius at each time: r_ED at R peaks, r_ES at T peaks, cosine
    easing between consecutive keypoints.

    Keypoints come from the analytic periodic beat centers, extended one
    beat past each end of the signal, so every queried time sits inside an
    easing segment and the motion is mid-cycle at the clip edges instead of
    flat (a flat hold would tie the area argmax away from the R frame).
    """
    p = ecg.params
    period = p.period_s
    last_beat = int(math.ceil(p.duration_s / period)) + 1
    keys = []
    for k in range(-1, last_beat + 1):
        keys.append(((k + p.offsets[R_WAVE]) * period, heart.r_ed))
        keys.append(((k + p.offsets[T_WAVE]) * period, heart.r_es))
    times = np.asarray(times, dtype=np.float64)
    out = np.empty_like(times)
    kt = np.array([t for t, _ in keys])
    kv = np.array([v for _, v in keys])
    for i, t in enumerate(times):
        j = int(np.searchsorted(kt, t, side="right"))
        j = min(max(j, 1), len(kt) - 1)
        t0, t1 = kt[j - 1], kt[j]
        u = (t - t0) / (t1 - t0)
        out[i] = kv[j - 1] + (kv[j] - kv[j - 1]) * _cosine_ease(u)
    return out


def _background(height: int, width: int,
                rng: np.random.Generator) -> np.ndarray:
    noise = rng.uniform(0.0, 1.0, size=(height, width))
    smooth = uniform_filter(noise, size=5, mode="wrap")
    lo, hi = smooth.min(), smooth.max()
    norm = (smooth - lo) / (hi - lo + 1e-12)
    return 0.10 + 0.15 * norm


def _render_disc(background: np.ndarray, cy: float, cx: float, r: float,
                 softness: float) -> np.ndarray:
    h, w = background.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    coverage = np.clip((r - dist) / softness + 0.5, 0.0, 1.0)
    return background + (0.85 - background) * coverage


def gen_video(ecg: SyntheticECG, heart: SyntheticHeartParams,
              frame_times: np.ndarray, height: int = 32,
              width: int = 32) -> tuple[np.ndarray, float]:
    """Render the beating disc at the given times; returns (clip, ef_truth).

    ef_truth = (A_ED - A_ES) / A_ED = 1 - (r_ES / r_ED)^2.
    """
    times = np.asarray(frame_times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("at least one frame time required")
    if times.min() < 0 or times.max() > ecg.params.duration_s:
        raise ValueError(f"frame times [{times.min():.3f}, "
                         f"{times.max():.3f}] outside ECG duration "
                         f"{ecg.params.duration_s}")
    cy, cx = heart.center
    margin = heart.r_ed + heart.softness
    if (cy - margin < 0 or cy + margin > height - 1
            or cx - margin < 0 or cx + margin > width - 1):
        raise ValueError(f"disc of radius {heart.r_ed} at ({cy}, {cx}) "
                         f"exceeds {height}x{width} frame bounds")

    rng = np.random.default_rng(heart.texture_seed)
    background = _background(height, width, rng)
    j = heart.contrast_jitter
    contrast = rng.uniform(1.0 - j, 1.0 + j)

    radii = radius_track(times, ecg, heart)
    frames = np.empty((times.size, height, width, 1), dtype=np.float32)
    for i, r in enumerate(radii):
        f = _render_disc(background, cy, cx, r, heart.softness)
        f = 0.5 + contrast * (f - 0.5)
        frames[i, :, :, 0] = np.clip(f, 0.0, 1.0).astype(np.float32)
    ef = 1.0 - (heart.r_es / heart.r_ed) ** 2
    return frames, float(ef)


# -- corpus -------------------------------------------------------------------


@dataclass
class CorpusSpec:
    """Parameter ranges for a generated corpus; all draws are uniform."""
    n_clips: int
    frames: int = 5
    fps: float = 8.0
    height: int = 32
    width: int = 32
    sample_rate_hz: int = 100
    bpm_range: tuple = (100.0, 140.0)
    ef_range: tuple = (0.15, 0.60)
    r_ed_range: tuple = (8.0, 12.0)
    center_jitter: float = 1.5
    noise_range: tuple = (0.0, 0.02)
    contrast_jitter: float = 0.15

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValueError("n_clips must be >= 1")
        for name in ("bpm_range", "ef_range", "r_ed_range", "noise_range"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ValueError(f"{name} is reversed: ({lo}, {hi})")
        if not (0 < self.ef_range[0] and self.ef_range[1] < 1):
            raise ValueError("ef_range must lie strictly inside (0, 1)")
        if 60.0 / self.bpm_range[0] > self.frames / self.fps:
            raise ValueError("slowest bpm does not fit one beat in the clip "
                             "window; raise bpm_range or clip length")

    @property
    def duration_s(self) -> float:
        return self.frames / self.fps


def ecg_params_for_clip(spec: CorpusSpec, bpm: float, ef: float,
                        noise_std: float) -> SyntheticECGParams:
    """The corpus EF <-> ECG coupling: T amplitude carries the ejection
    fraction, so conditioning alone determines the target motion."""
    t_amp = 0.1 + 0.5 * ef
    return SyntheticECGParams(
        bpm=bpm, duration_s=spec.duration_s,
        sample_rate_hz=spec.sample_rate_hz,
        amplitudes=(0.15, -0.12, 1.0, -0.20, t_amp),
        noise_std=noise_std)


def clip_seed_for(seed: int, index: int) -> int:
    return (seed * 1000003 + index) % (2 ** 63)


MANIFEST_FIELDS = ("id", "seed", "bpm", "r_ed", "r_es", "ef_truth",
                   "frames_path", "ecg_path")


def gen_dataset(out_dir, spec: CorpusSpec, seed: int = 0) -> Path:
    """Write n_clips paired samples and a manifest; returns manifest path.

    Layout: <root>/clips/<id>/frames/*.pgm, <root>/clips/<id>/ecg.ept,
    <root>/manifest.csv.  Fully deterministic given (seed, spec); each clip
    depends only on (seed, index).
    """
    root = Path(out_dir)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    rows = []
    for idx in range(spec.n_clips):
        cid = f"clip_{idx:04d}"
        cseed = clip_seed_for(seed, idx)
        rng = np.random.default_rng(cseed)
        bpm = rng.uniform(*spec.bpm_range)
        ef = rng.uniform(*spec.ef_range)
        r_ed = rng.uniform(*spec.r_ed_range)
        noise = rng.uniform(*spec.noise_range)
        cy = spec.height / 2.0 + rng.uniform(-spec.center_jitter,
                                             spec.center_jitter)
        cx = spec.width / 2.0 + rng.uniform(-spec.center_jitter,
                                            spec.center_jitter)
        texture_seed = int(rng.integers(2 ** 31))

        r_es = r_ed * math.sqrt(1.0 - ef)
        ecg = gen_ecg(ecg_params_for_clip(spec, bpm, ef, noise), seed=cseed)
        heart = SyntheticHeartParams(center=(cy, cx), r_ed=r_ed, r_es=r_es,
                                     texture_seed=texture_seed,
                                     contrast_jitter=spec.contrast_jitter)
        times = np.arange(spec.frames) / spec.fps
        clip, ef_truth = gen_video(ecg, heart, times, spec.height,
                                   spec.width)

        frames_rel = f"clips/{cid}/frames"
        ecg_rel = f"clips/{cid}/ecg.ept"
        write_clip_pgm(root / frames_rel, clip)
        write_ecg(root / ecg_rel, ecg.signal)
        rows.append({"id": cid, "seed": str(cseed), "bpm": repr(bpm),
                     "r_ed": repr(r_ed), "r_es": repr(r_es),
                     "ef_truth": repr(ef_truth), "frames_path": frames_rel,
                     "ecg_path": ecg_rel})

    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_manifest(path) -> list[dict]:
    """Parse manifest.csv back to typed rows."""
    path = Path(path)
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(MANIFEST_FIELDS):
            raise ValueError(f"{path}: manifest columns {reader.fieldnames} "
                             f"!= {list(MANIFEST_FIELDS)}")
        for row in reader:
            out.append({
                "id": row["id"], "seed": int(row["seed"]),
                "bpm": float(row["bpm"]), "r_ed": float(row["r_ed"]),
                "r_es": float(row["r_es"]),
                "ef_truth": float(row["ef_truth"]),
                "frames_path": row["frames_path"],
                "ecg_path": row["ecg_path"]})
    if not out:
        raise ValueError(f"{path}: empty manifest")
    return out
