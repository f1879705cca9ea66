"""Reconstruction metrics, SSIM, and ejection-fraction agreement reports.

Pixel metrics (``mse``, ``mae``, ``ssim``) compare a generated clip against a
reference. ``estimate_ef`` recovers an ejection fraction from a rendered clip
alone by segmenting the bright chamber per frame and taking the area extrema,
and ``ef_agreement`` summarizes estimate/reference pairs as R2, MAE, RMSE.

Ejection fractions are dimensionless fractions in [0, 1] throughout; reports
carry an explicit ``unit`` field so downstream consumers cannot silently
confuse fractions with percentage points.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import label, uniform_filter

DEFAULT_SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# -- pixel metrics -------------------------------------------------------------


def _paired(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("cannot compare empty arrays")
    return a, b


def mse(a, b) -> float:
    """Mean squared pixel difference."""
    a, b = _paired(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    """Mean absolute pixel difference."""
    a, b = _paired(a, b)
    return float(np.mean(np.abs(a - b)))


def _frame2d(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] == 1:
        x = x[..., 0]
    if x.ndim != 2:
        raise ValueError(f"{name} must be (H, W) or (H, W, 1), got {x.shape}")
    return x


def ssim(frame_a, frame_b, window: int = DEFAULT_SSIM_WINDOW,
         c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Structural similarity between two grayscale frames on the [0,1] range.

    Local statistics use a uniform ``window`` x ``window`` box and only
    positions whose window lies fully inside the frame contribute; the result
    is the mean of the local similarity map. Identical frames score exactly
    1.0: every numerator factor is then bitwise equal to its denominator.
    """
    a = _frame2d(frame_a, "frame_a")
    b = _frame2d(frame_b, "frame_b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"frame {a.shape} is smaller than the "
                         f"{window}x{window} window")

    m = window // 2

    def valid_mean(x):
        # interior of a same-size box filter == exact valid-window means
        return uniform_filter(x, size=window)[m:h - m, m:w - m]

    mu_a = valid_mean(a)
    mu_b = valid_mean(b)
    var_a = valid_mean(a * a) - mu_a * mu_a
    var_b = valid_mean(b * b) - mu_b * mu_b
    cov = valid_mean(a * b) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_clip(clip_a, clip_b, window: int = DEFAULT_SSIM_WINDOW,
              c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean per-frame SSIM over two clips of equal shape."""
    a = np.asarray(clip_a)
    b = np.asarray(clip_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (3, 4):
        raise ValueError(f"expected (T, H, W) or (T, H, W, 1), got {a.shape}")
    if a.shape[0] == 0:
        raise ValueError("cannot score an empty clip")
    scores = [ssim(a[i], b[i], window, c1, c2) for i in range(a.shape[0])]
    return float(np.mean(scores))


# -- ejection fraction from pixels ---------------------------------------------


def otsu_threshold(frame) -> float:
    """Threshold maximizing between-class variance on a 256-bin histogram.

    Values must lie in [0, 1]. Returns the upper edge of the chosen bin, so
    ``frame > threshold`` selects the bright class.
    """
    x = np.asarray(frame, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty frame")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    bins = np.minimum((x * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins, minlength=256).astype(np.float64)

    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    moments = np.cumsum(hist * np.arange(256))
    # class means are undefined for empty classes; those splits score 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = moments / w0
        mu1 = (moments[-1] - moments) / w1
        score = w0 * w1 * (mu0 - mu1) ** 2
    score = np.nan_to_num(score, nan=0.0)
    t = int(np.argmax(score[:-1]))
    return (t + 1) / 256.0


def _largest_component_area(mask: np.ndarray) -> int:
    labeled, n = label(mask)
    if n == 0:
        return 0
    return int(np.bincount(labeled.ravel())[1:].max())


def chamber_areas(clip, segment=None) -> np.ndarray:
    """Per-frame chamber area in pixels.

    Each frame is segmented into a boolean foreground mask (default: Otsu
    threshold, bright class) and the largest connected component's pixel
    count is the chamber area. ``segment`` may supply any replacement
    ``(H, W) float frame -> (H, W) bool mask`` function.
    """
    frames = np.asarray(clip)
    if frames.ndim not in (3, 4) or frames.shape[0] == 0:
        raise ValueError(f"expected a non-empty (T, H, W[, 1]) clip, "
                         f"got {frames.shape}")
    areas = np.empty(frames.shape[0], dtype=np.float64)
    for i in range(frames.shape[0]):
        f = _frame2d(frames[i], f"frame {i}")
        if segment is None:
            mask_i = f > otsu_threshold(f)
        else:
            mask_i = np.asarray(segment(f), dtype=bool)
        area = _largest_component_area(mask_i)
        if area == 0:
            raise ValueError(f"frame {i}: empty foreground after segmentation")
        areas[i] = area
    return areas


def estimate_ef(clip, segment=None) -> tuple[float, int, int]:
    """Estimate ejection fraction from a clip's chamber-area extrema.

    Returns ``(ef, ed_frame_idx, es_frame_idx)`` where the end-diastolic
    frame holds the maximum area, the end-systolic frame the minimum, and
    ``ef = (A_ED - A_ES) / A_ED``.
    """
    areas = chamber_areas(clip, segment=segment)
    ed = int(np.argmax(areas))
    es = int(np.argmin(areas))
    lved = float(areas[ed])
    lves = float(areas[es])
    return (lved - lves) / lved, ed, es


# -- agreement statistics ------------------------------------------------------


@dataclass
class EfReport:
    """Per-clip (estimate, reference) pairs plus aggregate agreement stats.

    ``r2`` is NaN with ``r2_defined`` False when the references have zero
    variance, in which case R2 does not exist.
    """
    rows: list = field(repr=False)
    mae: float = 0.0
    rmse: float = 0.0
    r2: float = math.nan
    r2_defined: bool = False
    unit: str = "fraction"


def ef_agreement(pairs) -> EfReport:
    """Aggregate (ef_estimated, ef_reference) pairs into an EfReport.

    R2 = 1 - SS_res / SS_tot against the references; MAE and RMSE are the
    usual error means. Requires at least two pairs.
    """
    rows = [(float(e), float(r)) for e, r in pairs]
    if len(rows) < 2:
        raise ValueError("need at least 2 (estimate, reference) pairs")
    est = np.array([e for e, _ in rows], dtype=np.float64)
    ref = np.array([r for _, r in rows], dtype=np.float64)
    err = est - ref
    mae_v = float(np.mean(np.abs(err)))
    rmse_v = float(np.sqrt(np.mean(err ** 2)))
    # identical references make SS_tot collapse to rounding dust, so test
    # the values themselves rather than the sum
    if ref.max() == ref.min():
        return EfReport(rows, mae_v, rmse_v, math.nan, False)
    ss_tot = float(np.sum((ref - ref.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot
    return EfReport(rows, mae_v, rmse_v, r2, True)


def write_report(out_dir, report: EfReport, clip_ids=None,
                 extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``report.csv`` (per-clip rows) and ``summary.json`` (aggregates).

    ``extra`` entries (e.g. config hash, corpus seed) are merged into the
    summary; keys colliding with aggregate fields are rejected. An undefined
    R2 is serialized as JSON null. Returns the two paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if clip_ids is None:
        clip_ids = [str(i) for i in range(len(report.rows))]
    if len(clip_ids) != len(report.rows):
        raise ValueError(f"{len(clip_ids)} clip ids for "
                         f"{len(report.rows)} rows")

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "ef_estimated", "ef_reference"])
        for cid, (e, r) in zip(clip_ids, report.rows):
            writer.writerow([cid, repr(e), repr(r)])

    summary = {
        "n_clips": len(report.rows),
        "unit": report.unit,
        "mae": report.mae,
        "rmse": report.rmse,
        "r2": report.r2 if report.r2_defined else None,
        "r2_defined": report.r2_defined,
    }
    if extra:
        overlap = set(extra) & set(summary)
        if overlap:
            raise ValueError(f"extra keys collide with aggregates: "
                             f"{sorted(overlap)}")
        summary.update(extra)
    json_path = out / "summary.json"
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path
