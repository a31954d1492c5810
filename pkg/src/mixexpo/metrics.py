"""Evaluation: PSNR, SSIM, exposure-fraction deltas, dataset reports, timing.

PSNR uses peak 1.0 (unit range), equivalent to the 8-bit form under equal
quantization; the report header states this. Timing wraps the forward pass
only (no decode or encode) and is reported as informative, hardware
dependent context, never as a pass/fail quantity.
"""

from __future__ import annotations

import json
import math
import os
import resource
import time
from statistics import median
from typing import NamedTuple

import numpy as np
import torch

from . import data, imaging, losses, masks
from .errors import DataError, MixexpoError
from .model import MixedExposureFormer
from .model.network import EnhancedOutput

ssim_map = losses.ssim_map

EVAL_SCHEMA = {
    "type": "object",
    "required": ["schema", "psnr_peak", "per_image", "aggregate", "failures"],
    "properties": {
        "schema": {"const": 1},
        "psnr_peak": {"const": 1.0},
        "checkpoint": {"type": ["string", "null"]},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "id",
                    "psnr_db",
                    "ssim",
                    "under_frac_in",
                    "under_frac_out",
                    "over_frac_in",
                    "over_frac_out",
                ],
                "properties": {
                    "id": {"type": "string"},
                    "psnr_db": {"type": "number"},
                    "ssim": {"type": "number"},
                    "under_frac_in": {"type": "number"},
                    "under_frac_out": {"type": "number"},
                    "over_frac_in": {"type": "number"},
                    "over_frac_out": {"type": "number"},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": [
                "psnr_db",
                "ssim",
                "under_frac_in",
                "under_frac_out",
                "over_frac_in",
                "over_frac_out",
            ],
        },
        "failures": {"type": "array"},
        "wall_ms_mean": {"type": "number"},
        "peak_mem_mb": {"type": "number"},
    },
}

BENCH_SCHEMA = {
    "type": "object",
    "required": ["schema", "note", "rows", "peak_mem_mb"],
    "properties": {
        "schema": {"const": 1},
        "note": {"type": "string"},
        "peak_mem_mb": {"type": "number"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["height", "width", "median_ms", "p95_ms", "repeats"],
            },
        },
    },
}


class FractionDelta(NamedTuple):
    under_in: float
    under_out: float
    over_in: float
    over_out: float


def psnr(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Peak signal-to-noise ratio against peak 1.0; +inf when images match."""
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    mse = float(np.mean((y.astype(np.float64) - y_hat.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _to_batch(img: np.ndarray) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        return torch.from_numpy(arr)[None, None]
    return torch.from_numpy(arr).permute(2, 0, 1)[None]


def ssim(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean structural similarity on luminance; equals 1 - ssim_loss exactly."""
    return 1.0 - float(losses.ssim_loss(_to_batch(y), _to_batch(y_hat)))


def ssim_map_image(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM over the valid region as a [0, 1] map; darker = worse."""
    m = losses.ssim_map(_to_batch(y), _to_batch(y_hat))[0, 0]
    return np.clip(m.numpy(), 0.0, 1.0).astype(np.float32)


def exposure_fraction_delta(
    input_img: np.ndarray,
    output_img: np.ndarray,
    labels: np.ndarray,
    t_low: float,
    t_high: float,
) -> FractionDelta:
    """How much labeled bad exposure survives, in the input and the output.

    under_*: fraction of UNDER-labeled pixels whose luminance is still
    below t_low; over_*: fraction of OVER-labeled pixels still above
    t_high. Empty label classes yield fraction 0.
    """
    if input_img.shape != output_img.shape or labels.shape != input_img.shape[:2]:
        raise ValueError(
            f"misaligned shapes: input {input_img.shape}, output {output_img.shape}, labels {labels.shape}"
        )
    lum_in = imaging.rgb_to_luminance(input_img)
    lum_out = imaging.rgb_to_luminance(output_img)
    under = labels == masks.UNDER
    over = labels == masks.OVER

    def frac(region, condition):
        n = int(region.sum())
        return float(np.logical_and(region, condition).sum() / n) if n else 0.0

    return FractionDelta(
        under_in=frac(under, lum_in < t_low),
        under_out=frac(under, lum_out < t_low),
        over_in=frac(over, lum_in > t_high),
        over_out=frac(over, lum_out > t_high),
    )


def enhance_outputs(model: MixedExposureFormer, img: np.ndarray) -> EnhancedOutput:
    """Full forward pass of one H x W x 3 image, intermediates included."""
    imaging.validate_image(img)
    with torch.no_grad():
        return model(_to_batch(img))


def enhance_image(model: MixedExposureFormer, img: np.ndarray) -> np.ndarray:
    """Run one H x W x 3 image through the model, back to numpy H x W x 3."""
    out = enhance_outputs(model, img)
    return out.image[0].permute(1, 2, 0).numpy().astype(np.float32)


_AGG_KEYS = ("psnr_db", "ssim", "under_frac_in", "under_frac_out", "over_frac_in", "over_frac_out")


def eval_dataset(
    model: MixedExposureFormer,
    manifest: data.DatasetManifest,
    out_dir: str | os.PathLike | None = None,
    ssim_maps: bool = False,
    timing: bool = False,
    checkpoint_name: str | None = None,
) -> dict:
    """Full-resolution evaluation over every manifest entry, in order.

    Per-image failures are recorded and skipped. Timing and peak-memory
    fields appear only when timing=True, so default reports depend only on
    the checkpoint and the dataset.
    """
    model.eval()
    per_image = []
    failures = []
    wall_ms = []
    for entry in manifest.entries:
        try:
            img = imaging.load_image(manifest.path(entry.input_path))
            target = imaging.load_image(manifest.path(entry.target_path))
            if entry.mask_path is None:
                raise DataError(f"entry {entry.id} has no mask; run the mask precompute first")
            labels = masks.load_label_map(manifest.path(entry.mask_path))
            if target.shape != img.shape or labels.shape != img.shape[:2]:
                raise DataError(f"entry {entry.id} has misaligned shapes")
            start = time.perf_counter()
            out = enhance_image(model, img)
            wall_ms.append((time.perf_counter() - start) * 1e3)
            cuts = masks.multi_otsu_two_thresholds(masks.histogram(imaging.rgb_to_luminance(img)))
            delta = exposure_fraction_delta(img, out, labels, cuts.t_low, cuts.t_high)
            per_image.append(
                {
                    "id": entry.id,
                    "psnr_db": psnr(target, out),
                    "ssim": ssim(target, out),
                    "under_frac_in": delta.under_in,
                    "under_frac_out": delta.under_out,
                    "over_frac_in": delta.over_in,
                    "over_frac_out": delta.over_out,
                }
            )
            if out_dir is not None:
                os.makedirs(out_dir, exist_ok=True)
                imaging.save_image(out, os.path.join(out_dir, f"{entry.id}_out.png"))
                if ssim_maps:
                    imaging.save_grayscale(
                        ssim_map_image(target, out), os.path.join(out_dir, f"{entry.id}_ssim.png")
                    )
        except (MixexpoError, OSError, ValueError) as exc:
            failures.append({"id": entry.id, "error": str(exc)})
    aggregate = {
        key: float(np.mean([row[key] for row in per_image])) if per_image else 0.0
        for key in _AGG_KEYS
    }
    report = {
        "schema": 1,
        "psnr_peak": 1.0,
        "checkpoint": checkpoint_name,
        "per_image": per_image,
        "aggregate": aggregate,
        "failures": failures,
    }
    if timing:
        report["wall_ms_mean"] = float(np.mean(wall_ms)) if wall_ms else 0.0
        report["peak_mem_mb"] = peak_memory_mb()
    return report


def save_report(report: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_table(report: dict) -> str:
    """Human-readable summary of an EvalReport."""
    lines = [
        "id            psnr_db   ssim    under_in->out  over_in->out",
        "-" * 60,
    ]
    for row in report["per_image"]:
        lines.append(
            f"{row['id']:<13} {row['psnr_db']:7.2f} {row['ssim']:7.4f}"
            f"   {row['under_frac_in']:.3f}->{row['under_frac_out']:.3f}"
            f"    {row['over_frac_in']:.3f}->{row['over_frac_out']:.3f}"
        )
    agg = report["aggregate"]
    lines.append("-" * 60)
    lines.append(
        f"{'mean':<13} {agg['psnr_db']:7.2f} {agg['ssim']:7.4f}"
        f"   {agg['under_frac_in']:.3f}->{agg['under_frac_out']:.3f}"
        f"    {agg['over_frac_in']:.3f}->{agg['over_frac_out']:.3f}"
    )
    if report["failures"]:
        lines.append(f"failures: {[f['id'] for f in report['failures']]}")
    if "wall_ms_mean" in report:
        lines.append(f"wall_ms_mean: {report['wall_ms_mean']:.2f} (informative, hardware dependent)")
    return "\n".join(lines)


def peak_memory_mb() -> float:
    """Process peak RSS in MB; best effort and platform dependent."""
    rss_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return float(rss_kb) / 1024.0


def bench_inference(
    model: MixedExposureFormer,
    sizes: tuple[tuple[int, int], ...] = ((256, 256), (400, 600)),
    repeats: int = 5,
    warmup: int = 1,
) -> dict:
    """Forward-pass wall-clock per image size, after warmup runs.

    Numbers are informative only: they depend on the host, thread count,
    and allocator state, and are never compared against a threshold.
    """
    model.eval()
    rows = []
    for height, width in sizes:
        x = torch.rand(1, 3, height, width, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            samples = []
            for _ in range(repeats):
                start = time.perf_counter()
                model(x)
                samples.append((time.perf_counter() - start) * 1e3)
        samples.sort()
        p95_index = min(len(samples) - 1, int(round(0.95 * (len(samples) - 1))))
        rows.append(
            {
                "height": height,
                "width": width,
                "median_ms": float(median(samples)),
                "p95_ms": float(samples[p95_index]),
                "repeats": repeats,
            }
        )
    return {
        "schema": 1,
        "note": "informative, hardware dependent; reference figures were measured elsewhere",
        "rows": rows,
        "peak_mem_mb": peak_memory_mb(),
    }
