"""Dataset plumbing: paired-directory scanning, synthetic degradation,
offline mask/illuminance precomputation, crops, and batching.

A dataset lives under one root with the layout low/*.png, high/*.png,
masks/*.png, illum/*.png plus a manifest JSON. All randomness flows
through numpy Generators derived from explicit seeds, so every artifact
is reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import imaging, masks
from .errors import ConfigError, DataError

SYNTH_MODES = ("under", "over", "grad", "mix")
GRAD_AXES = ("horizontal", "vertical")


def derived_seed(seed: int, *tags) -> int:
    """Stable child seed from a base seed and a tag path (hash-based)."""
    text = ":".join([str(seed)] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derived_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derived_seed(seed, *tags))


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    id: str
    input_path: str
    target_path: str
    mask_path: str | None = None
    illum_path: str | None = None


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    mean_threshold: float | None = None
    seed: int = 0
    skipped: list[str] = field(default_factory=list)

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)


@dataclass
class PairedSample:
    """One aligned training example, numpy H x W (x C) float32 arrays."""

    input: np.ndarray
    target: np.ndarray
    attn_target: np.ndarray
    inv_lum: np.ndarray
    id: str


def scan_paired_dir(low_dir: str | os.PathLike, high_dir: str | os.PathLike, seed: int = 0) -> DatasetManifest:
    """Pair PNGs by identical filename across the two directories.

    Files present in only one directory are recorded in manifest.skipped.
    The result is sorted by filename, so rescanning is deterministic.
    """
    low_dir, high_dir = Path(low_dir), Path(high_dir)
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    low_names = {p.name for p in low_dir.glob("*.png")}
    high_names = {p.name for p in high_dir.glob("*.png")}
    common = sorted(low_names & high_names)
    skipped = sorted(low_names ^ high_names)
    if not common:
        raise DataError(f"no paired PNGs between {low_dir} and {high_dir}")
    root = str(low_dir.parent)
    entries = [
        ManifestEntry(
            id=Path(name).stem,
            input_path=os.path.relpath(low_dir / name, root),
            target_path=os.path.relpath(high_dir / name, root),
        )
        for name in common
    ]
    return DatasetManifest(root=root, entries=entries, seed=seed, skipped=skipped)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    doc = {
        "root": manifest.root,
        "seed": manifest.seed,
        "mean_threshold": manifest.mean_threshold,
        "skipped": manifest.skipped,
        "entries": [
            {
                "id": e.id,
                "input": e.input_path,
                "target": e.target_path,
                "mask": e.mask_path,
                "illum": e.illum_path,
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load and validate a manifest; every referenced file must exist."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    try:
        manifest = DatasetManifest(
            root=doc["root"],
            seed=int(doc["seed"]),
            mean_threshold=doc["mean_threshold"],
            skipped=list(doc.get("skipped", [])),
            entries=[
                ManifestEntry(
                    id=e["id"],
                    input_path=e["input"],
                    target_path=e["target"],
                    mask_path=e["mask"],
                    illum_path=e["illum"],
                )
                for e in doc["entries"]
            ],
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {path}: missing field {exc}") from exc
    missing = []
    for e in manifest.entries:
        for rel in (e.input_path, e.target_path, e.mask_path, e.illum_path):
            if rel is not None and not os.path.exists(manifest.path(rel)):
                missing.append(rel)
    if missing:
        raise DataError(f"manifest {path} references missing files: {missing}")
    return manifest


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic exposure degradation."""

    mode: str = "mix"
    gain_range: tuple[float, float] = (0.25, 2.5)
    gamma_range: tuple[float, float] = (0.5, 2.2)
    grad_axis: str = "horizontal"
    tiles: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in SYNTH_MODES:
            raise ConfigError(f"unknown synth mode {self.mode!r}; expected one of {SYNTH_MODES}")
        if self.grad_axis not in GRAD_AXES:
            raise ConfigError(f"unknown grad_axis {self.grad_axis!r}; expected one of {GRAD_AXES}")
        for name, (lo, hi) in (("gain_range", self.gain_range), ("gamma_range", self.gamma_range)):
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.mode == "mix" and self.tiles < 2:
            raise ConfigError(f"mix mode needs tiles >= 2, got {self.tiles}")


def _sample_under(rng, cfg: SynthConfig) -> tuple[float, float]:
    g_lo, g_hi = cfg.gain_range
    m_lo, m_hi = cfg.gamma_range
    gain = float(rng.uniform(g_lo, min(1.0, g_hi)))
    gamma = float(rng.uniform(max(1.0, m_lo), m_hi)) if m_hi >= 1.0 else m_hi
    return gain, gamma


def _sample_over(rng, cfg: SynthConfig) -> tuple[float, float]:
    g_lo, g_hi = cfg.gain_range
    m_lo, m_hi = cfg.gamma_range
    gain = float(rng.uniform(max(1.0, g_lo), g_hi)) if g_hi >= 1.0 else g_hi
    gamma = float(rng.uniform(m_lo, min(1.0, m_hi)))
    return gain, gamma


def _expose(img64: np.ndarray, gain, gamma) -> np.ndarray:
    return np.clip(np.clip(img64 * gain, 0.0, None) ** gamma, 0.0, 1.0)


def _split_rects(r0, r1, c0, c1, k, depth, rng) -> list[tuple[int, int, int, int]]:
    if k == 1:
        return [(r0, r1, c0, c1)]
    rows_ok = r1 - r0 >= 2
    cols_ok = c1 - c0 >= 2
    if not rows_ok and not cols_ok:
        return [(r0, r1, c0, c1)]  # cannot split a 1-pixel strip further
    split_rows = rows_ok if depth % 2 == 0 else not cols_ok
    k1 = k // 2
    k2 = k - k1
    if split_rows:
        cut = int(rng.integers(r0 + 1, r1))
        return _split_rects(r0, cut, c0, c1, k1, depth + 1, rng) + _split_rects(
            cut, r1, c0, c1, k2, depth + 1, rng
        )
    cut = int(rng.integers(c0 + 1, c1))
    return _split_rects(r0, r1, c0, cut, k1, depth + 1, rng) + _split_rects(
        r0, r1, cut, c1, k2, depth + 1, rng
    )


def synth_degrade(clean: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Deterministic exposure degradation of a clean image.

    under/over apply one (gain, gamma) pair drawn from the matching halves
    of the configured ranges; grad interpolates the pair per column (or
    row) from under parameters to over parameters; mix splits the image
    into cfg.tiles rectangles, each independently under- or overexposed.
    """
    cfg.validate()
    imaging.validate_image(clean)
    rng = np.random.default_rng(cfg.seed)
    img = clean.astype(np.float64)
    h, w = img.shape[:2]

    if cfg.mode == "under":
        gain, gamma = _sample_under(rng, cfg)
        out = _expose(img, gain, gamma)
    elif cfg.mode == "over":
        gain, gamma = _sample_over(rng, cfg)
        out = _expose(img, gain, gamma)
    elif cfg.mode == "grad":
        g_u, m_u = _sample_under(rng, cfg)
        g_o, m_o = _sample_over(rng, cfg)
        n = w if cfg.grad_axis == "horizontal" else h
        t = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
        gains = g_u + t * (g_o - g_u)
        gammas = m_u + t * (m_o - m_u)
        if cfg.grad_axis == "horizontal":
            out = _expose(img, gains[None, :, None], gammas[None, :, None])
        else:
            out = _expose(img, gains[:, None, None], gammas[:, None, None])
    else:  # mix
        rects = _split_rects(0, h, 0, w, cfg.tiles, 0, rng)
        out = np.empty_like(img)
        for r0, r1, c0, c1 in rects:
            if rng.random() < 0.5:
                gain, gamma = _sample_under(rng, cfg)
            else:
                gain, gamma = _sample_over(rng, cfg)
            out[r0:r1, c0:c1] = _expose(img[r0:r1, c0:c1], gain, gamma)
    return out.astype(np.float32)


def make_toy_image(seed: int, height: int = 64, width: int = 64) -> np.ndarray:
    """Deterministic mid-tone clean image: smooth waves plus soft blobs.

    Values stay inside [0.15, 0.85] so synthetic under/over degradations
    have headroom in both directions.
    """
    rng = np.random.default_rng(derived_seed(seed, "toy"))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = np.empty((height, width, 3), dtype=np.float64)
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img[:, :, c] = 0.5 + 0.25 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        radius = rng.uniform(0.05, 0.2)
        gain = rng.uniform(-0.25, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        img += gain * blob[:, :, None]
    return np.clip(img, 0.15, 0.85).astype(np.float32)


# ---------------------------------------------------------------- precompute


def precompute_masks(
    manifest: DatasetManifest, cfg: masks.MaskConfig, out_root: str | os.PathLike | None = None
) -> DatasetManifest:
    """Write label-map PNGs for every entry and record the mean threshold.

    trilevel labeling thresholds each image by its own two-cut Otsu;
    binary labeling applies the dataset-mean single threshold uniformly.
    Deterministic, so reruns produce byte-identical files. Files land
    under the dataset root unless out_root redirects them (entries then
    carry absolute paths).
    """
    cfg.validate()
    base = Path(out_root) if out_root is not None else Path(manifest.root)
    mask_dir = base / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)

    lums = []
    for e in manifest.entries:
        lums.append(imaging.rgb_to_luminance(imaging.load_image(manifest.path(e.input_path))))
    stats = masks.dataset_average_threshold(lums)

    failures = []
    entries = []
    for e, lum in zip(manifest.entries, lums):
        try:
            if cfg.labeling == "binary":
                labels = masks.binary_label_map(lum, stats.mean_threshold, cfg)
            else:
                res = masks.multi_otsu_two_thresholds(masks.histogram(lum))
                labels = masks.trilevel_label_map(lum, res.t_low, res.t_high, cfg)
            if out_root is not None:
                rel = str((mask_dir / f"{e.id}.png").resolve())
            else:
                rel = os.path.join("masks", f"{e.id}.png")
            masks.save_label_map(labels, manifest.path(rel))
            entries.append(replace(e, mask_path=rel))
        except OSError as exc:
            failures.append(f"{e.id}: {exc}")
    if failures:
        raise DataError(f"mask precompute failed for {len(failures)} entries: {failures}")
    return replace(manifest, entries=entries, mean_threshold=stats.mean_threshold)


def precompute_illum(
    manifest: DatasetManifest, out_root: str | os.PathLike | None = None
) -> DatasetManifest:
    """Write inverse-luminance PNGs for every entry (see precompute_masks
    for the out_root redirection rules)."""
    base = Path(out_root) if out_root is not None else Path(manifest.root)
    illum_dir = base / "illum"
    illum_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    entries = []
    for e in manifest.entries:
        try:
            img = imaging.load_image(manifest.path(e.input_path))
            inv = imaging.invert_luminance(imaging.rgb_to_luminance(img))
            if out_root is not None:
                rel = str((illum_dir / f"{e.id}.png").resolve())
            else:
                rel = os.path.join("illum", f"{e.id}.png")
            imaging.save_grayscale(inv, manifest.path(rel))
            entries.append(replace(e, illum_path=rel))
        except OSError as exc:
            failures.append(f"{e.id}: {exc}")
    if failures:
        raise DataError(f"illum precompute failed for {len(failures)} entries: {failures}")
    return replace(manifest, entries=entries)


# ---------------------------------------------------------------- samples


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> PairedSample:
    """Materialize one aligned sample from its files."""
    if entry.mask_path is None or entry.illum_path is None:
        raise DataError(
            f"entry {entry.id} has no precomputed mask/illum; run precompute_masks and precompute_illum"
        )
    img = imaging.load_image(manifest.path(entry.input_path))
    target = imaging.load_image(manifest.path(entry.target_path))
    labels = masks.load_label_map(manifest.path(entry.mask_path))
    inv_lum = imaging.load_grayscale(manifest.path(entry.illum_path))
    if target.shape != img.shape or labels.shape != img.shape[:2] or inv_lum.shape != img.shape[:2]:
        raise DataError(f"entry {entry.id} has misaligned shapes")
    return PairedSample(
        input=img,
        target=target,
        attn_target=masks.label_to_target_map(labels),
        inv_lum=inv_lum,
        id=entry.id,
    )


def random_crop_pair(sample: PairedSample, size: int, rng: np.random.Generator) -> PairedSample:
    """One crop window applied identically to every aligned field."""
    h, w = sample.input.shape[:2]
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image dims {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    sl = np.s_[top : top + size, left : left + size]
    return PairedSample(
        input=sample.input[sl].copy(),
        target=sample.target[sl].copy(),
        attn_target=sample.attn_target[sl].copy(),
        inv_lum=sample.inv_lum[sl].copy(),
        id=sample.id,
    )


def make_batches(
    manifest: DatasetManifest, batch_size: int, shuffle_seed: int
) -> Iterator[list[PairedSample]]:
    """Deterministically shuffled batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not manifest.entries:
        raise DataError("manifest has no entries")
    order = np.random.default_rng(shuffle_seed).permutation(len(manifest.entries))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        yield [load_sample(manifest, manifest.entries[i]) for i in chunk]
