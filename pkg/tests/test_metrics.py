"""Evaluation metric tests: PSNR, SSIM wrappers, exposure fractions, reports."""

import json
import math

import jsonschema
import numpy as np
import pytest
import torch

from mixexpo import data, imaging, losses, masks, metrics
from mixexpo.model import ModelConfig, init_model

SMALL = ModelConfig(embed_dim=8, num_blocks=1, num_heads=2, seed=3)


@pytest.fixture(scope="module")
def small_model():
    return init_model(SMALL)


@pytest.fixture(scope="module")
def eval_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalset")
    for i in range(4):
        clean = data.make_toy_image(seed=200 + i, height=24, width=24)
        low = data.synth_degrade(clean, data.SynthConfig(mode="mix", tiles=3, seed=i))
        imaging.save_image(clean, _mk(root / "high" / f"e{i}.png"))
        imaging.save_image(low, _mk(root / "low" / f"e{i}.png"))
    manifest = data.scan_paired_dir(root / "low", root / "high")
    manifest = data.precompute_masks(manifest, masks.MaskConfig())
    manifest = data.precompute_illum(manifest)
    data.save_manifest(manifest, root / "manifest.json")
    return root


def _mk(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------- psnr


def test_psnr_identical_is_infinite():
    img = data.make_toy_image(0, 8, 8)
    assert metrics.psnr(img, img) == math.inf


def test_psnr_uniform_offsets():
    y = np.full((10, 10, 3), 0.3, dtype=np.float64)
    assert metrics.psnr(y, y + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert metrics.psnr(y, y + 0.01) == pytest.approx(40.0, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        metrics.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(0)
    y = np.full((32, 32, 3), 0.5)
    noise = rng.uniform(-1.0, 1.0, y.shape)
    values = [metrics.psnr(y, y + amp * noise) for amp in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


# ---------------------------------------------------------------------- ssim


def test_ssim_identical_is_one():
    img = data.make_toy_image(1, 16, 16)
    assert metrics.ssim(img, img) == pytest.approx(1.0, abs=1e-6)


def test_ssim_equals_one_minus_loss_exactly():
    a = data.make_toy_image(2, 16, 20)
    b = data.make_toy_image(3, 16, 20)
    loss = float(losses.ssim_loss(metrics._to_batch(a), metrics._to_batch(b)))
    assert metrics.ssim(a, b) == 1.0 - loss


def test_ssim_bounded():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16, 3)).astype(np.float32)
    b = rng.random((16, 16, 3)).astype(np.float32)
    assert -1.0 <= metrics.ssim(a, b) <= 1.0


def test_ssim_map_image_shape_and_darkness():
    rng = np.random.default_rng(2)
    y = data.make_toy_image(4, 24, 32)
    y_hat = y.copy()
    y_hat[:, 16:] = np.clip(
        y_hat[:, 16:] + rng.uniform(-0.4, 0.4, y_hat[:, 16:].shape).astype(np.float32), 0, 1
    )
    m = metrics.ssim_map_image(y, y_hat)
    assert m.shape == (14, 22)
    assert m.min() >= 0.0 and m.max() <= 1.0
    assert m[:, :6].mean() > m[:, -6:].mean()  # disagreement renders darker


# ----------------------------------------------------- exposure fraction delta


def half_dark_case():
    img = np.empty((10, 12, 3), dtype=np.float32)
    img[:, :6] = 0.1
    img[:, 6:] = 0.5
    labels = np.where(np.arange(12)[None, :] < 6, masks.UNDER, masks.CORRECT).astype(np.uint8)
    labels = np.broadcast_to(labels, (10, 12)).copy()
    return img, labels


def test_fraction_delta_identity_input_equals_output():
    img, labels = half_dark_case()
    d = metrics.exposure_fraction_delta(img, img, labels, 0.3, 0.8)
    assert d.under_in == d.under_out == 1.0
    assert d.over_in == d.over_out == 0.0


def test_fraction_delta_brightening_clears_under():
    img, labels = half_dark_case()
    out = np.clip(img + 0.5, 0.0, 1.0)
    d = metrics.exposure_fraction_delta(img, out, labels, 0.3, 0.8)
    assert d.under_in == 1.0
    assert d.under_out == 0.0


def test_fraction_delta_empty_classes_are_zero():
    img = np.full((6, 6, 3), 0.5, dtype=np.float32)
    labels = np.zeros((6, 6), dtype=np.uint8)
    d = metrics.exposure_fraction_delta(img, img, labels, 0.3, 0.8)
    assert d == (0.0, 0.0, 0.0, 0.0)


def test_fraction_delta_pointwise_oracle():
    rng = np.random.default_rng(3)
    img = rng.random((8, 9, 3)).astype(np.float32)
    out = rng.random((8, 9, 3)).astype(np.float32)
    labels = rng.integers(0, 3, (8, 9)).astype(np.uint8)
    t_low, t_high = 0.35, 0.7
    d = metrics.exposure_fraction_delta(img, out, labels, t_low, t_high)
    lum_in = imaging.rgb_to_luminance(img)
    lum_out = imaging.rgb_to_luminance(out)
    n_under = n_over = still_under_in = still_under_out = still_over_in = still_over_out = 0
    for r in range(8):
        for c in range(9):
            if labels[r, c] == masks.UNDER:
                n_under += 1
                still_under_in += lum_in[r, c] < t_low
                still_under_out += lum_out[r, c] < t_low
            elif labels[r, c] == masks.OVER:
                n_over += 1
                still_over_in += lum_in[r, c] > t_high
                still_over_out += lum_out[r, c] > t_high
    assert d.under_in == pytest.approx(still_under_in / n_under)
    assert d.under_out == pytest.approx(still_under_out / n_under)
    assert d.over_in == pytest.approx(still_over_in / n_over)
    assert d.over_out == pytest.approx(still_over_out / n_over)


def test_fraction_delta_misalignment_rejected():
    img, labels = half_dark_case()
    with pytest.raises(ValueError, match="misaligned"):
        metrics.exposure_fraction_delta(img, img[:5], labels, 0.3, 0.8)


# ------------------------------------------------------------------- enhance


def test_enhance_image_shape_range_determinism(small_model):
    img = data.make_toy_image(5, 20, 28)
    out1 = metrics.enhance_image(small_model, img)
    out2 = metrics.enhance_image(small_model, img)
    assert out1.shape == img.shape and out1.dtype == np.float32
    assert out1.min() >= 0.0 and out1.max() <= 1.0
    assert np.array_equal(out1, out2)


# -------------------------------------------------------------- eval dataset


def test_eval_report_schema_and_order(small_model, eval_root):
    manifest = data.load_manifest(eval_root / "manifest.json")
    report = metrics.eval_dataset(small_model, manifest)
    jsonschema.validate(report, metrics.EVAL_SCHEMA)
    assert [row["id"] for row in report["per_image"]] == [e.id for e in manifest.entries]
    assert report["failures"] == []
    assert "wall_ms_mean" not in report and "peak_mem_mb" not in report


def test_eval_aggregate_is_mean_of_rows(small_model, eval_root):
    manifest = data.load_manifest(eval_root / "manifest.json")
    report = metrics.eval_dataset(small_model, manifest)
    for key in metrics._AGG_KEYS:
        expected = np.mean([row[key] for row in report["per_image"]])
        assert abs(report["aggregate"][key] - expected) < 1e-9


def test_eval_is_deterministic(small_model, eval_root):
    manifest = data.load_manifest(eval_root / "manifest.json")
    assert metrics.eval_dataset(small_model, manifest) == metrics.eval_dataset(small_model, manifest)


def test_eval_timing_fields_only_on_request(small_model, eval_root):
    manifest = data.load_manifest(eval_root / "manifest.json")
    report = metrics.eval_dataset(small_model, manifest, timing=True)
    jsonschema.validate(report, metrics.EVAL_SCHEMA)
    assert report["wall_ms_mean"] > 0.0
    assert report["peak_mem_mb"] > 0.0


def test_eval_oracle_output_hits_sentinels(small_model, eval_root, monkeypatch):
    manifest = data.load_manifest(eval_root / "manifest.json")

    def perfect_enhance(model, img):
        for e in manifest.entries:
            if np.array_equal(imaging.load_image(manifest.path(e.input_path)), img):
                return imaging.load_image(manifest.path(e.target_path))
        raise AssertionError("input image not found in manifest")

    monkeypatch.setattr(metrics, "enhance_image", perfect_enhance)
    report = metrics.eval_dataset(small_model, manifest)
    assert report["aggregate"]["psnr_db"] == math.inf
    assert report["aggregate"]["ssim"] == pytest.approx(1.0, abs=1e-6)


def test_eval_writes_outputs_and_ssim_maps(small_model, eval_root, tmp_path):
    manifest = data.load_manifest(eval_root / "manifest.json")
    out_dir = tmp_path / "outs"
    metrics.eval_dataset(small_model, manifest, out_dir=out_dir, ssim_maps=True)
    for e in manifest.entries:
        assert (out_dir / f"{e.id}_out.png").exists()
        assert (out_dir / f"{e.id}_ssim.png").exists()
    m = imaging.load_grayscale(out_dir / f"{manifest.entries[0].id}_ssim.png")
    assert m.shape == (14, 14)  # 24x24 input, 11-tap window


def test_eval_records_per_image_failures(small_model, tmp_path):
    root = tmp_path
    for i in range(2):
        clean = data.make_toy_image(seed=300 + i, height=24, width=24)
        imaging.save_image(clean, _mk(root / "high" / f"f{i}.png"))
        imaging.save_image(clean * 0.5, _mk(root / "low" / f"f{i}.png"))
    manifest = data.scan_paired_dir(root / "low", root / "high")
    manifest = data.precompute_masks(manifest, masks.MaskConfig())
    manifest = data.precompute_illum(manifest)
    (root / "low" / "f0.png").write_bytes(b"not a png at all")
    report = metrics.eval_dataset(small_model, manifest)
    assert [f["id"] for f in report["failures"]] == ["f0"]
    assert [row["id"] for row in report["per_image"]] == ["f1"]


def test_save_report_roundtrip(small_model, eval_root, tmp_path):
    manifest = data.load_manifest(eval_root / "manifest.json")
    report = metrics.eval_dataset(small_model, manifest)
    path = tmp_path / "report.json"
    metrics.save_report(report, path)
    with open(path) as fh:
        assert json.load(fh) == report


def test_render_table_mentions_rows(small_model, eval_root):
    manifest = data.load_manifest(eval_root / "manifest.json")
    table = metrics.render_table(metrics.eval_dataset(small_model, manifest))
    for e in manifest.entries:
        assert e.id in table
    assert "mean" in table


# --------------------------------------------------------------------- bench


def test_bench_rows_and_schema(small_model):
    result = metrics.bench_inference(small_model, sizes=((16, 16), (24, 16)), repeats=2)
    jsonschema.validate(result, metrics.BENCH_SCHEMA)
    assert len(result["rows"]) == 2
    for row in result["rows"]:
        assert 0 < row["median_ms"] <= row["p95_ms"]
        assert row["repeats"] == 2
    assert result["peak_mem_mb"] > 0


def test_bench_single_repeat(small_model):
    result = metrics.bench_inference(small_model, sizes=((16, 16),), repeats=1)
    assert len(result["rows"]) == 1
    assert result["rows"][0]["median_ms"] > 0
