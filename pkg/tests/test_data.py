"""Dataset pipeline tests: scanning, synthesis, precompute, crops, batches."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mixexpo import data, imaging, masks
from mixexpo.errors import ConfigError, DataError


def write_png(path, img):
    path.parent.mkdir(parents=True, exist_ok=True)
    imaging.save_image(img, path)


@pytest.fixture(scope="module")
def dataset_root(tmp_path_factory):
    """Ten paired 24x24 images with masks, illum maps, and a manifest."""
    root = tmp_path_factory.mktemp("dataset")
    for i in range(10):
        clean = data.make_toy_image(seed=100 + i, height=24, width=24)
        low = data.synth_degrade(clean, data.SynthConfig(mode="mix", tiles=3, seed=i))
        write_png(root / "high" / f"img_{i:02d}.png", clean)
        write_png(root / "low" / f"img_{i:02d}.png", low)
    manifest = data.scan_paired_dir(root / "low", root / "high", seed=7)
    manifest = data.precompute_masks(manifest, masks.MaskConfig())
    manifest = data.precompute_illum(manifest)
    data.save_manifest(manifest, root / "manifest.json")
    return root


# ------------------------------------------------------------- derived seeds


def test_derived_seed_deterministic_and_tag_sensitive():
    assert data.derived_seed(3, "a", 1) == data.derived_seed(3, "a", 1)
    assert data.derived_seed(3, "a", 1) != data.derived_seed(3, "a", 2)
    assert data.derived_seed(3, "a") != data.derived_seed(4, "a")
    assert 0 <= data.derived_seed(0) < 2**64


def test_derived_rng_streams_are_independent():
    a = data.derived_rng(5, "x").random(4)
    b = data.derived_rng(5, "y").random(4)
    assert not np.allclose(a, b)
    assert np.array_equal(a, data.derived_rng(5, "x").random(4))


# ------------------------------------------------------------------ scanning


def test_scan_pairs_by_filename_and_skips_unpaired(tmp_path):
    img = data.make_toy_image(0, 8, 8)
    for name in ("a.png", "b.png", "c.png"):
        write_png(tmp_path / "low" / name, img)
    for name in ("a.png", "b.png"):
        write_png(tmp_path / "high" / name, img)
    manifest = data.scan_paired_dir(tmp_path / "low", tmp_path / "high")
    assert [e.id for e in manifest.entries] == ["a", "b"]
    assert manifest.skipped == ["c.png"]
    assert manifest.root == str(tmp_path)


def test_scan_zero_pairs_is_an_error(tmp_path):
    (tmp_path / "low").mkdir()
    (tmp_path / "high").mkdir()
    write_png(tmp_path / "low" / "only_here.png", data.make_toy_image(0, 8, 8))
    with pytest.raises(DataError, match="no paired"):
        data.scan_paired_dir(tmp_path / "low", tmp_path / "high")


def test_scan_missing_directory_is_an_error(tmp_path):
    with pytest.raises(DataError, match="not a directory"):
        data.scan_paired_dir(tmp_path / "absent", tmp_path / "also_absent")


def test_scan_is_sorted_and_deterministic(tmp_path):
    img = data.make_toy_image(1, 8, 8)
    for name in ("zz.png", "aa.png", "mm.png"):
        write_png(tmp_path / "low" / name, img)
        write_png(tmp_path / "high" / name, img)
    m1 = data.scan_paired_dir(tmp_path / "low", tmp_path / "high")
    m2 = data.scan_paired_dir(tmp_path / "low", tmp_path / "high")
    assert [e.id for e in m1.entries] == ["aa", "mm", "zz"]
    assert m1 == m2


# ------------------------------------------------------------------ manifest


def test_manifest_json_roundtrip(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    assert len(manifest.entries) == 10
    assert manifest.seed == 7
    assert manifest.mean_threshold is not None
    e = manifest.entries[0]
    assert e.mask_path == "masks/img_00.png"
    assert e.illum_path == "illum/img_00.png"


def test_manifest_missing_file_rejected(dataset_root, tmp_path):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    broken = replace(
        manifest,
        entries=[replace(manifest.entries[0], mask_path="masks/ghost.png")],
    )
    path = tmp_path / "broken.json"
    data.save_manifest(broken, path)
    with pytest.raises(DataError, match="ghost.png"):
        data.load_manifest(path)


def test_manifest_malformed_json_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(DataError, match="malformed"):
        data.load_manifest(path)
    path.write_text(json.dumps({"root": "x"}))
    with pytest.raises(DataError, match="malformed"):
        data.load_manifest(path)


# ----------------------------------------------------------------- synthesis


def test_synth_config_validation():
    with pytest.raises(ConfigError, match="mode"):
        data.SynthConfig(mode="sideways").validate()
    with pytest.raises(ConfigError, match="grad_axis"):
        data.SynthConfig(grad_axis="diagonal").validate()
    with pytest.raises(ConfigError, match="gain_range"):
        data.SynthConfig(gain_range=(2.0, 1.0)).validate()
    with pytest.raises(ConfigError, match="tiles"):
        data.SynthConfig(mode="mix", tiles=1).validate()
    data.SynthConfig().validate()


def test_synth_unit_params_is_identity():
    clean = data.make_toy_image(2, 16, 16)
    cfg = data.SynthConfig(mode="under", gain_range=(1.0, 1.0), gamma_range=(1.0, 1.0))
    out = data.synth_degrade(clean, cfg)
    assert np.array_equal(out, clean)


def test_synth_under_darkens_over_brightens():
    clean = data.make_toy_image(3, 32, 32)
    under = data.synth_degrade(clean, data.SynthConfig(mode="under", seed=1))
    over = data.synth_degrade(clean, data.SynthConfig(mode="over", seed=1))
    assert np.all(under <= clean) and under.mean() < clean.mean() - 0.01
    assert np.all(over >= clean) and over.mean() > clean.mean() + 0.01


def test_synth_grad_ramps_left_dark_to_right_bright():
    clean = data.make_toy_image(4, 32, 48)
    out = data.synth_degrade(clean, data.SynthConfig(mode="grad", seed=0))
    assert out[:, 0].mean() < clean[:, 0].mean()
    assert out[:, -1].mean() > clean[:, -1].mean()


def test_synth_grad_vertical_axis():
    clean = data.make_toy_image(5, 48, 32)
    cfg = data.SynthConfig(mode="grad", grad_axis="vertical", seed=0)
    out = data.synth_degrade(clean, cfg)
    assert out[0].mean() < clean[0].mean()
    assert out[-1].mean() > clean[-1].mean()


def test_synth_deterministic_and_seed_sensitive():
    clean = data.make_toy_image(6, 24, 24)
    for mode in data.SYNTH_MODES:
        cfg = data.SynthConfig(mode=mode, seed=9)
        a = data.synth_degrade(clean, cfg)
        b = data.synth_degrade(clean, cfg)
        c = data.synth_degrade(clean, data.SynthConfig(mode=mode, seed=10))
        assert np.array_equal(a, b), mode
        assert not np.array_equal(a, c), mode


def test_synth_output_is_valid_image():
    clean = data.make_toy_image(7, 20, 28)
    for mode in data.SYNTH_MODES:
        out = data.synth_degrade(clean, data.SynthConfig(mode=mode, seed=2))
        assert out.shape == clean.shape and out.dtype == np.float32
        imaging.validate_image(out)


@pytest.mark.parametrize("tiles", [2, 3, 4, 7])
def test_split_rects_partition_the_image(tiles):
    rng = np.random.default_rng(tiles)
    rects = data._split_rects(0, 20, 0, 30, tiles, 0, rng)
    assert len(rects) == tiles
    cover = np.zeros((20, 30), dtype=int)
    for r0, r1, c0, c1 in rects:
        assert r0 < r1 and c0 < c1
        cover[r0:r1, c0:c1] += 1
    assert np.all(cover == 1)


def test_synth_mix_contains_dark_and_bright_tiles():
    clean = np.full((32, 32, 3), 0.5, dtype=np.float32)
    out = data.synth_degrade(clean, data.SynthConfig(mode="mix", tiles=6, seed=3))
    assert out.min() < 0.5 - 0.02
    assert out.max() > 0.5 + 0.02


# ---------------------------------------------------------------- precompute


def test_precompute_outputs_exist_and_mean_threshold_recorded(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    assert 0.0 < manifest.mean_threshold < 1.0
    lums = [
        imaging.rgb_to_luminance(imaging.load_image(manifest.path(e.input_path)))
        for e in manifest.entries
    ]
    per_image = [masks.otsu_threshold(masks.histogram(l)) for l in lums]
    assert manifest.mean_threshold == pytest.approx(float(np.mean(per_image)), abs=1e-12)


def test_precompute_masks_rerun_is_byte_identical(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    path = Path(manifest.path(manifest.entries[0].mask_path))
    before = path.read_bytes()
    data.precompute_masks(manifest, masks.MaskConfig())
    assert path.read_bytes() == before


def test_precompute_illum_matches_recomputation(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    e = manifest.entries[3]
    stored = imaging.load_grayscale(manifest.path(e.illum_path))
    img = imaging.load_image(manifest.path(e.input_path))
    fresh = imaging.invert_luminance(imaging.rgb_to_luminance(img))
    assert np.max(np.abs(stored - fresh)) <= 1 / 255


def test_precompute_binary_mode_uses_dataset_mean(dataset_root, tmp_path_factory):
    root = tmp_path_factory.mktemp("binary_ds")
    dark = np.full((16, 16, 3), 0.1, dtype=np.float32)
    bright = np.full((16, 16, 3), 0.9, dtype=np.float32)
    half = np.concatenate([dark[:, :8], bright[:, 8:]], axis=1)
    write_png(root / "low" / "a.png", half)
    write_png(root / "high" / "a.png", bright)
    manifest = data.scan_paired_dir(root / "low", root / "high")
    cfg = masks.MaskConfig(labeling="binary", downsample_factor=1, blur_sigma=0.0)
    manifest = data.precompute_masks(manifest, cfg)
    labels = masks.load_label_map(manifest.path(manifest.entries[0].mask_path))
    assert np.all(labels[:, :8] == masks.UNDER)
    assert np.all(labels[:, 8:] == masks.CORRECT)


# ------------------------------------------------------------------- samples


def test_load_sample_fields_align(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    sample = data.load_sample(manifest, manifest.entries[0])
    assert sample.input.shape == (24, 24, 3)
    assert sample.target.shape == (24, 24, 3)
    assert sample.attn_target.shape == (24, 24, 2)
    assert sample.inv_lum.shape == (24, 24)
    assert sample.id == "img_00"
    assert sample.attn_target.max() <= 1.0 and sample.attn_target.min() >= 0.0


def test_load_sample_without_precompute_is_an_error(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    bare = replace(manifest.entries[0], mask_path=None)
    with pytest.raises(DataError, match="precompute"):
        data.load_sample(manifest, bare)


def marker_sample(h=16, w=16):
    sample = data.PairedSample(
        input=np.zeros((h, w, 3), dtype=np.float32),
        target=np.zeros((h, w, 3), dtype=np.float32),
        attn_target=np.zeros((h, w, 2), dtype=np.float32),
        inv_lum=np.zeros((h, w), dtype=np.float32),
        id="marker",
    )
    sample.input[5, 7] = 1.0
    sample.target[5, 7] = 1.0
    sample.attn_target[5, 7, 0] = 1.0
    sample.inv_lum[5, 7] = 1.0
    return sample


def test_random_crop_moves_all_fields_together():
    sample = marker_sample()
    for seed in range(20):
        crop = data.random_crop_pair(sample, 8, np.random.default_rng(seed))
        spots = [
            np.argwhere(crop.input[:, :, 0] == 1.0),
            np.argwhere(crop.target[:, :, 0] == 1.0),
            np.argwhere(crop.attn_target[:, :, 0] == 1.0),
            np.argwhere(crop.inv_lum == 1.0),
        ]
        counts = {len(s) for s in spots}
        assert counts in ({0}, {1})
        if counts == {1}:
            coords = {tuple(s[0]) for s in spots}
            assert len(coords) == 1


def test_full_size_crop_is_identity():
    sample = marker_sample(12, 12)
    crop = data.random_crop_pair(sample, 12, np.random.default_rng(0))
    assert np.array_equal(crop.input, sample.input)
    assert np.array_equal(crop.inv_lum, sample.inv_lum)


def test_crop_too_large_rejected():
    with pytest.raises(ValueError, match="crop size"):
        data.random_crop_pair(marker_sample(12, 12), 13, np.random.default_rng(0))


def test_crop_windows_vary_with_rng():
    sample = marker_sample(32, 32)
    rng = np.random.default_rng(0)
    corners = {
        tuple(np.argwhere(data.random_crop_pair(sample, 8, rng).input[:, :, 0] == 1.0).flatten())
        for _ in range(30)
    }
    assert len(corners) > 1


# ------------------------------------------------------------------- batches


def test_batches_cover_manifest_exactly_once(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    batches = list(data.make_batches(manifest, batch_size=4, shuffle_seed=0))
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = sorted(s.id for b in batches for s in b)
    assert seen == sorted(e.id for e in manifest.entries)


def test_batches_shuffle_is_seeded(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    order = lambda seed: [s.id for b in data.make_batches(manifest, 4, seed) for s in b]
    assert order(1) == order(1)
    assert order(1) != order(2)
    assert order(1) != [e.id for e in manifest.entries]


def test_batches_validation(dataset_root):
    manifest = data.load_manifest(dataset_root / "manifest.json")
    with pytest.raises(ValueError, match="batch_size"):
        list(data.make_batches(manifest, 0, 0))
    with pytest.raises(DataError, match="no entries"):
        list(data.make_batches(replace(manifest, entries=[]), 2, 0))


# ----------------------------------------------------------------- toy image


def test_toy_image_is_midtone_and_deterministic():
    a = data.make_toy_image(11, 24, 40)
    b = data.make_toy_image(11, 24, 40)
    c = data.make_toy_image(12, 24, 40)
    assert a.shape == (24, 40, 3) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.15 and a.max() <= 0.85
    assert a.std() > 0.05
