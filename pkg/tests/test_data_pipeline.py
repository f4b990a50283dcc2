"""Slide tiling, tissue filtering, synthetic data, manifest and splits."""

import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from dsfwsi.config import SynthConfig, TilingConfig
from dsfwsi.data_pipeline import (
    FOLDS_FILENAME,
    FoldSpec,
    SlideSource,
    TiledPatchStore,
    check_partition,
    compute_tissue_mask,
    generate_synthetic_dataset,
    load_slide,
    read_dataset_index,
    read_manifest,
    render_label,
    render_patch,
    split_folds,
    subsample_fraction,
    tile_slide,
    tissue_fraction,
    window_starts,
    write_manifest,
)
from dsfwsi.data_pipeline.loaders import resolve_num_workers
from dsfwsi.data_pipeline.synthetic import generate_slide
from dsfwsi.errors import ConfigError, ManifestError


def _blank_slide(low=256, ratio=2, value=0, labeled=True):
    low_img = np.full((low, low, 3), value, dtype=np.uint8)
    high_img = np.full((low * ratio, low * ratio, 3), value, dtype=np.uint8)
    label = np.zeros((low * ratio, low * ratio), dtype=np.uint8) if labeled else None
    return SlideSource(slide_id="s0", low=low_img, high=high_img, ratio=ratio, label_high=label)


SMALL_TILING = TilingConfig(
    context_window=128, context_step=128, target_window=64, target_step=64,
    output_size=224, min_tissue_fraction=0.1,
)


class TestTissueRule:
    def test_boundary_values(self):
        # inclusive on (235, 210, 235); any channel above its bound is background
        assert compute_tissue_mask(np.array([[[235, 210, 235]]], dtype=np.uint8))[0, 0]
        assert not compute_tissue_mask(np.array([[[236, 210, 235]]], dtype=np.uint8))[0, 0]
        assert not compute_tissue_mask(np.array([[[235, 211, 235]]], dtype=np.uint8))[0, 0]
        assert not compute_tissue_mask(np.array([[[235, 210, 236]]], dtype=np.uint8))[0, 0]

    def test_dark_is_tissue_white_is_not(self):
        assert compute_tissue_mask(np.zeros((1, 1, 3), dtype=np.uint8))[0, 0]
        assert not compute_tissue_mask(np.full((1, 1, 3), 255, dtype=np.uint8))[0, 0]

    def test_fraction_counts_mask_mean(self):
        patch = np.zeros((2, 2, 3), dtype=np.uint8)
        patch[0, 1] = (255, 255, 255)
        patch[1, 0] = (236, 210, 235)
        patch[1, 1] = (235, 211, 235)
        assert tissue_fraction(patch) == pytest.approx(0.25)


class TestWindowStarts:
    def test_spec_grid(self):
        assert list(window_starts(2048, 1024, 512)) == [0, 512, 1024]

    def test_window_larger_than_extent(self):
        assert list(window_starts(1023, 1024, 512)) == []

    def test_exact_fit(self):
        assert list(window_starts(1024, 1024, 512)) == [0]


class TestTileSlide:
    def test_default_geometry_on_2048_slide(self):
        slide = _blank_slide(low=2048, ratio=2, labeled=False)
        groups = tile_slide(slide, TilingConfig())
        assert len(groups) == 9
        origins = {(g.context.origin_x, g.context.origin_y) for g in groups}
        assert origins == {(x, y) for x in (0, 512, 1024) for y in (0, 512, 1024)}
        assert all(g.m == 16 for g in groups)

    def test_target_origins_partition_context(self):
        slide = _blank_slide(low=1024, ratio=2, labeled=False)
        groups = tile_slide(slide, TilingConfig())
        assert len(groups) == 1
        g = groups[0]
        # targets live on the high level: context FOV starts at 0 and spans
        # 1024 * ratio = 2048 px, cut into a 4x4 grid of 512px windows
        starts = {(t.origin_x, t.origin_y) for t in g.targets}
        assert starts == {(x, y) for x in (0, 512, 1024, 1536) for y in (0, 512, 1024, 1536)}
        assert all(t.window == 512 for t in g.targets)
        check_partition(g, slide.ratio)

    def test_slot_order_is_row_major(self):
        slide = _blank_slide(low=256, ratio=2)
        groups = tile_slide(slide, SMALL_TILING)
        g = groups[0]
        assert [t.slot_index for t in g.targets] == [0, 1, 2, 3]

    def test_deterministic(self):
        slide = _blank_slide()
        a = tile_slide(slide, SMALL_TILING)
        b = tile_slide(slide, SMALL_TILING)
        assert a == b

    def test_background_windows_dropped(self):
        slide = _blank_slide(low=256, ratio=2)
        # paint the left half of the low level white -> those contexts fail 0.5
        low = slide.low.copy()
        low[:, :128] = 255
        slide = SlideSource("s0", low, slide.high, slide.ratio, slide.label_high)
        cfg = TilingConfig(context_window=128, context_step=128, target_window=64,
                           target_step=64, output_size=224, min_tissue_fraction=0.5)
        groups = tile_slide(slide, cfg)
        assert {(g.context.origin_x, g.context.origin_y) for g in groups} == {(128, 0), (128, 128)}

    def test_tissue_fraction_recorded(self):
        slide = _blank_slide(low=256, ratio=2)
        groups = tile_slide(slide, SMALL_TILING)
        assert all(g.context.tissue_fraction == pytest.approx(1.0) for g in groups)

    def test_label_paths_only_when_labeled(self):
        labeled = tile_slide(_blank_slide(), SMALL_TILING)
        unlabeled = tile_slide(_blank_slide(labeled=False), SMALL_TILING)
        assert all(t.label_path for g in labeled for t in g.targets)
        assert all(t.label_path is None for g in unlabeled for t in g.targets)

    def test_partition_check_catches_shifted_target(self):
        slide = _blank_slide()
        g = tile_slide(slide, SMALL_TILING)[0]
        import dataclasses
        bad_target = dataclasses.replace(g.targets[0], origin_x=g.targets[0].origin_x + 8)
        bad_group = dataclasses.replace(g, targets=(bad_target, *g.targets[1:]))
        with pytest.raises(ValueError):
            check_partition(bad_group, slide.ratio)


class TestSlideSource:
    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            SlideSource(
                "s",
                np.zeros((64, 64, 3), dtype=np.uint8),
                np.zeros((100, 100, 3), dtype=np.uint8),  # not low * ratio
                ratio=2,
            )

    def test_label_must_match_high(self):
        with pytest.raises(ValueError):
            SlideSource(
                "s",
                np.zeros((64, 64, 3), dtype=np.uint8),
                np.zeros((128, 128, 3), dtype=np.uint8),
                ratio=2,
                label_high=np.zeros((64, 64), dtype=np.uint8),
            )

    def test_magnifications(self):
        s = _blank_slide(ratio=2)
        assert s.magnification_high == pytest.approx(2 * s.magnification_low)


class TestRendering:
    def test_context_crop_resized_to_output(self):
        slide = _blank_slide(low=256, ratio=2)
        g = tile_slide(slide, SMALL_TILING)[0]
        patch = render_patch(slide, g.context)
        assert patch.shape == (224, 224, 3) and patch.dtype == np.uint8

    def test_copy_through_when_sizes_match(self):
        # target records carry high-level windows: 64 low px * ratio 2 = 128
        cfg = TilingConfig(context_window=128, context_step=128, target_window=64,
                           target_step=64, output_size=128, min_tissue_fraction=0.1)
        slide = _blank_slide(low=256, ratio=2)
        rng = np.random.default_rng(0)
        high = rng.integers(0, 200, size=slide.high.shape, dtype=np.uint8)
        slide = SlideSource("s0", slide.low, high, slide.ratio, slide.label_high)
        g = tile_slide(slide, cfg)[0]
        t = g.targets[0]
        assert t.window == 128
        patch = render_patch(slide, t)
        assert np.array_equal(patch, high[t.origin_y : t.origin_y + 128, t.origin_x : t.origin_x + 128])

    def test_label_rendering_preserves_classes(self):
        slide = _blank_slide(low=256, ratio=2)
        label = slide.label_high.copy()
        label[:256] = 1
        label[:, :256] += 1  # quadrants: 2 / 1 / 1 / 0
        slide = SlideSource("s0", slide.low, slide.high, slide.ratio, label)
        g = tile_slide(slide, SMALL_TILING)[0]
        ctx_label = render_label(slide, g.context)
        assert ctx_label.shape == (224, 224)
        assert set(np.unique(ctx_label)) <= {0, 1, 2}
        # context at (0,0) covers high[0:256, 0:256] -> top-left quadrant value 2
        assert ctx_label[0, 0] == 2


class TestSyntheticData:
    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = SynthConfig(slides=2, low_size=64, classes=3, ratio=2, seed=21)
        generate_synthetic_dataset(cfg, tmp_path / "a")
        generate_synthetic_dataset(cfg, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a" / "slides").iterdir()):
            da = (tmp_path / "a" / "slides" / name).read_bytes()
            db = (tmp_path / "b" / "slides" / name).read_bytes()
            assert hashlib.sha256(da).hexdigest() == hashlib.sha256(db).hexdigest(), name

    def test_different_seed_differs(self, tmp_path):
        cfg = SynthConfig(slides=1, low_size=64, classes=3, ratio=2, seed=21)
        generate_synthetic_dataset(cfg, tmp_path / "a")
        generate_synthetic_dataset(SynthConfig(slides=1, low_size=64, classes=3, ratio=2, seed=22), tmp_path / "b")
        name = "slide_000_high.png"
        assert (tmp_path / "a" / "slides" / name).read_bytes() != (tmp_path / "b" / "slides" / name).read_bytes()

    def test_class_fractions_respected(self):
        cfg = SynthConfig(slides=1, low_size=512, classes=3, ratio=2,
                          class_fractions=(0.2, 0.3, 0.5), seed=3)
        slide = generate_slide("s0", cfg, np.random.SeedSequence(3))
        got = np.bincount(slide.label_high.ravel(), minlength=3) / slide.label_high.size
        assert np.allclose(got, (0.2, 0.3, 0.5), atol=0.02)

    def test_levels_consistent(self):
        cfg = SynthConfig(slides=1, low_size=64, classes=2, ratio=4, seed=5)
        slide = generate_slide("s0", cfg, np.random.SeedSequence(5))
        assert slide.high.shape == (256, 256, 3)
        assert slide.low.shape == (64, 64, 3)
        assert slide.label_high.shape == (256, 256)
        # low level is the block mean of the high level
        block = slide.high[:4, :4].reshape(-1, 3).mean(axis=0)
        assert np.all(np.abs(block - slide.low[0, 0].astype(np.float64)) <= 1.0)

    def test_mostly_tissue(self):
        cfg = SynthConfig(slides=1, low_size=128, classes=3, ratio=2, seed=7)
        slide = generate_slide("s0", cfg, np.random.SeedSequence(7))
        assert tissue_fraction(slide.low) > 0.9

    def test_single_class_label_constant(self):
        cfg = SynthConfig(slides=1, low_size=32, classes=1, ratio=2, seed=9)
        slide = generate_slide("s0", cfg, np.random.SeedSequence(9))
        assert set(np.unique(slide.label_high)) == {0}

    def test_index_round_trip(self, synth_dataset_dir):
        index = read_dataset_index(synth_dataset_dir)
        assert len(index["slides"]) == 3
        slide = load_slide(synth_dataset_dir, index["slides"][0], ratio=int(index["ratio"]))
        assert slide.high.shape == (512, 512, 3)
        assert slide.label_high is not None

    def test_format_version_gate(self, tmp_path, synth_dataset_dir):
        data = json.loads((synth_dataset_dir / "dataset.json").read_text())
        data["format_version"] = 999
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "dataset.json").write_text(json.dumps(data))
        with pytest.raises(ValueError, match="format_version"):
            read_dataset_index(bad)


class TestManifest:
    def test_round_trip(self, tmp_path):
        groups = tile_slide(_blank_slide(), SMALL_TILING)
        path = tmp_path / "manifest.csv"
        write_manifest(groups, path)
        again = read_manifest(path)
        assert again == groups

    def test_unlabeled_round_trip(self, tmp_path):
        groups = tile_slide(_blank_slide(labeled=False), SMALL_TILING)
        path = tmp_path / "manifest.csv"
        write_manifest(groups, path)
        again = read_manifest(path)
        assert again == groups
        assert all(t.label_path is None for g in again for t in g.targets)

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "manifest.csv"
        write_manifest([], path)
        assert read_manifest(path) == []

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ManifestError, match="header"):
            read_manifest(path)

    def test_bad_integer_field_names_line_and_field(self, tmp_path):
        groups = tile_slide(_blank_slide(), SMALL_TILING)
        path = tmp_path / "manifest.csv"
        write_manifest(groups, path)
        lines = path.read_text().splitlines()
        parts = lines[1].split(",")
        parts[3] = "not_an_int"  # origin_x
        lines[1] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match=r"line 2.*origin_x"):
            read_manifest(path)

    def test_missing_target_slot_detected(self, tmp_path):
        groups = tile_slide(_blank_slide(), SMALL_TILING)
        path = tmp_path / "manifest.csv"
        write_manifest(groups, path)
        lines = path.read_text().splitlines()
        victim = next(i for i, l in enumerate(lines) if ",target," in l)
        del lines[victim]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="missing target slot"):
            read_manifest(path)

    def test_missing_context_detected(self, tmp_path):
        groups = tile_slide(_blank_slide(), SMALL_TILING)
        path = tmp_path / "manifest.csv"
        write_manifest(groups, path)
        lines = path.read_text().splitlines()
        victim = next(i for i, l in enumerate(lines) if ",context," in l)
        del lines[victim]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="no context row"):
            read_manifest(path)

    def test_duplicate_slot_detected(self, tmp_path):
        groups = tile_slide(_blank_slide(), SMALL_TILING)
        path = tmp_path / "manifest.csv"
        write_manifest(groups, path)
        lines = path.read_text().splitlines()
        target_lines = [l for l in lines if ",target," in l]
        lines.append(target_lines[0].replace("_t_", "_tdup_", 1))
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(path)

    def test_mixed_group_sizes_rejected(self, tmp_path):
        small = tile_slide(_blank_slide(), SMALL_TILING)
        big_cfg = TilingConfig(context_window=128, context_step=128, target_window=32,
                               target_step=32, output_size=224, min_tissue_fraction=0.1)
        big = tile_slide(_blank_slide(), big_cfg)
        # rename to avoid patch-id collisions between the two tilings
        import dataclasses
        renamed = []
        for g in big[:1]:
            ctx = dataclasses.replace(g.context, patch_id="x_" + g.context.patch_id,
                                      group_id="x_" + g.group_id, slide_id="sx")
            tgts = tuple(
                dataclasses.replace(t, patch_id="x_" + t.patch_id,
                                    group_id="x_" + g.group_id, slide_id="sx")
                for t in g.targets
            )
            renamed.append(dataclasses.replace(g, group_id="x_" + g.group_id, context=ctx, targets=tgts))
        path = tmp_path / "manifest.csv"
        write_manifest(small[:1] + renamed, path)
        with pytest.raises(ManifestError, match="uniform"):
            read_manifest(path)


class TestSplits:
    def test_fold_sizes_and_cover(self):
        slide_ids = [f"s{i:02d}" for i in range(50)]
        spec = split_folds(slide_ids, k=5, seed=1)
        all_val = []
        for fold in range(5):
            val = spec.validation_slides(fold)
            assert len(val) == 10
            all_val.extend(val)
        assert sorted(all_val) == sorted(slide_ids)

    def test_train_val_disjoint(self):
        spec = split_folds([f"s{i}" for i in range(10)], k=5, seed=2)
        for fold in range(5):
            assert not set(spec.validation_slides(fold)) & set(spec.training_slides(fold))

    def test_deterministic_and_seed_sensitive(self):
        ids = [f"s{i:02d}" for i in range(30)]
        a = split_folds(ids, k=5, seed=3)
        b = split_folds(ids, k=5, seed=3)
        c = split_folds(ids, k=5, seed=4)
        assert a.slide_folds == b.slide_folds
        assert a.slide_folds != c.slide_folds

    def test_groups_stay_with_their_slide(self, store):
        spec = store.load_folds()
        for fold in range(spec.k):
            val_slides = set(spec.validation_slides(fold))
            val_groups = spec.select_groups(store.groups, fold, "val")
            train_groups = spec.select_groups(store.groups, fold, "train")
            assert all(g.slide_id in val_slides for g in val_groups)
            assert all(g.slide_id not in val_slides for g in train_groups)
            assert len(val_groups) + len(train_groups) == len(store.groups)

    def test_too_few_slides_rejected(self):
        with pytest.raises(ConfigError):
            split_folds(["a", "b"], k=3, seed=0)

    def test_save_load_round_trip(self, tmp_path):
        spec = split_folds([f"s{i}" for i in range(6)], k=3, seed=5)
        spec.save(tmp_path / FOLDS_FILENAME)
        again = FoldSpec.load(tmp_path / FOLDS_FILENAME)
        assert again == spec

    def test_unknown_slide_rejected(self):
        spec = split_folds(["a", "b", "c"], k=3, seed=0)
        rogue = tile_slide(_blank_slide(), SMALL_TILING)  # slide_id s0
        with pytest.raises(ConfigError, match="s0"):
            spec.select_groups(rogue, 0, "train")

    def test_bad_fold_index_rejected(self):
        spec = split_folds(["a", "b", "c"], k=3, seed=0)
        with pytest.raises(ConfigError):
            spec.validation_slides(3)


class TestSubsample:
    def test_fraction_counts(self):
        groups = list(range(40))
        assert len(subsample_fraction(groups, 0.5, seed=0)) == 20
        assert len(subsample_fraction(groups, 1.0, seed=0)) == 40
        assert len(subsample_fraction(groups, 0.1, seed=0)) == 4

    def test_nested_prefix_property(self):
        groups = list(range(40))
        small = set(subsample_fraction(groups, 0.1, seed=3))
        large = set(subsample_fraction(groups, 0.5, seed=3))
        assert small <= large

    def test_original_order_preserved(self):
        groups = list(range(40))
        sel = subsample_fraction(groups, 0.5, seed=3)
        assert sel == sorted(sel)

    def test_matches_permutation_prefix_oracle(self):
        groups = list(range(17))
        sel = subsample_fraction(groups, 0.4, seed=9)
        perm = np.random.default_rng(9).permutation(17)
        want = sorted(int(i) for i in perm[: int(round(0.4 * 17))])
        assert sel == want

    def test_seed_changes_subset(self):
        groups = list(range(100))
        a = set(subsample_fraction(groups, 0.3, seed=0))
        b = set(subsample_fraction(groups, 0.3, seed=1))
        assert a != b

    def test_bad_fraction_rejected(self):
        with pytest.raises(ConfigError):
            subsample_fraction(list(range(4)), 0.0, seed=0)
        with pytest.raises(ConfigError):
            subsample_fraction(list(range(4)), 1.0001, seed=0)


class TestStoreAndMaterialize:
    def test_tiled_layout(self, tiles_dir, store):
        assert (tiles_dir / "manifest.csv").exists()
        assert (tiles_dir / FOLDS_FILENAME).exists()
        assert len(store.groups) == 12
        assert store.m == 4

    def test_every_patch_file_exists_and_loads(self, store):
        for group in store.groups:
            for record in [group.context, *group.targets]:
                img = store.load_image(record.patch_id)
                assert img.shape == (224, 224, 3) and img.dtype == np.uint8

    def test_labels_load_as_int64(self, store):
        record = store.groups[0].targets[0]
        label = store.load_label(record)
        assert label.shape == (224, 224) and label.dtype == np.int64
        assert set(np.unique(label)) <= {0, 1, 2}

    def test_missing_patch_file_raises(self, store):
        import dataclasses
        with pytest.raises(FileNotFoundError):
            store.load_image("no_such_patch")

    def test_partition_holds_for_all_groups(self, store):
        for group in store.groups:
            check_partition(group, ratio=2)

    def test_num_workers_env(self, monkeypatch):
        monkeypatch.delenv("DSFWSI_NUM_WORKERS", raising=False)
        assert resolve_num_workers() == 0
        monkeypatch.setenv("DSFWSI_NUM_WORKERS", "2")
        assert resolve_num_workers() == 2
        monkeypatch.setenv("DSFWSI_NUM_WORKERS", "banana")
        with pytest.raises(ConfigError):
            resolve_num_workers()
