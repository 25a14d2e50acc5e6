"""Synthetic generator and split machinery: determinism, rates, stratification."""

from dataclasses import replace

import numpy as np
import pytest

from uncertseg.dataset import (
    DEFAULT_COUNTS,
    GA,
    Dataset,
    GeneratorParams,
    generate_dataset,
    generate_volume,
    make_splits,
    scaled_counts,
)
from uncertseg.postprocess import disruption_labels
from uncertseg.rng import RngState

SMALL = GeneratorParams(height=32, width=64, bscans=4)


class TestGenerateVolume:
    def test_same_seed_bit_identical(self):
        a = generate_volume(SMALL, RngState(9), "v")
        b = generate_volume(SMALL, RngState(9), "v")
        assert np.array_equal(a.bscans, b.bscans)
        assert np.array_equal(a.masks, b.masks)
        assert np.array_equal(a.disrupted_columns, b.disrupted_columns)

    def test_different_seeds_differ(self):
        a = generate_volume(SMALL, RngState(1), "v")
        b = generate_volume(SMALL, RngState(2), "v")
        assert not np.array_equal(a.bscans, b.bscans)

    def test_values_finite_in_unit_interval(self):
        vol = generate_volume(SMALL, RngState(3), "v")
        assert np.isfinite(vol.bscans).all()
        assert vol.bscans.min() >= 0.0 and vol.bscans.max() <= 1.0

    def test_no_disruptions_means_full_columns(self):
        params = replace(SMALL, disruption_rate=0.0, shadow_rate=0.0)
        vol = generate_volume(params, RngState(4), "v")
        for mask, dis in zip(vol.masks, vol.disrupted_columns):
            np.testing.assert_array_equal(disruption_labels(mask), 0)
            np.testing.assert_array_equal(dis, 0)

    def test_ground_truth_matches_mask_labels(self):
        """disrupted_columns always equals disruption_labels(mask)."""
        for seed in range(5):
            vol = generate_volume(SMALL, RngState(seed), "v")
            for mask, dis in zip(vol.masks, vol.disrupted_columns):
                np.testing.assert_array_equal(disruption_labels(mask), dis)

    def test_mask_is_single_band_per_column(self):
        """Foreground rows in any non-disrupted column are contiguous."""
        vol = generate_volume(SMALL, RngState(6), "v")
        for mask in vol.masks:
            for col in range(mask.shape[1]):
                rows = np.flatnonzero(mask[:, col])
                if rows.size:
                    assert rows[-1] - rows[0] + 1 == rows.size

    def test_disruption_rate_matches_binomial_oracle(self):
        """rate 0.1 on 512 columns across 20 seeds: observed fraction within
        3 binomial standard errors of 0.1."""
        params = GeneratorParams(height=32, width=512, bscans=1, disruption_rate=0.1)
        total = 0
        disrupted = 0
        for seed in range(20):
            vol = generate_volume(params, RngState(1000 + seed), "v")
            disrupted += int(vol.disrupted_columns.sum())
            total += vol.disrupted_columns.size
        frac = disrupted / total
        se = np.sqrt(0.1 * 0.9 / total)
        assert abs(frac - 0.1) < 3 * se

    def test_shadows_keep_mask_by_default(self):
        params = replace(SMALL, disruption_rate=0.0, shadow_rate=0.3)
        vol = generate_volume(params, RngState(7), "v")
        np.testing.assert_array_equal(vol.disrupted_columns, 0)
        for mask in vol.masks:
            assert (mask.sum(axis=0) > 0).all()

    def test_shadow_disruption_convention_flag(self):
        params = replace(SMALL, disruption_rate=0.0, shadow_rate=0.3, shadows_disrupt=True)
        vol = generate_volume(params, RngState(7), "v")
        assert vol.disrupted_columns.sum() > 0
        for mask, dis in zip(vol.masks, vol.disrupted_columns):
            np.testing.assert_array_equal(disruption_labels(mask), dis)

    def test_ga_volumes_have_more_disruptions(self):
        base = replace(SMALL, disruption_rate=0.08)
        normal = generate_volume(base, RngState(8), "v")
        ga = generate_volume(replace(base, disease_tag=GA), RngState(8), "v")
        assert ga.disrupted_columns.sum() > normal.disrupted_columns.sum()

    def test_geometry_validated(self):
        with pytest.raises(ValueError):
            GeneratorParams(height=30, width=64)

    def test_disruption_rate_validated(self):
        with pytest.raises(ValueError):
            GeneratorParams(disruption_rate=1.0)

    def test_paper_scale_geometry(self):
        params = GeneratorParams(height=496, width=512, bscans=2)
        vol = generate_volume(params, RngState(1), "v")
        assert vol.bscans.shape == (2, 496, 512)


class TestMakeSplits:
    @staticmethod
    def _canonical_volumes():
        pairs = []
        idx = 0
        for disease, count in (("DME", 16), ("RVO", 24), ("earlyAMD", 10), (GA, 10)):
            for _ in range(count):
                pairs.append((f"vol{idx:03d}", disease))
                idx += 1
        return pairs

    def test_canonical_counts(self):
        manifest = make_splits(self._canonical_volumes(), DEFAULT_COUNTS, RngState(0))
        assert [len(manifest.splits[s]) for s in ("train", "val", "testA", "testB")] == [31, 4, 15, 10]

    def test_ga_isolated_in_testB(self):
        manifest = make_splits(self._canonical_volumes(), DEFAULT_COUNTS, RngState(1))
        for split in ("train", "val", "testA"):
            assert all(manifest.diseases[v] != GA for v in manifest.splits[split])
        assert all(manifest.diseases[v] == GA for v in manifest.splits["testB"])

    def test_stratification_within_one_volume(self):
        """Each split's disease mix stays within 1 volume of its exact share."""
        manifest = make_splits(self._canonical_volumes(), DEFAULT_COUNTS, RngState(2))
        share = {"DME": 16 / 50, "RVO": 24 / 50, "earlyAMD": 10 / 50}
        for split in ("train", "val", "testA"):
            n = len(manifest.splits[split])
            for disease, frac in share.items():
                got = sum(1 for v in manifest.splits[split] if manifest.diseases[v] == disease)
                assert abs(got - frac * n) <= 1.0, (split, disease)

    def test_splits_disjoint_and_complete(self):
        manifest = make_splits(self._canonical_volumes(), DEFAULT_COUNTS, RngState(3))
        all_ids = [v for s in manifest.splits.values() for v in s]
        assert len(all_ids) == 60
        assert len(set(all_ids)) == 60

    def test_wrong_ga_count_rejected(self):
        pairs = self._canonical_volumes()[:-1]  # drop one GA volume
        with pytest.raises(ValueError):
            make_splits(pairs, DEFAULT_COUNTS, RngState(0))


class TestScaledCounts:
    def test_default_total(self):
        counts, mix = scaled_counts(60)
        assert counts == DEFAULT_COUNTS
        assert mix == {"DME": 16, "RVO": 24, "earlyAMD": 10, GA: 10}

    def test_small_total_sums(self):
        counts, mix = scaled_counts(12)
        assert sum(counts.values()) == 12
        assert sum(mix.values()) == 12
        assert mix[GA] == counts["testB"]


class TestDatasetIO:
    def test_write_and_reload(self, tmp_path):
        params = GeneratorParams(height=32, width=32, bscans=2)
        generate_dataset(tmp_path / "ds", 12, seed=5, params=params)
        ds = Dataset(tmp_path / "ds")
        assert ds.height == 32 and ds.width == 32 and ds.bscan_count == 2
        vid = ds.volume_ids("train")[0]
        vol = ds.load_volume(vid)
        assert vol.bscans.shape == (2, 32, 32)
        assert vol.masks.dtype == np.uint8
        np.testing.assert_array_equal(
            vol.disrupted_columns, np.stack([disruption_labels(m) for m in vol.masks])
        )

    def test_generation_deterministic_across_runs(self, tmp_path):
        params = GeneratorParams(height=32, width=32, bscans=2)
        generate_dataset(tmp_path / "a", 12, seed=9, params=params)
        generate_dataset(tmp_path / "b", 12, seed=9, params=params)
        a_files = sorted((tmp_path / "a").rglob("*"))
        b_files = sorted((tmp_path / "b").rglob("*"))
        assert [f.name for f in a_files] == [f.name for f in b_files]
        for fa, fb in zip(a_files, b_files):
            if fa.is_file():
                assert fa.read_bytes() == fb.read_bytes(), fa.name

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Dataset(tmp_path / "nope")
