import struct
from itertools import islice

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robal.data import (ImbalanceProfile, LabeledDataset, LabelRangeError, class_aware_batches,
                        class_means, load_binary, make_longtail_counts, make_small_balanced,
                        plain_batches, save_binary, synth_gaussians)
from robal.errors import BadMagicError, TruncatedError, VersionError


class TestLongtailCounts:
    def test_balanced(self):
        np.testing.assert_array_equal(make_longtail_counts(ImbalanceProfile(10, 5000, 1)), [5000] * 10)

    def test_ends(self):
        c = make_longtail_counts(ImbalanceProfile(10, 5000, 50))
        assert c[0] == 5000 and c[9] == 100

    def test_middle_high_precision(self):
        c = make_longtail_counts(ImbalanceProfile(10, 5000, 50))
        want = int(mp.nint(5000 * mp.mpf(50) ** (mp.mpf(-5) / 9)))
        assert c[5] == want

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 30), st.integers(1, 10000), st.floats(1, 200))
    def test_monotone_with_rounding_slack(self, c, n_max, ir):
        if n_max < ir:
            return
        try:
            counts = make_longtail_counts(ImbalanceProfile(c, n_max, ir))
        except ValueError:
            return
        assert np.all(np.diff(counts) <= 0)
        tail = counts[-1]
        ratio = counts[0] / tail
        assert ir * (1 - 1 / tail) - 1e-12 <= ratio <= ir * (1 + 1 / tail) + 1e-12

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            ImbalanceProfile(1, 100, 2)
        with pytest.raises(ValueError):
            ImbalanceProfile(10, 100, 0.5)
        with pytest.raises(ValueError):
            ImbalanceProfile(10, 10, 50)


class TestDataset:
    def test_counts_follow_labels(self):
        ds = LabeledDataset(np.zeros((5, 2)), [0, 1, 1, 2, 2], 3)
        np.testing.assert_array_equal(ds.class_counts, [1, 2, 2])
        assert ds.class_counts.sum() == len(ds)

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 2)), [0, 0], 2)

    def test_values_must_be_unit_interval(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.full((2, 1), 1.5), [0, 1], 2)

    def test_label_range(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1)), [0, 2], 2)

    def test_immutable(self):
        ds = LabeledDataset(np.zeros((2, 1)), [0, 1], 2)
        with pytest.raises(ValueError):
            ds.samples[0, 0] = 1.0


class TestSynth:
    def test_bookkeeping(self):
        ds = synth_gaussians(2, 4, 0.1, [3, 3], seed=7)
        assert len(ds) == 6
        np.testing.assert_array_equal(ds.class_counts, [3, 3])

    def test_zero_spread_collapses_classes(self):
        ds = synth_gaussians(3, 4, 0.0, [4, 4, 4], seed=1)
        for k in range(3):
            pts = ds.samples[ds.labels == k]
            assert np.all(pts == pts[0])

    def test_deterministic_and_in_range(self):
        a = synth_gaussians(5, 8, 0.5, [20] * 5, seed=3)
        b = synth_gaussians(5, 8, 0.5, [20] * 5, seed=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.samples.min() >= 0 and a.samples.max() <= 1

    @pytest.mark.parametrize("layout", ["ring", "simplex"])
    def test_means_unit_and_equally_spaced(self, layout):
        m = class_means(10, 16, layout)
        np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, rtol=0, atol=1e-14)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        if layout == "simplex":
            off = d[~np.eye(10, dtype=bool)]
            np.testing.assert_allclose(off, off[0], rtol=0, atol=1e-12)
        else:
            neighbours = [d[i, (i + 1) % 10] for i in range(10)]
            np.testing.assert_allclose(neighbours, neighbours[0], rtol=0, atol=1e-12)

    def test_dim_too_small(self):
        with pytest.raises(ValueError):
            synth_gaussians(2, 1, 0.1, [1, 1], seed=0)

    def test_simplex_needs_room(self):
        with pytest.raises(ValueError):
            class_means(10, 4, "simplex")


class TestSmallBalanced:
    def _base(self, per_class):
        return synth_gaussians(10, 2, 0.1, [per_class] * 10, seed=11)

    def test_integer_division(self):
        counts = np.array([5000, 3237, 2096, 1357, 879, 569, 368, 238, 154, 0])
        counts[-1] = 19573 - counts.sum()
        lt = LabeledDataset(np.zeros((counts.sum(), 1)), np.repeat(np.arange(10), counts), 10)
        out = make_small_balanced(lt, self._base(2000), seed=0)
        np.testing.assert_array_equal(out.class_counts, [1957] * 10)
        assert len(out) == 19570

    def test_balanced_input_keeps_size(self):
        lt = synth_gaussians(10, 2, 0.1, [30] * 10, seed=2)
        out = make_small_balanced(lt, self._base(50), seed=0)
        assert len(out) == len(lt)
        np.testing.assert_array_equal(out.class_counts, [30] * 10)

    def test_deterministic(self):
        lt = synth_gaussians(10, 2, 0.1, [40] * 5 + [10] * 5, seed=2)
        a = make_small_balanced(lt, self._base(50), seed=4)
        b = make_small_balanced(lt, self._base(50), seed=4)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_insufficient_base(self):
        lt = synth_gaussians(10, 2, 0.1, [100] * 10, seed=2)
        with pytest.raises(ValueError):
            make_small_balanced(lt, self._base(20), seed=0)


class TestBatches:
    def test_class_aware_frequency(self):
        ds = LabeledDataset(np.zeros((101, 1)), [0] * 100 + [1], 2)
        idx = np.concatenate(list(islice(class_aware_batches(ds, 1000, seed=5), 100)))
        freq = (ds.labels[idx] == 1).mean()
        # binomial sd at 1e5 draws is 0.0016; the band is about 6 sd wide
        assert abs(freq - 0.5) <= 0.01

    def test_class_aware_deterministic(self):
        ds = synth_gaussians(3, 2, 0.1, [10, 5, 1], seed=0)
        a = list(islice(class_aware_batches(ds, 8, seed=9), 5))
        b = list(islice(class_aware_batches(ds, 8, seed=9), 5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_class_aware_balanced_uniform(self):
        ds = synth_gaussians(4, 2, 0.1, [25] * 4, seed=0)
        idx = np.concatenate(list(islice(class_aware_batches(ds, 500, seed=1), 80)))
        freq = np.bincount(ds.labels[idx], minlength=4) / idx.size
        np.testing.assert_allclose(freq, 0.25, atol=0.01)

    def test_plain_is_permutation(self):
        ds = synth_gaussians(3, 2, 0.1, [7, 5, 3], seed=0)
        idx = np.concatenate(list(plain_batches(ds, 4, np.random.default_rng(0))))
        np.testing.assert_array_equal(np.sort(idx), np.arange(15))

    def test_batch_size_validated(self):
        ds = synth_gaussians(2, 2, 0.1, [1, 1], seed=0)
        with pytest.raises(ValueError):
            next(class_aware_batches(ds, 0, seed=0))


class TestRBLT:
    def test_round_trip(self, tmp_path):
        ds = synth_gaussians(4, 6, 0.3, [5, 4, 3, 2], seed=1)
        save_binary(ds, tmp_path / "d.rblt")
        back = load_binary(tmp_path / "d.rblt")
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.class_counts, ds.class_counts)
        np.testing.assert_allclose(back.samples, np.rint(ds.samples * 255) / 255, rtol=0, atol=0)
        save_binary(back, tmp_path / "e.rblt")
        assert (tmp_path / "d.rblt").read_bytes() == (tmp_path / "e.rblt").read_bytes()

    def test_hand_built_file(self, tmp_path):
        raw = b"RBLT" + struct.pack("<IIQI", 1, 2, 2, 2) + struct.pack("<II", 1, 3)
        raw += struct.pack("<H", 1) + bytes([0, 128, 255])
        raw += struct.pack("<H", 0) + bytes([51, 102, 204])
        (tmp_path / "h.rblt").write_bytes(raw)
        ds = load_binary(tmp_path / "h.rblt")
        assert ds.samples.shape == (2, 1, 3)
        np.testing.assert_array_equal(ds.labels, [1, 0])
        np.testing.assert_array_equal(ds.samples.reshape(2, 3), np.array([[0, 128, 255], [51, 102, 204]]) / 255)

    def test_empty_file_bad_magic(self, tmp_path):
        (tmp_path / "e.rblt").write_bytes(b"")
        with pytest.raises(BadMagicError):
            load_binary(tmp_path / "e.rblt")

    def test_truncated(self, tmp_path):
        ds = synth_gaussians(2, 3, 0.1, [2, 2], seed=0)
        save_binary(ds, tmp_path / "t.rblt")
        data = (tmp_path / "t.rblt").read_bytes()
        (tmp_path / "t.rblt").write_bytes(data[:-1])
        with pytest.raises(TruncatedError):
            load_binary(tmp_path / "t.rblt")

    def test_label_out_of_range(self, tmp_path):
        raw = b"RBLT" + struct.pack("<IIQI", 1, 2, 1, 1) + struct.pack("<I", 1) + struct.pack("<H", 2) + b"\x00"
        (tmp_path / "l.rblt").write_bytes(raw)
        with pytest.raises(LabelRangeError):
            load_binary(tmp_path / "l.rblt")

    def test_version(self, tmp_path):
        raw = b"RBLT" + struct.pack("<IIQI", 9, 2, 0, 1) + struct.pack("<I", 1)
        (tmp_path / "v.rblt").write_bytes(raw)
        with pytest.raises(VersionError):
            load_binary(tmp_path / "v.rblt")

    def test_error_kinds_distinct(self):
        assert len({BadMagicError, TruncatedError, LabelRangeError, VersionError}) == 4
        assert not issubclass(TruncatedError, BadMagicError)
