"""CSV ingestion, normalization, and windowing contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsad.data import (SeriesFrame, fit_normalize, invert_normalization,
                        labels_path_for, load_csv, make_windows, save_csv,
                        save_labels, windows_array)
from mtsad.errors import ContractError, DataError, IngestionError


def write(path, text):
    path.write_text(text, encoding="utf-8")


def make_frame(n=3, t=12, seed=0, labels=False):
    rng = np.random.default_rng(seed)
    return SeriesFrame(
        metric_names=[f"m{i}" for i in range(n)],
        timestamps=np.arange(t, dtype=np.int64) * 60,
        values=rng.normal(size=(n, t)),
        labels=rng.integers(0, 2, t).astype(np.int8) if labels else None,
    )


class TestLoadCsv:
    def test_well_formed(self, tmp_path):
        lines = ["timestamp,cpu,mem,net"]
        for j in range(10):
            lines.append(f"{60 * j},{j}.5,{j}.25,{j}.125")
        write(tmp_path / "e.csv", "\n".join(lines) + "\n")
        frame = load_csv(tmp_path / "e.csv")
        assert frame.n_metrics == 3 and frame.n_points == 10
        assert frame.metric_names == ["cpu", "mem", "net"]
        assert frame.labels is None

    def test_duplicate_timestamp_cites_line(self, tmp_path):
        write(tmp_path / "e.csv",
              "timestamp,a,b\n0,1,2\n60,3,4\n60,5,6\n")
        with pytest.raises(IngestionError, match="line 4.*duplicate timestamp 60"):
            load_csv(tmp_path / "e.csv")

    def test_ragged_row(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,1,2\n60,3\n")
        with pytest.raises(IngestionError, match="line 3"):
            load_csv(tmp_path / "e.csv")

    def test_unparsable_float(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,1,2\n60,oops,4\n")
        with pytest.raises(IngestionError, match="line 3.*unparsable float"):
            load_csv(tmp_path / "e.csv")

    def test_non_constant_spacing(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,1,2\n60,3,4\n180,5,6\n")
        with pytest.raises(IngestionError, match="non-constant timestamp spacing"):
            load_csv(tmp_path / "e.csv")

    def test_rows_sorted_by_timestamp(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n120,9,9\n0,1,1\n60,5,5\n")
        frame = load_csv(tmp_path / "e.csv")
        assert list(frame.timestamps) == [0, 60, 120]
        np.testing.assert_array_equal(frame.values[0], [1, 5, 9])

    def test_missing_values_filled(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,,2\n60,3,\n120,,8\n")
        frame = load_csv(tmp_path / "e.csv")
        np.testing.assert_array_equal(frame.values[0], [3, 3, 3])  # back- then forward-fill
        np.testing.assert_array_equal(frame.values[1], [2, 2, 8])

    def test_fully_missing_metric_rejected(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,,2\n60,,4\n")
        with pytest.raises(IngestionError, match="no values at all"):
            load_csv(tmp_path / "e.csv")

    def test_single_metric_rejected(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a\n0,1\n")
        with pytest.raises(IngestionError):
            load_csv(tmp_path / "e.csv")

    def test_labels_joined_on_timestamp(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,1,2\n60,3,4\n")
        write(tmp_path / "e_labels.csv", "timestamp,label\n60,1\n0,0\n")
        frame = load_csv(tmp_path / "e.csv")
        np.testing.assert_array_equal(frame.labels, [0, 1])

    def test_incomplete_label_coverage(self, tmp_path):
        write(tmp_path / "e.csv", "timestamp,a,b\n0,1,2\n60,3,4\n120,5,6\n180,7,8\n")
        write(tmp_path / "e_labels.csv", "timestamp,label\n0,0\n60,1\n")
        with pytest.raises(IngestionError, match="label coverage incomplete"):
            load_csv(tmp_path / "e.csv")


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        frame = make_frame(labels=True)
        save_csv(frame, tmp_path / "e.csv")
        save_labels(frame, labels_path_for(tmp_path / "e.csv"))
        back = load_csv(tmp_path / "e.csv")
        assert back.metric_names == frame.metric_names
        np.testing.assert_array_equal(back.timestamps, frame.timestamps)
        assert np.array_equal(back.values, frame.values)  # bit-exact via repr
        np.testing.assert_array_equal(back.labels, frame.labels)


class TestNormalize:
    def test_basic_scaling(self):
        frame = make_frame(n=2, t=3)
        frame.values[0] = [0.0, 5.0, 10.0]
        normalized, stats = fit_normalize(frame, (0, 3))
        np.testing.assert_allclose(normalized.values[0], [0.0, 0.5, 1.0])

    def test_constant_metric_maps_to_zero(self):
        frame = make_frame(n=2, t=3)
        frame.values[1] = [7.0, 7.0, 7.0]
        normalized, _ = fit_normalize(frame, (0, 3))
        np.testing.assert_array_equal(normalized.values[1], [0.0, 0.0, 0.0])

    def test_out_of_range_clamped(self):
        frame = make_frame(n=2, t=4)
        frame.values[0] = [0.0, 10.0, 20.0, -30.0]
        normalized, _ = fit_normalize(frame, (0, 2))  # fit sees only [0, 10]
        assert normalized.values[0][2] == 1.5
        assert normalized.values[0][3] == -0.5

    def test_empty_fit_range_rejected(self):
        with pytest.raises(ContractError):
            fit_normalize(make_frame(), (4, 4))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25)
    def test_fit_split_in_unit_interval_and_invertible(self, seed):
        frame = make_frame(n=3, t=20, seed=seed)
        normalized, stats = fit_normalize(frame, (0, 20))
        assert (normalized.values >= 0).all() and (normalized.values <= 1).all()
        recovered = invert_normalization(normalized.values, stats)
        nonconst = stats.maxs > stats.mins
        assert np.abs(recovered[nonconst] - frame.values[nonconst]).max() < 1e-12


class TestWindows:
    def test_window_count_arithmetic(self):
        assert len(make_windows(make_frame(t=320), 32, 32)) == 6
        assert len(make_windows(make_frame(t=160), 32, 7)) == 1
        assert len(make_windows(make_frame(t=170), 32, 3)) == 4

    def test_too_short_names_minimum(self):
        with pytest.raises(DataError, match="160"):
            make_windows(make_frame(t=159), 32, 1)

    def test_segments_reconcatenate_to_source(self):
        frame = make_frame(t=50, seed=3)
        for w in make_windows(frame, 5, 3):
            assert np.array_equal(w.stacked(),
                                  frame.values[:, w.origin:w.origin + 25])

    def test_segment_order_preserves_time(self):
        frame = make_frame(t=25)
        frame.values[0] = np.arange(25)
        w = make_windows(frame, 5, 1)[0]
        np.testing.assert_array_equal(w.segments[0][0], [0, 1, 2, 3, 4])
        np.testing.assert_array_equal(w.segments[4][0], [20, 21, 22, 23, 24])

    def test_windows_array_matches_make_windows(self):
        frame = make_frame(t=40, seed=9)
        stacked = windows_array(frame.values, np.array([0, 5, 10]), 6)
        listed = make_windows(frame, 6, 5)
        for b, start in enumerate([0, 5, 10]):
            w = [x for x in listed if x.origin == start][0]
            assert np.array_equal(stacked[b], w.segments.transpose(1, 0, 2))
