"""Parsers, writers and AOI masking."""

import json
import warnings
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdcalib.domain import DetectionBox, FrameObservation, GridMask, HeadPoint
from crowdcalib.ingest import (
    FormatError,
    OccupancyRecord,
    apply_aoi,
    event_id_for,
    read_bin_stats_csv,
    read_detections_jsonl,
    read_mask_pgm,
    read_occupancy_csv,
    write_bin_stats_csv,
    write_detections_jsonl,
    write_mask_pgm,
    write_occupancy_csv,
)

UTC = timezone.utc


class TestPgm:
    def test_p5_thresholds_nonzero(self):
        data = b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255])
        mask = read_mask_pgm(data)
        assert mask.rows == 2 and mask.cols == 2
        assert mask.bits.ravel().tolist() == [0, 1, 0, 1]

    def test_p2_equivalent(self):
        p5 = read_mask_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255]))
        p2 = read_mask_pgm(b"P2\n2 2\n255\n0 255\n0 255\n")
        assert p2 == p5

    def test_intermediate_gray_is_person(self):
        mask = read_mask_pgm(b"P5\n2 1\n255\n" + bytes([0, 7]))
        assert mask.bits.ravel().tolist() == [0, 1]

    def test_truncated_payload(self):
        with pytest.raises(FormatError, match="truncated"):
            read_mask_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 0]))

    def test_trailing_bytes_rejected(self):
        with pytest.raises(FormatError, match="trailing"):
            read_mask_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255, 9]))

    def test_maxval_zero_rejected(self):
        with pytest.raises(FormatError, match="maxval"):
            read_mask_pgm(b"P5\n2 2\n0\n" + bytes(4))

    def test_errors_carry_byte_offset(self):
        with pytest.raises(FormatError, match=r"byte \d+"):
            read_mask_pgm(b"P5\n2 x\n255\n" + bytes(4))

    def test_comments_allowed(self):
        data = b"P5\n# a comment\n2 2\n255\n" + bytes([0, 255, 0, 255])
        assert read_mask_pgm(data).pixel_count() == 2

    def test_16bit_maxval(self):
        payload = np.array([0, 300, 0, 70000 % 65536], dtype=">u2").tobytes()
        mask = read_mask_pgm(b"P5\n2 2\n65535\n" + payload)
        assert mask.bits.ravel().tolist() == [0, 1, 0, 1]

    def test_not_a_pgm(self):
        with pytest.raises(FormatError, match="magic"):
            read_mask_pgm(b"P6\n1 1\n255\n\x00\x00\x00")

    @given(
        st.integers(1, 9).flatmap(
            lambda r: st.integers(1, 9).flatmap(
                lambda c: st.lists(st.integers(0, 1), min_size=r * c, max_size=r * c)
                .map(lambda bits: GridMask(r, c, np.array(bits)))
            )
        )
    )
    def test_write_read_write_byte_identical(self, mask):
        first = write_mask_pgm(mask)
        second = write_mask_pgm(read_mask_pgm(first))
        third = write_mask_pgm(read_mask_pgm(second))
        assert second == first
        assert third == second


class TestDetectionsJsonl:
    def test_boxes_line(self):
        line = json.dumps({
            "camera": "c1", "event_id": "e1", "offset_s": 0,
            "boxes": [
                {"cx": 1, "cy": 2, "w": 3, "h": 4, "conf": 0.5, "class_id": 0},
                {"cx": 5, "cy": 6, "w": 1, "h": 1, "conf": 0.9, "class_id": 0},
                {"cx": 9, "cy": 9, "w": 1, "h": 1, "conf": 0.2, "class_id": 1},
            ],
        })
        (obs,) = read_detections_jsonl([line])
        assert obs.payload_kind == "boxes"
        assert len(obs.detections) == 3

    def test_points_line(self):
        line = json.dumps({
            "camera": "c1", "event_id": "e1", "offset_s": -5,
            "points": [{"x": 1, "y": 2, "conf": 0.7}],
        })
        (obs,) = read_detections_jsonl([line])
        assert obs.payload_kind == "points"
        assert obs.points[0].conf == 0.7

    def test_two_payloads_rejected(self):
        line = json.dumps({
            "camera": "c1", "event_id": "e1", "offset_s": 0,
            "boxes": [], "points": [],
        })
        with pytest.raises(FormatError, match="line 1"):
            read_detections_jsonl([line])

    def test_line_number_in_errors(self):
        good = json.dumps({
            "camera": "c", "event_id": "e", "offset_s": 0, "class_logits": [0, 0, 0, 0]
        })
        bad = json.dumps({"camera": "c", "event_id": "e", "offset_s": 2, "boxes": []})
        with pytest.raises(FormatError, match="line 2"):
            read_detections_jsonl([good, bad])

    def test_conf_out_of_range(self):
        line = json.dumps({
            "camera": "c", "event_id": "e", "offset_s": 0,
            "points": [{"x": 0, "y": 0, "conf": 1.5}],
        })
        with pytest.raises(FormatError, match="line 1"):
            read_detections_jsonl([line])

    def test_unknown_fields_ignored(self):
        line = json.dumps({
            "camera": "c", "event_id": "e", "offset_s": 5,
            "class_logits": [1, 2, 3, 4], "extra": {"anything": True},
        })
        (obs,) = read_detections_jsonl([line])
        assert obs.class_logits == (1.0, 2.0, 3.0, 4.0)

    def test_roundtrip_byte_identical(self):
        observations = [
            FrameObservation("c1", "e1", 0, detections=(
                DetectionBox(1.5, 2.25, 3.0, 4.0, 0.5, 0),
            )),
            FrameObservation("c1", "e1", 5, points=(HeadPoint(1.0, 2.0, 0.25),)),
            FrameObservation("c2", "e1", -5, class_logits=(0.1, 0.2, 0.3, 0.4)),
        ]
        first = write_detections_jsonl(observations)
        second = write_detections_jsonl(read_detections_jsonl(first.splitlines()))
        third = write_detections_jsonl(read_detections_jsonl(second.splitlines()))
        assert second == first
        assert third == second


class TestOccupancyCsv:
    def test_parse_row(self):
        text = "platform,arrival_time,occupancy\nA01-1,2024-06-03T08:15:00-04:00,231.5\n"
        (rec,) = read_occupancy_csv(text)
        assert rec.platform == "A01-1"
        assert rec.occupancy == 231.5
        assert rec.arrival_time.utcoffset().total_seconds() == -4 * 3600

    def test_negative_occupancy(self):
        text = "platform,arrival_time,occupancy\nA,2024-06-03T08:15:00Z,-3\n"
        with pytest.raises(FormatError, match="row 2"):
            read_occupancy_csv(text)

    def test_duplicate_key(self):
        text = (
            "platform,arrival_time,occupancy\n"
            "A,2024-06-03T08:15:00Z,1\n"
            "A,2024-06-03T08:15:00Z,2\n"
        )
        with pytest.raises(FormatError, match="ambiguous"):
            read_occupancy_csv(text)

    def test_naive_timestamp_rejected(self):
        text = "platform,arrival_time,occupancy\nA,2024-06-03T08:15:00,1\n"
        with pytest.raises(FormatError, match="timezone"):
            read_occupancy_csv(text)

    def test_roundtrip_byte_identical(self):
        records = [
            OccupancyRecord("A", datetime(2024, 6, 3, 8, 15, tzinfo=UTC), 231.5),
            OccupancyRecord("A", datetime(2024, 6, 3, 8, 20, tzinfo=UTC), 12.0),
        ]
        first = write_occupancy_csv(records)
        second = write_occupancy_csv(read_occupancy_csv(first))
        third = write_occupancy_csv(read_occupancy_csv(second))
        assert second == first
        assert third == second


class TestBinStatsCsv:
    def test_roundtrip_and_wrong_count(self):
        from crowdcalib.domain import WeeklyBinStats

        stats = WeeklyBinStats("P", np.arange(672.0), np.ones(672))
        first = write_bin_stats_csv([stats])
        parsed = read_bin_stats_csv(first)
        assert np.array_equal(parsed["P"].mu, stats.mu)
        second = write_bin_stats_csv([parsed["P"]])
        assert second == first
        truncated = "\n".join(first.splitlines()[:-1]) + "\n"
        with pytest.raises(FormatError, match="672"):
            read_bin_stats_csv(truncated)


def _aoi_from_rows(rows):
    arr = np.array(rows, dtype=np.uint8)
    return GridMask(arr.shape[0], arr.shape[1], arr)


class TestApplyAoi:
    def test_all_ones_identity(self):
        aoi = _aoi_from_rows(np.ones((4, 4), dtype=int))
        boxes = (DetectionBox(1.0, 1.0, 1.0, 1.0, 0.9, 0),)
        obs = FrameObservation("c", "e", 0, detections=boxes)
        assert apply_aoi(obs, aoi).detections == boxes

    def test_box_center_outside_region_removed(self):
        aoi = _aoi_from_rows([[1, 0], [0, 0]])
        boxes = (
            DetectionBox(0.0, 0.0, 1.0, 1.0, 0.9, 0),
            DetectionBox(1.0, 0.0, 1.0, 1.0, 0.9, 0),
        )
        obs = FrameObservation("c", "e", 0, detections=boxes)
        out = apply_aoi(obs, aoi)
        assert out.detections == (boxes[0],)

    def test_mask_intersection_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        mask_bits = (rng.random((10, 10)) < 0.5).astype(np.uint8)
        aoi_bits = (rng.random((10, 10)) < 0.4).astype(np.uint8)
        # independent oracle: count overlapping person pixels with a loop
        expected = sum(
            1
            for r in range(10)
            for c in range(10)
            if mask_bits[r, c] == 1 and aoi_bits[r, c] == 1
        )
        obs = FrameObservation("c", "e", 0, mask=GridMask(10, 10, mask_bits))
        out = apply_aoi(obs, _aoi_from_rows(aoi_bits))
        assert out.mask.pixel_count() == expected

    def test_dimension_mismatch(self):
        obs = FrameObservation("c", "e", 0, mask=GridMask(2, 2, np.ones(4)))
        with pytest.raises(ValueError, match="AOI"):
            apply_aoi(obs, _aoi_from_rows([[1, 1, 1]]))

    def test_out_of_image_dropped_with_warning(self):
        aoi = _aoi_from_rows(np.ones((4, 4), dtype=int))
        boxes = (
            DetectionBox(10.0, 1.0, 1.0, 1.0, 0.9, 0),  # out of image
            DetectionBox(3.7, 3.7, 1.0, 1.0, 0.9, 0),   # rounds to edge, clamped
        )
        obs = FrameObservation("c", "e", 0, detections=boxes)
        with pytest.warns(UserWarning, match="outside the image"):
            out = apply_aoi(obs, aoi)
        assert out.detections == (boxes[1],)

    @given(
        st.lists(
            st.tuples(st.floats(-2, 9, allow_nan=False), st.floats(-2, 9, allow_nan=False)),
            max_size=12,
        ),
        st.integers(0, 2 ** 36 - 1),
    )
    def test_idempotent_and_never_grows(self, centers, aoi_seed):
        rng = np.random.default_rng(aoi_seed)
        aoi = _aoi_from_rows((rng.random((6, 6)) < 0.5).astype(np.uint8))
        points = tuple(HeadPoint(x, y, 0.9) for x, y in centers)
        obs = FrameObservation("c", "e", 0, points=points)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            once = apply_aoi(obs, aoi)
            twice = apply_aoi(once, aoi)
        assert len(once.points) <= len(points)
        assert twice.points == once.points


def test_event_id_is_filesystem_safe():
    eid = event_id_for("A01-1", datetime(2024, 6, 3, 8, 15, tzinfo=UTC))
    assert eid == "A01-1_20240603T081500+0000"
    assert "/" not in eid and ":" not in eid


class TestLoadDataset:
    @staticmethod
    def _write_minimal(root, platform="P1", with_aoi=True):
        root.mkdir(parents=True, exist_ok=True)
        (root / "occupancy.csv").write_text(
            "platform,arrival_time,occupancy\n"
            f"{platform},2024-06-03T08:15:00+00:00,12\n"
        )
        if with_aoi:
            (root / "aoi").mkdir(exist_ok=True)
            aoi = GridMask(4, 4, np.ones(16))
            (root / "aoi" / "cam1.pgm").write_bytes(write_mask_pgm(aoi))

    def test_minimal_loads(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        self._write_minimal(tmp_path)
        ds = load_dataset(tmp_path)
        assert len(ds.events) == 1
        assert ds.events[0].occupancy == 12.0
        assert ds.platform_config.cameras == ("cam1",)

    def test_missing_occupancy_csv(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        with pytest.raises(FormatError, match="occupancy.csv"):
            load_dataset(tmp_path)

    def test_missing_aoi_dir(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        self._write_minimal(tmp_path, with_aoi=False)
        with pytest.raises(FormatError, match="AOI"):
            load_dataset(tmp_path)

    def test_multi_platform_needs_selection(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        self._write_minimal(tmp_path)
        (tmp_path / "occupancy.csv").write_text(
            "platform,arrival_time,occupancy\n"
            "P1,2024-06-03T08:15:00+00:00,12\n"
            "P2,2024-06-03T08:20:00+00:00,5\n"
        )
        with pytest.raises(FormatError, match="pass platform="):
            load_dataset(tmp_path)
        ds = load_dataset(tmp_path, platform="P2")
        assert ds.events[0].occupancy == 5.0

    def test_unknown_mask_event_rejected(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        self._write_minimal(tmp_path)
        bogus = tmp_path / "cam1" / "P1_29990101T000000+0000"
        bogus.mkdir(parents=True)
        (bogus / "0.pgm").write_bytes(write_mask_pgm(GridMask(4, 4, np.zeros(16))))
        with pytest.raises(FormatError, match="not present in occupancy.csv"):
            load_dataset(tmp_path)

    def test_unknown_jsonl_camera_rejected(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        self._write_minimal(tmp_path)
        (tmp_path / "detections.jsonl").write_text(
            json.dumps({
                "camera": "ghost",
                "event_id": "P1_20240603T081500+0000",
                "offset_s": 0, "boxes": [],
            }) + "\n"
        )
        with pytest.raises(FormatError, match="unknown camera"):
            load_dataset(tmp_path)

    def test_bad_offset_filename_rejected(self, tmp_path):
        from crowdcalib.ingest import load_dataset

        self._write_minimal(tmp_path)
        frame_dir = tmp_path / "cam1" / "P1_20240603T081500+0000"
        frame_dir.mkdir(parents=True)
        (frame_dir / "7.pgm").write_bytes(write_mask_pgm(GridMask(4, 4, np.zeros(16))))
        with pytest.raises(FormatError, match="offset"):
            load_dataset(tmp_path)
