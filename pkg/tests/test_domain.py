"""Domain types: bin indexing, crowd levels, mask packing."""

from datetime import datetime, timedelta, timezone
from zoneinfo import ZoneInfo

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdcalib.domain import (
    ArrivalEvent,
    CrowdLevel,
    CrowdLevelScheme,
    FrameObservation,
    GridMask,
    PooledMap,
    WeeklyBinStats,
    bin_index,
    crowd_level,
)

UTC = timezone.utc


class TestBinIndex:
    def test_monday_midnight_is_zero(self):
        # 2024-06-03 is a Monday
        assert bin_index(datetime(2024, 6, 3, 0, 0, tzinfo=UTC), UTC) == 0

    def test_bin_boundary(self):
        assert bin_index(datetime(2024, 6, 3, 0, 14, 59, tzinfo=UTC), UTC) == 0
        assert bin_index(datetime(2024, 6, 3, 0, 15, 0, tzinfo=UTC), UTC) == 1

    def test_sunday_2345_is_last(self):
        # 6*96 + 23*4 + 3 = 671
        assert bin_index(datetime(2024, 6, 9, 23, 45, tzinfo=UTC), UTC) == 671

    def test_computed_in_target_timezone(self):
        ny = ZoneInfo("America/New_York")
        t = datetime(2024, 6, 3, 0, 30, tzinfo=UTC)  # Sunday 20:30 in New York
        assert bin_index(t, ny) == 6 * 96 + 20 * 4 + 2

    def test_naive_timestamp_rejected(self):
        with pytest.raises(ValueError):
            bin_index(datetime(2024, 6, 3, 0, 0), UTC)

    def test_weekly_period_and_surjectivity(self):
        start = datetime(2024, 6, 3, 0, 0, tzinfo=UTC)
        seen = set()
        for k in range(672):
            t = start + timedelta(minutes=15 * k)
            b = bin_index(t, UTC)
            assert bin_index(t + timedelta(days=7), UTC) == b
            seen.add(b)
        assert seen == set(range(672))


class TestCrowdLevel:
    SCHEME = CrowdLevelScheme("P", 120.0, 250.0, 700.0)

    def test_zero_is_empty(self):
        assert crowd_level(0.0, self.SCHEME) is CrowdLevel.EMPTY

    def test_closed_upper_bounds(self):
        assert crowd_level(120.0, self.SCHEME) is CrowdLevel.EMPTY
        assert crowd_level(250.0, self.SCHEME) is CrowdLevel.LOW
        assert crowd_level(700.0, self.SCHEME) is CrowdLevel.MEDIUM

    def test_interval_membership(self):
        assert crowd_level(130.0, self.SCHEME) is CrowdLevel.LOW
        assert crowd_level(700.1, self.SCHEME) is CrowdLevel.HIGH

    def test_negative_occupancy_rejected(self):
        with pytest.raises(ValueError):
            crowd_level(-1.0, self.SCHEME)

    @given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=2, max_size=20))
    def test_monotone_in_occupancy(self, values):
        values.sort()
        levels = [crowd_level(v, self.SCHEME) for v in values]
        assert levels == sorted(levels)

    def test_scheme_ordering_enforced(self):
        with pytest.raises(ValueError):
            CrowdLevelScheme("P", 10.0, 5.0, 20.0)


class TestGridMask:
    @given(
        st.integers(1, 13).flatmap(
            lambda r: st.integers(1, 13).flatmap(
                lambda c: st.lists(
                    st.integers(0, 1), min_size=r * c, max_size=r * c
                ).map(lambda bits: (r, c, bits))
            )
        )
    )
    def test_packed_roundtrip(self, rcb):
        r, c, bits = rcb
        mask = GridMask(r, c, np.array(bits))
        again = GridMask.from_packed(r, c, mask.to_packed())
        assert again == mask

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            GridMask(2, 2, np.array([0, 1, 2, 0]))

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            GridMask(2, 2, np.array([0, 1, 0]))


class TestObservations:
    def test_exactly_one_payload(self):
        with pytest.raises(ValueError):
            FrameObservation("c", "e", 0)
        with pytest.raises(ValueError):
            FrameObservation(
                "c", "e", 0,
                mask=GridMask(1, 1, np.array([1])),
                class_logits=(0, 0, 0, 0),
            )

    def test_offset_validated(self):
        with pytest.raises(ValueError):
            FrameObservation("c", "e", 3, class_logits=(0, 0, 0, 0))

    def test_event_rejects_foreign_frames(self):
        obs = FrameObservation("c", "other", 0, class_logits=(0, 0, 0, 0))
        with pytest.raises(ValueError):
            ArrivalEvent("e", "P", datetime(2024, 6, 3, tzinfo=UTC), 1.0, (obs,))

    def test_event_rejects_duplicate_frame_slot(self):
        obs = FrameObservation("c", "e", 0, class_logits=(0, 0, 0, 0))
        with pytest.raises(ValueError):
            ArrivalEvent("e", "P", datetime(2024, 6, 3, tzinfo=UTC), 1.0, (obs, obs))

    def test_event_requires_timezone(self):
        with pytest.raises(ValueError):
            ArrivalEvent("e", "P", datetime(2024, 6, 3), 1.0)


class TestStats:
    def test_weekly_stats_coverage(self):
        records = [(i, 1.0, 2.0) for i in range(672)]
        stats = WeeklyBinStats.from_records("P", records)
        assert stats.mu.shape == (672,)
        with pytest.raises(ValueError):
            WeeklyBinStats.from_records("P", records[:-1])
        with pytest.raises(ValueError):
            WeeklyBinStats.from_records("P", records[:-1] + [(0, 1.0, 2.0)])

    def test_pooled_map_bounds(self):
        with pytest.raises(ValueError):
            PooledMap(1, 2, np.array([0.5, 1.5]))
