import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nilmprune import sweep as S
from nilmprune.errors import ConfigError, NumericError

import oracles

CURVES_DIR = Path(__file__).parent / "data" / "curves"


def make_curve(points, strategy="after-training", appliance="kettle"):
    c = S.SweepCurve(strategy, appliance)
    for t, f1 in points:
        c.points.append(S.SweepPoint(threshold=t, f1=f1))
    return c


class TestOptimalThreshold:
    def test_enumerated_worked_example(self):
        c = make_curve([(0.5, 0.9), (0.9, 0.8), (0.95, 0.5)])
        p, d = S.optimal_threshold(c)
        assert p == 0.9
        np.testing.assert_allclose(d, math.sqrt(0.2**2 + 0.1**2))

    def test_perfect_point_dominates(self):
        c = make_curve([(0.5, 0.99), (0.95, 1.0)])
        p, d = S.optimal_threshold(c)
        assert p == 0.95
        np.testing.assert_allclose(d, 0.05)

    def test_tie_goes_to_larger_threshold(self):
        # symmetric points equidistant from the corner
        c = make_curve([(0.8, 0.9), (0.9, 0.8)])
        p, _ = S.optimal_threshold(c)
        assert p == 0.9

    def test_single_point_curve(self):
        c = make_curve([(0.35, 0.5)])
        assert S.optimal_threshold(c)[0] == 0.35

    def test_all_nan_rejected(self):
        c = make_curve([(0.5, math.nan), (0.9, math.nan)])
        with pytest.raises(NumericError, match="no usable"):
            S.optimal_threshold(c)

    def test_failed_points_skipped(self):
        c = make_curve([(0.5, 0.9), (0.9, 0.99)])
        c.points[1].error = "NumericError: synthetic"
        assert S.optimal_threshold(c)[0] == 0.5

    @given(st.lists(st.tuples(st.integers(0, 19), st.floats(0.0, 1.0)),
                    min_size=1, max_size=20, unique_by=lambda x: x[0]),
           )
    @settings(max_examples=200, deadline=None)
    def test_matches_enumeration_oracle(self, raw):
        pts = [(round(0.05 * k, 2), f1) for k, f1 in raw]
        c = make_curve(pts)
        got, _ = S.optimal_threshold(c)
        expect = oracles.best_threshold_by_enumeration(
            [p for p, _ in pts], [f1 for _, f1 in pts], [p for p, _ in pts])
        assert got == expect

    def test_macs_axis_normalized_by_baseline(self):
        c = S.SweepCurve("after-training", "kettle")
        c.points.append(S.SweepPoint(threshold=0.0, f1=0.9, macs=1000))
        c.points.append(S.SweepPoint(threshold=0.5, f1=0.9, macs=600))
        c.points.append(S.SweepPoint(threshold=0.9, f1=0.2, macs=100))
        p, d = S.optimal_threshold(c, S.MACS_REDUCTION)
        assert p == 0.5
        np.testing.assert_allclose(d, math.sqrt(0.1**2 + 0.6**2))

    def test_monotone_renormalization_preserves_argmin(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ts = np.sort(rng.choice(np.arange(1, 20), size=6, replace=False)) * 0.05
            f1s = rng.uniform(0, 1, size=6)
            c = make_curve(list(zip(ts.round(2), f1s)))
            base, _ = S.optimal_threshold(c)
            # feeding identical coordinates through the MACs axis with
            # macs = baseline*(1-p) reproduces the same compression values
            c2 = S.SweepCurve("after-training", "x")
            c2.points.append(S.SweepPoint(threshold=0.0, f1=0.0, macs=10**6))
            for t, f1 in zip(ts.round(2), f1s):
                c2.points.append(S.SweepPoint(threshold=float(t), f1=float(f1),
                                              macs=int(10**6 * (1 - t))))
            c2.points[0].error = "excluded baseline"
            assert S.optimal_threshold(c2, S.MACS_REDUCTION)[0] == base


class TestSweepEngine:
    @staticmethod
    def runner(curve_fn):
        def evaluate(threshold, seed):
            return {"f1": curve_fn(threshold), "params": 100, "macs": 50,
                    "size_bytes": 10}
        return evaluate

    def test_baseline_only_grid(self):
        c = S.sweep(self.runner(lambda t: 0.9), [0.0], "after-training")
        assert c.thresholds() == [0.0]
        assert S.optimal_threshold(c)[0] == 0.0

    def test_default_grid_has_19_points_plus_baseline(self):
        grid = S.default_grid()
        assert len(grid) == 19
        assert grid[0] == 0.05 and grid[-1] == 0.95
        c = S.sweep(self.runner(lambda t: 0.9), grid, "opt-nilm")
        assert len(c.points) == 20
        assert c.baseline() is not None

    def test_permuted_grid_identical_curve(self):
        grid = [0.4, 0.1, 0.9, 0.25]
        a = S.sweep(self.runner(lambda t: 1 - t), grid, "after-training", base_seed=3)
        b = S.sweep(self.runner(lambda t: 1 - t), grid[::-1], "after-training", base_seed=3)
        assert a.to_csv() == b.to_csv()

    def test_point_failure_recorded_not_fatal(self):
        def evaluate(t, seed):
            if abs(t - 0.5) < 1e-9:
                raise NumericError("synthetic failure")
            return {"f1": 0.8}
        c = S.sweep(evaluate, [0.25, 0.5, 0.75], "after-training")
        failed = [p for p in c.points if p.error]
        assert len(failed) == 1 and failed[0].threshold == 0.5
        assert S.optimal_threshold(c)[0] == 0.75

    def test_out_of_range_threshold_rejected(self):
        with pytest.raises(ConfigError, match="0.95"):
            S.sweep(self.runner(lambda t: 1.0), [0.99], "after-training")
        with pytest.raises(ConfigError, match="strategy"):
            S.sweep(self.runner(lambda t: 1.0), [0.5], "quantize")

    def test_point_seeds_stable(self):
        assert S.point_seed(7, 0.55) == S.point_seed(7, 0.55)
        assert S.point_seed(7, 0.55) != S.point_seed(7, 0.60)
        assert S.point_seed(7, 0.55) != S.point_seed(8, 0.55)

    def test_csv_round_trip_preserves_selection(self):
        c = S.sweep(self.runner(lambda t: 1 - t * t), S.default_grid(), "dg-structured")
        text = c.to_csv()
        back = S.SweepCurve.from_csv(text, "dg-structured")
        assert S.optimal_threshold(back) == S.optimal_threshold(c)
        assert back.to_csv() == text


class TestReferenceCurves:
    @pytest.mark.parametrize("name,expected", [
        ("kettle", 0.95), ("dishwasher", 0.80), ("fridge", 0.85), ("washer", 0.60),
    ])
    def test_published_selections(self, name, expected):
        text = (CURVES_DIR / f"{name}.csv").read_text()
        curve = S.SweepCurve.from_csv(text, "opt-nilm", name)
        p, _ = S.optimal_threshold(curve)
        assert p == expected
