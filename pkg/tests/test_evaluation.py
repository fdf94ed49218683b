import itertools

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial.distance import cdist

from clopasim.evaluation import (
    ExtentMismatchError,
    MetricSeries,
    Trajectory,
    average_trajectories,
    dice,
    episodic_summary,
    expected_trajectory,
    first_crossing,
    nauc,
    noi,
    nsd,
    run_averaged_scores,
    sample_scores,
    surface_faces,
    trajectory_auc,
)


def _faces_by_loop(mask, spacing):
    """Face centres enumerated voxel by voxel."""
    faces = []
    shape = mask.shape
    for idx in itertools.product(*(range(s) for s in shape)):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                outside = not 0 <= nb[axis] < shape[axis]
                if outside or not mask[tuple(nb)]:
                    centre = np.array(idx, dtype=np.float64)
                    centre[axis] += 0.5 * step
                    faces.append(centre * spacing)
    return np.array(faces).reshape(-1, 3)


def _nsd_oracle(a, b, tol, spacing=(1.0, 1.0, 1.0)):
    spacing = np.asarray(spacing)
    fa, fb = _faces_by_loop(a, spacing), _faces_by_loop(b, spacing)
    if len(fa) == 0 and len(fb) == 0:
        return 1.0
    if len(fa) == 0 or len(fb) == 0:
        return 0.0
    d = cdist(fa, fb)
    return ((d.min(axis=1) <= tol).sum() + (d.min(axis=0) <= tol).sum()) / (len(fa) + len(fb))


def _smooth_mask(rng, extent):
    """Blobby mask covering 5-40% of the volume."""
    field = ndimage.gaussian_filter(rng.normal(size=(extent,) * 3), 1.5)
    return field > np.quantile(field, rng.uniform(0.6, 0.95))


def _cube(extent, lo, hi):
    m = np.zeros((extent,) * 3, dtype=bool)
    m[lo:hi, lo:hi, lo:hi] = True
    return m


# --- dice ---

class TestDice:
    def test_identical(self):
        m = _cube(6, 1, 4)
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        assert dice(_cube(6, 0, 2), _cube(6, 3, 5)) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 1, 3), dtype=bool)
        b = np.zeros((1, 1, 3), dtype=bool)
        a[0, 0, :2] = True
        b[0, 0, 1:] = True
        assert dice(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3, 3), dtype=bool)
        assert dice(z, z) == 1.0

    def test_extent_mismatch(self):
        with pytest.raises(ExtentMismatchError):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_matches_voxel_count_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.5)
            b = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.5)
            inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
            assert dice(a, b) == 2 * inter / (a.sum() + b.sum())
            assert dice(a, b) == dice(b, a)


# --- nsd ---

class TestNsd:
    def test_identical(self):
        m = _cube(8, 2, 6)
        assert nsd(m, m, 1.0) == 1.0

    def test_shift_by_one_within_tolerance(self):
        a = _cube(8, 2, 5)
        b = np.roll(a, 1, axis=0)
        assert nsd(a, b, 1.0) == 1.0

    def test_far_apart(self):
        a = np.zeros((16, 16, 16), dtype=bool)
        b = np.zeros_like(a)
        a[0:2, 0:2, 0:2] = True
        b[12:14, 12:14, 12:14] = True
        assert nsd(a, b, 0.5) == 0.0

    def test_empty_conventions(self):
        z = np.zeros((4, 4, 4), dtype=bool)
        assert nsd(z, z, 1.0) == 1.0
        assert nsd(z, _cube(4, 1, 3), 1.0) == 0.0

    def test_face_count_of_a_voxel(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        m[1, 1, 1] = True
        faces = surface_faces(m, (1.0, 1.0, 1.0))
        assert len(faces) == 6
        np.testing.assert_allclose(sorted(faces[:, 0]), [0.5, 1, 1, 1, 1, 1.5])

    def test_border_voxels_have_faces(self):
        m = np.ones((2, 2, 2), dtype=bool)
        assert len(surface_faces(m, (1.0, 1.0, 1.0))) == 24

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        extent = 8 if seed % 2 else 10
        a = rng.random((extent,) * 3) < 0.3
        b = rng.random((extent,) * 3) < 0.3
        spacing = (1.0, 1.5, 0.5) if seed >= 3 else (1.0, 1.0, 1.0)
        tol = float(rng.uniform(0.5, 2.0))
        assert abs(nsd(a, b, tol, spacing) - _nsd_oracle(a, b, tol, spacing)) < 1e-6

    def test_matches_brute_force_on_smooth_16_cubed_pairs(self):
        rng = np.random.default_rng(2024)
        for _ in range(50):
            a, b = _smooth_mask(rng, 16), _smooth_mask(rng, 16)
            spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5], size=3))
            tol = float(rng.uniform(0.5, 2.5))
            assert nsd(a, b, tol, spacing) == pytest.approx(_nsd_oracle(a, b, tol, spacing), abs=1e-6)

    def test_cube_oracle_16(self):
        a = _cube(16, 3, 11)
        b = _cube(16, 5, 12)
        assert abs(nsd(a, b, 1.5) - _nsd_oracle(a, b, 1.5)) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(9)
        a = rng.random((8, 8, 8)) < 0.4
        b = rng.random((8, 8, 8)) < 0.4
        assert nsd(a, b, 1.0) == nsd(b, a, 1.0)


# --- series metrics ---

class TestNauc:
    def test_constant(self):
        assert nauc([0.8] * 11, 10) == pytest.approx(0.8)

    def test_linear_ramp(self):
        assert nauc(np.linspace(0, 1, 11), 10) == pytest.approx(0.5)

    def test_by_hand(self):
        assert nauc([0.0, 1.0, 1.0], 2) == 0.75

    def test_zero_steps(self):
        assert nauc([0.3], 0) == 0.3

    def test_length_checked(self):
        with pytest.raises(ValueError):
            nauc([0.1, 0.2], 5)

    def test_within_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.random(6)
            assert s.min() - 1e-12 <= nauc(s, 5) <= s.max() + 1e-12


class TestNoi:
    def test_initialisation_reaches(self):
        result = noi([0.9, 0.95], 0.85, 1)
        assert (result.noi, result.failed, result.nnoi) == (0, False, 0.0)

    def test_never_reaches(self):
        result = noi([0.1, 0.2, 0.3], 0.85, 2)
        assert result.noi == 2
        assert result.failed
        assert result.nnoi == 100.0

    def test_first_crossing(self):
        assert noi([0.5, 0.7, 0.9], 0.85, 2).noi == 2

    def test_monotone_in_threshold(self):
        series = [0.2, 0.5, 0.6, 0.9, 0.95]
        counts = [noi(series, t, 4).noi for t in (0.1, 0.5, 0.7, 0.92, 0.99)]
        assert counts == sorted(counts)


# --- aggregation ---

def _run(values):
    """{sample_id: MetricSeries} with dice == nsd == values[sample_id]."""
    return {i: MetricSeries(i, list(v), list(v)) for i, v in enumerate(values)}


class TestEpisodicSummary:
    def test_sample_scores(self):
        scores = sample_scores(MetricSeries(0, [0.5, 0.7, 0.9], [0.4, 0.6, 0.8]), 0.85)
        assert scores["dice_init"] == 0.5
        assert scores["nsd_final"] == 0.8
        assert scores["nnoi"] == 100.0
        assert scores["nof"] == 0.0

    def test_identical_runs_equal_single(self):
        run = _run([[0.5, 0.9, 0.9], [0.1, 0.2, 0.3]])
        assert episodic_summary([run] * 3, 0.85).as_dict() == pytest.approx(episodic_summary([run], 0.85).as_dict())

    def test_all_fail(self):
        run = _run([[0.1, 0.2], [0.3, 0.4]])
        assert episodic_summary([run], 0.85).nof == 100.0

    def test_majority_failure(self):
        ok = _run([[0.9, 0.9]])
        bad = _run([[0.1, 0.1]])
        assert episodic_summary([ok, bad, bad], 0.85).nof == 100.0
        assert episodic_summary([ok, ok, bad], 0.85).nof == 0.0

    def test_run_first_equals_sample_first(self):
        rng = np.random.default_rng(1)
        runs = [_run(rng.random((4, 5)).tolist()) for _ in range(3)]
        summary = episodic_summary(runs, 0.85)
        per_run = [np.mean([r[i].dice[-1] for i in r]) for r in runs]
        assert summary.dice_final == pytest.approx(np.mean(per_run))

    def test_mismatched_test_sets(self):
        with pytest.raises(ValueError):
            run_averaged_scores([_run([[0.5, 0.5]]), _run([[0.5, 0.5], [0.1, 0.1]])], 0.85)

    def test_table_two_row_shape(self):
        summary = episodic_summary([_run([[0.373, 0.970]])], 0.85)
        assert list(summary.as_dict()) == [
            "dice_init", "dice_final", "dice_nauc", "nsd_init", "nsd_final", "nsd_nauc", "nnoi", "nof",
        ]


# --- trajectories ---

class TestTrajectory:
    def test_zero_episodes_flat(self):
        t = expected_trajectory(0.4, [], 10)
        np.testing.assert_array_equal(t.values, np.full(10, 0.4))
        assert trajectory_auc(t) == pytest.approx(0.4)

    def test_one_episode_closed_form(self):
        base, m, T, L = 0.2, 0.8, 5, 20
        t = expected_trajectory(base, [(T, m)], L)
        assert t.at(T) == base
        assert t.at(T + 1) == m
        assert trajectory_auc(t, L) == pytest.approx((base * T + m * (L - T)) / L)
        assert t.episode_points == [T]

    def test_changes_only_at_triggers(self):
        t = expected_trajectory(0.1, [(10, 0.5), (5, 0.3)], 20)
        changes = [i + 1 for i in range(1, 20) if t.values[i] != t.values[i - 1]]
        assert changes == [6, 11]

    def test_auc_within_bounds(self):
        t = expected_trajectory(0.1, [(3, 0.9), (6, 0.5)], 12)
        assert t.values.min() <= trajectory_auc(t) <= t.values.max()

    def test_average_identical_runs(self):
        t = expected_trajectory(0.1, [(5, 0.6)], 20)
        avg = average_trajectories([t, t, t])
        np.testing.assert_allclose(avg.values, t.values)

    def test_average_lengths_must_match(self):
        with pytest.raises(ValueError):
            average_trajectories([expected_trajectory(0.1, [], 5), expected_trajectory(0.1, [], 6)])

    def test_first_crossing(self):
        t = Trajectory("dice_final", np.array([0.1, 0.5, 0.85, 0.9]))
        assert first_crossing(t, 0.85) == 3
        assert first_crossing(t, 0.95) is None
