import numpy as np
import pytest

from clopasim.autodiff import Tensor, leaky_relu
from clopasim.gradcheck import CASES, TOLERANCE, check_case, relative_error, run_gradcheck


class TestRelativeError:
    def test_identical(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_scale_free(self):
        small = relative_error(np.array([1e-3]), np.array([1.1e-3]))
        large = relative_error(np.array([1e3]), np.array([1.1e3]))
        assert small == pytest.approx(large, rel=1e-4)

    def test_large_coordinate_does_not_hide_small_one(self):
        # aggregated over the vector this would be ~1e-5
        error = relative_error(np.array([100.0, 1e-3]), np.array([100.0, 2e-3]))
        assert error == pytest.approx(0.5, rel=1e-4)
        assert error > TOLERANCE

    def test_zero_gradient_floor(self):
        assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
        assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(0.1)


class TestCheckCase:
    def test_square(self):
        x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True, dtype=np.float64)
        check = check_case(lambda: (x * x).sum(), [x], np.random.default_rng(0))
        assert check.error < 1e-6
        assert check.checked == 6
        assert check.skipped == 0

    def test_breakpoint_coordinates_skipped(self):
        # two of three entries sit within one step of the kink
        x = Tensor(np.array([4e-4, -3e-4, -2.0]), requires_grad=True, dtype=np.float64)
        check = check_case(lambda: leaky_relu(x).sum(), [x], np.random.default_rng(1))
        assert check.skipped > 0
        assert check.checked == 6
        assert check.error < 1e-9


class TestRunGradcheck:
    @pytest.mark.parametrize("op", sorted(CASES))
    def test_each_op_passes(self, op):
        report = run_gradcheck(cases=3, seed=0, ops=[op])
        assert report.passed
        assert report.results[0].cases == 3
        assert report.results[0].worst_error < TOLERANCE

    def test_unknown_op(self):
        with pytest.raises(KeyError):
            run_gradcheck(cases=1, ops=["lstm"])

    def test_deterministic(self):
        a = run_gradcheck(cases=2, seed=4, ops=["conv3d"])
        b = run_gradcheck(cases=2, seed=4, ops=["conv3d"])
        assert a.results[0].worst_error == b.results[0].worst_error
