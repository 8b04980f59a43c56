import numpy as np
import pytest

from sacloc import autodiff as ad
from sacloc.gradcheck import (
    GRAD_FLOOR,
    REL_TOL,
    CheckResult,
    central_difference,
    check,
    max_relative_error,
    ops_suite,
    ot_suite,
)


class TestHarness:
    def test_central_difference_quadratic(self):
        # exact for quadratics up to roundoff
        grads = central_difference(lambda p: float((p["x"] ** 2).sum() + 3 * p["y"][0]),
                                   {"x": np.array([1.0, -2.0]), "y": np.array([0.5])})
        np.testing.assert_allclose(grads["x"], [2.0, -4.0], rtol=1e-9)
        np.testing.assert_allclose(grads["y"], [3.0], rtol=1e-9)

    def test_does_not_mutate_inputs(self):
        params = {"x": np.array([1.0, 2.0])}
        central_difference(lambda p: float(p["x"].sum()), params)
        assert params["x"].tolist() == [1.0, 2.0]

    def test_relative_error_floor(self):
        a = {"x": np.array([1.0, 1e-9, 2.0])}
        n = {"x": np.array([1.0005, 5e-9, 2.0])}
        err, count = max_relative_error(a, n)
        assert count == 2
        assert err == pytest.approx(0.0005 / 1.0005)

    def test_detects_wrong_gradient(self):
        def build(g, P):
            return ad.sum_(P["x"] * P["x"])

        good = check("sq", 0, build, {"x": np.array([0.3, -1.2])})
        assert good.passed and good.max_rel_error < 1e-8

        def wrong(g, P):
            # value is x^2, but the recorded gradient path is x * stop_gradient(x)
            return ad.sum_(P["x"] * g.constant(P["x"].value))

        bad = check("half", 0, wrong, {"x": np.array([0.3, -1.2])})
        assert not bad.passed
        assert bad.max_rel_error == pytest.approx(0.5)

    def test_result_flags(self):
        assert CheckResult("x", 0, REL_TOL / 2, 1, 0.0).passed is True
        assert CheckResult("x", 0, float("nan"), 1, 0.0).passed is False
        assert CheckResult("x", 0, 1.0, 1, 0.0).floor == GRAD_FLOOR


class TestSuites:
    @pytest.mark.parametrize("seed", range(3))
    def test_ops(self, seed):
        r = ops_suite(seed)
        assert r.passed and r.coordinates > 0

    @pytest.mark.parametrize("seed", range(3))
    def test_ot(self, seed):
        r = ot_suite(seed)
        assert r.passed and r.coordinates > 0
