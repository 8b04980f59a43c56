"""Central finite-difference checks of the reverse-mode gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .ot import SinkhornConfig, ot_loss_node
from .sac import FeatureSequence, SACConfig, bind, init_sac_params, sac_forward

STEP = 1e-5
REL_TOL = 1e-3
# Coordinates with |grad| <= GRAD_FLOOR are skipped (relative error is meaningless there).
GRAD_FLOOR = 1e-6
# The full SAC loss adds a loss-scaled floor: central differences on a loss of
# size |L| carry roundoff of roughly u * |L| / (epsilon * h) ~ 1e-8 |L|
# (u = 2.2e-16, Sinkhorn epsilon = 1e-3, h = 1e-5), so gradients below
# ROUNDOFF_FLOOR * |L| cannot be certified to REL_TOL.
ROUNDOFF_FLOOR = 1e-5


def central_difference(f: Callable[[dict], float], params: dict[str, np.ndarray], h: float = STEP) -> dict:
    """d f / d p for every coordinate of every array in ``params``."""
    out = {}
    for name, value in params.items():
        grad = np.zeros_like(value, dtype=np.float64)
        for idx in np.ndindex(value.shape):
            shifted = dict(params)
            plus = value.astype(np.float64).copy()
            plus[idx] += h
            shifted[name] = plus
            f_plus = f(shifted)
            minus = value.astype(np.float64).copy()
            minus[idx] -= h
            shifted[name] = minus
            f_minus = f(shifted)
            grad[idx] = (f_plus - f_minus) / (2 * h)
        out[name] = grad
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = GRAD_FLOOR) -> tuple[float, int]:
    """Largest |a - n| / max(|a|, |n|) over coordinates whose gradient exceeds ``floor``."""
    worst, checked = 0.0, 0
    for name in analytic:
        a, n = np.ravel(analytic[name]), np.ravel(numeric[name])
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = scale > floor
        if mask.any():
            worst = max(worst, float((np.abs(a - n)[mask] / scale[mask]).max()))
            checked += int(mask.sum())
    return worst, checked


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    coordinates: int
    seconds: float
    floor: float = GRAD_FLOOR

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < REL_TOL and np.isfinite(self.max_rel_error))


def check(name: str, seed: int, build: Callable[[ad.Graph, dict], ad.Tensor], params: dict,
          roundoff_floor: float = 0.0) -> CheckResult:
    """Compare :func:`~sacloc.autodiff.backward` on ``build`` against central differences.

    The comparison floor is ``max(GRAD_FLOOR, roundoff_floor * |loss|)``.
    """
    t0 = time.perf_counter()

    def value(p):
        g = ad.Graph()
        return float(build(g, bind(g, p)).value)

    g = ad.Graph()
    loss = build(g, bind(g, params))
    analytic = ad.backward(g, loss)
    numeric = central_difference(value, params)
    floor = max(GRAD_FLOOR, roundoff_floor * abs(float(loss.value)))
    err, n = max_relative_error(analytic, numeric, floor)
    return CheckResult(name, seed, err, n, time.perf_counter() - t0, floor)


# ----------------------------------------------------------------------
# suites

def random_instance(rng: np.random.Generator, T: int):
    S = rng.uniform(0, 1, (2, T))
    a_m = rng.uniform(0.2, 1.0, 2)
    a_f = rng.uniform(0.2, 1.0, T)
    return S, a_m * T / a_m.sum(), a_f * T / a_f.sum()


def ot_suite(seed: int, T: int = 6, config: SinkhornConfig | None = None) -> CheckResult:
    """Gradient of the unrolled transport loss w.r.t. S, a_m and a_f jointly.

    The marginals are renormalized to mass T inside the graph so that every
    perturbation stays a valid (equal-mass) instance.
    """
    config = config or SinkhornConfig()
    rng = np.random.default_rng(seed)
    S, a_m, a_f = random_instance(rng, T)

    def build(g, P):
        m = P["a_m"] * (T / (ad.sum_(P["a_m"])))
        f = P["a_f"] * (T / (ad.sum_(P["a_f"])))
        return ot_loss_node(P["S"], m, f, config)

    return check("ot", seed, build, {"S": S, "a_m": a_m, "a_f": a_f})


def sac_suite(seed: int, T: int = 8, D: int = 4, embed_dim: int = 4) -> CheckResult:
    """Gradient of the total SAC loss w.r.t. every head and embedding parameter."""
    rng = np.random.default_rng(seed)
    config = SACConfig(embed_dim=embed_dim, k=0.25)
    feats = FeatureSequence(rng.normal(size=(D, T)), rng.normal(size=(D, T)))
    params = init_sac_params(D, config, rng)
    # widen the init so the heads leave the near-linear regime
    params = {k: 2.0 * v for k, v in params.items()}

    def build(g, P):
        return sac_forward(g, feats, P, config).losses.total

    return check("sac_total", seed, build, params, roundoff_floor=ROUNDOFF_FLOOR)


def ops_suite(seed: int) -> CheckResult:
    """A random two-layer conv graph touching most primitive ops."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (3, 7))
    params = {
        "w1": rng.uniform(-2, 2, (4, 3, 3)), "b1": rng.uniform(-2, 2, 4),
        "w2": rng.uniform(-2, 2, (2, 4, 3)), "b2": rng.uniform(-2, 2, 2),
    }

    def build(g, P):
        h = ad.sigmoid(ad.conv1d_same(g.constant(x), P["w1"], P["b1"]))
        z = ad.conv1d_same(h, P["w2"], P["b2"])
        s = ad.softmax(z, axis=0)
        return ad.mean(ad.logsumexp(z, axis=1)) + ad.sum_(ad.column_norm(s)) + ad.sum_(ad.max_axis0(z))

    return check("ops", seed, build, params)


SUITES = {"ops": ops_suite, "ot": ot_suite, "sac": sac_suite}


def run_suites(seeds, names=tuple(SUITES)) -> list[CheckResult]:
    return [SUITES[name](seed) for name in names for seed in seeds]
