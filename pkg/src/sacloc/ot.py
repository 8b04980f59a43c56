"""Entropic attention assignment between two modalities and T frames.

The solver follows the log-domain dual updates literally: potentials start
at one, every sweep refreshes the frame potentials ``v`` and then the
modality potentials ``u``, and the plan is read off as
``exp((-S + u + v) / epsilon)``.  :func:`exact_oracle` solves the
unregularized linear program exactly, which with two suppliers reduces to a
fractional knapsack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidInstanceError, NumericalError

MASS_TOL = 1e-6


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-3
    gamma: float = 1e-8
    iterations: int = 50
    # When set, stop early once max |du|, |dv| falls below this value.
    tolerance: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInstanceError(f"epsilon must be positive, got {self.epsilon}")
        if not self.gamma > 0:
            raise InvalidInstanceError(f"gamma must be positive, got {self.gamma}")
        if int(self.iterations) < 1:
            raise InvalidInstanceError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class AssignmentInstance:
    """Structure matrix ``S`` (2 x T) with supplier and receiver masses."""

    structure: np.ndarray
    supplier: np.ndarray
    receiver: np.ndarray

    def __post_init__(self):
        S = np.array(self.structure, dtype=np.float64)
        a_m = np.array(self.supplier, dtype=np.float64).ravel()
        a_f = np.array(self.receiver, dtype=np.float64).ravel()
        object.__setattr__(self, "structure", S)
        object.__setattr__(self, "supplier", a_m)
        object.__setattr__(self, "receiver", a_f)
        validate_instance(S, a_m, a_f)

    @property
    def T(self) -> int:
        return self.structure.shape[1]

    @classmethod
    def from_json(cls, obj: dict) -> "AssignmentInstance":
        try:
            return cls(obj["S"], obj["a_m"], obj["a_f"])
        except KeyError as exc:
            raise InvalidInstanceError(f"instance is missing key {exc}") from None


def validate_instance(S: np.ndarray, a_m: np.ndarray, a_f: np.ndarray, check_range: bool = True) -> None:
    if S.ndim != 2 or S.shape[0] != 2:
        raise InvalidInstanceError(f"structure matrix must be 2 x T, got {S.shape}")
    if a_m.shape != (2,) or a_f.shape != (S.shape[1],):
        raise InvalidInstanceError(f"marginal shapes {a_m.shape}, {a_f.shape} do not fit S {S.shape}")
    for name, arr in (("S", S), ("a_m", a_m), ("a_f", a_f)):
        if not np.all(np.isfinite(arr)):
            raise InvalidInstanceError(f"{name} has non-finite entries")
    if np.any(a_m < 0) or np.any(a_f < 0):
        raise InvalidInstanceError("marginals must be non-negative")
    if check_range and (np.any(S < 0) or np.any(S > 1)):
        raise InvalidInstanceError("structure entries must lie in [0, 1]")
    total_m, total_f = a_m.sum(), a_f.sum()
    if total_m <= 0 or total_f <= 0:
        raise InvalidInstanceError("marginals carry zero mass")
    if abs(total_m - total_f) > MASS_TOL * max(1.0, total_m):
        raise InvalidInstanceError(f"mass mismatch: supplier {total_m!r} vs receiver {total_f!r}")


@dataclass(frozen=True)
class TransportResult:
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    loss: float
    iterations: int

    def to_json(self, instance: AssignmentInstance | None = None) -> dict:
        out = {
            "plan": self.plan.tolist(),
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "loss": self.loss,
            "iterations": self.iterations,
        }
        if instance is not None:
            row, col = marginal_residuals(self, instance)
            out["residuals"] = {"row": row, "col": col}
        return out


def _plan(S, u, v, eps):
    return np.exp((-S + u[:, None] + v[None, :]) / eps)


def sinkhorn_solve(instance: AssignmentInstance, config: SinkhornConfig | None = None,
                   iterations: int | None = None) -> TransportResult:
    """Run the log-domain Sinkhorn sweeps on ``instance``.

    ``iterations`` overrides ``config.iterations`` and may be 0, which returns
    the plan implied by the initial all-ones potentials (possibly overflowed
    to inf for small epsilon) without raising.
    """
    config = config or SinkhornConfig()
    n_iter = config.iterations if iterations is None else int(iterations)
    S, a_m, a_f = instance.structure, instance.supplier, instance.receiver
    eps, gamma = config.epsilon, config.gamma
    log_am = np.log(a_m + gamma)
    log_af = np.log(a_f + gamma)
    u = np.ones(2)
    v = np.ones(S.shape[1])
    done = 0
    for n in range(1, n_iter + 1):
        v_new = v + eps * (log_af - ad.logsumexp_array((-S + u[:, None] + v[None, :]) / eps, axis=0))
        u_new = u + eps * (log_am - ad.logsumexp_array((-S + u[:, None] + v_new[None, :]) / eps, axis=1))
        if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(v_new))):
            raise NumericalError(f"non-finite potentials at Sinkhorn iteration {n}")
        delta = max(np.abs(u_new - u).max(), np.abs(v_new - v).max())
        u, v, done = u_new, v_new, n
        if config.tolerance is not None and delta < config.tolerance:
            break
    if done == 0:
        # the all-ones start can overflow for small eps; N=0 is diagnostic only
        with np.errstate(over="ignore", invalid="ignore"):
            plan = _plan(S, u, v, eps)
            return TransportResult(plan=plan, u=u, v=v, loss=float((S * plan).sum()), iterations=0)
    plan = _plan(S, u, v, eps)
    if not np.all(np.isfinite(plan)):
        raise NumericalError(f"non-finite transport plan after iteration {done}")
    return TransportResult(plan=plan, u=u, v=v, loss=float((S * plan).sum()), iterations=done)


def _sweeps(S, log_am, log_af, config: SinkhornConfig):
    """Forward sweeps keeping every (u, v) pair for the reverse pass."""
    eps = config.epsilon
    u, v = np.ones((2, 1)), np.ones((1, S.shape[1]))
    us, vs = [u], [v]
    for n in range(1, config.iterations + 1):
        v = v + eps * (log_af - ad.logsumexp_array((u + v - S) / eps, 0, keepdims=True))
        u = u + eps * (log_am - ad.logsumexp_array((u + v - S) / eps, 1, keepdims=True))
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericalError(f"non-finite potentials at Sinkhorn iteration {n}")
        us.append(u)
        vs.append(v)
    return us, vs


def ot_loss_node(S: ad.Tensor, a_m: ad.Tensor, a_f: ad.Tensor,
                 config: SinkhornConfig | None = None) -> ad.Tensor:
    """Differentiable transport loss through the unrolled fixed-N sweeps.

    ``S`` is 2 x T, ``a_m`` has 2 entries and ``a_f`` has T entries (any
    shape with that many elements).  The whole loop is one tape node whose
    vector-Jacobian product walks the sweeps backwards, so gradients reach
    all three inputs through every iteration exactly as if each step were
    recorded (see :func:`ot_loss_node_composed`), at a fraction of the cost.
    """
    config = config or SinkhornConfig()
    g = S.graph
    a_m, a_f = g.lift(a_m), g.lift(a_f)
    validate_instance(S.value, a_m.value.ravel(), a_f.value.ravel(), check_range=False)
    T = S.shape[1]
    eps, gamma = config.epsilon, config.gamma
    Sv = S.value
    am = a_m.value.reshape(2, 1)
    af = a_f.value.reshape(1, T)
    us, vs = _sweeps(Sv, np.log(am + gamma), np.log(af + gamma), config)
    plan = np.exp((us[-1] + vs[-1] - Sv) / eps)
    loss = float((Sv * plan).sum())

    def vjp(gr):
        gr = float(gr)
        gz = gr * Sv * plan / eps
        gS = gr * plan - gz
        gu = gz.sum(axis=1, keepdims=True)
        gv = gz.sum(axis=0, keepdims=True)
        g_lm = np.zeros((2, 1))
        g_lf = np.zeros((1, T))
        for n in range(config.iterations, 0, -1):
            u_prev, v_new, v_prev = us[n - 1], vs[n], vs[n - 1]
            # u_n = u_{n-1} + eps * (log a_m - LSE_1((u_{n-1} + v_n - S) / eps))
            g_lm += eps * gu
            w = ad.softmax_array((u_prev + v_new - Sv) / eps, 1) * gu
            gS += w
            gv = gv - w.sum(axis=0, keepdims=True)
            gu = gu - w.sum(axis=1, keepdims=True)
            # v_n = v_{n-1} + eps * (log a_f - LSE_0((u_{n-1} + v_{n-1} - S) / eps))
            g_lf += eps * gv
            w = ad.softmax_array((u_prev + v_prev - Sv) / eps, 0) * gv
            gS += w
            gu = gu - w.sum(axis=1, keepdims=True)
            gv = gv - w.sum(axis=0, keepdims=True)
        return (gS, (g_lm / (am + gamma)).reshape(a_m.shape), (g_lf / (af + gamma)).reshape(a_f.shape))

    return g._push("sinkhorn_loss", loss, (S, a_m, a_f), vjp)


def ot_loss_node_composed(S: ad.Tensor, a_m: ad.Tensor, a_f: ad.Tensor,
                          config: SinkhornConfig | None = None) -> ad.Tensor:
    """Same loss as :func:`ot_loss_node`, recorded op by op on the tape.

    Slow; kept as a reference for the fused node's backward pass.
    """
    config = config or SinkhornConfig()
    g = S.graph
    a_m, a_f = g.lift(a_m), g.lift(a_f)
    validate_instance(S.value, a_m.value.ravel(), a_f.value.ravel(), check_range=False)
    T = S.shape[1]
    eps, gamma = config.epsilon, config.gamma
    inv_eps = 1.0 / eps
    log_am = ad.log(ad.reshape(a_m, (2, 1)) + gamma)
    log_af = ad.log(ad.reshape(a_f, (1, T)) + gamma)
    neg_S = ad.neg(S)
    u = g.constant(np.ones((2, 1)))
    v = g.constant(np.ones((1, T)))
    for n in range(1, config.iterations + 1):
        z = ad.scale(neg_S + u + v, inv_eps)
        v = v + ad.scale(log_af - ad.logsumexp(z, axis=0, keepdims=True), eps)
        z = ad.scale(neg_S + u + v, inv_eps)
        u = u + ad.scale(log_am - ad.logsumexp(z, axis=1, keepdims=True), eps)
        if not (np.all(np.isfinite(u.value)) and np.all(np.isfinite(v.value))):
            raise NumericalError(f"non-finite potentials at Sinkhorn iteration {n}")
    plan = ad.exp(ad.scale(neg_S + u + v, inv_eps))
    return ad.sum_(S * plan)


def exact_oracle(instance: AssignmentInstance) -> tuple[np.ndarray, float]:
    """Exact minimizer of the unregularized two-supplier transport problem.

    Row two is determined by row one (``psi_2 = a_f - psi_1``), so the
    objective is linear in ``psi_1`` with per-frame slope ``s_1t - s_2t``.
    Filling the cheapest-slope frames first with the capacity ``a_f_t`` until
    ``a_m_1`` is exhausted is optimal.
    """
    S, a_m, a_f = instance.structure, instance.supplier, instance.receiver
    order = np.argsort(S[0] - S[1], kind="stable")
    psi1 = np.zeros_like(a_f)
    remaining = a_m[0]
    for t in order:
        take = min(a_f[t], remaining)
        psi1[t] = take
        remaining -= take
        if remaining <= 0:
            break
    plan = np.vstack([psi1, a_f - psi1])
    plan[1] = np.maximum(plan[1], 0.0)
    return plan, float((S * plan).sum())


def marginal_residuals(result, instance: AssignmentInstance) -> tuple[float, float]:
    """Max row and column sum deviations, each divided by the total mass.

    ``result`` may be a :class:`TransportResult` or a bare plan array.
    """
    plan = result.plan if isinstance(result, TransportResult) else np.asarray(result)
    total = instance.supplier.sum()
    row = np.abs(plan.sum(axis=1) - instance.supplier).max() / total
    col = np.abs(plan.sum(axis=0) - instance.receiver).max() / total
    return float(row), float(col)


def entropic_gap_bound(T: int, epsilon: float) -> float:
    return epsilon * T * np.log(2 * T)
