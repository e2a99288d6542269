"""Mean-field ODE ``y' = m_y``: integration, equilibria, stability, Lyapunov functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq, root
from scipy.special import logsumexp

from .exceptions import PreconditionError, StepSizeError
from .models import Closed, Mobile, ModelSpec, Open, Rerouting
from .statespace import (
    _gibbs,
    as_simplex,
    erlang_measure,
    log_partition,
    marginal_mean,
    relative_entropy,
    solve_rho_lambda,
)

__all__ = [
    "Trajectory",
    "Equilibrium",
    "EquilibriumReport",
    "StabilityResult",
    "integrate",
    "find_equilibria",
    "jacobian",
    "tangent_basis",
    "classify_stability",
    "lyapunov_g",
    "lyapunov_g_entropy_form",
    "lyapunov_gradient",
    "lyapunov_entropy",
    "lyapunov_value",
    "dirichlet_form",
    "lyapunov_derivative",
    "l_decrease",
]

EQUILIBRIUM_TOL = 1e-9
MARGINAL_BAND = 1e-8

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B5 - _B4
_A_ROWS = [np.asarray(row) for row in _A]


@dataclass
class Trajectory:
    """Accepted steps of an ODE solve; ``sample`` interpolates (cubic Hermite)."""

    times: np.ndarray
    points: np.ndarray
    derivatives: np.ndarray
    steps: np.ndarray
    min_before_renormalization: float = 0.0

    @property
    def final(self) -> np.ndarray:
        return self.points[-1]

    def sample(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.min() < self.times[0] - 1e-12 or t.max() > self.times[-1] + 1e-12:
            raise ValueError("sample times outside the integrated range")
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[i], self.times[i + 1]
        h = (t1 - t0)[:, None]
        s = ((t - t0) / (t1 - t0))[:, None]
        y0, y1 = self.points[i], self.points[i + 1]
        f0, f1 = self.derivatives[i], self.derivatives[i + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def integrate(
    model,
    y0,
    T: float,
    tol: float = 1e-9,
    *,
    atol: float | None = None,
    h0: float | None = None,
    max_step: float = math.inf,
    max_steps: int = 1_000_000,
) -> Trajectory:
    """Solve ``y' = m_y`` on ``[0, T]`` with an embedded 5(4) Runge-Kutta pair.

    ``tol`` is the relative tolerance; the absolute one defaults to
    ``tol / 100`` so that tiny coordinates stay nonnegative to ``~1e-10``.
    After each accepted step negatives are clamped and the point is rescaled
    onto the simplex; the smallest pre-clamp coordinate is kept for audit.
    """
    y = as_simplex(y0)
    f = model.mean_field
    model.check_state(y)
    h = h0 if h0 is not None else min(max_step, 0.01 * max(1.0, T), T if T > 0 else 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        return _dopri(f, y, T, tol, 1e-2 * tol if atol is None else atol, h, max_step, max_steps)


def _dopri(f, y, T, tol, atol, h, max_step, max_steps) -> Trajectory:
    t = 0.0
    k1 = f(y)
    times, points, derivs, steps = [0.0], [y.copy()], [k1.copy()], []
    min_seen = float(y.min())
    stages = np.empty((7, len(y)))
    n_steps = 0
    while t < T * (1 - 1e-15) and T > 0:
        h = min(h, T - t, max_step)
        if h < 1e-14 * max(1.0, t):
            raise StepSizeError(f"step size underflow at t={t:.6g}", t)
        stages[0] = k1
        try:
            for i in range(1, 7):
                stages[i] = f(y + h * (_A_ROWS[i] @ stages[:i]))
        except ValueError:
            # a trial stage left the domain of the rates (closed/open: y_C >= 1)
            h *= 0.2
            continue
        y_new = y + h * (_B5 @ stages)
        err = h * (_E @ stages)
        scale = atol + tol * np.maximum(np.abs(y), np.abs(y_new))
        enorm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not math.isfinite(enorm):
            enorm = math.inf
        if enorm <= 1.0:
            t += h
            min_seen = min(min_seen, float(y_new.min()))
            y = np.clip(y_new, 0.0, None)
            y /= y.sum()
            k1 = f(y)
            times.append(t)
            points.append(y.copy())
            derivs.append(k1.copy())
            steps.append(h)
            n_steps += 1
            if n_steps >= max_steps:
                raise StepSizeError(f"step budget exhausted at t={t:.6g}", t)
            factor = 5.0 if enorm == 0 else min(5.0, 0.9 * enorm ** (-0.2))
        else:
            factor = 0.2 if enorm == math.inf else max(0.2, 0.9 * enorm ** (-0.2))
        h *= factor
    return Trajectory(
        np.array(times), np.array(points), np.array(derivs), np.array(steps), min_seen
    )


# ----------------------------------------------------------------- stability
def tangent_basis(model) -> np.ndarray:
    """Orthonormal basis of the directions the dynamics can move in.

    The zero-sum hyperplane, further restricted to fixed mean occupancy for
    the closed model (whose mean is conserved).
    """
    ss = model.statespace
    rows = [np.ones(ss.size)]
    if isinstance(model, Closed):
        rows.append(ss.states[:, 0].astype(float))
    return null_space(np.array(rows))


def jacobian(model, y, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``y -> m_y`` in ambient coordinates."""
    y = np.asarray(y, dtype=float)
    S = len(y)
    J = np.empty((S, S))
    for j in range(S):
        e = np.zeros(S)
        e[j] = step
        J[:, j] = (model.mean_field(y + e) - model.mean_field(y - e)) / (2 * step)
    return J


@dataclass
class StabilityResult:
    tag: str
    eigenvalues: np.ndarray

    @property
    def leading(self) -> float:
        return float(self.eigenvalues.real.max())


def classify_stability(model, y_star, *, step: float = 1e-6) -> StabilityResult:
    """Spectrum of the linearized flow at an equilibrium, restricted to the tangent space."""
    y_star = np.asarray(y_star, dtype=float)
    drift = np.max(np.abs(model.mean_field(y_star)))
    if drift > EQUILIBRIUM_TOL:
        raise PreconditionError(f"not an equilibrium: |m_y|_inf = {drift:.3g}")
    V = tangent_basis(model)
    eig = np.linalg.eigvals(V.T @ jacobian(model, y_star, step) @ V)
    eig = eig[np.argsort(-eig.real)]
    if np.all(eig.real < -MARGINAL_BAND):
        tag = "stable"
    elif np.any(eig.real > MARGINAL_BAND):
        tag = "unstable"
    else:
        tag = "marginal"
    return StabilityResult(tag, eig)


# ---------------------------------------------------------------- equilibria
@dataclass
class Equilibrium:
    rho: np.ndarray
    y: np.ndarray
    stability: str
    eigenvalues: np.ndarray
    residual: float
    lyapunov: float | None = None

    @property
    def leading_eigenvalue(self) -> float:
        return float(self.eigenvalues.real.max())


@dataclass
class EquilibriumReport:
    model: ModelSpec
    equilibria: list[Equilibrium]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.equilibria)

    @property
    def stable(self) -> list[Equilibrium]:
        return [e for e in self.equilibria if e.stability == "stable"]

    def rows(self) -> list[dict]:
        """One flat record per equilibrium, ready for CSV."""
        params = self.model.to_dict()
        out = []
        for i, eq in enumerate(self.equilibria):
            row = {"family": params["family"]}
            for key, value in params.items():
                if key != "family":
                    row[key] = _fmt(value)
            row["root"] = i
            row["rho"] = _fmt(eq.rho.tolist())
            row["stability"] = eq.stability
            row["leading_eigenvalue"] = repr(eq.leading_eigenvalue)
            row["residual"] = repr(eq.residual)
            row["lyapunov"] = "" if eq.lyapunov is None else repr(eq.lyapunov)
            out.append(row)
        return out


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return " ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _rerouting_roots(model: Rerouting, points: int) -> list[np.ndarray]:
    ss, lam = model.statespace, model.lam

    def residual(rho):
        rho = np.atleast_1d(rho)
        lw = np.log(rho)[:, None] * ss.states[:, 0][None, :] - ss.log_factorial[None, :]
        B = np.exp(lw[:, -1] - logsumexp(lw, axis=1))
        return rho - lam * (1 + 2 * B * (1 - B))

    # every root lies in [lam, 1.5 lam] since 0 <= 2B(1-B) <= 1/2
    grid = np.linspace(lam, 1.5 * lam, points)
    vals = residual(grid)
    roots = [grid[i] for i in np.flatnonzero(vals == 0)]
    for i in np.flatnonzero(vals[:-1] * vals[1:] < 0):
        roots.append(
            brentq(lambda r: residual(r)[0], grid[i], grid[i + 1], xtol=1e-14, rtol=1e-15)
        )
    return [np.array([r]) for r in sorted(roots)]


def _mobile_roots(model: Mobile, per_axis: int, bounds) -> list[np.ndarray]:
    ss = model.statespace
    X = ss.states.astype(float)
    lam, gam, svc = np.asarray(model.lam), np.asarray(model.gamma), model.service

    def fun(theta):
        theta = np.clip(theta, -60.0, 60.0)
        p = _gibbs(ss, theta)
        mean = p @ X
        load = lam + gam * mean
        centered = X - mean
        cov = (centered * p[:, None]).T @ centered
        res = theta - np.log(load / svc)
        jac = np.eye(ss.K) - (gam / load)[:, None] * cov
        return res, jac

    axis = np.linspace(np.log(bounds[0]), np.log(bounds[1]), per_axis)
    starts = np.array(np.meshgrid(*[axis] * ss.K, indexing="ij")).reshape(ss.K, -1).T
    roots = []
    for x0 in starts:
        sol = root(fun, x0, jac=True, method="hybr", options={"xtol": 1e-13})
        if np.max(np.abs(fun(sol.x)[0])) < 1e-11:
            roots.append(np.exp(sol.x))
    return roots


def find_equilibria(
    model,
    *,
    points: int = 4000,
    per_axis: int = 24,
    bounds=(1e-3, 1e3),
    merge_radius: float = 1e-6,
    classify: bool = True,
) -> EquilibriumReport:
    """Locate equilibria through the Erlang fixed point ``y = nu_{rho(y)}``.

    Works in load space: a scalar sign-change scan for rerouting, multistart
    Newton for mobile networks, and the unique ``rho_lambda`` otherwise.
    """
    if points < 2 or per_axis < 1:
        raise ValueError("empty scan grid")
    ss = model.statespace
    if isinstance(model, Rerouting):
        candidates = _rerouting_roots(model, points)
        meta = {"scan": "rho", "points": points, "interval": [model.lam, 1.5 * model.lam]}
    elif isinstance(model, Mobile):
        candidates = _mobile_roots(model, per_axis, bounds)
        meta = {"scan": "multistart", "per_axis": per_axis, "bounds": list(bounds)}
    elif isinstance(model, (Closed, Open)):
        candidates = [np.array([solve_rho_lambda(ss, model.lam)])]
        meta = {"scan": "unique"}
    else:
        raise TypeError(f"no equilibrium search for {type(model).__name__}")

    unique: list[np.ndarray] = []
    for rho in sorted(candidates, key=lambda r: tuple(r)):
        if all(np.max(np.abs(rho - u)) > merge_radius for u in unique):
            unique.append(rho)
    found, rejected = [], []
    for rho in unique:
        y = erlang_measure(ss, rho)
        residual = float(np.max(np.abs(model.mean_field(y))))
        if residual > EQUILIBRIUM_TOL:
            rejected.append({"rho": rho.tolist(), "residual": residual})
            continue
        if classify:
            st = classify_stability(model, y)
            tag, eig = st.tag, st.eigenvalues
        else:
            tag, eig = "unclassified", np.array([np.nan])
        found.append(Equilibrium(rho, y, tag, eig, residual, lyapunov_value(model, y)))
    meta["rejected"] = rejected
    return EquilibriumReport(model, found, meta)


# ---------------------------------------------------------------- Lyapunov
def _xlogx_factorial(ss, y: np.ndarray) -> float:
    pos = y > 0
    return float(np.sum(y[pos] * (ss.log_factorial[pos] + np.log(y[pos]))))


def _int_log_affine(a: float, b: float, x: float) -> float:
    """``int_0^x log(a + b u) du`` in closed form."""
    if b == 0:
        return x * math.log(a)
    end = a + b * x
    return (end * math.log(end) - end - a * math.log(a) + a) / b


def _require_mobile(model) -> None:
    if not isinstance(model, Mobile):
        raise TypeError(f"g is defined for mobile networks, got {type(model).__name__}")


def lyapunov_g(model: Mobile, y) -> float:
    """``sum_n y_n log(n! y_n) - sum_k int_0^{[I_k,y]} log((lam_k + gam_k x)/(mu_k + gam_k)) dx``."""
    _require_mobile(model)
    y = model.check_state(y)
    ss = model.statespace
    mean = marginal_mean(ss, y)
    total = _xlogx_factorial(ss, y)
    for k in range(ss.K):
        lam, mu, gam = model.lam[k], model.mu[k], model.gamma[k]
        total -= _int_log_affine(lam, gam, mean[k]) - mean[k] * math.log(mu + gam)
    return total


def _psi(lam: float, gam: float, x: float) -> float:
    # int_0^x gam u / (lam + gam u) du
    if gam == 0:
        return 0.0
    return x - (lam / gam) * math.log1p(gam * x / lam)


def lyapunov_g_entropy_form(model: Mobile, y) -> float:
    """``h(y | nu_rho(y)) - log Z(rho(y)) + sum_k psi_k([I_k, y])``."""
    _require_mobile(model)
    y = model.check_state(y)
    ss = model.statespace
    rho = model.rho_of_y(y)
    mean = marginal_mean(ss, y)
    value = relative_entropy(y, erlang_measure(ss, rho)) - log_partition(ss, np.log(rho))
    return value + sum(_psi(model.lam[k], model.gamma[k], mean[k]) for k in range(ss.K))


def lyapunov_gradient(model, y) -> np.ndarray:
    """``d g / d y_n = log(n! y_n / rho(y)^n) + 1`` (also valid for :class:`FeedbackField`)."""
    y = np.asarray(y, dtype=float)
    ss = model.statespace
    with np.errstate(divide="ignore"):
        logy = np.log(y)
    return ss.log_factorial + logy - ss.states @ np.log(model.rho_of_y(y)) + 1.0


def lyapunov_entropy(model, y) -> float:
    """``h(y | nu_{rho_lambda})`` for the closed and open single-class models."""
    if not isinstance(model, (Closed, Open)):
        raise TypeError("entropy Lyapunov function needs the closed or open model")
    return relative_entropy(y, _reference_measure(model))


@lru_cache(maxsize=64)
def _reference_measure(model) -> np.ndarray:
    ss = model.statespace
    nu = erlang_measure(ss, solve_rho_lambda(ss, model.lam))
    nu.flags.writeable = False
    return nu


def lyapunov_value(model, y) -> float | None:
    if isinstance(model, Mobile):
        return lyapunov_g(model, y)
    if isinstance(model, (Closed, Open)):
        return lyapunov_entropy(model, y)
    return None


def dirichlet_form(model, y, u) -> float:
    """``-1/2 sum q(m,n) (y_m/nu_m - y_n/nu_n)(u_n - u_m)`` with ``q = nu L`` symmetric."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    nu = erlang_measure(model.statespace, model.rho_of_y(y))
    L = model.generator(y)
    q = nu[:, None] * L
    np.fill_diagonal(q, 0.0)
    r = y / nu
    return float(-0.5 * np.sum(q * (r[:, None] - r[None, :]) * (u[None, :] - u[:, None])))


def _entropy_dissipation(model, y) -> float:
    y = np.asarray(y, dtype=float)
    nu = erlang_measure(model.statespace, model.rho_of_y(y))
    L = model.generator(y)
    q = nu[:, None] * L
    np.fill_diagonal(q, 0.0)
    r = y / nu
    lr = np.log(r)
    return float(-0.5 * np.sum(q * (r[:, None] - r[None, :]) * (lr[:, None] - lr[None, :])))


def lyapunov_derivative(model, y, *, check: bool = True, tol: float = 1e-10) -> float:
    """Time derivative of the model's Lyapunov function along the flow at ``y``.

    Returns ``m_y . grad g(y)``.  With ``check`` the value is compared with
    the Dirichlet-form expression and a mismatch raises ``AssertionError``.
    For the closed and open models the two agree on ``{[I, y] = lam}`` only.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise PreconditionError("Lyapunov derivative needs an interior point")
    ss = model.statespace
    if isinstance(model, (Closed, Open)):
        nu = erlang_measure(ss, solve_rho_lambda(ss, model.lam))
        grad = np.log(y / nu) + 1.0
        if check and abs(marginal_mean(ss, y)[0] - model.lam) > 1e-9:
            raise PreconditionError("the Dirichlet cross-check needs [I, y] = lam")
    elif getattr(model, "has_lyapunov_g", False):
        grad = lyapunov_gradient(model, y)
    else:
        raise TypeError(f"no Lyapunov function known for {type(model).__name__}")
    direct = float(model.mean_field(y) @ grad)
    if check:
        other = _entropy_dissipation(model, y)
        if abs(direct - other) > tol * max(1.0, abs(direct)):
            raise AssertionError(f"Dirichlet form {other!r} disagrees with m.grad {direct!r}")
    return direct


def l_decrease(model: Open, y) -> float:
    """Derivative of ``([I, y] - lam)^2`` along the open model's flow."""
    if not isinstance(model, Open):
        raise TypeError("l_decrease is defined for the open model")
    gap = model.lam - marginal_mean(model.statespace, y)[0]
    return float(-2.0 * gap**2)
