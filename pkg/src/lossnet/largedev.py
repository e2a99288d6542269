"""Large-deviation layer: Hamiltonian, Lagrangian, path action, quasipotential.

Covectors are full ``|X|`` vectors taken modulo constants; since every jump
sums to zero only pairings with jumps matter, and the canonical
representative has zero mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize
from scipy.special import roots_legendre, softmax

from .exceptions import ConvergenceError, PreconditionError
from .meanfield import classify_stability, integrate, lyapunov_gradient
from .models import Jump, Rerouting

__all__ = [
    "HamiltonianValue",
    "LegendreResult",
    "DiscretePath",
    "QuasipotentialEstimate",
    "canonical",
    "hamiltonian",
    "hamiltonian_gradient",
    "legendre",
    "path_action",
    "quasipotential",
    "reversed_flow_path",
    "verify_hjb",
    "reversibility_residual",
]

PAIRING_CAP = 700.0
LEGENDRE_TOL = 1e-10
DIVERGENCE_BOUND = 1e6
LEGENDRE_MAX_ITER = 500
INTERIOR_FLOOR = 1e-8


def canonical(alpha) -> np.ndarray:
    """Zero-mean representative of a covector."""
    alpha = np.asarray(alpha, dtype=float)
    return alpha - alpha.mean()


@dataclass(frozen=True)
class HamiltonianValue:
    value: float
    saturated: bool

    def __float__(self) -> float:
        return self.value


def _pairings(model, alpha):
    s = model.transitions.Z @ np.asarray(alpha, dtype=float)
    saturated = bool(np.any(s > PAIRING_CAP))
    return np.minimum(s, PAIRING_CAP), saturated


def hamiltonian(model, y, alpha) -> HamiltonianValue:
    """``H(y, alpha) = sum_z mu_y(z) (exp(<alpha, z>) - 1)``."""
    mu = model.limit_rate_vector(y)
    s, saturated = _pairings(model, alpha)
    return HamiltonianValue(float(mu @ np.expm1(s)), saturated)


def hamiltonian_gradient(model, y, alpha) -> np.ndarray:
    """``grad_alpha H = sum_z mu_y(z) exp(<alpha, z>) z``."""
    mu = model.limit_rate_vector(y)
    s, _ = _pairings(model, alpha)
    return model.transitions.Z.T @ (mu * np.exp(s))


@dataclass
class LegendreResult:
    value: float
    alpha: np.ndarray | None
    iterations: int
    gradient_norm: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


@lru_cache(maxsize=256)
def _active_basis(model, mask: bytes):
    """Dense active jumps and an orthonormal basis of their span."""
    active = np.frombuffer(mask, dtype=bool)
    Zd = model.transitions.Z[active].toarray()
    if Zd.shape[0] == 0:
        return Zd, np.zeros((model.transitions.size, 0))
    _, sv, vt = np.linalg.svd(Zd, full_matrices=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    return Zd, vt[:rank].T


def legendre(model, y, beta, *, tol: float = LEGENDRE_TOL, bound: float = DIVERGENCE_BOUND,
             max_iter: int = LEGENDRE_MAX_ITER, alpha0=None) -> LegendreResult:
    """``L(y, beta) = sup_alpha <alpha, beta> - H(y, alpha)`` by damped Newton.

    The objective is concave; its Hessian ``-sum mu e^{<alpha,z>} z z^T`` is
    singular along constants and along directions no active jump reaches.  A
    ``beta`` with a component in such a direction makes the supremum
    infinite, as does an objective that exceeds ``bound``.
    """
    beta = np.asarray(beta, dtype=float)
    if abs(beta.sum()) > 1e-9 * max(1.0, np.abs(beta).sum()):
        raise ValueError(f"beta must sum to zero, got {beta.sum()!r}")
    mu = model.limit_rate_vector(y)
    active = mu > 0
    mu = mu[active]
    Zd, basis = _active_basis(model, active.tobytes())
    leftover = beta - basis @ (basis.T @ beta)
    if np.linalg.norm(leftover) > 1e-9 * max(1.0, np.linalg.norm(beta)):
        return LegendreResult(math.inf, None, 0, float(np.linalg.norm(leftover)))

    # optimize over coefficients c with alpha = basis c
    Zb = Zd @ basis
    bb = basis.T @ beta
    c = np.zeros(basis.shape[1]) if alpha0 is None else basis.T @ np.asarray(alpha0, dtype=float)

    def objective(c):
        s = Zb @ c
        if np.any(s > PAIRING_CAP):
            return -math.inf, s
        return float(c @ bb - mu @ np.expm1(s)), s

    f, s = objective(c)
    for it in range(1, max_iter + 1):
        w = mu * np.exp(s)
        grad = bb - Zb.T @ w
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            alpha = canonical(basis @ c)
            return LegendreResult(max(f, 0.0) if f > -1e-14 else f, alpha, it, gnorm)
        hess = (Zb * w[:, None]).T @ Zb
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = c + t * step
            f_new, s_new = objective(cand)
            if f_new >= f - 1e-15 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            break
        c, f, s = cand, f_new, s_new
        if f > bound:
            return LegendreResult(math.inf, None, it, gnorm)
    w = mu * np.exp(s)
    gnorm = float(np.linalg.norm(bb - Zb.T @ w))
    if gnorm <= 1e3 * tol:
        return LegendreResult(f, canonical(basis @ c), max_iter, gnorm)
    if np.linalg.norm(c) > 50.0 or f > 0.5 * bound:
        return LegendreResult(math.inf, None, max_iter, gnorm)
    raise ConvergenceError(f"Legendre transform did not converge (|grad| = {gnorm:.3g})", last=c)


# ---------------------------------------------------------------------- paths
@dataclass
class DiscretePath:
    points: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.durations = np.asarray(self.durations, dtype=float)
        if self.points.ndim != 2 or len(self.points) != len(self.durations) + 1:
            raise ValueError("a path needs M + 1 points and M durations")
        if np.any(self.durations <= 0):
            raise ValueError("segment durations must be positive")
        if np.any(self.points < -1e-12) or np.any(np.abs(self.points.sum(axis=1) - 1) > 1e-9):
            raise ValueError("path points must lie on the simplex")

    @property
    def M(self) -> int:
        return len(self.durations)

    @property
    def T(self) -> float:
        return float(self.durations.sum())

    @classmethod
    def from_trajectory(cls, traj, M: int) -> "DiscretePath":
        t = np.linspace(traj.times[0], traj.times[-1], M + 1)
        pts = np.clip(traj.sample(t), 0.0, None)
        return cls(pts / pts.sum(axis=1, keepdims=True), np.diff(t))


def _nodes(n: int):
    """Gauss-Legendre nodes on [0, 1]; one node is the midpoint rule."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def path_action(model, path: DiscretePath, *, nodes: int = 1, return_terms: bool = False):
    """Action of a piecewise-linear path traversed at constant speed per segment.

    Each segment contributes ``tau_i int_0^1 L(p_i + s dp_i, dp_i / tau_i) ds``,
    integrated with ``nodes`` Gauss-Legendre points (default: midpoint rule).
    """
    xs, ws = _nodes(nodes)
    terms = np.zeros(path.M)
    for i in range(path.M):
        dp = path.points[i + 1] - path.points[i]
        beta = canonical(dp / path.durations[i])
        for x, w in zip(xs, ws):
            res = legendre(model, path.points[i] + x * dp, beta)
            terms[i] += w * path.durations[i] * res.value
    total = float(terms.sum())
    return (total, terms) if return_terms else total


def reversed_flow_path(model, y0, y1, M: int, *, horizon: float | None = None) -> DiscretePath:
    """Witness path: the forward flow from ``y1``, run backwards in time.

    The forward trajectory from ``y1`` approaches ``y0``; reversing it gives
    a path ``~y0 -> y1`` that starts at the last trajectory point, joined to
    ``y0`` by one short straight segment.
    """
    lead = classify_stability(model, y0).leading
    horizon = horizon if horizon is not None else 12.0 / abs(lead)
    traj = integrate(model, y1, horizon, tol=1e-11)
    t = horizon - horizon * (1 - np.linspace(0, 1, M)) ** 2  # denser near y1
    t = np.unique(np.concatenate([[0.0], t]))
    pts = traj.sample(t)[::-1]
    pts = np.clip(pts, 0.0, None)
    pts /= pts.sum(axis=1, keepdims=True)
    durations = np.diff(t)[::-1]
    tail = np.linalg.norm(pts[0] - y0)
    pts = np.vstack([np.asarray(y0)[None, :], pts])
    durations = np.concatenate([[max(tail, 1e-9) * 10.0], durations])
    return DiscretePath(pts, durations)


# -------------------------------------------------------------- quasipotential
@dataclass
class QuasipotentialEstimate:
    path: DiscretePath
    value: float
    iterations: int
    gradient_norm: float
    M: int
    advisory: bool = False
    message: str = ""
    history: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "value": self.value,
                "M": self.M,
                "iterations": self.iterations,
                "gradient_norm": self.gradient_norm,
                "advisory": self.advisory,
                "message": self.message,
                "durations": self.path.durations.tolist(),
                "points": self.path.points.tolist(),
            },
            indent=2,
            sort_keys=True,
        )


def _state_derivative(model, y, alpha, step: float = 1e-7) -> np.ndarray:
    """``d/dy H(y, alpha)`` holding ``alpha`` fixed."""
    tr = model.transitions
    weights = np.expm1(_pairings(model, alpha)[0])
    if tr.saturated >= 0 or any(g.scale_state >= 0 for g in tr.pairs):
        S = len(y)
        out = np.empty(S)
        for n in range(S):
            e = np.zeros(S)
            e[n] = step
            out[n] = (model.limit_rate_vector(y + e) - model.limit_rate_vector(y - e)) @ weights
        return out / (2 * step)
    # rates are coef * y_src (singles) and coef * a_n y_n y_m (pairs)
    out = np.zeros(len(y))
    ok = tr.single_jump >= 0
    np.add.at(out, tr.single_src[ok], tr.single_coef[ok] * weights[tr.single_jump[ok]])
    for g, grp in enumerate(tr.pairs):
        ids = tr.pair_jump[g]
        W = np.where(ids >= 0, weights[np.maximum(ids, 0)], 0.0) * grp.coef
        W = W * grp.source_weight[:, None] * grp.target_mask[None, :]
        out += W @ y + W.T @ y
    return out


def quasipotential(
    model,
    y0,
    y1,
    M: int = 8,
    *,
    T0: float | None = None,
    init: DiscretePath | None = None,
    nodes: int = 3,
    max_iter: int = 2000,
    gtol: float = 1e-9,
) -> QuasipotentialEstimate:
    """Upper bound on ``V(y0, y1)`` by minimizing the discrete action.

    Interior points are parameterized through a softmax with a floor, so
    every point stays in the open simplex; durations are log-parameterized.
    Segments are integrated with ``nodes`` Gauss-Legendre points: the
    midpoint rule underestimates the convex integrand along a segment, and
    the optimizer would otherwise stretch segments to exploit that.
    Gradients follow from the envelope theorem: at the Legendre maximizer
    ``alpha_i``, ``d L / d beta = alpha_i`` and ``d L / d y = -d H / d y``.
    """
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    S = len(y0)
    if np.max(np.abs(model.mean_field(y0))) > 1e-9:
        raise PreconditionError("quasipotential needs y0 to be an equilibrium")
    stab = classify_stability(model, y0)
    if stab.tag != "stable":
        raise PreconditionError("quasipotential needs a stable equilibrium y0")
    if np.max(np.abs(y1 - y0)) < 1e-14:
        path = DiscretePath(np.vstack([y0, y1]), np.array([1.0]))
        return QuasipotentialEstimate(path, 0.0, 0, 0.0, 1)
    advisory = bool(min(y0.min(), y1.min()) < 1e-6)
    if init is None:
        if T0 is None:
            T0 = 2.0 / abs(stab.leading)
        s = np.linspace(0.0, 1.0, M + 1)[:, None]
        init = DiscretePath((1 - s) * y0 + s * y1, np.full(M, T0 / M))
    M = init.M
    floor = INTERIOR_FLOOR
    span = 1.0 - S * floor

    def unpack(x):
        logits = x[: (M - 1) * S].reshape(M - 1, S)
        inner = floor + span * softmax(logits, axis=1)
        pts = np.vstack([y0, inner, y1])
        return pts, np.exp(x[(M - 1) * S :]), logits

    inner0 = np.clip(init.points[1:-1], floor * 1.0001, None)
    logits0 = np.log((inner0 - floor) / span)
    logits0 -= logits0.mean(axis=1, keepdims=True)
    x0 = np.concatenate([logits0.ravel(), np.log(init.durations)])
    history: list[float] = []
    xs, ws = _nodes(nodes)
    warm: dict[tuple[int, int], np.ndarray] = {}

    def fun(x):
        pts, tau, logits = unpack(x)
        total = 0.0
        g_pts = np.zeros_like(pts)
        g_tau = np.zeros(M)
        for i in range(M):
            dp = pts[i + 1] - pts[i]
            beta = canonical(dp / tau[i])
            for j, (xj, wj) in enumerate(zip(xs, ws)):
                y = pts[i] + xj * dp
                try:
                    res = legendre(model, y, beta, alpha0=warm.get((i, j)))
                except ConvergenceError:
                    return 1e12, np.zeros_like(x)
                if not res.finite:
                    return 1e12, np.zeros_like(x)
                alpha = res.alpha
                warm[(i, j)] = alpha
                total += wj * tau[i] * res.value
                # envelope theorem: dL/dy = -dH/dy, dL/dbeta = alpha
                dHdy = _state_derivative(model, y, alpha)
                g_pts[i] += wj * (-(1 - xj) * tau[i] * dHdy - alpha)
                g_pts[i + 1] += wj * (-xj * tau[i] * dHdy + alpha)
                g_tau[i] -= wj * hamiltonian(model, y, alpha).value
        history.append(total)
        # chain rule through the softmax: dp/dlogit = span * (diag(s) - s s^T)
        g_inner = g_pts[1:-1]
        sm = softmax(logits, axis=1)
        g_logits = span * sm * (g_inner - np.sum(g_inner * sm, axis=1, keepdims=True))
        return total, np.concatenate([g_logits.ravel(), g_tau * tau])

    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-13})
    pts, tau, _ = unpack(res.x)
    best = DiscretePath(pts, tau)
    value = path_action(model, best, nodes=nodes)
    if not math.isfinite(value):
        raise ConvergenceError("quasipotential optimizer ended on an infinite-action path",
                               last=res.x)
    return QuasipotentialEstimate(
        best, value, int(res.nit), float(np.linalg.norm(res.jac)), M, advisory,
        str(res.message), history,
    )


# ------------------------------------------------------------- verification
def _require_split(model, what: str) -> None:
    if isinstance(model, Rerouting):
        raise TypeError(f"{what}: the rerouting model has no function g")
    if not getattr(model, "has_lyapunov_g", False):
        raise TypeError(f"{what} needs a model with the function g")


def verify_hjb(model, y) -> float:
    """``|H(y, grad g(y))|``; zero for the split-jump mobile model."""
    _require_split(model, "verify_hjb")
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise PreconditionError("verify_hjb needs an interior point")
    return abs(hamiltonian(model, y, canonical(lyapunov_gradient(model, y))).value)


def reversibility_residual(model, y, z: Jump) -> float:
    """``mu_y(z) - mu_y(-z) exp(-<grad g(y), z>)``."""
    _require_split(model, "reversibility_residual")
    jumps = model.jump_set()
    try:
        i = jumps.index(z)
        j = jumps.index(-z)
    except ValueError:
        raise ValueError("jump and its reverse must both belong to the jump set") from None
    y = np.asarray(y, dtype=float)
    mu = model.limit_rate_vector(y)
    grad = lyapunov_gradient(model, y)
    return float(mu[i] - mu[j] * np.exp(-(z.delta @ grad)))
