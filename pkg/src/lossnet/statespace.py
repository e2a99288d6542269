"""Knapsack state spaces and the Erlang (Gibbs) measure layer.

A node of capacity ``C`` serving ``K`` classes with requirements ``A`` can be
in any state ``n`` with ``sum_k n_k A_k <= C``.  Everything here is computed in
log space: with ``C`` in the hundreds the raw weights ``rho**n / n!`` overflow.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln, logsumexp

from .exceptions import ConvergenceError

__all__ = [
    "StateSpace",
    "LoadVector",
    "EmpiricalVector",
    "enumerate_states",
    "as_simplex",
    "log_weights",
    "log_partition",
    "partition_function",
    "erlang_measure",
    "blocking_probability",
    "marginal_mean",
    "relative_entropy",
    "gibbs_entropy_identity",
    "solve_theta_bar",
    "solve_rho_lambda",
]

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Enumerated set ``{n in N^K : <n, A> <= C}`` in lexicographic order."""

    capacity: int
    requirements: tuple[int, ...]
    states: np.ndarray = field(repr=False)
    index: dict[tuple[int, ...], int] = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.requirements)

    @property
    def size(self) -> int:
        return len(self.states)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StateSpace):
            return NotImplemented
        return (self.capacity, self.requirements) == (other.capacity, other.requirements)

    def __hash__(self) -> int:
        return hash((self.capacity, self.requirements))

    @cached_property
    def log_factorial(self) -> np.ndarray:
        """``log n!`` with the multi-index convention ``n! = prod_k n_k!``."""
        return gammaln(self.states + 1.0).sum(axis=1)

    @cached_property
    def up(self) -> np.ndarray:
        """``up[s, k]`` is the index of ``n + f_k`` or -1 when it leaves the space."""
        return self._shifted(+1)

    @cached_property
    def down(self) -> np.ndarray:
        """``down[s, k]`` is the index of ``n - f_k`` or -1 when ``n_k = 0``."""
        return self._shifted(-1)

    def _shifted(self, sign: int) -> np.ndarray:
        out = np.full((self.size, self.K), -1, dtype=np.int64)
        for s, n in enumerate(self.states):
            for k in range(self.K):
                m = list(n)
                m[k] += sign
                out[s, k] = self.index.get(tuple(m), -1)
        return out

    def blocked(self, k: int) -> np.ndarray:
        """Mask of states where a class ``k`` arrival does not fit."""
        self._check_class(k)
        return self.up[:, k] < 0

    def state_index(self, n) -> int:
        try:
            return self.index[tuple(int(v) for v in np.atleast_1d(n))]
        except KeyError:
            raise ValueError(f"{n!r} is not a state of {self!r}") from None

    def delta(self, n) -> np.ndarray:
        """Dirac mass at state ``n``."""
        y = np.zeros(self.size)
        y[self.state_index(n)] = 1.0
        return y

    def _check_class(self, k: int) -> None:
        if not 0 <= k < self.K:
            raise IndexError(f"class index {k} out of range for K={self.K}")


def enumerate_states(C: int, A) -> StateSpace:
    """Enumerate the knapsack states for capacity ``C`` and requirements ``A``.

    >>> enumerate_states(2, [1]).states.ravel().tolist()
    [0, 1, 2]
    """
    A = tuple(int(a) for a in np.atleast_1d(A))
    C = int(C)
    if len(A) == 0:
        raise ValueError("at least one customer class is required")
    if C < 1:
        raise ValueError(f"capacity must be >= 1, got {C}")
    for a in A:
        if not 1 <= a <= C:
            raise ValueError(f"requirements must satisfy 1 <= A_k <= C={C}, got {a}")
    ranges = [range(C // a + 1) for a in A]
    # itertools.product yields lexicographic order already
    states = [n for n in itertools.product(*ranges) if sum(x * a for x, a in zip(n, A)) <= C]
    arr = np.array(states, dtype=np.int64).reshape(len(states), len(A))
    index = {n: i for i, n in enumerate(states)}
    return StateSpace(C, A, arr, index)


@dataclass(frozen=True)
class LoadVector:
    """Per-class load ``rho`` with its Gibbs coordinate ``theta = log rho``."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if np.any(~np.isfinite(rho)) or np.any(rho <= 0):
            raise ValueError(f"loads must be positive and finite, got {rho}")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_theta(cls, theta) -> "LoadVector":
        return cls(np.exp(np.atleast_1d(np.asarray(theta, dtype=float))))

    @property
    def theta(self) -> np.ndarray:
        return np.log(self.rho)


@dataclass(frozen=True)
class EmpiricalVector:
    """Node counts per state; ``y = counts / N`` is the empirical measure."""

    counts: np.ndarray
    N: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.round(counts)):
                raise ValueError("counts must be integers")
            counts = counts.astype(np.int64)
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if int(counts.sum()) != int(self.N):
            raise ValueError(f"counts sum to {counts.sum()}, expected N={self.N}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "N", int(self.N))

    @property
    def y(self) -> np.ndarray:
        return self.counts / self.N

    @classmethod
    def nearest(cls, y, N: int) -> "EmpiricalVector":
        """Lattice point of ``Y^N`` closest to ``y`` (largest-remainder rounding)."""
        y = as_simplex(y)
        raw = y * N
        counts = np.floor(raw).astype(np.int64)
        missing = N - int(counts.sum())
        if missing > 0:
            order = np.argsort(-(raw - counts), kind="stable")
            counts[order[:missing]] += 1
        return cls(counts, N)


def as_simplex(values, *, normalize: bool = True) -> np.ndarray:
    """Validate a probability vector; renormalizes tiny drift when asked."""
    y = np.asarray(values, dtype=float)
    if y.ndim != 1:
        raise ValueError("a simplex vector must be one-dimensional")
    if np.any(~np.isfinite(y)) or np.any(y < 0):
        raise ValueError("simplex vector entries must be finite and nonnegative")
    total = y.sum()
    if total <= 0:
        raise ValueError("simplex vector has zero mass")
    if normalize:
        return y / total
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"entries sum to {total!r}, not 1")
    return y


def _theta(rho_or_load) -> np.ndarray:
    if isinstance(rho_or_load, LoadVector):
        return rho_or_load.theta
    return LoadVector(rho_or_load).theta


def log_weights(ss: StateSpace, theta) -> np.ndarray:
    """Unnormalized Gibbs log-weights ``<theta, n> - log n!``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return ss.states @ theta - ss.log_factorial


def log_partition(ss: StateSpace, theta) -> float:
    return float(logsumexp(log_weights(ss, theta)))


def partition_function(ss: StateSpace, rho) -> float:
    """``Z(rho) = sum_n rho^n / n!``."""
    return float(np.exp(log_partition(ss, _theta(rho))))


def _gibbs(ss: StateSpace, theta) -> np.ndarray:
    lw = log_weights(ss, theta)
    return np.exp(lw - logsumexp(lw))


def erlang_measure(ss: StateSpace, rho) -> np.ndarray:
    """Erlang distribution ``nu_rho(n) = rho^n / (n! Z(rho))``."""
    return _gibbs(ss, _theta(rho))


def blocking_probability(ss: StateSpace, rho, k: int) -> float:
    """Stationary probability that a class-``k`` arrival finds no room."""
    mask = ss.blocked(k)
    return float(erlang_measure(ss, rho)[mask].sum())


def marginal_mean(ss: StateSpace, y) -> np.ndarray:
    """Per-class mean occupancy ``[I_k, y] = sum_n n_k y_n``."""
    return np.asarray(y, dtype=float) @ ss.states


def relative_entropy(y, yref) -> float:
    """``h(y | yref)``; ``inf`` when ``y`` is not absolutely continuous."""
    y = np.asarray(y, dtype=float)
    yref = np.asarray(yref, dtype=float)
    support = y > 0
    if np.any(yref[support] <= 0):
        return float("inf")
    ys = y[support]
    return float(np.sum(ys * (np.log(ys) - np.log(yref[support]))))


def gibbs_entropy_identity(ss: StateSpace, theta, theta_ref) -> float:
    """Closed form of ``h(nu_theta | nu_theta_ref)`` through the free energy.

    Equals ``log Z(theta_ref) - log Z(theta) + <[I, nu_theta], theta - theta_ref>``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    theta_ref = np.atleast_1d(np.asarray(theta_ref, dtype=float))
    mean = marginal_mean(ss, _gibbs(ss, theta))
    return float(
        log_partition(ss, theta_ref) - log_partition(ss, theta) + mean @ (theta - theta_ref)
    )


def solve_theta_bar(
    ss: StateSpace,
    m,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    max_halvings: int = 60,
    theta0=None,
) -> LoadVector:
    """Find the Erlang load whose mean occupancy is ``m``.

    Minimizes the strictly convex ``theta -> log Z(theta) - <m, theta>`` by
    damped Newton.  The Hessian is the covariance of ``n`` under ``nu_theta``.
    Means outside (or on the boundary of) the attainable set have no
    minimizer; that shows up as :class:`ConvergenceError`.
    """
    m = np.atleast_1d(np.asarray(m, dtype=float))
    if m.shape != (ss.K,):
        raise ValueError(f"target mean must have {ss.K} components")
    theta = np.zeros(ss.K) if theta0 is None else np.array(theta0, dtype=float)
    X = ss.states.astype(float)

    def objective(th):
        return log_partition(ss, th) - m @ th

    f = objective(theta)
    for _ in range(max_iter):
        p = _gibbs(ss, theta)
        mean = p @ X
        grad = mean - m
        if np.max(np.abs(grad)) <= tol:
            return LoadVector.from_theta(_polish(ss, X, m, theta, grad))
        centered = X - mean
        hess = (centered * p[:, None]).T @ centered
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(max_halvings):
            candidate = theta - t * step
            f_new = objective(candidate)
            # flat objective near the optimum: accept round-off level changes
            if np.isfinite(f_new) and f_new <= f + 1e-14 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"line search failed; mean {m} is probably not attainable", last=theta
            )
        theta, f = candidate, f_new
    raise ConvergenceError(
        f"no convergence after {max_iter} Newton steps for mean {m}", last=theta
    )


def _polish(ss, X, m, theta, grad, steps: int = 3):
    """Extra undamped Newton steps near the root, kept only while they help."""
    best = np.max(np.abs(grad))
    for _ in range(steps):
        p = _gibbs(ss, theta)
        centered = X - p @ X
        hess = (centered * p[:, None]).T @ centered
        try:
            candidate = theta - np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        new_grad = _gibbs(ss, candidate) @ X - m
        if not np.max(np.abs(new_grad)) < best:
            break
        theta, grad, best = candidate, new_grad, np.max(np.abs(new_grad))
    return theta


def solve_rho_lambda(ss: StateSpace, lam: float) -> float:
    """Single-class load ``rho_lambda`` with ``[I, nu_rho] = lam``."""
    if ss.K != 1:
        raise ValueError("rho_lambda is defined for single-class spaces")
    top = int(ss.states.max())
    if not 0 < lam < top:
        raise ValueError(f"lam must lie in (0, {top}), got {lam}")
    return float(solve_theta_bar(ss, [lam]).rho[0])
