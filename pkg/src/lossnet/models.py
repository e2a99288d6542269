"""The five loss-network families as empirical-measure jump processes.

Every family is described by one :class:`Transitions` table.  A transition
either moves a single node (arrival, departure) or a pair of distinct nodes
picked in order (rerouting to two nodes, a customer moving between nodes).
The same table yields

* the exact finite-``N`` rates ``Q^N`` of the process on ``Y^N``,
* the limiting jump measure ``mu_y = lim Q^N / N``,
* the jump set ``Z`` and the mean field ``m_y = sum_z z mu_y(z)``,
* the arrays consumed by the compiled simulator in :mod:`lossnet.ctmc`.

Rates as functions of node counts ``c = N y``:

=================  =============================================================
single channel     ``coef * c[src] / den``
ordered pair       ``coef * c[g] * a[n] * c[n] * (c[m] - [n == m]) / den``
=================  =============================================================

where ``c[g]`` is an optional extra count factor (saturated nodes for
rerouting) and ``den`` is one of :class:`Den`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import ClassVar

import numba
import numpy as np
import scipy.sparse as sp

from .statespace import EmpiricalVector, StateSpace, enumerate_states, marginal_mean

__all__ = [
    "Den",
    "Jump",
    "RateTable",
    "PairGroup",
    "Transitions",
    "ModelSpec",
    "Rerouting",
    "Mobile",
    "MobileSplit",
    "Closed",
    "Open",
    "FeedbackField",
    "FAMILIES",
    "make_split",
    "model_from_dict",
    "jump_set",
    "finite_rates",
    "limit_rates",
    "generator",
    "rho_of_y",
    "mean_field",
]


class Den(IntEnum):
    """Rate denominators.  ``FREE`` counts non-saturated nodes."""

    ONE = 0
    N_MINUS_1 = 1
    N_MINUS_1_N_MINUS_2 = 2
    FREE = 3
    FREE_FRACTION = 4


def _finite_den(kind: int, N: int, free: int) -> float:
    if kind == Den.ONE:
        return 1.0
    if kind == Den.N_MINUS_1:
        return N - 1.0
    if kind == Den.N_MINUS_1_N_MINUS_2:
        return (N - 1.0) * (N - 2.0)
    if kind == Den.FREE:
        return float(free)
    return free / N


def _limit_den(kind: int, free_fraction: float) -> float:
    return free_fraction if kind in (Den.FREE, Den.FREE_FRACTION) else 1.0


@dataclass(frozen=True)
class Jump:
    """Integer change of ``N y``; stored sparsely, nonzero, zero-sum."""

    support: tuple[int, ...]
    values: tuple[int, ...]
    size: int

    def __post_init__(self):
        if not self.support:
            raise ValueError("a jump must be nonzero")
        if sum(self.values) != 0:
            raise ValueError("jump components must sum to zero")

    @classmethod
    def from_dense(cls, delta) -> "Jump":
        delta = np.asarray(delta, dtype=np.int64)
        idx = np.flatnonzero(delta)
        return cls(tuple(int(i) for i in idx), tuple(int(delta[i]) for i in idx), len(delta))

    @property
    def delta(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=np.int64)
        out[list(self.support)] = self.values
        return out

    def __neg__(self) -> "Jump":
        return Jump(self.support, tuple(-v for v in self.values), self.size)


@dataclass(frozen=True)
class RateTable:
    """Nonzero rates of the jumps available at one state."""

    jumps: tuple[Jump, ...]
    rates: np.ndarray
    jump_ids: np.ndarray

    def items(self):
        return zip(self.jumps, self.rates)

    def __len__(self) -> int:
        return len(self.jumps)

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    def rate_of(self, jump: Jump) -> float:
        for j, r in self.items():
            if j == jump:
                return float(r)
        return 0.0

    def as_dict(self) -> dict[tuple, float]:
        return {tuple(j.delta): float(r) for j, r in self.items()}


@dataclass(frozen=True, eq=False)
class PairGroup:
    """Ordered pairs (source node in state n, distinct target node in state m)."""

    source_weight: np.ndarray
    source_to: np.ndarray
    target_mask: np.ndarray
    target_to: np.ndarray
    coef: float
    scale_state: int
    den: int


@dataclass(eq=False)
class Transitions:
    size: int
    single_src: np.ndarray
    single_dst: np.ndarray
    single_coef: np.ndarray
    single_den: np.ndarray
    pairs: list[PairGroup]
    saturated: int = -1

    def __post_init__(self):
        self._register_jumps()

    def _register_jumps(self):
        S = self.size
        registry: dict[tuple, int] = {}
        jumps: list[Jump] = []

        def jump_id(delta: dict[int, int]) -> int:
            items = tuple(sorted((i, v) for i, v in delta.items() if v != 0))
            if not items:
                return -1
            jid = registry.get(items)
            if jid is None:
                jid = registry[items] = len(jumps)
                jumps.append(Jump(tuple(i for i, _ in items), tuple(v for _, v in items), S))
            return jid

        self.single_jump = np.array(
            [jump_id({int(s): -1, int(d): 1}) for s, d in zip(self.single_src, self.single_dst)],
            dtype=np.int64,
        )
        self.pair_jump = np.full((len(self.pairs), S, S), -1, dtype=np.int64)
        for g, grp in enumerate(self.pairs):
            for n in np.flatnonzero(grp.source_weight):
                for m in np.flatnonzero(grp.target_mask):
                    delta: dict[int, int] = {}
                    if grp.source_to[n] >= 0:
                        delta[int(n)] = delta.get(int(n), 0) - 1
                        delta[int(grp.source_to[n])] = delta.get(int(grp.source_to[n]), 0) + 1
                    if grp.target_to[m] >= 0:
                        delta[int(m)] = delta.get(int(m), 0) - 1
                        delta[int(grp.target_to[m])] = delta.get(int(grp.target_to[m]), 0) + 1
                    self.pair_jump[g, n, m] = jump_id(delta)
        self.jumps = tuple(jumps)
        rows, cols, vals = [], [], []
        for j, jump in enumerate(jumps):
            rows.extend([j] * len(jump.support))
            cols.extend(jump.support)
            vals.extend(jump.values)
        self.Z = sp.csr_matrix((vals, (rows, cols)), shape=(len(jumps), S), dtype=float)

    def _limit_dens(self, free_fraction: float) -> np.ndarray:
        feedback = (self.single_den == Den.FREE) | (self.single_den == Den.FREE_FRACTION)
        return np.where(feedback, free_fraction, 1.0)

    @property
    def n_jumps(self) -> int:
        return len(self.jumps)

    # ----------------------------------------------------------------- rates
    def _pair_scale_limit(self, grp: PairGroup, y: np.ndarray, free: float) -> float:
        scale = grp.coef / _limit_den(grp.den, free)
        if grp.scale_state >= 0:
            scale *= y[grp.scale_state]
        return scale

    def limit_rate_vector(self, y: np.ndarray) -> np.ndarray:
        """``mu_y(z)`` for every registered jump (zeros included)."""
        free = 1.0 - y[self.saturated] if self.saturated >= 0 else 1.0
        dens = self._limit_dens(free)
        ok = self.single_jump >= 0
        out = np.zeros(self.n_jumps)
        out += np.bincount(
            self.single_jump[ok],
            weights=(self.single_coef * y[self.single_src] / dens)[ok],
            minlength=self.n_jumps,
        )
        for g, grp in enumerate(self.pairs):
            scale = self._pair_scale_limit(grp, y, free)
            R = scale * np.outer(grp.source_weight * y, y * grp.target_mask)
            ids = self.pair_jump[g]
            ok = ids >= 0
            out += np.bincount(ids[ok], weights=R[ok], minlength=self.n_jumps)
        return out

    def finite_rate_vector(self, counts: np.ndarray, N: int) -> np.ndarray:
        """``Q^N(y, y + z/N)`` for every registered jump."""
        c = counts.astype(float)
        free = N - counts[self.saturated] if self.saturated >= 0 else N
        out = np.zeros(self.n_jumps)
        for s, d, coef, den, jid in zip(
            self.single_src, self.single_dst, self.single_coef, self.single_den, self.single_jump
        ):
            q = _finite_den(den, N, free)
            if jid >= 0 and q > 0:
                out[jid] += coef * c[s] / q
        for g, grp in enumerate(self.pairs):
            q = _finite_den(grp.den, N, free)
            if q <= 0:
                continue
            scale = grp.coef / q
            if grp.scale_state >= 0:
                scale *= c[grp.scale_state]
            R = scale * np.outer(grp.source_weight * c, c * grp.target_mask)
            # a node cannot pair with itself
            R[np.diag_indices_from(R)] -= scale * grp.source_weight * c * grp.target_mask
            ids = self.pair_jump[g]
            ok = ids >= 0
            out += np.bincount(ids[ok], weights=R[ok], minlength=self.n_jumps)
        return np.clip(out, 0.0, None)

    @cached_property
    def packed(self) -> tuple:
        """Dense arrays of the table, the layout used by compiled code."""
        S, G = self.size, len(self.pairs)
        feedback = (self.single_den == Den.FREE) | (self.single_den == Den.FREE_FRACTION)
        a = np.zeros((G, S))
        src_to = np.full((G, S), -1, dtype=np.int64)
        tmask = np.zeros((G, S))
        tgt_to = np.full((G, S), -1, dtype=np.int64)
        coef = np.zeros(G)
        scale_state = np.full(G, -1, dtype=np.int64)
        pair_feedback = np.zeros(G, dtype=np.bool_)
        for g, grp in enumerate(self.pairs):
            a[g], src_to[g], tmask[g], tgt_to[g] = (
                grp.source_weight, grp.source_to, grp.target_mask, grp.target_to
            )
            coef[g], scale_state[g] = grp.coef, grp.scale_state
            pair_feedback[g] = grp.den in (Den.FREE, Den.FREE_FRACTION)
        return (
            self.single_src.astype(np.int64),
            self.single_dst.astype(np.int64),
            self.single_coef.astype(float),
            feedback,
            a, src_to, tmask, tgt_to, coef, scale_state, pair_feedback,
            int(self.saturated),
        )

    def mean_drift(self, y: np.ndarray) -> np.ndarray:
        """``sum_z z mu_y(z)`` in O(|X|) using the pair factorization."""
        return _drift(np.ascontiguousarray(y, dtype=float), *self.packed)


@numba.njit(cache=True)
def _drift(y, src, dst, coef, feedback, a, src_to, tmask, tgt_to, pcoef, pscale, pfeed, sat):
    S = y.shape[0]
    free = 1.0 - y[sat] if sat >= 0 else 1.0
    m = np.zeros(S)
    for j in range(src.shape[0]):
        r = coef[j] * y[src[j]]
        if feedback[j]:
            r /= free
        m[dst[j]] += r
        m[src[j]] -= r
    for g in range(a.shape[0]):
        scale = pcoef[g]
        if pfeed[g]:
            scale /= free
        if pscale[g] >= 0:
            scale *= y[pscale[g]]
        mass_t = 0.0
        mass_a = 0.0
        for n in range(S):
            mass_t += y[n] * tmask[g, n]
            mass_a += a[g, n] * y[n]
        for n in range(S):
            rs = scale * a[g, n] * y[n] * mass_t
            if rs != 0.0 and src_to[g, n] >= 0:
                m[src_to[g, n]] += rs
                m[n] -= rs
            rt = scale * mass_a * y[n] * tmask[g, n]
            if rt != 0.0 and tgt_to[g, n] >= 0:
                m[tgt_to[g, n]] += rt
                m[n] -= rt
    return m


def _single_table(entries):
    if not entries:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0), empty
    src, dst, coef, den = zip(*entries)
    return (
        np.array(src, dtype=np.int64),
        np.array(dst, dtype=np.int64),
        np.array(coef, dtype=float),
        np.array(den, dtype=np.int64),
    )


# --------------------------------------------------------------------- models
@dataclass(frozen=True)
class ModelSpec:
    """Base class: a loss-network family with validated parameters."""

    family: ClassVar[str] = ""
    min_N: ClassVar[int] = 1
    has_lyapunov_g: ClassVar[bool] = False

    @cached_property
    def statespace(self) -> StateSpace:
        raise NotImplementedError

    @cached_property
    def transitions(self) -> Transitions:
        raise NotImplementedError

    @property
    def K(self) -> int:
        return self.statespace.K

    @property
    def service(self) -> np.ndarray:
        """Per-class total departure rate of a customer from its node."""
        return np.ones(self.K)

    def rho_of_y(self, y) -> np.ndarray:
        raise NotImplementedError

    def check_state(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.statespace.size,):
            raise ValueError(f"state must have {self.statespace.size} components, got {y.shape}")
        return y

    def check_N(self, N: int) -> None:
        if N < self.min_N:
            raise ValueError(f"{self.family} needs N >= {self.min_N}, got {N}")

    # ------------------------------------------------------------ operations
    def jump_set(self) -> tuple[Jump, ...]:
        return self.transitions.jumps

    def limit_rate_vector(self, y) -> np.ndarray:
        return self.transitions.limit_rate_vector(self.check_state(y))

    def limit_rates(self, y) -> RateTable:
        return self._table(self.limit_rate_vector(y))

    def finite_rates(self, state: EmpiricalVector) -> RateTable:
        self.check_N(state.N)
        self.check_state(state.y)
        return self._table(self.transitions.finite_rate_vector(state.counts, state.N))

    def _table(self, vec: np.ndarray) -> RateTable:
        ids = np.flatnonzero(vec > 0)
        jumps = self.transitions.jumps
        return RateTable(tuple(jumps[i] for i in ids), vec[ids], ids)

    def mean_field(self, y) -> np.ndarray:
        return self.transitions.mean_drift(self.check_state(y))

    def generator(self, y) -> np.ndarray:
        """Rate matrix of the typical-node M/M/C/C queue driven by ``y``."""
        rho = self.rho_of_y(y)
        ss = self.statespace
        svc = self.service
        L = np.zeros((ss.size, ss.size))
        for k in range(ss.K):
            up, down = ss.up[:, k], ss.down[:, k]
            rows = np.flatnonzero(up >= 0)
            L[rows, up[rows]] += rho[k] * svc[k]
            rows = np.flatnonzero(down >= 0)
            L[rows, down[rows]] += ss.states[rows, k] * svc[k]
        L[np.diag_indices_from(L)] = -L.sum(axis=1)
        return L

    def to_dict(self) -> dict:
        raise NotImplementedError

    def lattice_ok(self, state: EmpiricalVector) -> bool:
        return True


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def _single_class(C: int) -> StateSpace:
    return enumerate_states(C, [1])


@dataclass(frozen=True)
class Rerouting(ModelSpec):
    """Blocked calls rerouted to two other nodes, accepted if both have room."""

    capacity: int
    lam: float
    family: ClassVar[str] = "rerouting"
    min_N: ClassVar[int] = 3

    def __post_init__(self):
        if int(self.capacity) < 1:
            raise ValueError("capacity must be >= 1")
        object.__setattr__(self, "capacity", int(self.capacity))
        object.__setattr__(self, "lam", _positive("lam", self.lam))

    @cached_property
    def statespace(self) -> StateSpace:
        return _single_class(self.capacity)

    @cached_property
    def transitions(self) -> Transitions:
        C, lam = self.capacity, self.lam
        entries = [(n, n + 1, lam, Den.ONE) for n in range(C)]
        entries += [(n, n - 1, float(n), Den.ONE) for n in range(1, C + 1)]
        nonfull = np.arange(C + 1) < C
        shift = np.where(nonfull, np.arange(C + 1) + 1, -1)
        grp = PairGroup(
            source_weight=nonfull.astype(float),
            source_to=shift,
            target_mask=nonfull,
            target_to=shift,
            coef=lam,
            scale_state=C,
            den=Den.N_MINUS_1_N_MINUS_2,
        )
        return Transitions(C + 1, *_single_table(entries), [grp], saturated=C)

    def rho_of_y(self, y) -> np.ndarray:
        yC = self.check_state(y)[-1]
        return np.array([self.lam * (1.0 + 2.0 * yC * (1.0 - yC))])

    def to_dict(self) -> dict:
        return {"family": self.family, "capacity": self.capacity, "lam": self.lam}


def _vector(name: str, value, K: int, *, allow_zero: bool = False) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (K,):
        raise ValueError(f"{name} needs {K} entries, got {arr.tolist()}")
    bad = arr < 0 if allow_zero else arr <= 0
    if np.any(bad) or np.any(~np.isfinite(arr)):
        kind = "nonnegative" if allow_zero else "positive"
        raise ValueError(f"{name} must be {kind}, got {arr.tolist()}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class Mobile(ModelSpec):
    """Multiclass loss network whose customers hop between nodes while served."""

    capacity: int
    requirements: tuple[int, ...]
    lam: tuple[float, ...]
    mu: tuple[float, ...]
    gamma: tuple[float, ...]
    family: ClassVar[str] = "mobile"
    min_N: ClassVar[int] = 2
    has_lyapunov_g: ClassVar[bool] = True

    def __post_init__(self):
        reqs = tuple(int(a) for a in np.atleast_1d(self.requirements))
        K = len(reqs)
        enumerate_states(int(self.capacity), reqs)  # validates C and A
        object.__setattr__(self, "capacity", int(self.capacity))
        object.__setattr__(self, "requirements", reqs)
        object.__setattr__(self, "lam", _vector("lam", self.lam, K))
        object.__setattr__(self, "mu", _vector("mu", self.mu, K))
        object.__setattr__(self, "gamma", _vector("gamma", self.gamma, K, allow_zero=True))

    @cached_property
    def statespace(self) -> StateSpace:
        return enumerate_states(self.capacity, self.requirements)

    @property
    def service(self) -> np.ndarray:
        return np.add(self.mu, self.gamma)

    def rho_of_y(self, y) -> np.ndarray:
        mean = marginal_mean(self.statespace, self.check_state(y))
        lam, gam = np.asarray(self.lam), np.asarray(self.gamma)
        return (lam + gam * mean) / self.service

    @cached_property
    def transitions(self) -> Transitions:
        ss = self.statespace
        entries, groups = [], []
        for k in range(ss.K):
            for s in range(ss.size):
                if ss.up[s, k] >= 0:
                    entries.append((s, ss.up[s, k], self.lam[k], Den.ONE))
                if ss.down[s, k] >= 0:
                    entries.append((s, ss.down[s, k], self.mu[k] * ss.states[s, k], Den.ONE))
            if self.gamma[k] > 0:
                groups.append(
                    PairGroup(
                        source_weight=ss.states[:, k].astype(float),
                        source_to=ss.down[:, k].copy(),
                        target_mask=np.ones(ss.size, dtype=bool),
                        target_to=ss.up[:, k].copy(),
                        coef=self.gamma[k],
                        scale_state=-1,
                        den=Den.N_MINUS_1,
                    )
                )
        return Transitions(ss.size, *_single_table(entries), groups)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "capacity": self.capacity,
            "requirements": list(self.requirements),
            "lam": list(self.lam),
            "mu": list(self.mu),
            "gamma": list(self.gamma),
        }


@dataclass(frozen=True)
class MobileSplit(Mobile):
    """Mobile network whose moves are split into independent departures and arrivals.

    Same mean field as :class:`Mobile`; the jump measure only contains the
    elementary jumps ``e_n - e_m`` with ``mu_y(e_n - e_m) = y_m L_y(m, n)``.
    """

    family: ClassVar[str] = "mobile_split"

    @cached_property
    def transitions(self) -> Transitions:
        ss = self.statespace
        entries, groups = [], []
        for k in range(ss.K):
            for s in range(ss.size):
                if ss.up[s, k] >= 0:
                    entries.append((s, ss.up[s, k], self.lam[k], Den.ONE))
                if ss.down[s, k] >= 0:
                    rate = (self.mu[k] + self.gamma[k]) * ss.states[s, k]
                    entries.append((s, ss.down[s, k], rate, Den.ONE))
            if self.gamma[k] > 0:
                # the arrival half of a move: the source node is left untouched
                groups.append(
                    PairGroup(
                        source_weight=ss.states[:, k].astype(float),
                        source_to=np.full(ss.size, -1, dtype=np.int64),
                        target_mask=ss.up[:, k] >= 0,
                        target_to=ss.up[:, k].copy(),
                        coef=self.gamma[k],
                        scale_state=-1,
                        den=Den.N_MINUS_1,
                    )
                )
        return Transitions(ss.size, *_single_table(entries), groups)


class _SaturationFeedback(ModelSpec):
    """Single-class models whose arrival load is ``lam / (1 - y_C)``."""

    def _validate(self):
        C = int(self.capacity)
        if C < 1:
            raise ValueError("capacity must be >= 1")
        lam = float(self.lam)
        if not 0 < lam < C:
            raise ValueError(f"lam must satisfy 0 < lam < C={C} (M < NC), got {lam}")
        object.__setattr__(self, "capacity", C)
        object.__setattr__(self, "lam", lam)

    @cached_property
    def statespace(self) -> StateSpace:
        return _single_class(self.capacity)

    def check_state(self, y) -> np.ndarray:
        y = super().check_state(y)
        if y[-1] >= 1.0:
            raise ValueError(f"{self.family} rates are undefined when every node is saturated")
        return y

    def rho_of_y(self, y) -> np.ndarray:
        y = self.check_state(y)
        return np.array([self.lam / (1.0 - y[-1])])

    def to_dict(self) -> dict:
        return {"family": self.family, "capacity": self.capacity, "lam": self.lam}


@dataclass(frozen=True)
class Closed(_SaturationFeedback):
    """Closed system: ``M`` customers hop to uniformly chosen non-saturated nodes."""

    capacity: int
    lam: float
    family: ClassVar[str] = "closed"
    min_N: ClassVar[int] = 2

    def __post_init__(self):
        self._validate()

    @cached_property
    def transitions(self) -> Transitions:
        C = self.capacity
        levels = np.arange(C + 1)
        grp = PairGroup(
            source_weight=levels.astype(float),
            source_to=levels - 1,
            target_mask=levels < C,
            target_to=np.where(levels < C, levels + 1, -1),
            coef=1.0,
            scale_state=-1,
            den=Den.FREE,
        )
        return Transitions(C + 1, *_single_table([]), [grp], saturated=C)

    def finite_rates(self, state: EmpiricalVector) -> RateTable:
        if state.counts[-1] >= state.N:
            raise ValueError("closed model is undefined when every node is saturated")
        return super().finite_rates(state)

    def lattice_ok(self, state: EmpiricalVector) -> bool:
        M = int(state.counts @ self.statespace.states[:, 0])
        return M < state.N * self.capacity


@dataclass(frozen=True)
class Open(_SaturationFeedback):
    """Open system: arrivals at rate ``lam N`` join a uniform node with free room."""

    capacity: int
    lam: float
    family: ClassVar[str] = "open"

    def __post_init__(self):
        self._validate()

    @cached_property
    def transitions(self) -> Transitions:
        C, lam = self.capacity, self.lam
        entries = [(n, n + 1, lam, Den.FREE_FRACTION) for n in range(C)]
        entries += [(n, n - 1, float(n), Den.ONE) for n in range(1, C + 1)]
        return Transitions(C + 1, *_single_table(entries), [], saturated=C)


@dataclass(frozen=True, eq=False)
class FeedbackField:
    """Mean-field dynamics ``y' = y L_y`` with loads ``rho_k = phi_k([I_k, y])``.

    No finite-``N`` process is attached; this is the setting in which the
    entropy-based Lyapunov function is stated, for arbitrary positive ``phi``.
    """

    statespace: StateSpace
    phi: tuple
    service_rates: tuple[float, ...] | None = None
    family: ClassVar[str] = "feedback"
    has_lyapunov_g: ClassVar[bool] = True

    @property
    def K(self) -> int:
        return self.statespace.K

    @property
    def service(self) -> np.ndarray:
        if self.service_rates is None:
            return np.ones(self.K)
        return np.asarray(self.service_rates, dtype=float)

    check_state = ModelSpec.check_state
    generator = ModelSpec.generator

    def rho_of_y(self, y) -> np.ndarray:
        mean = marginal_mean(self.statespace, self.check_state(y))
        return np.array([float(f(x)) for f, x in zip(self.phi, mean)])

    def mean_field(self, y) -> np.ndarray:
        y = self.check_state(y)
        return y @ self.generator(y)


FAMILIES: dict[str, type[ModelSpec]] = {
    cls.family: cls for cls in (Rerouting, Mobile, MobileSplit, Closed, Open)
}


def model_from_dict(data: dict) -> ModelSpec:
    data = dict(data)
    family = data.pop("family")
    try:
        cls = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None
    return cls(**data)


def make_split(model: ModelSpec) -> MobileSplit:
    """Same parameters, moves replaced by independent departure/arrival jumps."""
    if type(model) is not Mobile:
        raise TypeError(f"make_split needs a Mobile model, got {type(model).__name__}")
    return MobileSplit(model.capacity, model.requirements, model.lam, model.mu, model.gamma)


# functional aliases mirroring the method names
def jump_set(model: ModelSpec) -> tuple[Jump, ...]:
    return model.jump_set()


def finite_rates(model: ModelSpec, state: EmpiricalVector) -> RateTable:
    return model.finite_rates(state)


def limit_rates(model: ModelSpec, y) -> RateTable:
    return model.limit_rates(y)


def generator(model, y) -> np.ndarray:
    return model.generator(y)


def rho_of_y(model, y) -> np.ndarray:
    return model.rho_of_y(y)


def mean_field(model, y) -> np.ndarray:
    return model.mean_field(y)
