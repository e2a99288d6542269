"""Exact finite-``N`` simulation of the empirical-measure processes.

The simulator is a Gillespie loop compiled with numba.  Per-state weights
live in Fenwick trees so that one event costs ``O(log |X|)``: single-node
channels are grouped by rate denominator, and for every ordered-pair group
the source and target states are drawn in two stages with an exact
rejection step that removes self-pairs.

Uniforms come from numpy's ``PCG64`` seeded with ``SeedSequence([seed,
replica])`` and are handed to the kernel in fixed-size blocks, so a path is
a pure function of ``(model, N, y0, T, seed, replica)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
from scipy import stats

from .exceptions import PreconditionError
from .meanfield import Trajectory, classify_stability, integrate, jacobian, tangent_basis
from .models import Mobile, ModelSpec
from .statespace import EmpiricalVector

__all__ = [
    "SamplePath",
    "ExitExperiment",
    "BallRegion",
    "SlowModeRegion",
    "SublevelRegion",
    "AttractionReport",
    "OccupationSummary",
    "simulate",
    "path_vs_ode",
    "slow_mode_region",
    "default_ball_region",
    "verify_attraction",
    "run_exit_times",
    "stationary_occupation",
    "write_event_log",
    "read_event_log",
]

log = logging.getLogger(__name__)

UNIFORM_BLOCK = 1 << 16
REBUILD_EVERY = 1 << 16
DEFAULT_EVENT_CAP = 10**9
EVENT_LOG_MAGIC = b"LOSSNET-EVENTS\x00\x01"

# kernel exit codes
DONE, EXITED, ABSORBED, CAPPED, NEED_UNIFORMS, NEED_RECORD = range(6)
_STATUS = {DONE: "done", EXITED: "exited", ABSORBED: "absorbed", CAPPED: "capped"}

# region flags
R_BALL, R_PROJ, R_G = 1, 2, 4


# ------------------------------------------------------------------ kernel
@numba.njit(cache=True, nogil=True)
def _fw_add(tree, i, v):
    i += 1
    n = tree.shape[0]
    while i < n:
        tree[i] += v
        i += i & (-i)


@numba.njit(cache=True, nogil=True)
def _fw_find(tree, x):
    n = tree.shape[0] - 1
    pos = 0
    step = 1
    while step * 2 <= n:
        step *= 2
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= x:
            pos = nxt
            x -= tree[nxt]
        step //= 2
    if pos >= n:
        pos = n - 1
    return pos, x


@numba.njit(cache=True, nogil=True)
def _fw_build(tree, weights):
    tree[:] = 0.0
    n = weights.shape[0]
    for i in range(n):
        tree[i + 1] += weights[i]
        j = (i + 1) + ((i + 1) & (-(i + 1)))
        if j <= n:
            tree[j] += tree[i + 1]


@numba.njit(cache=True, nogil=True)
def _finite_den(kind, N, free):
    if kind == 0:
        return 1.0
    if kind == 1:
        return N - 1.0
    if kind == 2:
        return (N - 1.0) * (N - 2.0)
    if kind == 3:
        return float(free)
    return free / N


@numba.njit(cache=True, nogil=True)
def _class_integral(lam, gam, svc, x):
    if gam == 0.0:
        value = x * math.log(lam)
    else:
        end = lam + gam * x
        value = (end * math.log(end) - end - lam * math.log(lam) + lam) / gam
    return value - x * math.log(svc)


@numba.njit(cache=True, nogil=True)
def _xlogx_term(c, N, lf):
    if c == 0:
        return 0.0
    y = c / N
    return y * (lf + math.log(y))


@numba.njit(cache=True, nogil=True)
def _rebuild(counts, N, used_den, wden, g_a, g_tmask, single_tree, single_tot,
             src_tree, src_tot, tgt_tree, tgt_tot, sat_tot):
    S = counts.shape[0]
    w = np.empty(S)
    for d in used_den:
        for s in range(S):
            w[s] = wden[d, s] * counts[s]
        _fw_build(single_tree[d], w)
        single_tot[d] = w.sum()
    for g in range(g_a.shape[0]):
        acc = 0.0
        for s in range(S):
            w[s] = g_a[g, s] * counts[s]
            acc += w[s] * g_tmask[g, s]
        _fw_build(src_tree[g], w)
        src_tot[g] = w.sum()
        sat_tot[g] = acc
        for s in range(S):
            w[s] = g_tmask[g, s] * counts[s]
        _fw_build(tgt_tree[g], w)
        tgt_tot[g] = w.sum()


@numba.njit(cache=True, nogil=True)
def _region_reset(counts, N, flags, center, dvec, W, proj, lf, states, gmean, fstate):
    S = counts.shape[0]
    dist2 = 0.0
    for s in range(S):
        dvec[s] = counts[s] / N - center[s]
        dist2 += dvec[s] * dvec[s]
    fstate[1] = dist2
    if flags & 2:
        for r in range(W.shape[0]):
            acc = 0.0
            for s in range(S):
                acc += W[r, s] * dvec[s]
            proj[r] = acc
    if flags & 4:
        acc = 0.0
        for k in range(gmean.shape[0]):
            gmean[k] = 0.0
        for s in range(S):
            acc += _xlogx_term(counts[s], N, lf[s])
            for k in range(gmean.shape[0]):
                gmean[k] += states[s, k] * counts[s] / N
        fstate[2] = acc


@numba.njit(cache=True, nogil=True)
def _change(s, dv, counts, N, used_den, wden, g_a, g_tmask, single_tree, single_tot,
            src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
            flags, dvec, W, proj, lf, states, gmean, fstate):
    old = counts[s]
    counts[s] = old + dv
    for d in used_den:
        w = wden[d, s] * dv
        if w != 0.0:
            _fw_add(single_tree[d], s, w)
            single_tot[d] += w
    for g in range(g_a.shape[0]):
        w = g_a[g, s] * dv
        if w != 0.0:
            _fw_add(src_tree[g], s, w)
            src_tot[g] += w
            sat_tot[g] += w * g_tmask[g, s]
        if g_tmask[g, s] != 0.0:
            _fw_add(tgt_tree[g], s, float(dv))
            tgt_tot[g] += dv
    if flags != 0:
        step = dv / N
        before = dvec[s]
        dvec[s] = before + step
        fstate[1] += dvec[s] * dvec[s] - before * before
        if flags & 2:
            for r in range(W.shape[0]):
                proj[r] += W[r, s] * step
        if flags & 4:
            fstate[2] += _xlogx_term(counts[s], N, lf[s]) - _xlogx_term(old, N, lf[s])
            for k in range(gmean.shape[0]):
                gmean[k] += states[s, k] * step


@numba.njit(cache=True, nogil=True)
def _outside(flags, fstate, proj, pr2, r2, gmean, glam, ggam, gsvc, g0, gdelta):
    if flags & 1 and fstate[1] > r2:
        return True
    if flags & 2:
        acc = 0.0
        for r in range(proj.shape[0]):
            acc += proj[r] * proj[r]
        if acc > pr2:
            return True
    if flags & 4:
        g = fstate[2]
        for k in range(gmean.shape[0]):
            g -= _class_integral(glam[k], ggam[k], gsvc[k], gmean[k])
        if g - g0 > gdelta:
            return True
    return False


@numba.njit(cache=True, nogil=True)
def _kernel(
    counts, N, T_end, max_events,
    used_den, wden, sptr, s_dst, s_coef, s_den, s_jump, saturated,
    g_a, g_src_to, g_tmask, g_tgt_to, g_coef, g_scale, g_den, pair_jump,
    single_tree, single_tot, src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
    uni,
    flags, center, r2, dvec, W, proj, pr2, lf, states, gmean, glam, ggam, gsvc, g0, gdelta,
    record, times_buf, jump_buf,
    fstate, istate,
):
    # fstate: [t, dist2, xlogx]; istate: [uniform pos, events, recorded, since rebuild]
    G = g_a.shape[0]
    rates = np.zeros(5 + G)
    n_uni = uni.shape[0]
    while True:
        if istate[1] >= max_events:
            return 3
        if istate[0] + 64 > n_uni:
            return 4
        if record and istate[2] >= times_buf.shape[0]:
            return 5
        if istate[3] >= 65536:
            _rebuild(counts, N, used_den, wden, g_a, g_tmask, single_tree, single_tot,
                     src_tree, src_tot, tgt_tree, tgt_tot, sat_tot)
            if flags != 0:
                _region_reset(counts, N, flags, center, dvec, W, proj, lf, states, gmean, fstate)
            istate[3] = 0
        free = N - counts[saturated] if saturated >= 0 else N
        total = 0.0
        for d in range(5):
            rates[d] = 0.0
        for d in used_den:
            q = _finite_den(d, N, free)
            if q > 0 and single_tot[d] > 0:
                rates[d] = single_tot[d] / q
                total += rates[d]
        for g in range(G):
            rates[5 + g] = 0.0
            q = _finite_den(g_den[g], N, free)
            if q <= 0:
                continue
            scale = g_coef[g] / q
            if g_scale[g] >= 0:
                scale *= counts[g_scale[g]]
            r = scale * (src_tot[g] * tgt_tot[g] - sat_tot[g])
            if r > 1e-12 * scale:
                rates[5 + g] = r
                total += r
        if total <= 0.0:
            return 2
        u = uni[istate[0]]
        istate[0] += 1
        t_next = fstate[0] - math.log(1.0 - u) / total
        if t_next >= T_end:
            fstate[0] = T_end
            return 0
        fstate[0] = t_next
        x = uni[istate[0]] * total
        istate[0] += 1
        channel = 4 + G
        for c in range(5 + G):
            if rates[c] > 0.0:
                if x < rates[c]:
                    channel = c
                    break
                x -= rates[c]
        if rates[channel] <= 0.0:
            for c in range(5 + G - 1, -1, -1):
                if rates[c] > 0.0:
                    channel = c
                    break
        jid = -1
        if channel < 5:
            d = channel
            while True:
                target = uni[istate[0]] * single_tot[d]
                istate[0] += 1
                s, rem = _fw_find(single_tree[d], target)
                if counts[s] > 0 and wden[d, s] > 0.0:
                    break
                if istate[0] + 8 > n_uni:
                    return 4
            rem = rem / counts[s]
            j = -1
            last = -1
            for i in range(sptr[s], sptr[s + 1]):
                if s_den[i] != d:
                    continue
                last = i
                if rem < s_coef[i]:
                    j = i
                    break
                rem -= s_coef[i]
            if j < 0:
                j = last
            jid = s_jump[j]
            _change(s, -1, counts, N, used_den, wden, g_a, g_tmask, single_tree, single_tot,
                    src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
                    flags, dvec, W, proj, lf, states, gmean, fstate)
            _change(s_dst[j], 1, counts, N, used_den, wden, g_a, g_tmask, single_tree,
                    single_tot, src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
                    flags, dvec, W, proj, lf, states, gmean, fstate)
        else:
            g = channel - 5
            U = tgt_tot[g]
            # source node: weight a_n c_n (U - [n in T]) by rejection from a_n c_n
            while True:
                if istate[0] + 8 > n_uni:
                    return 4
                n, _ = _fw_find(src_tree[g], uni[istate[0]] * src_tot[g])
                istate[0] += 1
                if counts[n] == 0 or g_a[g, n] <= 0.0:
                    continue
                accept = (U - g_tmask[g, n]) / U
                u = uni[istate[0]]
                istate[0] += 1
                if u < accept:
                    break
            # target node: a different node whose state lies in the target set
            while True:
                if istate[0] + 8 > n_uni:
                    return 4
                m, _ = _fw_find(tgt_tree[g], uni[istate[0]] * tgt_tot[g])
                istate[0] += 1
                if counts[m] == 0 or g_tmask[g, m] == 0.0:
                    continue
                if m != n:
                    break
                u = uni[istate[0]]
                istate[0] += 1
                if u * counts[m] < counts[m] - 1:
                    break
            jid = pair_jump[g, n, m]
            if jid >= 0:
                if g_src_to[g, n] >= 0:
                    _change(n, -1, counts, N, used_den, wden, g_a, g_tmask, single_tree,
                            single_tot, src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
                            flags, dvec, W, proj, lf, states, gmean, fstate)
                    _change(g_src_to[g, n], 1, counts, N, used_den, wden, g_a, g_tmask,
                            single_tree, single_tot, src_tree, src_tot, tgt_tree, tgt_tot,
                            sat_tot, flags, dvec, W, proj, lf, states, gmean, fstate)
                if g_tgt_to[g, m] >= 0:
                    _change(m, -1, counts, N, used_den, wden, g_a, g_tmask, single_tree,
                            single_tot, src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
                            flags, dvec, W, proj, lf, states, gmean, fstate)
                    _change(g_tgt_to[g, m], 1, counts, N, used_den, wden, g_a, g_tmask,
                            single_tree, single_tot, src_tree, src_tot, tgt_tree, tgt_tot,
                            sat_tot, flags, dvec, W, proj, lf, states, gmean, fstate)
        if jid < 0:
            # a move that leaves the empirical measure unchanged
            continue
        istate[1] += 1
        istate[3] += 1
        if record:
            times_buf[istate[2]] = fstate[0]
            jump_buf[istate[2]] = jid
            istate[2] += 1
        if flags != 0 and _outside(flags, fstate, proj, pr2, r2, gmean, glam, ggam, gsvc,
                                   g0, gdelta):
            return 1


# ------------------------------------------------------------ compiled tables
@dataclass(frozen=True, eq=False)
class _Tables:
    S: int
    used_den: np.ndarray
    wden: np.ndarray
    sptr: np.ndarray
    s_dst: np.ndarray
    s_coef: np.ndarray
    s_den: np.ndarray
    s_jump: np.ndarray
    saturated: int
    g_a: np.ndarray
    g_src_to: np.ndarray
    g_tmask: np.ndarray
    g_tgt_to: np.ndarray
    g_coef: np.ndarray
    g_scale: np.ndarray
    g_den: np.ndarray
    pair_jump: np.ndarray


@lru_cache(maxsize=64)
def _tables(model: ModelSpec) -> _Tables:
    tr = model.transitions
    S = tr.size
    order = np.argsort(tr.single_src, kind="stable")
    src = tr.single_src[order]
    sptr = np.searchsorted(src, np.arange(S + 1)).astype(np.int64)
    s_den = tr.single_den[order].astype(np.int64)
    s_coef = tr.single_coef[order].astype(float)
    wden = np.zeros((5, S))
    np.add.at(wden, (s_den, src), s_coef)
    G = len(tr.pairs)
    g_a = np.zeros((G, S))
    g_src_to = np.full((G, S), -1, dtype=np.int64)
    g_tmask = np.zeros((G, S))
    g_tgt_to = np.full((G, S), -1, dtype=np.int64)
    for g, grp in enumerate(tr.pairs):
        g_a[g] = grp.source_weight
        g_src_to[g] = grp.source_to
        g_tmask[g] = grp.target_mask
        g_tgt_to[g] = grp.target_to
    return _Tables(
        S=S,
        used_den=np.unique(s_den).astype(np.int64),
        wden=wden,
        sptr=sptr,
        s_dst=tr.single_dst[order].astype(np.int64),
        s_coef=s_coef,
        s_den=s_den,
        s_jump=tr.single_jump[order].astype(np.int64),
        saturated=int(tr.saturated),
        g_a=g_a,
        g_src_to=g_src_to,
        g_tmask=g_tmask,
        g_tgt_to=g_tgt_to,
        g_coef=np.array([grp.coef for grp in tr.pairs], dtype=float),
        g_scale=np.array([grp.scale_state for grp in tr.pairs], dtype=np.int64),
        g_den=np.array([int(grp.den) for grp in tr.pairs], dtype=np.int64),
        pair_jump=tr.pair_jump.astype(np.int64) if G else np.zeros((0, S, S), dtype=np.int64),
    )


@dataclass
class _RegionArgs:
    flags: int
    center: np.ndarray
    r2: float
    W: np.ndarray
    pr2: float
    lf: np.ndarray
    states: np.ndarray
    glam: np.ndarray
    ggam: np.ndarray
    gsvc: np.ndarray
    g0: float
    gdelta: float

    @classmethod
    def none(cls, S: int, K: int = 1) -> "_RegionArgs":
        return cls(0, np.zeros(S), math.inf, np.zeros((0, S)), math.inf, np.zeros(S),
                   np.zeros((S, K)), np.ones(K), np.zeros(K), np.ones(K), 0.0, math.inf)


def _run(model, N, counts0, T_end, rng, *, record, max_events, region: _RegionArgs | None):
    """Drive the kernel, refilling uniforms and record buffers as needed."""
    tb = _tables(model)
    S = tb.S
    region = region or _RegionArgs.none(S)
    counts = np.array(counts0, dtype=np.int64)
    G = tb.g_a.shape[0]
    single_tree = np.zeros((5, S + 1))
    single_tot = np.zeros(5)
    src_tree = np.zeros((G, S + 1))
    src_tot = np.zeros(G)
    tgt_tree = np.zeros((G, S + 1))
    tgt_tot = np.zeros(G)
    sat_tot = np.zeros(G)
    _rebuild(counts, N, tb.used_den, tb.wden, tb.g_a, tb.g_tmask, single_tree, single_tot,
             src_tree, src_tot, tgt_tree, tgt_tot, sat_tot)
    dvec = np.zeros(S)
    proj = np.zeros(region.W.shape[0])
    gmean = np.zeros(region.states.shape[1])
    fstate = np.zeros(3)
    istate = np.zeros(4, dtype=np.int64)
    if region.flags:
        _region_reset(counts, N, region.flags, region.center, dvec, region.W, proj, region.lf,
                      region.states, gmean, fstate)
    cap = 1 << 12 if record else 0
    times_buf = np.empty(cap)
    jump_buf = np.empty(cap, dtype=np.int64)
    uni = rng.random(UNIFORM_BLOCK)
    while True:
        status = _kernel(
            counts, N, T_end, max_events,
            tb.used_den, tb.wden, tb.sptr, tb.s_dst, tb.s_coef, tb.s_den, tb.s_jump,
            tb.saturated, tb.g_a, tb.g_src_to, tb.g_tmask, tb.g_tgt_to, tb.g_coef,
            tb.g_scale, tb.g_den, tb.pair_jump,
            single_tree, single_tot, src_tree, src_tot, tgt_tree, tgt_tot, sat_tot,
            uni,
            region.flags, region.center, region.r2, dvec, region.W, proj, region.pr2,
            region.lf, region.states, gmean, region.glam, region.ggam, region.gsvc,
            region.g0, region.gdelta,
            record, times_buf, jump_buf,
            fstate, istate,
        )
        if status == NEED_UNIFORMS:
            uni = rng.random(UNIFORM_BLOCK)
            istate[0] = 0
        elif status == NEED_RECORD:
            times_buf = np.concatenate([times_buf, np.empty(len(times_buf))])
            jump_buf = np.concatenate([jump_buf, np.empty(len(jump_buf), dtype=np.int64)])
        else:
            n = int(istate[2])
            return status, float(fstate[0]), int(istate[1]), counts, times_buf[:n], jump_buf[:n]


def _rng(seed: int, replica: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(replica)])))


# ------------------------------------------------------------------ sample paths
@dataclass(eq=False)
class SamplePath:
    """Event times and jump indices of one simulated path, from ``counts0``."""

    model: ModelSpec
    N: int
    counts0: np.ndarray
    times: np.ndarray
    jumps: np.ndarray
    T: float
    seed: int
    replica: int = 0
    status: str = "done"
    final_counts: np.ndarray | None = None

    @property
    def n_events(self) -> int:
        return len(self.times)

    @property
    def absorbed(self) -> bool:
        return self.status == "absorbed"

    def iter_counts(self, chunk: int = 1 << 16):
        """Yield ``(times, counts)`` blocks; ``counts[i]`` is the state after event ``i``."""
        Z = self.model.transitions.Z
        current = self.counts0.astype(np.int64)
        for start in range(0, self.n_events, chunk):
            ids = self.jumps[start : start + chunk]
            block = np.cumsum(Z[ids].toarray(), axis=0).astype(np.int64) + current
            current = block[-1]
            yield self.times[start : start + chunk], block

    def counts_matrix(self) -> np.ndarray:
        """States ``(n_events + 1, |X|)`` starting with ``counts0``."""
        blocks = [self.counts0[None, :].astype(np.int64)]
        blocks += [b for _, b in self.iter_counts()]
        return np.concatenate(blocks)

    def state_at(self, t: float) -> EmpiricalVector:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        k = int(np.searchsorted(self.times, t, side="right"))
        Z = self.model.transitions.Z
        delta = np.asarray(Z[self.jumps[:k]].sum(axis=0)).ravel() if k else 0
        return EmpiricalVector(np.rint(self.counts0 + delta).astype(np.int64), self.N)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.counts0, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.times, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.jumps, dtype="<u4").tobytes())
        return h.hexdigest()


def simulate(
    model: ModelSpec,
    N: int,
    y0: EmpiricalVector,
    T: float,
    seed: int,
    *,
    replica: int = 0,
    max_events: int = DEFAULT_EVENT_CAP,
) -> SamplePath:
    """Gillespie simulation of ``Y^N`` on ``[0, T]`` from ``y0``."""
    model.check_N(N)
    if y0.N != N:
        raise ValueError(f"initial state has N={y0.N}, expected {N}")
    model.check_state(y0.y)
    if not model.lattice_ok(y0):
        raise PreconditionError(f"{model.family}: initial state violates M < N C")
    if not T > 0:
        raise ValueError("T must be positive")
    status, t, _, counts, times, jumps = _run(
        model, N, y0.counts, float(T), _rng(seed, replica), record=True,
        max_events=max_events, region=None,
    )
    if status == ABSORBED:
        log.warning("path absorbed at t=%.6g: total rate is zero", t)
    return SamplePath(model, N, y0.counts.copy(), times.copy(), jumps.astype(np.uint32),
                      float(T), int(seed), int(replica), _STATUS[status], counts.copy())


def path_vs_ode(path: SamplePath, traj: Trajectory) -> float:
    """``sup_t |Y^N(t) - y(t)|_inf`` over jump times (both sides of each jump)."""
    if traj.times[-1] < path.T * (1 - 1e-12) or traj.times[0] > 0:
        raise ValueError("trajectory does not cover the path's time range")
    y0 = path.counts0 / path.N
    if np.max(np.abs(y0 - traj.points[0])) > 1.0 / path.N + 1e-12:
        raise ValueError("path and trajectory start more than 1/N apart")
    worst = float(np.max(np.abs(y0 - traj.points[0])))
    before = y0
    for times, block in path.iter_counts():
        ys = block / path.N
        ode = traj.sample(times)
        prev = np.vstack([before[None, :], ys[:-1]])
        worst = max(worst, float(np.abs(ys - ode).max()), float(np.abs(prev - ode).max()))
        before = ys[-1]
    end = traj.sample([path.T])[0]
    return max(worst, float(np.abs(before - end).max()))


# ------------------------------------------------------------------- event log
def write_event_log(path: SamplePath, file) -> None:
    """Binary log: magic, header length, JSON header, then ``(<f8, <u4)`` records."""
    header = json.dumps(
        {
            "model": path.model.to_dict(),
            "N": path.N,
            "T": path.T,
            "seed": path.seed,
            "replica": path.replica,
            "status": path.status,
            "counts0": [int(c) for c in path.counts0],
            "events": path.n_events,
        },
        sort_keys=True,
    ).encode()
    records = np.empty(path.n_events, dtype=[("t", "<f8"), ("j", "<u4")])
    records["t"] = path.times
    records["j"] = path.jumps
    with open(file, "wb") as fh:
        fh.write(EVENT_LOG_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(records.tobytes())


def read_event_log(file) -> SamplePath:
    from .models import model_from_dict

    with open(file, "rb") as fh:
        if fh.read(len(EVENT_LOG_MAGIC)) != EVENT_LOG_MAGIC:
            raise ValueError(f"{file} is not an event log")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size))
        records = np.frombuffer(fh.read(), dtype=[("t", "<f8"), ("j", "<u4")])
    if len(records) != header["events"]:
        raise ValueError("event log is truncated")
    return SamplePath(
        model_from_dict(header["model"]), header["N"], np.array(header["counts0"]),
        records["t"].copy(), records["j"].copy(), header["T"], header["seed"],
        header["replica"], header["status"],
    )


# --------------------------------------------------------------------- regions
def _boundary_point(model, region, rng, attempts: int = 100) -> np.ndarray:
    """A point with ``region.level == 1`` reached along a positivity-preserving ray.

    Directions combine a random tilt of the equilibrium loads (moving along
    the Erlang family) with multiplicative noise ``y*_n (xi_n - <y*, xi>)``.
    """
    from .statespace import erlang_measure

    y_star = region.center
    ss = model.statespace
    rho = np.asarray(model.rho_of_y(y_star), dtype=float)
    for _ in range(attempts):
        tilt = rho * np.exp(0.2 * rng.standard_normal(ss.K))
        xi = rng.standard_normal(ss.size)
        d = (erlang_measure(ss, tilt) - y_star) + 0.5 * rng.random() * y_star * (xi - y_star @ xi)
        neg = d < 0
        s_max = float(np.min(y_star[neg] / -d[neg])) * (1 - 1e-9) if neg.any() else 1e6
        if region.level(y_star + s_max * d) <= 1.0:
            continue
        lo, hi = 0.0, s_max
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if region.level(y_star + mid * d) > 1.0:
                hi = mid
            else:
                lo = mid
        y = y_star + lo * d
        return np.clip(y, 0.0, None) / np.clip(y, 0.0, None).sum()
    raise PreconditionError("could not place a sample on the region boundary")


@dataclass(frozen=True, eq=False)
class BallRegion:
    """Euclidean ball ``|y - center|_2 <= radius``."""

    center: np.ndarray
    radius: float
    kind = "ball"

    def level(self, y) -> float:
        return float(np.linalg.norm(np.asarray(y) - self.center)) / self.radius

    def kernel_args(self, model) -> _RegionArgs:
        args = _RegionArgs.none(len(self.center))
        args.flags, args.center, args.r2 = R_BALL, self.center, self.radius**2
        return args

    def describe(self) -> dict:
        return {"kind": self.kind, "radius": self.radius}


@dataclass(frozen=True, eq=False)
class SlowModeRegion:
    """Ball of radius ``radius`` in the coordinates ``W (y - center)``.

    Rows of ``W`` are left eigenvectors of the linearized flow for its slowest
    modes, normalized against the matching right eigenvectors (columns of
    ``V``).  Under the linear dynamics each coordinate decays on its own, so
    the region is forward invariant to first order.
    """

    center: np.ndarray
    W: np.ndarray
    V: np.ndarray
    radius: float
    kind = "slow_mode"

    def level(self, y) -> float:
        return float(np.linalg.norm(self.W @ (np.asarray(y) - self.center))) / self.radius

    def kernel_args(self, model) -> _RegionArgs:
        args = _RegionArgs.none(len(self.center))
        args.flags, args.center, args.W, args.pr2 = R_PROJ, self.center, self.W, self.radius**2
        return args

    def describe(self) -> dict:
        return {"kind": self.kind, "radius": self.radius, "modes": int(self.W.shape[0])}


@dataclass(frozen=True, eq=False)
class SublevelRegion:
    """``{g(y) - g(center) <= delta}`` intersected with a Euclidean cap ball."""

    model: Mobile
    center: np.ndarray
    delta: float
    cap: float
    kind = "g_sublevel"

    def _g(self, y) -> float:
        from .meanfield import lyapunov_g

        return lyapunov_g(self.model, y)

    def level(self, y) -> float:
        y = np.asarray(y)
        g = (self._g(y) - self._g(self.center)) / self.delta
        return max(g, float(np.linalg.norm(y - self.center)) / self.cap)

    def kernel_args(self, model) -> _RegionArgs:
        ss = self.model.statespace
        args = _RegionArgs.none(ss.size, ss.K)
        args.flags = R_BALL | R_G
        args.center, args.r2 = self.center, self.cap**2
        args.lf, args.states = ss.log_factorial, ss.states.astype(float)
        args.glam = np.asarray(self.model.lam, dtype=float)
        args.ggam = np.asarray(self.model.gamma, dtype=float)
        args.gsvc = np.asarray(self.model.service, dtype=float)
        args.g0, args.gdelta = self._g(self.center), self.delta
        return args

    def describe(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "cap": self.cap}


def slow_mode_region(model, y_star, radius: float, modes: int = 1) -> SlowModeRegion:
    """Region bounding the projection of ``y - y*`` on the ``modes`` slowest modes."""
    import scipy.linalg as sl

    B = tangent_basis(model)
    J = B.T @ jacobian(model, y_star) @ B
    ev, left, right = sl.eig(J, left=True, right=True)
    order = np.argsort(-ev.real)[:modes]
    if np.any(np.abs(ev[order].imag) > 1e-10):
        raise PreconditionError("slowest modes are oscillatory; use a ball region")
    W = (B @ left[:, order].real).T
    V = B @ right[:, order].real
    W = np.linalg.solve((W @ V).T, W)  # biorthonormal: W V = I
    return SlowModeRegion(np.asarray(y_star, dtype=float), W, V, float(radius))


@dataclass
class AttractionReport:
    ok: bool
    samples: int
    max_level: float
    max_final_distance: float
    horizon: float


def verify_attraction(
    model, region, *, samples: int = 100, horizon: float | None = None, seed: int = 0,
    settle: float = 1e-6, slack: float = 1e-6,
) -> AttractionReport:
    """Integrate the flow from boundary points and require convergence inside the region.

    Each run is integrated in chunks of ``5 / |leading eigenvalue|`` until it
    is within ``settle`` of the center (sup norm) or ``horizon`` is spent.
    """
    y_star = region.center
    lead = classify_stability(model, y_star).leading
    if lead >= 0:
        return AttractionReport(False, 0, math.inf, math.inf, 0.0)
    chunk = 5.0 / abs(lead)
    if horizon is None:
        horizon = 40.0 / abs(lead)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA77]))
    worst_level, worst_final, ok = 0.0, 0.0, True
    for _ in range(samples):
        y = _boundary_point(model, region, rng)
        start, peak, spent = region.level(y), 0.0, 0.0
        while True:
            traj = integrate(model, y, chunk, tol=1e-9)
            peak = max(peak, max(region.level(p) for p in traj.points[1:]))
            y, spent = traj.final, spent + chunk
            final = float(np.max(np.abs(y - y_star)))
            if final <= settle or spent >= horizon:
                break
        worst_level = max(worst_level, peak)
        worst_final = max(worst_final, final)
        if peak > max(1.0, start) + slack or final > settle:
            ok = False
    return AttractionReport(ok, samples, worst_level, worst_final, float(horizon))


def default_ball_region(model, y_star, others, *, shrink: float = 0.7, attempts: int = 12,
                        samples: int = 100, seed: int = 0) -> BallRegion:
    """Half the distance to the nearest other equilibrium, shrunk until attracted."""
    if not len(others):
        raise PreconditionError("no other equilibrium to size the ball against")
    radius = 0.5 * min(float(np.linalg.norm(np.asarray(o) - y_star)) for o in others)
    for _ in range(attempts):
        region = BallRegion(np.asarray(y_star, dtype=float), radius)
        if verify_attraction(model, region, samples=samples, seed=seed).ok:
            return region
        radius *= shrink
    raise PreconditionError("no attracted ball found; the flow is not contracting in |.|_2")


# ------------------------------------------------------------------ exit times
@dataclass
class ExitExperiment:
    region: dict
    Ns: list[int]
    replicas: int
    times: dict[int, np.ndarray]
    censored: dict[int, np.ndarray]
    events: dict[int, np.ndarray]
    seed: int
    fit: dict | None = None
    attraction: AttractionReport | None = None
    warnings: list[str] = field(default_factory=list)

    def mean(self, N: int) -> float:
        return float(self.times[N][~self.censored[N]].mean())

    def median(self, N: int) -> float:
        return float(np.median(self.times[N][~self.censored[N]]))

    def summary_rows(self) -> list[dict]:
        rows = []
        for N in self.Ns:
            ok = ~self.censored[N]
            rows.append(
                {
                    "N": N,
                    "replicas": self.replicas,
                    "censored": int((~ok).sum()),
                    "mean_exit_time": repr(self.mean(N)) if ok.any() else "",
                    "median_exit_time": repr(self.median(N)) if ok.any() else "",
                    "mean_events": repr(float(self.events[N].mean())),
                }
            )
        return rows

    def replica_rows(self) -> list[dict]:
        return [
            {"N": N, "replica": r, "exit_time": repr(float(t)), "censored": int(c)}
            for N in self.Ns
            for r, (t, c) in enumerate(zip(self.times[N], self.censored[N]))
        ]


def _fit(Ns, means) -> dict | None:
    if len(Ns) < 3:
        return None
    res = stats.linregress(np.asarray(Ns, dtype=float), np.log(means))
    return {"slope": float(res.slope), "intercept": float(res.intercept),
            "r2": float(res.rvalue**2), "points": len(Ns)}


def run_exit_times(
    model,
    y_star,
    region,
    Ns,
    replicas: int,
    seed: int,
    *,
    event_cap: int = DEFAULT_EVENT_CAP,
    threads: int = 1,
    check_samples: int = 100,
    check: bool = True,
) -> ExitExperiment:
    """Monte Carlo first-exit times from ``region`` started at the lattice point nearest ``y*``."""
    y_star = np.asarray(y_star, dtype=float)
    if classify_stability(model, y_star).tag != "stable":
        raise PreconditionError("exit times need a stable equilibrium")
    report = None
    if check:
        report = verify_attraction(model, region, samples=check_samples, seed=seed)
        if not report.ok:
            raise PreconditionError(
                f"region is not attracted to y*: max level {report.max_level:.4g}, "
                f"final distance {report.max_final_distance:.3g}"
            )
    args = region.kernel_args(model)
    Ns = [int(N) for N in Ns]
    times, censored, events, warnings = {}, {}, {}, []
    for N in Ns:
        model.check_N(N)
        start = EmpiricalVector.nearest(y_star, N)
        if region.level(start.y) > 1.0:
            raise PreconditionError(f"N={N}: nearest lattice point lies outside the region")

        def one(r, N=N, start=start):
            status, t, n_ev, *_ = _run(model, N, start.counts, math.inf, _rng(seed, N * 1_000_003 + r),
                                       record=False, max_events=event_cap, region=args)
            return t, status != EXITED, n_ev

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                out = list(pool.map(one, range(replicas)))
        else:
            out = [one(r) for r in range(replicas)]
        times[N] = np.array([o[0] for o in out])
        censored[N] = np.array([o[1] for o in out])
        events[N] = np.array([o[2] for o in out])
        if censored[N].any():
            msg = f"N={N}: {int(censored[N].sum())} replicas hit the event cap"
            log.warning(msg)
            warnings.append(msg)
    exp = ExitExperiment(region.describe(), Ns, replicas, times, censored, events, seed,
                         attraction=report, warnings=warnings)
    usable = [N for N in Ns if (~censored[N]).any()]
    exp.fit = _fit(usable, [exp.mean(N) for N in usable])
    return exp


# ------------------------------------------------------------------ occupation
@dataclass
class OccupationSummary:
    N: int
    burnin: float
    T: float
    width: float
    cells: np.ndarray
    mass: np.ndarray
    reference: np.ndarray | None
    mass_near_reference: float | None
    tolerance: float

    @property
    def modal_cell(self) -> np.ndarray:
        return self.cells[int(np.argmax(self.mass))]

    def cell_contains(self, cell, y) -> bool:
        lo = cell * self.width
        return bool(np.all((y >= lo - 1e-12) & (y < lo + self.width + 1e-12)))


def stationary_occupation(
    model, N: int, burnin: float, T: float, seed: int, *, y0: EmpiricalVector | None = None,
    width: float = 0.1, reference=None, tolerance: float = 0.1,
) -> OccupationSummary:
    """Time-weighted occupation of a grid partition of the simplex after burn-in.

    ``reference`` defaults to the equilibrium when it is unique; the summary
    then also carries the mass within ``tolerance`` (sup norm) of it.
    """
    if T <= burnin:
        raise ValueError(f"T={T} must exceed the burn-in {burnin}")
    model.check_N(N)
    ss = model.statespace
    if reference is None and hasattr(model, "lam") and model.family in ("open", "closed"):
        from .statespace import erlang_measure, solve_rho_lambda

        reference = erlang_measure(ss, solve_rho_lambda(ss, model.lam))
    if y0 is None:
        if model.family == "closed":
            # M = floor(lam N) customers spread as evenly as possible
            M = int(math.floor(model.lam * N))
            counts = np.zeros(ss.size, dtype=np.int64)
            base, extra = divmod(M, N)
            counts[base] += N - extra
            if extra:
                counts[base + 1] += extra
            y0 = EmpiricalVector(counts, N)
        else:
            y0 = EmpiricalVector.nearest(np.eye(ss.size)[0], N)
    path = simulate(model, N, y0, T, seed)
    cells: dict[tuple, float] = {}
    near = 0.0
    prev_t, prev_y = 0.0, y0.y
    edges = np.append(path.times, T)

    def accumulate(t0, t1, ys):
        nonlocal near
        lo = np.maximum(t0, burnin)
        dur = np.clip(t1 - lo, 0.0, None)
        keys = np.floor(ys / width + 1e-12).astype(np.int64)
        for key, d in zip(map(tuple, keys), dur):
            if d > 0:
                cells[key] = cells.get(key, 0.0) + d
        if reference is not None:
            close = np.max(np.abs(ys - reference), axis=1) <= tolerance
            near += float(dur[close].sum())

    i = 0
    for times, block in path.iter_counts():
        n = len(times)
        ys = np.vstack([prev_y[None, :], block[:-1] / N])
        accumulate(np.concatenate([[prev_t], times[:-1]]), times, ys)
        prev_t, prev_y = times[-1], block[-1] / N
        i += n
    accumulate(np.array([prev_t]), np.array([edges[-1]]), prev_y[None, :])
    keys = sorted(cells)
    mass = np.array([cells[k] for k in keys]) / (T - burnin)
    return OccupationSummary(
        N, float(burnin), float(T), float(width), np.array(keys, dtype=np.int64), mass,
        None if reference is None else np.asarray(reference),
        None if reference is None else near / (T - burnin), float(tolerance),
    )
