"""Upper-level master problem: minimize theta over selections z.

The feasible region is theta >= theta_lb, one affine row per optimality cut,
one exclusion row per no-good cut, and the cardinality bound 1'z <= k with z
binary. When the selection space is small enough to tabulate, master_solve
scores every selection directly in lexicographic order; otherwise it runs
branch and bound over coordinate boxes, bounding each box by every cut's
exact minimum over it (cheap because cut gradients are nonpositive), with a
second, depth-first pass extracting the lexicographically smallest optimal
z. Either way reruns are reproducible.
"""

from __future__ import annotations

import functools
import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import SelectionVector

__all__ = [
    "OPTIMALITY",
    "NO_GOOD",
    "Cut",
    "MasterState",
    "MasterNodeLimit",
    "MasterTimeout",
    "add_cut",
    "theta_at",
    "master_solve",
]

OPTIMALITY = "Optimality"
NO_GOOD = "NoGood"

_BB_TOL = 1e-9         # relative pruning and tie tolerance
_NODE_LIMIT = 100_000_000
_ENUM_LIMIT = 8_000_000   # tabulate the selection space up to this many rows
_ENUM_CHUNK = 262_144     # selections scored per matvec when tabulated
_F64_ROWS = 100_000       # exact float64 scoring up to this table size
_LUT_BITS = 13            # code bits covered by one subset-sum table
_MW_ROUNDS = 8            # weight-ascent rounds per node bound


class MasterNodeLimit(RuntimeError):
    """Node budget exhausted; carries the best incumbent found, if any."""

    def __init__(self, message: str, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


class MasterTimeout(RuntimeError):
    """Deadline passed mid-search; carries the best incumbent found, if any."""

    def __init__(self, message: str, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


@dataclass
class Cut:
    """Optimality cut theta >= intercept + grad @ (z - origin), or a no-good
    row excluding origin."""

    kind: str
    origin: SelectionVector
    intercept: float = 0.0
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in (OPTIMALITY, NO_GOOD):
            raise ValueError(f"unknown cut kind {self.kind!r}")
        self.intercept = float(self.intercept)
        if self.kind == OPTIMALITY:
            if self.grad is None:
                raise ValueError("optimality cut needs a gradient")
            self.grad = np.asarray(self.grad, dtype=float).ravel()
            if self.grad.size != self.origin.bits.size:
                raise ValueError("gradient length must match origin")
            if np.any(self.grad > 0.0):
                raise ValueError("optimality gradients must be nonpositive")
            if not (np.isfinite(self.intercept)
                    and np.all(np.isfinite(self.grad))):
                raise ValueError("cut coefficients must be finite")

    def value(self, bits: np.ndarray) -> float:
        if self.kind != OPTIMALITY:
            raise ValueError("no-good cuts have no value")
        return self.intercept + float(self.grad @ (bits - self.origin.bits))

    def excludes(self, bits: np.ndarray) -> bool:
        if self.kind != NO_GOOD:
            raise ValueError("optimality cuts exclude nothing")
        return bool(np.array_equal(bits, self.origin.bits))


@dataclass
class MasterState:
    """Accumulated cuts plus the region parameters of one outer solve."""

    n_assets: int
    k: int
    theta_lb: float
    cuts: list = field(default_factory=list)
    node_count: int = 0

    def __post_init__(self) -> None:
        self.theta_lb = float(self.theta_lb)
        if not np.isfinite(self.theta_lb):
            raise ValueError("theta_lb must be finite")
        if not 1 <= self.k <= self.n_assets:
            raise ValueError("need 1 <= k <= n_assets")
        for cut in self.cuts:
            if cut.origin.bits.size != self.n_assets:
                raise ValueError("cut dimension does not match n_assets")


def add_cut(state: MasterState, cut: Cut) -> MasterState:
    if cut.origin.bits.size != state.n_assets:
        raise ValueError("cut dimension does not match n_assets")
    state.cuts.append(cut)
    return state


def theta_at(state: MasterState, bits: np.ndarray) -> float:
    """Exact master objective at a binary point: the max of theta_lb and
    every optimality cut evaluated at bits."""
    theta = state.theta_lb
    for cut in state.cuts:
        if cut.kind == OPTIMALITY:
            theta = max(theta, cut.value(bits))
    return theta


def _selection_count(n: int, k: int) -> int:
    return sum(math.comb(n, j) for j in range(min(k, n) + 1))


_BYTE_POPCOUNT = np.array([bin(i).count("1") for i in range(256)],
                          dtype=np.uint8)


@functools.lru_cache(maxsize=8)
def _selection_codes(n: int, k: int) -> np.ndarray:
    """Integer code of every selection with at most k assets, ascending.

    Bit n-1-j of a code is coordinate j of the selection, so ascending
    numeric order is lexicographic order over selections."""
    if (1 << n) <= 1 << 26:
        codes = np.arange(1 << n, dtype=np.uint32)
        pop = np.zeros(codes.shape, dtype=np.uint8)
        for shift in range(0, n, 8):
            pop += _BYTE_POPCOUNT[(codes >> np.uint32(shift)) & np.uint32(0xFF)]
        return codes[pop <= k]
    vals = sorted(sum(1 << (n - 1 - j) for j in combo)
                  for count in range(min(k, n) + 1)
                  for combo in itertools.combinations(range(n), count))
    return np.array(vals, dtype=np.uint64)


def _decode(code: int, n: int) -> np.ndarray:
    return ((int(code) >> np.arange(n - 1, -1, -1)) & 1).astype(np.int64)


def _encode(bits: np.ndarray) -> int:
    n = bits.size
    return int(bits.astype(np.int64) @ (1 << np.arange(n - 1, -1, -1,
                                                       dtype=np.int64)))


@functools.lru_cache(maxsize=8)
def _lex_selections(n: int, k: int) -> np.ndarray:
    """Every selection with at most k assets, one int8 row per selection,
    in the same lexicographic order as _selection_codes."""
    codes = _selection_codes(n, k)
    table = np.empty((codes.size, n), dtype=np.int8)
    weights = np.arange(n - 1, -1, -1).astype(codes.dtype)
    for i0 in range(0, codes.size, _ENUM_CHUNK):
        chunk = codes[i0:i0 + _ENUM_CHUNK, None]
        table[i0:i0 + _ENUM_CHUNK] = (chunk >> weights) & codes.dtype.type(1)
    return table


@functools.lru_cache(maxsize=2)
def _gather_indices(n: int, k: int) -> tuple:
    """Per 13-bit slice of the codes: (first bit, slice width, codes sliced
    down to ready-to-gather indices)."""
    codes = _selection_codes(n, k)
    parts = []
    for lo in range(0, n, _LUT_BITS):
        width = min(_LUT_BITS, n - lo)
        mask = codes.dtype.type((1 << width) - 1)
        idx = ((codes >> codes.dtype.type(lo)) & mask).astype(np.intp)
        parts.append((lo, width, idx))
    return tuple(parts)


def _slice_sums(grad: np.ndarray, lo: int, width: int) -> np.ndarray:
    """Subset sums of the cut gradient over one slice of code bits; entry m
    sums grad over the coordinates whose slice bits are set in m."""
    n = grad.size
    lut = np.zeros(1)
    for t in range(lo, lo + width):
        lut = np.concatenate([lut, lut + grad[n - 1 - t]])
    return lut


def _enum_scores(state: MasterState) -> dict:
    """Per-state cache of every selection's theta and feasibility, updated
    incrementally: each cut is scored over the selection space exactly once.

    Small spaces are scored in float64 through the tabulated selections.
    Larger ones are scored in float32 from per-slice subset-sum tables of
    each gradient; the rounding (well under 1e-6 at portfolio scales) can
    only sway which of two near-tied selections is returned, never the
    exactness of the cut model or the monotonicity of successive solves."""
    codes = _selection_codes(state.n_assets, state.k)
    cache = getattr(state, "_enum_cache", None)
    fast = codes.size > _F64_ROWS
    if cache is None or cache["done"] > len(state.cuts):
        cache = {"theta": np.full(codes.size, state.theta_lb,
                                  dtype=np.float32 if fast else np.float64),
                 "feasible": np.ones(codes.size, dtype=bool),
                 "done": 0}
        state._enum_cache = cache
    theta, feasible = cache["theta"], cache["feasible"]
    table = None if fast else _lex_selections(state.n_assets, state.k)
    for cut in state.cuts[cache["done"]:]:
        if cut.kind == OPTIMALITY:
            lift = cut.intercept - float(cut.grad @ cut.origin.bits)
            if fast:
                vals = None
                for lo, width, idx in _gather_indices(state.n_assets,
                                                      state.k):
                    part = _slice_sums(cut.grad, lo,
                                       width).astype(np.float32)[idx]
                    vals = part if vals is None else vals + part
                vals += np.float32(lift)
                np.maximum(theta, vals, out=theta)
            else:
                for i0 in range(0, table.shape[0], _ENUM_CHUNK):
                    vals = lift + table[i0:i0 + _ENUM_CHUNK] @ cut.grad
                    np.maximum(theta[i0:i0 + vals.size], vals,
                               out=theta[i0:i0 + vals.size])
        else:
            feasible &= codes != codes.dtype.type(_encode(cut.origin.bits))
        cache["done"] += 1
    return cache


def _enumerate_solve(state: MasterState, node_limit: int,
                     deadline: float | None):
    """Exact master solve by scoring the tabulated selection space."""
    if deadline is not None and time.monotonic() > deadline:
        raise MasterTimeout("master deadline passed")
    codes = _selection_codes(state.n_assets, state.k)
    cache = _enum_scores(state)
    theta, feasible = cache["theta"], cache["feasible"]
    state.node_count += codes.size
    best = None
    if any(c.kind == NO_GOOD for c in state.cuts):
        ranked = np.where(feasible, theta, np.inf)
    else:
        ranked = theta
    theta_star = float(ranked.min())
    if np.isfinite(theta_star):
        cutoff = theta_star + _BB_TOL * (1.0 + abs(theta_star))
        pick = int(np.argmax(ranked <= cutoff))
        best = (SelectionVector(_decode(codes[pick], state.n_assets)),
                float(theta[pick]))
    if codes.size > node_limit:
        raise MasterNodeLimit(f"master node limit {node_limit} exceeded",
                              best)
    return best


class _CutTable:
    """Vectorized cut pool bounds for box nodes.

    Gradients are nonpositive, so any nonnegative unit-sum weighting lam of
    the optimality cuts bounds the node from below by lam'b plus the exact
    minimum of (lam'G)z over binary z in [lb, ub] with 1'z <= k, which is the
    sum of the aggregate's most negative free entries up to the remaining
    cardinality budget. Unit weightings give the cheap per-cut bound; when
    that fails to prune, multiplicative-weights ascent on lam tightens the
    bound toward the node's relaxation value. Every aggregate's minimizer is
    a feasible selection that doubles as an incumbent candidate.
    """

    def __init__(self, state: MasterState):
        self.rebuild(state)

    def rebuild(self, state: MasterState) -> None:
        self.state = state
        N = state.n_assets
        opt = [c for c in state.cuts if c.kind == OPTIMALITY]
        if opt:
            self.grad = np.array([c.grad for c in opt])
            self.base = np.array([c.intercept - float(c.grad @ c.origin.bits)
                                  for c in opt])
        else:
            self.grad = np.zeros((0, N))
            self.base = np.zeros(0)
        self.no_goods = [c for c in state.cuts if c.kind == NO_GOOD]

    def excluded(self, bits: np.ndarray) -> bool:
        return any(c.excludes(bits) for c in self.no_goods)

    def node_eval(self, lb: np.ndarray, ub: np.ndarray,
                  cutoff: float = np.inf):
        """Bound, witness, and branch coordinate for one box node.

        Returns (bound, bits, branch): a valid lower bound of the exact
        master objective over the node, the selection attaining the
        strongest aggregate's minimum, and the free coordinate that sways
        that aggregate the most (-1 when the node is the single point lb,
        in which case the bound is exact). A bound at or above cutoff is
        good enough for the caller, so refinement stops there.
        """
        state = self.state
        budget = max(0, state.k - int(lb.sum()))
        free = (lb < 0.5) & (ub > 0.5)
        n_free = int(free.sum())
        bits = lb.astype(np.int64)
        if self.base.size == 0:
            branch = int(np.argmax(free)) if n_free and budget else -1
            return state.theta_lb, bits, branch
        vals0 = self.base + self.grad @ lb
        take = min(budget, n_free)
        if take == 0:
            return max(state.theta_lb, float(vals0.max())), bits, -1
        fidx = np.flatnonzero(free)
        gfree = self.grad[:, fidx]
        colmin = gfree.min(axis=0)
        if float(colmin.min()) >= 0.0:
            # every cut is flat on the free coordinates, so the bound is
            # exact; still hand back a branch because the box is not a
            # single point and its witness may be excluded by a no-good
            bound = max(state.theta_lb, float(vals0.max()))
            return bound, bits, int(fidx[0])
        mins = vals0 + np.sort(gfree, axis=1)[:, :take].sum(axis=1)
        binding = int(np.argmax(mins))
        bound = float(mins[binding])
        h_best = gfree[binding]
        if bound < cutoff:
            lam = np.full(vals0.size, 1.0 / vals0.size)
            for _ in range(_MW_ROUNDS):
                h = lam @ gfree
                order = np.argsort(h, kind="stable")[:take]
                sel = order[h[order] < 0.0]
                s = vals0 + gfree[:, sel].sum(axis=1)
                phi = float(lam @ s)
                if phi > bound:
                    bound = phi
                    h_best = h
                spread = float(s.max() - s.min())
                if spread <= 0.0 or bound >= cutoff:
                    break
                lam = lam * np.exp((2.0 / spread) * (s - s.max()))
                lam = lam / lam.sum()
        bound = max(bound, state.theta_lb)
        order = np.argsort(h_best, kind="stable")[:take]
        sel = order[h_best[order] < 0.0]
        bits[fidx[sel]] = 1
        branch = int(fidx[int(np.argmin(h_best))]) if h_best.min() < 0.0 \
            else int(fidx[int(np.argmin(colmin))])
        return bound, bits, branch


class _Search:
    """Bookkeeping shared by the best-bound pass and the lex pass."""

    def __init__(self, state, node_limit, deadline):
        self.state = state
        self.node_limit = node_limit
        self.deadline = deadline
        self.nodes = 0
        self.best = np.inf
        self.best_bits = None

    def charge(self) -> None:
        self.nodes += 1
        self.state.node_count += 1
        if self.nodes > self.node_limit:
            raise MasterNodeLimit(
                f"master node limit {self.node_limit} exceeded",
                self._incumbent())
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise MasterTimeout("master deadline passed", self._incumbent())

    def _incumbent(self):
        if self.best_bits is None:
            return None
        return SelectionVector(self.best_bits.copy()), self.best


def _seed_incumbent(search: _Search) -> None:
    """Prime the incumbent with the best previously proposed selection so the
    search prunes against a realistic value instead of infinity."""
    state = search.state
    for cut in state.cuts:
        if cut.kind != OPTIMALITY:
            continue
        bits = cut.origin.bits
        if int(bits.sum()) > state.k:
            continue
        if any(c.kind == NO_GOOD and c.excludes(bits) for c in state.cuts):
            continue
        val = theta_at(state, bits)
        if val < search.best:
            search.best = val
            search.best_bits = bits.astype(np.int64)


def _propagate(lb: np.ndarray, ub: np.ndarray, k: int) -> bool:
    """Cardinality propagation in place; False when the fix is infeasible."""
    ones = int(lb.sum())
    if ones > k:
        return False
    if ones == k:
        np.copyto(ub, lb)
    return True


def _best_bound_pass(search: _Search, table: _CutTable, callback):
    """Best-bound branch and bound; returns the optimal theta or None when
    the no-good cuts exclude every selection."""
    state = search.state
    N = state.n_assets
    tick = itertools.count()
    root = (np.zeros(N), np.ones(N))
    heap = [(-np.inf, next(tick), root)]
    while heap:
        bound, _, (lb, ub) = heapq.heappop(heap)
        prune_at = search.best - _BB_TOL * (1.0 + abs(search.best))
        if bound >= prune_at:
            break
        search.charge()
        bound, bits, branch = table.node_eval(lb, ub, cutoff=prune_at)
        if bound >= search.best - _BB_TOL * (1.0 + abs(search.best)):
            continue
        if not table.excluded(bits):
            theta_z = theta_at(state, bits)
            if callback is not None:
                n_before = len(state.cuts)
                accepted = callback(SelectionVector(bits.copy()), theta_z)
                if len(state.cuts) != n_before:
                    table.rebuild(state)
                    theta_z = theta_at(state, bits)
                if not accepted:
                    if len(state.cuts) == n_before:
                        raise RuntimeError(
                            "callback rejected a node without adding a cut")
                    heapq.heappush(heap, (bound, next(tick), (lb, ub)))
                    continue
            if theta_z < search.best:
                search.best = theta_z
                search.best_bits = bits.copy()
        if branch < 0:
            continue
        lo = (lb.copy(), ub.copy())
        lo[1][branch] = 0.0
        hi = (lb.copy(), ub.copy())
        hi[0][branch] = 1.0
        for child in (lo, hi):
            heapq.heappush(heap, (bound, next(tick), child))
    return None if search.best_bits is None else search.best


def _lex_pass(search: _Search, table: _CutTable, theta_star: float):
    """Depth-first extraction of the lexicographically smallest z whose
    exact master objective matches theta_star; zero branches first."""
    state = search.state
    N, k = state.n_assets, state.k
    cutoff = theta_star + _BB_TOL * (1.0 + abs(theta_star))
    stack = [(0, np.zeros(N), np.ones(N))]
    while stack:
        depth, lb, ub = stack.pop()
        if np.any(lb > ub) or not _propagate(lb, ub, k):
            continue
        if depth == N:
            bits = lb.astype(np.int64)
            if table.excluded(bits):
                continue
            if theta_at(state, bits) <= cutoff:
                return bits
            continue
        search.charge()
        bound, _, _ = table.node_eval(lb, ub, cutoff=cutoff)
        if bound > cutoff:
            continue
        hi = (depth + 1, lb.copy(), ub.copy())
        hi[1][depth] = 1.0
        lo = (depth + 1, lb, ub)
        lo[2][depth] = 0.0
        stack.append(hi)
        stack.append(lo)
    raise RuntimeError("lex pass found no certified optimum")


def master_solve(state: MasterState, callback=None,
                 node_limit: int = _NODE_LIMIT, deadline: float | None = None):
    """Exact solve of the master problem; returns (z, theta) or None when the
    no-good cuts exclude all feasible selections.

    Small selection spaces are scored exhaustively. Otherwise node selection
    is best-bound first, branching on the free coordinate that most sways
    the cut binding at the node, and every node contributes the selection
    attaining that cut's minimum as an incumbent candidate. Ties among
    optimal z go to the lexicographically smallest. With a callback the
    search always runs single-tree branch and bound: the callback sees every
    integer-feasible candidate (z, theta) and either accepts it or injects
    at least one cut and rejects; the best accepted candidate is returned
    as-is since the cut pool is in flux.
    """
    if (callback is None
            and _selection_count(state.n_assets, state.k) <= _ENUM_LIMIT):
        return _enumerate_solve(state, node_limit, deadline)
    table = _CutTable(state)
    search = _Search(state, node_limit, deadline)
    if callback is None:
        _seed_incumbent(search)
    theta_star = _best_bound_pass(search, table, callback)
    if theta_star is None:
        return None
    if callback is not None:
        return SelectionVector(search.best_bits.copy()), search.best
    bits = _lex_pass(search, table, theta_star)
    return SelectionVector(bits), theta_at(state, bits)
