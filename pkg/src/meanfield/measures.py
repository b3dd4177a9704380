"""Weighted empirical measures and transport distances between them.

Measures are finite atom lists on R^d.  Population-level objects carry a
product split (state-before, state-after, action) so one measure can
describe the joint law of (X_0, X_1, a); the ground metric treats action
coordinates through a bounded (clipped) norm so unbounded action
embeddings cannot blow up transport costs.

Distance orders are restricted to q in {0, 1, 2}:

* q = 1, 2 on the line with a plain Euclidean ground metric: exact, via
  the quantile-coupling integral.
* q = 0 (cost 1 wedge distance) or d > 1: exact linear-program transport
  while |support(mu)| * |support(nu)| <= 4096, entropic regularization
  beyond that (log-domain Sinkhorn over a decreasing epsilon schedule,
  plan rounded back to the feasible polytope so the reported value is a
  certified upper bound; result flagged approximate).

Atoms are never merged: duplicate support points stay duplicate, so
downstream particle counts remain honest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

__all__ = [
    "EmpiricalMeasure",
    "MeasureBatch",
    "TransportInfo",
    "empirical_from_samples",
    "load_measure",
    "marginal",
    "moment",
    "save_measure",
    "wasserstein",
    "write_measure",
]

# Weight bookkeeping tolerances: renormalize quietly below RENORM_TOL,
# hard error beyond it; post-normalization sums must sit within SUM_TOL.
SUM_TOL = 1e-12
RENORM_TOL = 1e-9

# Exact LP transport while n*m is at most this; entropic afterwards.
LP_SIZE_CAP = 4096

# Epsilon schedule for entropic regularization, as multiples of the
# median pairwise ground cost.
ENTROPIC_LEVELS = (0.1, 0.01, 0.005)

DEFAULT_ACTION_CAP = 1.0


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"points must be (n,) or (n, d), got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Finitely supported probability measure sum_i w_i * delta(x_i).

    Parameters
    ----------
    points : (n, d) array
        Atom locations.  A 1-d array is treated as (n, 1).
    weights : (n,) array, optional
        Atom masses; uniform when omitted.  Must be nonnegative and sum
        to 1 within 1e-12 (sums off by at most 1e-9 are renormalized,
        anything worse is an error).
    split : (d0, d1, da), optional
        Product decomposition of the coordinates into state-before,
        state-after and action blocks; d0+d1+da must equal d.  Plain
        measures use (d, 0, 0).
    action_cap : float
        Clip level of the bounded action metric (distances between
        action blocks are min(cap, |a - a'|)).
    """

    points: np.ndarray
    weights: np.ndarray
    split: tuple[int, int, int]
    action_cap: float = DEFAULT_ACTION_CAP

    def __init__(self, points, weights=None, split=None, action_cap=DEFAULT_ACTION_CAP):
        pts = _as_points(points)
        n, d = pts.shape
        if n == 0:
            raise ValueError("empirical measure needs at least one atom")
        if not np.all(np.isfinite(pts)):
            raise ValueError("atom coordinates must be finite")

        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (n,):
                raise ValueError(f"weights shape {w.shape} does not match {n} atoms")
            if not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            total = float(np.sum(w))
            if abs(total - 1.0) > RENORM_TOL:
                raise ValueError(
                    f"weights sum to {total!r}; off by more than {RENORM_TOL}"
                )
            if abs(total - 1.0) > SUM_TOL:
                w = w / total

        if split is None:
            split = (d, 0, 0)
        split = tuple(int(s) for s in split)
        if len(split) != 3 or any(s < 0 for s in split) or sum(split) != d:
            raise ValueError(f"split {split} incompatible with dimension {d}")
        if action_cap <= 0:
            raise ValueError("action_cap must be positive")

        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "action_cap", float(action_cap))
        object.__setattr__(self, "_mean_memo", {})

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def block(self, name: str) -> np.ndarray:
        """Coordinate block 'x0' | 'x1' | 'a' as an (n, d_block) view."""
        d0, d1, da = self.split
        lo, hi = {
            "x0": (0, d0),
            "x1": (d0, d0 + d1),
            "a": (d0 + d1, d0 + d1 + da),
        }[name]
        if hi == lo:
            raise ValueError(f"measure has no '{name}' block (split={self.split})")
        return self.points[:, lo:hi]

    def marginal_mean(self, name: str) -> np.ndarray:
        """Weighted mean of one coordinate block, order-independently.

        Summation runs over value-sorted terms per coordinate, so atom
        permutations cannot change the result even in the last bit.
        Memoized per block; safe because atoms never mutate.
        """
        if name not in self._mean_memo:
            blk = self.block(name)
            terms = blk * self.weights[:, None]
            self._mean_memo[name] = np.sort(terms, axis=0).sum(axis=0)
        return self._mean_memo[name]


def empirical_from_samples(samples, weights=None, split=None,
                           action_cap=DEFAULT_ACTION_CAP) -> EmpiricalMeasure:
    """Build a measure from raw sample rows (uniform weights by default)."""
    return EmpiricalMeasure(samples, weights=weights, split=split,
                            action_cap=action_cap)


def marginal(mu: EmpiricalMeasure, name: str) -> EmpiricalMeasure:
    """Marginal of one coordinate block, as a plain (split-free) measure."""
    return EmpiricalMeasure(mu.block(name), weights=mu.weights.copy())


def moment(mu: EmpiricalMeasure, q: float) -> float:
    """q-th absolute moment sum_i w_i |x_i|^q (Euclidean norm)."""
    if q <= 0:
        raise ValueError("moment order must be positive")
    norms = np.sqrt(np.sum(mu.points**2, axis=1))
    terms = mu.weights * norms**q
    return float(np.sort(terms).sum())


# =====================================================================
# Ground metric and cost matrices
# =====================================================================

def _check_comparable(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.split != nu.split:
        raise ValueError(f"split mismatch: {mu.split} vs {nu.split}")
    if mu.action_cap != nu.action_cap:
        raise ValueError("action_cap mismatch")


def _ground_distance_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> np.ndarray:
    """Pairwise ground distances; action blocks enter through the clipped norm."""
    d0, d1, da = mu.split
    ds = d0 + d1
    x, y = mu.points, nu.points
    sq = np.zeros((x.shape[0], y.shape[0]))
    if ds > 0:
        diff = x[:, None, :ds] - y[None, :, :ds]
        sq += np.sum(diff**2, axis=2)
    if da > 0:
        adiff = x[:, None, ds:] - y[None, :, ds:]
        anorm = np.sqrt(np.sum(adiff**2, axis=2))
        sq += np.minimum(anorm, mu.action_cap) ** 2
    return np.sqrt(sq)


def _cost_matrix(dist: np.ndarray, q: int) -> np.ndarray:
    if q == 0:
        return np.minimum(1.0, dist)
    if q == 1:
        return dist
    return dist**2


# =====================================================================
# Exact solvers
# =====================================================================

def _canonical(mu: EmpiricalMeasure) -> EmpiricalMeasure:
    """Copy with atoms in lexicographic (coords, weight) order.

    Any permutation of the input atoms canonicalizes to the same arrays,
    which makes every downstream distance bitwise permutation-invariant.
    """
    keys = tuple(mu.points[:, j] for j in reversed(range(mu.dim))) + (mu.weights,)
    order = np.lexsort(keys[::-1])  # primary key = first coordinate
    return EmpiricalMeasure(mu.points[order], weights=mu.weights[order],
                            split=mu.split, action_cap=mu.action_cap)


def _measure_key(mu: EmpiricalMeasure) -> bytes:
    return mu.points.tobytes() + mu.weights.tobytes()


def _quantile_cost(mu: EmpiricalMeasure, nu: EmpiricalMeasure, q: int) -> float:
    """Exact transport cost on the line via the quantile coupling.

    Valid for convex costs (q in {1, 2}); atoms must already be sorted.
    Returns the raw cost (before the 1/(1 v q) root).
    """
    ax, aw = mu.points[:, 0], mu.weights
    bx, bw = nu.points[:, 0], nu.weights
    ca, cb = np.cumsum(aw), np.cumsum(bw)
    # Interior breakpoints of either quantile function, then mid-levels.
    bps = np.unique(np.concatenate(([0.0], ca[:-1], cb[:-1], [1.0])))
    bps = np.clip(bps, 0.0, 1.0)
    lens = np.diff(bps)
    mids = (bps[:-1] + bps[1:]) / 2.0
    ia = np.minimum(np.searchsorted(ca, mids, side="left"), len(ax) - 1)
    ib = np.minimum(np.searchsorted(cb, mids, side="left"), len(bx) - 1)
    gap = np.abs(ax[ia] - bx[ib])
    if q == 1:
        return float(np.sum(lens * gap))
    return float(np.sum(lens * gap**2))


def _lp_cost(cost: np.ndarray, r: np.ndarray, c: np.ndarray) -> float:
    """Exact optimal transport cost by linear programming (HiGHS)."""
    n, m = cost.shape
    # Row-sum and column-sum equality constraints; the last column
    # constraint is implied by the rest and dropped for rank reasons.
    data_rows = sparse.lil_matrix((n + m - 1, n * m))
    for i in range(n):
        data_rows[i, i * m:(i + 1) * m] = 1.0
    for j in range(m - 1):
        data_rows[n + j, j::m] = 1.0
    a_eq = data_rows.tocsr()
    b_eq = np.concatenate([r, c[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


# =====================================================================
# Entropic path
# =====================================================================

def _sinkhorn_plan(cost: np.ndarray, r: np.ndarray, c: np.ndarray,
                   eps: float, f: np.ndarray, g: np.ndarray,
                   max_iters: int = 5000, tol: float = 1e-10):
    """Log-domain Sinkhorn; returns (plan, f, g)."""
    log_r = np.log(np.where(r > 0, r, 1.0))
    log_c = np.log(np.where(c > 0, c, 1.0))
    for _ in range(max_iters):
        # f-update then g-update, both as stabilized log-sum-exp.
        m1 = (g[None, :] - cost) / eps
        mx = m1.max(axis=1, keepdims=True)
        f = eps * (log_r - (mx[:, 0] + np.log(np.sum(np.exp(m1 - mx), axis=1))))
        m2 = (f[:, None] - cost) / eps
        mx2 = m2.max(axis=0, keepdims=True)
        g = eps * (log_c - (mx2[0] + np.log(np.sum(np.exp(m2 - mx2), axis=0))))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        err = np.abs(plan.sum(axis=1) - r).sum() + np.abs(plan.sum(axis=0) - c).sum()
        if err < tol:
            break
    return plan, f, g


def _round_to_feasible(plan: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Project an almost-feasible plan onto exact marginals (r, c).

    Scale rows down to at most r, columns down to at most c, then refill
    the missing mass with the outer product of the deficits.  The output
    is feasible, so its cost upper-bounds the exact optimum.
    """
    row_sum = plan.sum(axis=1)
    scale_r = np.where(row_sum > 0, np.minimum(1.0, r / np.where(row_sum > 0, row_sum, 1.0)), 0.0)
    plan = plan * scale_r[:, None]
    col_sum = plan.sum(axis=0)
    scale_c = np.where(col_sum > 0, np.minimum(1.0, c / np.where(col_sum > 0, col_sum, 1.0)), 0.0)
    plan = plan * scale_c[None, :]
    err_r = r - plan.sum(axis=1)
    err_c = c - plan.sum(axis=0)
    missing = err_r.sum()
    if missing > 0:
        plan = plan + np.outer(err_r, err_c) / missing
    return plan


# =====================================================================
# Public distance entry point
# =====================================================================

@dataclass(frozen=True)
class TransportInfo:
    """How a distance value was computed."""

    method: str                      # "quantile" | "lp" | "entropic"
    approximate: bool
    epsilons: tuple = ()             # absolute epsilon values used
    level_values: tuple = ()         # rounded-plan distance per level


def wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, q: int = 1,
                return_info: bool = False):
    """Transport distance W_q between two empirical measures.

    W_q(mu, nu)^(1 v q) is the optimal cost for the ground cost
    |x-y|^q (q >= 1) or 1 wedge |x-y| (q = 0).  Orders outside
    {0, 1, 2} are rejected.

    With ``return_info=True`` returns ``(value, TransportInfo)``; the
    info records whether the entropic (approximate, upper-bound) path
    was taken.
    """
    if q not in (0, 1, 2):
        raise ValueError(f"order q must be one of 0, 1, 2; got {q!r}")
    _check_comparable(mu, nu)

    a = _canonical(mu)
    b = _canonical(nu)
    # Canonical argument order: W(mu, nu) and W(nu, mu) run identical
    # arithmetic, so symmetry is bitwise rather than approximate.
    if _measure_key(a) > _measure_key(b):
        a, b = b, a

    root = max(1, q)
    plain_line = a.dim == 1 and a.split[2] == 0
    if plain_line and q in (1, 2):
        value = _quantile_cost(a, b, q) ** (1.0 / root)
        info = TransportInfo(method="quantile", approximate=False)
        return (value, info) if return_info else value

    dist = _ground_distance_matrix(a, b)
    cost = _cost_matrix(dist, q)
    r, c = a.weights, b.weights

    if a.n_atoms * b.n_atoms <= LP_SIZE_CAP:
        value = _lp_cost(cost, r, c) ** (1.0 / root)
        if q == 0:
            # Cost is capped at 1 and the coupling carries unit mass, so
            # any excess is weight-drift rounding, not transport.
            value = min(value, 1.0)
        info = TransportInfo(method="lp", approximate=False)
        return (value, info) if return_info else value

    # Entropic fallback for large supports.  Each level's plan is
    # rounded back to the feasible polytope, so each level value is a
    # true upper bound; report the tightest.
    positive = cost[cost > 0]
    scale = float(np.median(positive)) if positive.size else 1.0
    if scale <= 0:
        scale = 1.0
    f = np.zeros(a.n_atoms)
    g = np.zeros(b.n_atoms)
    eps_values, level_values = [], []
    for level in ENTROPIC_LEVELS:
        eps = level * scale
        plan, f, g = _sinkhorn_plan(cost, r, c, eps, f, g)
        feasible = _round_to_feasible(plan, r, c)
        level_values.append(float(np.sum(feasible * cost)) ** (1.0 / root))
        eps_values.append(eps)
    value = min(level_values)
    if q == 0:
        value = min(value, 1.0)
    info = TransportInfo(method="entropic", approximate=True,
                         epsilons=tuple(eps_values),
                         level_values=tuple(level_values))
    return (value, info) if return_info else value


# =====================================================================
# Serialization
# =====================================================================

def write_measure(mu: EmpiricalMeasure, fh: IO[str]) -> None:
    """Write the text form: header line, then one 'weight coords...' row per atom.

    Floats are written shortest-round-trip, so loading reproduces the
    measure exactly.
    """
    d0, d1, da = mu.split
    fh.write(f"dim={mu.dim} split={d0},{d1},{da}\n")
    for w, row in zip(mu.weights, mu.points):
        cols = " ".join(repr(float(v)) for v in row)
        fh.write(f"{repr(float(w))} {cols}\n")


def save_measure(mu: EmpiricalMeasure, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        write_measure(mu, fh)


def load_measure(path_or_fh, action_cap: float = DEFAULT_ACTION_CAP) -> EmpiricalMeasure:
    """Read a measure written by :func:`write_measure`.

    The action metric cap is a metric parameter, not data, and is passed
    by the caller (default 1.0).
    """
    if hasattr(path_or_fh, "read"):
        lines = path_or_fh.read().splitlines()
    else:
        with open(path_or_fh, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ValueError("empty measure file")
    header = lines[0].split()
    try:
        dim = int(header[0].removeprefix("dim="))
        split = tuple(int(s) for s in header[1].removeprefix("split=").split(","))
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed measure header: {lines[0]!r}") from exc
    weights, rows = [], []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != dim + 1:
            raise ValueError(f"atom row has {len(parts)} fields, expected {dim + 1}")
        weights.append(float(parts[0]))
        rows.append([float(v) for v in parts[1:]])
    return EmpiricalMeasure(np.array(rows), weights=np.array(weights),
                            split=split, action_cap=action_cap)


# =====================================================================
# Batched view used by population solvers
# =====================================================================

class MeasureBatch:
    """B empirical measures with shared atom count, stored as one array.

    Population-state solvers iterate many replications at once; model
    dynamics only ever query summaries (marginal means), which this view
    serves vectorized and atom-order independent.

    ``sum_order`` is an optional (B, n) summation schedule per row.  By
    default summary terms are value-sorted before summation (exact
    invariance at a per-call sort); solvers that summarize the same
    populations many times pass an order derived once from a canonical
    sort of the per-atom inputs, which buys the same bitwise invariance
    under atom permutation for a cheap gather per call.
    """

    def __init__(self, points: np.ndarray, split: tuple[int, int, int],
                 weights: Optional[np.ndarray] = None,
                 sum_order: Optional[np.ndarray] = None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 3:
            raise ValueError(f"points must be (B, n, d), got {pts.shape}")
        b, n, d = pts.shape
        if sum(split) != d:
            raise ValueError(f"split {split} incompatible with dimension {d}")
        self.points = pts
        self.split = tuple(int(s) for s in split)
        if weights is None:
            self.weights = np.full((b, n), 1.0 / n)
        else:
            self.weights = np.asarray(weights, dtype=np.float64)
            if self.weights.shape != (b, n):
                raise ValueError("weights shape mismatch")
        if sum_order is not None:
            sum_order = np.asarray(sum_order, dtype=np.int64)
            if sum_order.shape != (b, n):
                raise ValueError("sum_order shape mismatch")
        self.sum_order = sum_order

    @property
    def batch_size(self) -> int:
        return self.points.shape[0]

    def block(self, name: str) -> np.ndarray:
        d0, d1, da = self.split
        lo, hi = {
            "x0": (0, d0),
            "x1": (d0, d0 + d1),
            "a": (d0 + d1, d0 + d1 + da),
        }[name]
        if hi == lo:
            raise ValueError(f"batch has no '{name}' block (split={self.split})")
        return self.points[:, :, lo:hi]

    def marginal_mean(self, name: str) -> np.ndarray:
        """(B, d_block) weighted block means, atom-order independent."""
        blk = self.block(name)
        terms = blk * self.weights[:, :, None]
        if self.sum_order is not None:
            terms = np.take_along_axis(terms, self.sum_order[:, :, None], axis=1)
            return terms.sum(axis=1)
        return np.sort(terms, axis=1).sum(axis=1)

    def measure(self, index: int, action_cap: float = DEFAULT_ACTION_CAP) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.points[index], weights=self.weights[index],
                                split=self.split, action_cap=action_cap)
