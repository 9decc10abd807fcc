"""Fuzzy c-means on space-time embedded trajectories, with missing observations.

Each trajectory contributes only the slices where it was observed: centers at
slice t average the trajectories observed at t, and the distance from a
trajectory to a center is summed over that trajectory's own observed slices.
With a complete mask this is ordinary fuzzy c-means on the flat
``num_times * d`` vectors (see :func:`fcm_full_data`).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .ensemble import AvailabilityIndex, TrajectoryEnsemble
from .geometry import DegenerateMeanError, GeometryConfig, pointwise, working_positions

log = logging.getLogger(__name__)

INITS = ("random-memberships", "kmeanspp-centers")
ZERO_DISTANCE = 1e-14
MIN_FUZZINESS = 1.0 + 1e-6
# Fixed chunk size over trajectories: reductions are summed chunk by chunk in
# index order, so results do not depend on the number of worker threads.
CHUNK = 4096


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class FcmConfig:
    K: int = 2
    m: float = 2.0
    init: str = "random-memberships"
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 300
    normalize_by_support: bool = False
    use_masses: bool = False

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ClusteringError(f"K must be an integer >= 2, got {self.K}")
        if not self.m > MIN_FUZZINESS:
            raise ClusteringError(f"fuzziness m must exceed 1 + 1e-6, got {self.m}")
        if self.init not in INITS:
            raise ClusteringError(f"unknown init {self.init!r}; expected one of {INITS}")
        if not self.tol > 0:
            raise ClusteringError("tol must be positive")
        if self.max_iter < 1:
            raise ClusteringError("max_iter must be at least 1")


@dataclass
class ClusterState:
    """Centers (in the geometry's working coordinates) and memberships.

    ``memberships[i, k]`` is the likelihood that trajectory ``i`` belongs to
    cluster ``k``.
    """

    centers: np.ndarray
    center_defined: np.ndarray
    memberships: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    stalled_slices: list[tuple[int, int]] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.memberships.shape[1]

    @property
    def objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else float("nan")


class _Workspace:
    """Per-run cache of working-space data."""

    def __init__(self, e: TrajectoryEnsemble, g: GeometryConfig, cfg: FcmConfig | None = None,
                 workers: int = 1, mask: np.ndarray | None = None):
        self.e = e
        self.g = g
        self.cfg = cfg
        self.angular = g.angular
        self.mask = e.mask if mask is None else mask
        self.X = working_positions(e, g)
        self.X[~self.mask] = 0.0
        self.support = self.mask.sum(axis=1).astype(float)
        self.workers = max(1, int(workers))
        self.bounds = [(s, min(s + CHUNK, e.n)) for s in range(0, e.n, CHUNK)]

    def _map(self, fn):
        if self.workers == 1 or len(self.bounds) == 1:
            return [fn(b) for b in self.bounds]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, self.bounds))

    def weights(self, U: np.ndarray) -> np.ndarray:
        W = U ** self.cfg.m
        if self.cfg.use_masses:
            W = W * self.e.weights[:, None]
        if self.cfg.normalize_by_support:
            W = W / self.support[:, None]
        return W

    def centers(self, U, prev_C=None, prev_defined=None):
        W = self.weights(U)
        M = self.mask.astype(float)

        def partial(b):
            s, t = b
            num = np.einsum("ik,it,itd->ktd", W[s:t], M[s:t], self.X[s:t])
            den = W[s:t].T @ M[s:t]
            return num, den

        parts = self._map(partial)
        num, den = parts[0]
        for pn, pd in parts[1:]:
            num = num + pn
            den = den + pd

        K, T = den.shape
        dw = self.X.shape[2]
        observed = self.mask.any(axis=0)
        C = np.zeros((K, T, dw)) if prev_C is None else prev_C.copy()
        defined = np.zeros((K, T), dtype=bool) if prev_defined is None else prev_defined.copy()
        stalled = []
        for k in range(K):
            for t in np.flatnonzero(observed):
                if den[k, t] > 0:
                    s = num[k, t]
                    if self.angular:
                        norm = np.linalg.norm(s)
                        if norm < 1e-12 * den[k, t]:
                            if not defined[k, t]:
                                raise DegenerateMeanError(
                                    f"center slice ({k}, {t}) is an antipodal average with no previous value"
                                )
                            stalled.append((k, t))
                            continue
                        C[k, t] = s / norm
                    else:
                        C[k, t] = s / den[k, t]
                    defined[k, t] = True
                elif not defined[k, t]:
                    # weights vanish here, so this slice does not affect the
                    # objective; any point is a minimiser
                    members = self.mask[:, t]
                    s = self.X[members, t].sum(axis=0)
                    C[k, t] = s / np.linalg.norm(s) if self.angular else s / members.sum()
                    defined[k, t] = True
                    stalled.append((k, t))
                else:
                    stalled.append((k, t))
        C[:, ~observed] = 0.0
        defined[:, ~observed] = False
        return C, defined, stalled

    def distances(self, C, defined, allow_partial=False):
        """D[i, k] summed over slices observed by i (and defined for center k)."""
        K = C.shape[0]

        def partial(b):
            s, t = b
            X = self.X[s:t]
            M = self.mask[s:t]
            D = np.empty((t - s, K))
            S = np.empty((t - s, K), dtype=int)
            for k in range(K):
                use = M & defined[k][None, :]
                D[:, k] = np.sum(np.where(use, pointwise(X, C[k][None], self.angular), 0.0), axis=1)
                S[:, k] = use.sum(axis=1)
            return D, S

        parts = self._map(partial)
        D = np.concatenate([p[0] for p in parts])
        S = np.concatenate([p[1] for p in parts])
        if not allow_partial and np.any(S != self.support[:, None]):
            raise ClusteringError("a center is undefined on a slice observed by some trajectory")
        return D, S

    def objective(self, U, D) -> float:
        return float(np.sum(self.weights(U) * D))


def membership_from_distances(D: np.ndarray, m: float) -> np.ndarray:
    """Optimal memberships for fixed distances ``D`` (n x K).

    Rows with a (near-)zero distance put all their mass, split evenly, on the
    zero-distance clusters. Otherwise ``u_k`` is proportional to
    ``D_k ** (-1 / (m - 1))``, evaluated in log space so small ``m`` cannot
    overflow.
    """
    D = np.asarray(D, dtype=float)
    U = np.empty_like(D)
    zero = D < ZERO_DISTANCE
    has_zero = zero.any(axis=1)
    if has_zero.any():
        z = zero[has_zero].astype(float)
        U[has_zero] = z / z.sum(axis=1, keepdims=True)
    rest = ~has_zero
    if rest.any():
        logits = -np.log(D[rest]) / (m - 1.0)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        U[rest] = w / w.sum(axis=1, keepdims=True)
    return U


def _check(e: TrajectoryEnsemble, g: GeometryConfig, cfg: FcmConfig) -> None:
    g.check_dimension(e.d)
    if e.n < cfg.K:
        raise ClusteringError(f"need at least K={cfg.K} trajectories, got n={e.n}")


def _kmeanspp_seeds(ws: _Workspace, K: int, rng: np.random.Generator) -> list[int]:
    n = ws.e.n
    first = int(rng.integers(n))
    seeds = [first]
    closest = np.full(n, np.inf)
    max_finite = 0.0
    for _ in range(1, K):
        j = seeds[-1]
        common = ws.mask & ws.mask[j][None, :]
        d = np.sum(np.where(common, pointwise(ws.X, ws.X[j][None], ws.angular), 0.0), axis=1)
        empty = ~common.any(axis=1)
        if (~empty).any():
            max_finite = max(max_finite, float(d[~empty].max()))
        d[empty] = max_finite
        closest = np.minimum(closest, d)
        weights = closest.copy()
        weights[seeds] = 0.0
        total = weights.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=weights / total))
        else:
            log.debug("k-means++ stalled; choosing a distinct index uniformly")
            remaining = np.setdiff1d(np.arange(n), seeds)
            nxt = int(rng.choice(remaining))
        seeds.append(nxt)
    return seeds


def initialize(e: TrajectoryEnsemble, g: GeometryConfig, cfg: FcmConfig, _ws: _Workspace | None = None) -> ClusterState:
    """Starting state: random simplex rows, or memberships to k-means++ seed trajectories."""
    _check(e, g, cfg)
    ws = _ws or _Workspace(e, g, cfg)
    rng = np.random.default_rng(cfg.seed)
    dw = ws.X.shape[2]
    if cfg.init == "random-memberships":
        U = rng.dirichlet(np.ones(cfg.K), size=e.n)
        return ClusterState(
            centers=np.zeros((cfg.K, e.num_times, dw)),
            center_defined=np.zeros((cfg.K, e.num_times), dtype=bool),
            memberships=U,
        )

    seeds = _kmeanspp_seeds(ws, cfg.K, rng)
    C = ws.X[seeds].copy()
    defined = ws.mask[seeds].copy()
    D, S = ws.distances(C, defined, allow_partial=True)
    empty = S == 0
    if empty.any():
        fill = D[~empty].max() if (~empty).any() else 1.0
        D[empty] = fill
    return ClusterState(centers=C, center_defined=defined, memberships=membership_from_distances(D, cfg.m))


def _index_mask(e: TrajectoryEnsemble, idx: AvailabilityIndex | None) -> np.ndarray:
    if idx is None:
        return e.mask
    mask = idx.to_mask()
    if mask.shape != e.mask.shape:
        raise ClusteringError("availability index does not match the ensemble")
    return mask


def update_centers(
    state: ClusterState,
    e: TrajectoryEnsemble,
    idx: AvailabilityIndex | None,
    g: GeometryConfig,
    cfg: FcmConfig,
) -> ClusterState:
    """Recompute every center slice from the trajectories observed at that slice."""
    ws = _Workspace(e, g, cfg, mask=_index_mask(e, idx))
    C, defined, stalled = ws.centers(state.memberships, state.centers, state.center_defined)
    return replace(state, centers=C, center_defined=defined, stalled_slices=stalled)


def update_memberships(state: ClusterState, e: TrajectoryEnsemble, g: GeometryConfig, cfg: FcmConfig) -> ClusterState:
    ws = _Workspace(e, g, cfg)
    D, _ = ws.distances(state.centers, state.center_defined)
    return replace(state, memberships=membership_from_distances(D, cfg.m))


def distance_matrix(state: ClusterState, e: TrajectoryEnsemble, g: GeometryConfig) -> np.ndarray:
    """Projected trajectory-to-center distances, shape (n, K)."""
    ws = _Workspace(e, g)
    return ws.distances(state.centers, state.center_defined)[0]


def evaluate_objective(state: ClusterState, e: TrajectoryEnsemble, g: GeometryConfig, cfg: FcmConfig) -> float:
    ws = _Workspace(e, g, cfg)
    D, _ = ws.distances(state.centers, state.center_defined)
    return ws.objective(state.memberships, D)


def run(
    e: TrajectoryEnsemble,
    g: GeometryConfig,
    cfg: FcmConfig,
    state: ClusterState | None = None,
    callback: Callable[[ClusterState], None] | None = None,
    workers: int = 1,
) -> ClusterState:
    """Alternate center and membership updates until the objective stops improving.

    Args:
        e: trajectories.
        g: geometry.
        cfg: clustering parameters.
        state: optional starting state (its memberships are used); defaults to
            :func:`initialize`.
        callback: called with a snapshot of the state after every iteration.
        workers: threads for the per-trajectory work. Output does not depend on it.

    Returns:
        Final state. ``converged`` is False if ``max_iter`` was hit first.
    """
    _check(e, g, cfg)
    ws = _Workspace(e, g, cfg, workers=workers)
    if state is None:
        state = initialize(e, g, cfg, _ws=ws)
    U = state.memberships
    C, defined = state.centers, state.center_defined
    history: list[float] = []
    converged = False
    stalled: list = []
    it = 0
    for it in range(1, cfg.max_iter + 1):
        C, defined, stalled = ws.centers(U, C, defined)
        D, _ = ws.distances(C, defined)
        U = membership_from_distances(D, cfg.m)
        J = ws.objective(U, D)
        history.append(J)
        if callback is not None:
            callback(ClusterState(C.copy(), defined.copy(), U.copy(), list(history), it, False, list(stalled)))
        if len(history) > 1:
            prev = history[-2]
            if (prev - J) / max(prev, np.finfo(float).tiny) < cfg.tol:
                converged = True
                break
    log.debug("fcm finished after %d iterations (converged=%s, objective=%.6g)", it, converged, history[-1])
    return ClusterState(C, defined, U, history, it, converged, stalled)


def run_restarts(
    e: TrajectoryEnsemble,
    g: GeometryConfig,
    cfg: FcmConfig,
    restarts: int = 1,
    workers: int = 1,
) -> ClusterState:
    """Best (lowest final objective) of ``restarts`` runs seeded ``seed, seed+1, ...``."""
    if restarts < 1:
        raise ClusteringError("restarts must be at least 1")
    best = None
    for r in range(restarts):
        result = run(e, g, replace(cfg, seed=cfg.seed + r), workers=workers)
        if best is None or result.objective < best.objective:
            best = result
    return best


def fcm_full_data(
    X: np.ndarray,
    U0: np.ndarray,
    m: float,
    tol: float = 1e-6,
    max_iter: int = 300,
    callback: Callable[[np.ndarray, np.ndarray, float], None] | None = None,
):
    """Plain fuzzy c-means on complete flat vectors ``X`` (n x D), Euclidean.

    Kept separate from :func:`run` so complete-data runs can be checked
    against it. Assumes no trajectory ever sits exactly on a center.

    Returns:
        ``(centers, memberships, objective_history)``.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U0, dtype=float)
    history = []
    C = None
    for _ in range(max_iter):
        W = U ** m
        C = (W.T @ X) / W.sum(axis=0)[:, None]
        D = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        ratio = (D[:, :, None] / D[:, None, :]) ** (1.0 / (m - 1.0))
        U = 1.0 / ratio.sum(axis=2)
        J = float(np.sum(U ** m * D))
        history.append(J)
        if callback is not None:
            callback(C.copy(), U.copy(), J)
        if len(history) > 1 and (history[-2] - J) / max(history[-2], np.finfo(float).tiny) < tol:
            break
    return C, U, history
