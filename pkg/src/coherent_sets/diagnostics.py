"""Post-clustering diagnostics: entropy, hard labels, collapse, parameter sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import ClusterState, FcmConfig, run_restarts
from .ensemble import TrajectoryEnsemble
from .geometry import GeometryConfig, pointwise, working_positions

DEFAULT_CONFIDENCE = (0.9, 0.95)


@dataclass
class CollapsePair:
    k: int
    k2: int
    distance: float
    ratio: float


@dataclass
class CollapseReport:
    pairs: list[CollapsePair]
    threshold: float
    scale: float
    ratio: float

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "data_scale": self.scale,
            "threshold": self.threshold,
            "pairs": [vars(p) for p in self.pairs],
        }


@dataclass
class ClusterDiagnostics:
    entropy: np.ndarray
    hard_labels: np.ndarray
    ml_trajectory: np.ndarray
    collapse: CollapseReport | None
    confidence_threshold_counts: dict[float, int] = field(default_factory=dict)


def entropy_field(state: ClusterState | np.ndarray) -> np.ndarray:
    """Normalised membership entropy per trajectory, in [0, 1]."""
    U = _memberships(state)
    K = U.shape[1]
    if K < 2:
        raise ValueError("entropy needs K >= 2")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(U > 0, U * np.log(U), 0.0)
    h = -terms.sum(axis=1) / np.log(K)
    # adding 0.0 turns -0.0 from one-hot rows into 0.0
    return np.clip(h, 0.0, 1.0) + 0.0


def hard_partition(state: ClusterState | np.ndarray) -> np.ndarray:
    """argmax_k u[i, k]; ties go to the lowest k."""
    return np.argmax(_memberships(state), axis=1)


def max_likelihood_trajectories(state: ClusterState | np.ndarray) -> np.ndarray:
    """argmax_i u[i, k] for each cluster; ties go to the lowest i."""
    return np.argmax(_memberships(state), axis=0)


def confidence_counts(state: ClusterState | np.ndarray, thresholds: Sequence[float] = DEFAULT_CONFIDENCE) -> dict:
    top = _memberships(state).max(axis=1)
    return {float(c): int(np.sum(top > c)) for c in thresholds}


def _memberships(state) -> np.ndarray:
    return state.memberships if isinstance(state, ClusterState) else np.asarray(state, dtype=float)


def center_distances(state: ClusterState, g: GeometryConfig, other: ClusterState | None = None) -> np.ndarray:
    """Summed slice dissimilarity between centers, over slices where both are defined.

    Returns a (K, K') matrix; ``other`` defaults to ``state`` itself.
    """
    other = state if other is None else other
    A, B = state.centers, other.centers
    both = state.center_defined[:, None, :] & other.center_defined[None, :, :]
    d = pointwise(A[:, None], B[None, :], g.angular)
    return np.sum(np.where(both, d, 0.0), axis=2)


def data_scale(e: TrajectoryEnsemble, g: GeometryConfig, sample: int = 1000, seed: int = 0) -> float:
    """Root of the largest pairwise dynamic distance within a seeded sample of trajectories."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(e.n, size=min(sample, e.n), replace=False))
    X = working_positions(e, g)[idx]
    M = e.mask[idx]
    best = 0.0
    for a in range(len(idx) - 1):
        common = M[a + 1:] & M[a][None, :]
        d = np.sum(np.where(common, pointwise(X[a + 1:], X[a][None], g.angular), 0.0), axis=1)
        ok = common.any(axis=1)
        if ok.any():
            best = max(best, float(d[ok].max()))
    return float(np.sqrt(best))


def detect_center_collapse(
    state: ClusterState,
    e: TrajectoryEnsemble,
    g: GeometryConfig,
    ratio: float = 0.05,
    sample: int = 1000,
    seed: int = 0,
) -> CollapseReport:
    """Flag center pairs closer than ``ratio`` times the sampled data diameter."""
    scale = data_scale(e, g, sample=sample, seed=seed)
    dist = np.sqrt(center_distances(state, g))
    threshold = ratio * scale
    pairs = []
    for k in range(state.K):
        for k2 in range(k + 1, state.K):
            if dist[k, k2] < threshold or dist[k, k2] == 0.0:
                rel = dist[k, k2] / scale if scale > 0 else 0.0
                pairs.append(CollapsePair(k, k2, float(dist[k, k2]), float(rel)))
    return CollapseReport(pairs=pairs, threshold=float(threshold), scale=scale, ratio=ratio)


def diagnose(
    state: ClusterState,
    e: TrajectoryEnsemble,
    g: GeometryConfig,
    collapse_ratio: float = 0.05,
    confidence: Sequence[float] = DEFAULT_CONFIDENCE,
) -> ClusterDiagnostics:
    return ClusterDiagnostics(
        entropy=entropy_field(state),
        hard_labels=hard_partition(state),
        ml_trajectory=max_likelihood_trajectories(state),
        collapse=detect_center_collapse(state, e, g, collapse_ratio),
        confidence_threshold_counts=confidence_counts(state, confidence),
    )


def match_clusters(reference: ClusterState, other: ClusterState, g: GeometryConfig) -> np.ndarray:
    """Permutation ``p`` with ``other`` cluster ``p[k]`` matched to ``reference`` cluster ``k``.

    Minimises the total summed center dissimilarity.
    """
    cost = center_distances(reference, g, other)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(reference.K, dtype=int)
    perm[rows] = cols
    return perm


def relabel(labels: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Map labels of the ``other`` run onto the reference numbering."""
    inverse = np.empty(len(perm), dtype=int)
    inverse[perm] = np.arange(len(perm))
    return inverse[np.asarray(labels)]


def run_agreement(a: ClusterState, b: ClusterState, g: GeometryConfig) -> float:
    """Fraction of trajectories with the same hard label after center-based matching."""
    perm = match_clusters(a, b, g)
    return float(np.mean(hard_partition(a) == relabel(hard_partition(b), perm)))


def label_agreement(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of agreement with reference labels after the best one-to-one relabelling."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    k = max(labels.max(), truth.max()) + 1
    overlap = np.zeros((k, k))
    np.add.at(overlap, (labels, truth), 1)
    rows, cols = linear_sum_assignment(-overlap)
    return float(overlap[rows, cols].sum() / labels.size)


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class MSweepRow:
    m: float
    ml_trajectory: np.ndarray
    t0: np.ndarray
    positions: np.ndarray
    drift: np.ndarray | None
    objective: float
    state: ClusterState


def _first_observed(e: TrajectoryEnsemble, i: int) -> int:
    return int(np.flatnonzero(e.mask[i])[0])


def m_stability_sweep(
    e: TrajectoryEnsemble,
    g: GeometryConfig,
    base_cfg: FcmConfig,
    m_values: Sequence[float],
    restarts: int = 1,
    workers: int = 1,
) -> list[MSweepRow]:
    """Track maximum-likelihood trajectories as m decreases.

    For every m the ensemble is clustered with the same seed. Each cluster's
    maximum-likelihood trajectory is recorded at its earliest observed slice.
    ``drift[k]`` is the distance (root slice dissimilarity) between that
    position and the matched cluster's position for the previous m; clusters
    are matched by minimum total center dissimilarity.
    """
    if any(m <= 1 for m in m_values):
        raise ValueError("all m values must exceed 1")
    X = working_positions(e, g)
    rows: list[MSweepRow] = []
    for m in m_values:
        state = run_restarts(e, g, replace(base_cfg, m=float(m)), restarts=restarts, workers=workers)
        ml = max_likelihood_trajectories(state)
        t0 = np.array([_first_observed(e, i) for i in ml])
        drift = None
        if rows:
            prev = rows[-1]
            perm = match_clusters(prev.state, state, g)
            ml, t0 = ml[perm], t0[perm]
            state = _permute(state, perm)
            a = X[prev.ml_trajectory, prev.t0]
            b = X[ml, t0]
            drift = np.sqrt(pointwise(a, b, g.angular))
        rows.append(MSweepRow(float(m), ml, t0, e.positions[ml, t0], drift, state.objective, state))
    return rows


def _permute(state: ClusterState, perm: np.ndarray) -> ClusterState:
    return replace(
        state,
        centers=state.centers[perm],
        center_defined=state.center_defined[perm],
        memberships=state.memberships[:, perm],
    )


@dataclass
class KSweepRow:
    K: int
    mean_entropy: float
    median_entropy: float
    max_entropy: float
    collapse: CollapseReport
    confidence: dict
    objective: float
    iterations: int
    converged: bool


def k_stability_sweep(
    e: TrajectoryEnsemble,
    g: GeometryConfig,
    base_cfg: FcmConfig,
    k_values: Sequence[int],
    collapse_ratio: float = 0.05,
    confidence: Sequence[float] = DEFAULT_CONFIDENCE,
    restarts: int = 1,
    workers: int = 1,
) -> list[KSweepRow]:
    rows = []
    for K in k_values:
        if K < 2 or K > e.n:
            raise ValueError(f"K={K} outside [2, n={e.n}]")
        state = run_restarts(e, g, replace(base_cfg, K=int(K)), restarts=restarts, workers=workers)
        h = entropy_field(state)
        rows.append(
            KSweepRow(
                K=int(K),
                mean_entropy=float(h.mean()),
                median_entropy=float(np.median(h)),
                max_entropy=float(h.max()),
                collapse=detect_center_collapse(state, e, g, collapse_ratio),
                confidence=confidence_counts(state, confidence),
                objective=state.objective,
                iterations=state.iterations,
                converged=state.converged,
            )
        )
    return rows


__all__ = [
    "ClusterDiagnostics",
    "CollapsePair",
    "CollapseReport",
    "KSweepRow",
    "MSweepRow",
    "center_distances",
    "confidence_counts",
    "data_scale",
    "detect_center_collapse",
    "diagnose",
    "entropy_field",
    "hard_partition",
    "k_stability_sweep",
    "label_agreement",
    "m_stability_sweep",
    "match_clusters",
    "max_likelihood_trajectories",
    "relabel",
    "run_agreement",
]
