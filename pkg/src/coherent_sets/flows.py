"""Synthetic systems with known coherent structure.

* ``interval-map-3``: a circle map that cyclically permutes the thirds of
  [0, 1) while mixing each third internally.
* ``double-gyre``: periodically forced two-cell flow on [0, 2] x [0, 1].
* ``transitory-double-gyre``: two-cell pattern rotated by 90 degrees over
  t in [0, 1], on the unit square.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .ensemble import TrajectoryEnsemble

FLOW_KINDS = ("interval-map-3", "double-gyre", "transitory-double-gyre")
SEEDINGS = ("uniform-random", "uniform-grid")

DOMAINS = {
    "interval-map-3": ((0.0, 1.0),),
    "double-gyre": ((0.0, 2.0), (0.0, 1.0)),
    "transitory-double-gyre": ((0.0, 1.0), (0.0, 1.0)),
}


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowSpec:
    kind: str
    n: int
    t_end: float
    seeding: str = "uniform-random"
    seed: int = 0
    output_stride: float | None = None
    integrator_step: float = 1e-2
    A: float = 0.25
    delta: float = 0.25
    omega: float = 2.0 * math.pi

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise FlowError(f"unknown flow {self.kind!r}; expected one of {FLOW_KINDS}")
        if self.seeding not in SEEDINGS:
            raise FlowError(f"unknown seeding {self.seeding!r}; expected one of {SEEDINGS}")
        if self.n < 1:
            raise FlowError("n must be at least 1")
        for name in ("t_end", "integrator_step", "A", "delta", "omega"):
            if not math.isfinite(getattr(self, name)):
                raise FlowError(f"{name} must be finite")
        if self.output_stride is None:
            object.__setattr__(self, "output_stride", 1.0 if self.kind == "interval-map-3" else 0.1)
        if self.t_end < 0 or self.output_stride <= 0 or self.integrator_step <= 0:
            raise FlowError("t_end must be nonnegative and stride/step positive")
        if self.kind == "interval-map-3":
            if self.t_end != int(self.t_end) or self.output_stride != 1:
                raise FlowError("the interval map needs an integer iterate count and unit stride")
        else:
            _divides(self.output_stride, self.t_end, "output_stride", "t_end")
            _divides(self.integrator_step, self.output_stride, "integrator_step", "output_stride")

    @property
    def num_samples(self) -> int:
        return int(round(self.t_end / self.output_stride)) + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _divides(step: float, span: float, step_name: str, span_name: str) -> int:
    count = round(span / step)
    if abs(count * step - span) > 1e-9:
        raise FlowError(f"{step_name}={step} does not divide {span_name}={span}")
    return int(count)


# ----------------------------------------------------------------------------
# interval map


def interval_map_step(x):
    """One iterate of the three-interval circle map.

    Each third ``[j/3, (j+1)/3)`` is stretched by 3 and laid over the next
    third. Inputs are wrapped into [0, 1); boundary points take the branch on
    their right.
    """
    x = np.mod(np.asarray(x, dtype=float), 1.0)
    x = np.where(x >= 1.0, 0.0, x)
    branch = np.minimum(np.floor(3.0 * x), 2.0)
    # 3x mod 1/3, written as (9x mod 1)/3 to avoid dividing by an inexact 1/3
    within = np.mod(9.0 * x, 1.0) / 3.0
    out = within + np.mod(branch + 1.0, 3.0) / 3.0
    out = np.where(out >= 1.0, out - 1.0, out)
    return out if out.ndim else float(out)


def interval_labels(x) -> np.ndarray:
    """Index of the third of [0, 1) that contains each point."""
    x = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.minimum(np.floor(3.0 * x), 2).astype(int)


# ----------------------------------------------------------------------------
# velocity fields


def double_gyre_velocity(x, y, t, A=0.25, delta=0.25, omega=2.0 * math.pi):
    eps = delta * np.sin(omega * t)
    f = eps * x * x + (1.0 - 2.0 * eps) * x
    dfdx = 2.0 * eps * x + 1.0 - 2.0 * eps
    u = -np.pi * A * np.sin(np.pi * f) * np.cos(np.pi * y)
    v = np.pi * A * np.cos(np.pi * f) * np.sin(np.pi * y) * dfdx
    return u, v


def transition(t):
    """Smooth switch from 0 (t <= 0) to 1 (t >= 1): ``t^2 (3 - 2t)``."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    s = t * t * (3.0 - 2.0 * t)
    return s if s.ndim else float(s)


def transitory_double_gyre_velocity(x, y, t):
    s = transition(t)
    px, py = np.pi * x, np.pi * y
    # psi_P = sin(2 pi x) sin(pi y), psi_F = sin(pi x) sin(2 pi y)
    dpsiP_dx = 2.0 * np.pi * np.cos(2.0 * px) * np.sin(py)
    dpsiP_dy = np.pi * np.sin(2.0 * px) * np.cos(py)
    dpsiF_dx = np.pi * np.cos(px) * np.sin(2.0 * py)
    dpsiF_dy = 2.0 * np.pi * np.sin(px) * np.cos(2.0 * py)
    u = -((1.0 - s) * dpsiP_dy + s * dpsiF_dy)
    v = (1.0 - s) * dpsiP_dx + s * dpsiF_dx
    return u, v


def rk4_sample(velocity, xy0: np.ndarray, t_end: float, step: float, stride: float, t0: float = 0.0) -> np.ndarray:
    """Fixed-step RK4 for a planar field, sampled every ``stride``.

    Args:
        velocity: ``f(x, y, t) -> (u, v)``, vectorised over points.
        xy0: initial points, shape (n, 2).
        t_end: integration time.
        step: RK4 step; must divide ``stride``.
        stride: output spacing; must divide ``t_end``.

    Returns:
        Array (n, num_samples, 2), sample 0 being ``xy0``.
    """
    n_out = _divides(stride, t_end, "stride", "t_end") if t_end > 0 else 0
    per = _divides(step, stride, "step", "stride")
    x = np.array(xy0[:, 0], dtype=float)
    y = np.array(xy0[:, 1], dtype=float)
    out = np.empty((x.size, n_out + 1, 2))
    out[:, 0, 0], out[:, 0, 1] = x, y
    k = 0
    for j in range(1, n_out + 1):
        for _ in range(per):
            t = t0 + k * step
            k1u, k1v = velocity(x, y, t)
            k2u, k2v = velocity(x + 0.5 * step * k1u, y + 0.5 * step * k1v, t + 0.5 * step)
            k3u, k3v = velocity(x + 0.5 * step * k2u, y + 0.5 * step * k2v, t + 0.5 * step)
            k4u, k4v = velocity(x + step * k3u, y + step * k3v, t + step)
            x = x + step / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
            y = y + step / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            k += 1
        out[:, j, 0], out[:, j, 1] = x, y
    return out


# ----------------------------------------------------------------------------
# seeding


def grid_shape(n: int, aspect: float) -> tuple[int, int]:
    """(rows, cols) with rows * cols == n and cols / rows as close to ``aspect`` as possible.

    Ties go to the shape with more rows.
    """
    best = None
    for rows in range(1, int(math.isqrt(n)) + 1):
        if n % rows:
            continue
        for r, c in ((rows, n // rows), (n // rows, rows)):
            score = abs(math.log(c / r) - math.log(aspect))
            key = (round(score, 12), -r)
            if best is None or key < best[0]:
                best = (key, (r, c))
    return best[1]


def seed_points(kind: str, n: int, seeding: str, seed: int = 0) -> np.ndarray:
    """Initial conditions in the flow's invariant domain, shape (n, d).

    Grid seeding uses cell centres, so no point sits on an invariant wall.
    """
    domain = DOMAINS[kind]
    if seeding == "uniform-random":
        rng = np.random.default_rng(seed)
        lo = np.array([a for a, _ in domain])
        hi = np.array([b for _, b in domain])
        return lo + (hi - lo) * rng.random((n, len(domain)))
    if len(domain) == 1:
        (a, b), = domain
        return (a + (b - a) * (np.arange(n) + 0.5) / n)[:, None]
    (x0, x1), (y0, y1) = domain
    rows, cols = grid_shape(n, (x1 - x0) / (y1 - y0))
    xs = x0 + (x1 - x0) * (np.arange(cols) + 0.5) / cols
    ys = y0 + (y1 - y0) * (np.arange(rows) + 0.5) / rows
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def integrate_ensemble(spec: FlowSpec) -> TrajectoryEnsemble:
    """Generate a complete-mask ensemble from a flow specification."""
    x0 = seed_points(spec.kind, spec.n, spec.seeding, spec.seed)
    if spec.kind == "interval-map-3":
        iters = int(spec.t_end)
        traj = np.empty((spec.n, iters + 1, 1))
        x = x0[:, 0]
        traj[:, 0, 0] = x
        for t in range(1, iters + 1):
            x = interval_map_step(x)
            traj[:, t, 0] = x
        labels = tuple(range(iters + 1))
    else:
        if spec.kind == "double-gyre":
            def velocity(x, y, t):
                return double_gyre_velocity(x, y, t, spec.A, spec.delta, spec.omega)
        else:
            velocity = transitory_double_gyre_velocity
        traj = rk4_sample(velocity, x0, spec.t_end, spec.integrator_step, spec.output_stride)
        labels = tuple(round(j * spec.output_stride, 12) for j in range(traj.shape[1]))
    return TrajectoryEnsemble(
        positions=traj,
        mask=np.ones(traj.shape[:2], dtype=bool),
        time_labels=labels,
    )
