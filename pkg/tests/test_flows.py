import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coherent_sets.flows import (
    FlowError,
    FlowSpec,
    double_gyre_velocity,
    grid_shape,
    integrate_ensemble,
    interval_labels,
    interval_map_step,
    rk4_sample,
    seed_points,
    transition,
    transitory_double_gyre_velocity,
)


def test_interval_map_examples():
    assert interval_map_step(0.0) == pytest.approx(1 / 3, abs=1e-15)
    assert interval_map_step(0.5) == pytest.approx(5 / 6, abs=1e-15)


def test_interval_map_permutes_thirds():
    x = np.random.default_rng(0).random(10_000)
    lab = interval_labels(x)
    y = interval_map_step(x)
    np.testing.assert_array_equal(interval_labels(y), (lab + 1) % 3)
    z = interval_map_step(interval_map_step(y))
    np.testing.assert_array_equal(interval_labels(z), lab)


def test_interval_map_boundaries_take_right_branch():
    assert interval_labels(interval_map_step(1 / 3)) == 2
    assert interval_labels(interval_map_step(2 / 3)) == 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0, exclude_max=True))
def test_interval_map_stays_in_unit_interval(x):
    y = interval_map_step(x)
    assert 0.0 <= y < 1.0


def test_double_gyre_examples():
    u, v = double_gyre_velocity(0.5, 0.5, 0.0)
    assert abs(u) < 1e-15 and abs(v) < 1e-15
    u, v = double_gyre_velocity(1.0, 0.5, 0.0)
    assert abs(u) < 1e-15
    assert v == pytest.approx(-math.pi * 0.25, abs=1e-15)
    xs = np.linspace(0, 2, 11)
    for t in (0.0, 0.3):
        for y in (0.0, 1.0):
            assert np.all(np.abs(double_gyre_velocity(xs, y, t)[1]) < 1e-15)


def test_transition_examples():
    assert transition(0.0) == 0.0 and transition(1.0) == 1.0 and transition(0.5) == 0.5
    assert transition(-3.0) == 0.0 and transition(4.0) == 1.0


def test_transitory_before_start_is_primary_field():
    x, y = 0.3, 0.7
    u, v = transitory_double_gyre_velocity(x, y, -1.0)
    assert u == pytest.approx(-math.pi * math.sin(2 * math.pi * x) * math.cos(math.pi * y))
    assert v == pytest.approx(2 * math.pi * math.cos(2 * math.pi * x) * math.sin(math.pi * y))


@pytest.mark.parametrize(
    "field",
    [
        lambda x, y, t: double_gyre_velocity(x, y, t),
        transitory_double_gyre_velocity,
    ],
)
def test_divergence_free(field):
    rng = np.random.default_rng(1)
    h = 1e-5
    for x, y, t in zip(rng.random(50), rng.random(50), rng.random(50)):
        dudx = (field(x + h, y, t)[0] - field(x - h, y, t)[0]) / (2 * h)
        dvdy = (field(x, y + h, t)[1] - field(x, y - h, t)[1]) / (2 * h)
        assert abs(dudx + dvdy) < 1e-6


def test_double_gyre_domain_invariance():
    e = integrate_ensemble(FlowSpec("double-gyre", 400, 10.0, seed=3))
    p = e.positions
    assert p[..., 0].min() > -1e-6 and p[..., 0].max() < 2 + 1e-6
    assert p[..., 1].min() > -1e-6 and p[..., 1].max() < 1 + 1e-6


def test_transitory_domain_invariance():
    e = integrate_ensemble(FlowSpec("transitory-double-gyre", 400, 1.0, seed=3))
    assert e.positions.min() > -1e-6 and e.positions.max() < 1 + 1e-6


def endpoint_error_ratio(step):
    xy0 = seed_points("double-gyre", 64, "uniform-random", seed=7)
    f = double_gyre_velocity
    ref = rk4_sample(f, xy0, 1.0, step / 8, 1.0)[:, -1]
    coarse = rk4_sample(f, xy0, 1.0, step, 1.0)[:, -1]
    fine = rk4_sample(f, xy0, 1.0, step / 2, 1.0)[:, -1]
    return np.abs(coarse - ref).max() / np.abs(fine - ref).max()


def test_rk4_convergence_order():
    assert 12 <= endpoint_error_ratio(1e-2) <= 20


def test_grid_shape():
    assert grid_shape(2**15, 2.0) == (128, 256)
    assert grid_shape(2**12, 2.0) in ((32, 128), (64, 64))
    assert grid_shape(512, 2.0) == (16, 32)
    assert grid_shape(16, 1.0) == (4, 4)


def test_grid_seeding_inside_domain_and_distinct():
    pts = seed_points("double-gyre", 2**12, "uniform-grid")
    assert pts.shape == (4096, 2)
    assert len(np.unique(pts, axis=0)) == 4096
    assert pts[:, 0].min() > 0 and pts[:, 0].max() < 2 and pts[:, 1].min() > 0 and pts[:, 1].max() < 1


@pytest.mark.parametrize("tau, dim", [(5.0, 102), (10.0, 202)])
def test_embedded_dimension(tau, dim):
    e = integrate_ensemble(FlowSpec("double-gyre", 8, tau, seeding="uniform-grid"))
    assert e.num_times * e.d == dim
    assert e.embedded().shape == (8, dim)


def test_interval_map_ensemble_shape(interval_map_ensemble):
    assert interval_map_ensemble.positions.shape == (1000, 10, 1)
    assert interval_map_ensemble.embedded().shape == (1000, 10)


def test_spec_validation():
    with pytest.raises(FlowError):
        FlowSpec("lorenz", 10, 1.0)
    with pytest.raises(FlowError):
        FlowSpec("double-gyre", 10, 1.05)
    with pytest.raises(FlowError):
        FlowSpec("double-gyre", 10, 1.0, integrator_step=0.03)
    with pytest.raises(FlowError):
        FlowSpec("interval-map-3", 10, 2.5)
    with pytest.raises(FlowError):
        FlowSpec("double-gyre", 0, 1.0)


def test_random_seeding_reproducible():
    a = integrate_ensemble(FlowSpec("double-gyre", 20, 0.5, seed=4))
    b = integrate_ensemble(FlowSpec("double-gyre", 20, 0.5, seed=4))
    np.testing.assert_array_equal(a.positions, b.positions)
    assert a.time_labels[:3] == (0.0, 0.1, 0.2)
