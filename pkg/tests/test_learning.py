import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from powerdp.errors import DimensionMismatchError, SingularSystemError
from powerdp.learning import (
    ConstraintSet,
    LogisticTask,
    clip_gradient,
    multinomial_logistic_gradient,
    multinomial_logistic_loss,
    project,
    quadratic_task,
    random_quadratic_task,
)

vectors = arrays(np.float64, 4, elements=st.floats(-50, 50, allow_nan=False))


def test_project_interior_unchanged():
    x = np.array([0.3, -0.4])
    np.testing.assert_array_equal(project(x, ConstraintSet(1.0)), x)


def test_project_radial_scaling():
    np.testing.assert_allclose(project(np.array([0.0, 2.0]), ConstraintSet(1.0)), [0.0, 1.0])
    x = np.array([1.2, -1.6])  # norm 2
    np.testing.assert_allclose(project(x, ConstraintSet(1.0)), x / 2)


@settings(max_examples=200)
@given(vectors)
def test_project_lands_on_boundary_and_is_idempotent(x):
    omega = ConstraintSet(3.0)
    y = project(x, omega)
    assert omega.contains(y)
    if np.linalg.norm(x) > 3.0:
        assert abs(np.linalg.norm(y) - 3.0) <= 1e-12 * 3.0
    np.testing.assert_array_equal(project(y, omega), y)


@settings(max_examples=200)
@given(vectors, vectors)
def test_project_non_expansive(x, y):
    omega = ConstraintSet(2.0)
    assert np.linalg.norm(project(x, omega) - project(y, omega)) <= np.linalg.norm(x - y) * (1 + 1e-12) + 1e-12


@settings(max_examples=100)
@given(vectors, vectors)
def test_project_is_closest_point(x, z):
    omega = ConstraintSet(2.0)
    z = project(z, omega)
    assert np.linalg.norm(x - project(x, omega)) <= np.linalg.norm(x - z) + 1e-9


def test_clip_examples():
    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(clip_gradient(g, 2.0), 0.4 * g)
    np.testing.assert_array_equal(clip_gradient(np.zeros(3), 2.0), np.zeros(3))
    np.testing.assert_array_equal(clip_gradient(g, 5.0), g)


def test_constraint_set_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        ConstraintSet(0.0)
    assert ConstraintSet(4.0).diameter == 8.0


# -- logistic ---------------------------------------------------------------------


def test_logistic_gradient_zero_on_symmetric_batch():
    # each class has one sample at -1 and one at +1
    batch = (np.array([[-1.0], [1.0], [-1.0], [1.0]]), np.array([0, 0, 1, 1]))
    np.testing.assert_allclose(multinomial_logistic_gradient(np.zeros(4), batch, 2, mu=0.3), 0.0, atol=1e-15)


def test_logistic_gradient_empty_batch_is_ridge():
    x = np.arange(6, dtype=float)
    empty = (np.zeros((0, 2)), np.zeros(0, dtype=int))
    np.testing.assert_allclose(multinomial_logistic_gradient(x, empty, 2, mu=0.5), 0.5 * x)
    assert multinomial_logistic_loss(x, empty, 2, mu=0.5) == pytest.approx(0.25 * x @ x)


def test_logistic_dimension_checks():
    batch = (np.zeros((3, 2)), np.array([0, 1, 2]))
    with pytest.raises(DimensionMismatchError):
        multinomial_logistic_gradient(np.zeros(5), batch, 3)
    with pytest.raises(DimensionMismatchError):
        multinomial_logistic_gradient(np.zeros(9), (np.zeros((3, 2)), np.array([0, 1, 3])), 3)
    with pytest.raises(DimensionMismatchError):
        multinomial_logistic_gradient(np.zeros(9), (np.zeros((3, 2)), np.array([0, 1])), 3)


def test_logistic_loss_uniform_at_zero():
    batch = (np.random.default_rng(0).uniform(size=(7, 3)), np.arange(7) % 4)
    assert multinomial_logistic_loss(np.zeros(16), batch, 4) == pytest.approx(np.log(4))


def _central_difference(fun, x, h=1e-6):
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    features = rng.uniform(size=(25, 3))
    labels = rng.integers(0, 3, 25)
    for _ in range(100):
        x = rng.normal(scale=2.0, size=12)
        grad = multinomial_logistic_gradient(x, (features, labels), 3, mu=1e-3)
        fd = _central_difference(lambda v: multinomial_logistic_loss(v, (features, labels), 3, mu=1e-3), x)
        assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(grad), 1e-3)


def test_logistic_strong_convexity():
    rng = np.random.default_rng(3)
    batch = (rng.uniform(size=(30, 2)), rng.integers(0, 3, 30))
    mu = 0.05
    for _ in range(200):
        x, y = rng.normal(scale=3.0, size=(2, 9))
        lhs = multinomial_logistic_loss(y, batch, 3, mu)
        rhs = (multinomial_logistic_loss(x, batch, 3, mu)
               + multinomial_logistic_gradient(x, batch, 3, mu) @ (y - x) + 0.5 * mu * np.sum((y - x) ** 2))
        assert lhs >= rhs - 1e-10


def test_logistic_task_minibatch_uses_rng():
    rng = np.random.default_rng(0)
    clients = [(rng.uniform(size=(20, 2)), rng.integers(0, 2, 20))]
    task = LogisticTask(clients, 2, batch_size=5)
    x = rng.normal(size=6)
    full = task.gradient(0, x)
    np.testing.assert_array_equal(full, multinomial_logistic_gradient(x, clients[0], 2, task.mu))
    a = task.gradient(0, x, np.random.default_rng(1))
    b = task.gradient(0, x, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, full)


def test_logistic_optimum_has_small_gradient_mapping():
    rng = np.random.default_rng(11)
    clients = [(rng.uniform(size=(15, 2)), rng.integers(0, 3, 15)) for _ in range(3)]
    task = LogisticTask(clients, 3, mu=1e-2, omega=ConstraintSet(5.0))
    x = task.optimum
    lip = task._smoothness()
    grad = sum(task.gradient(i, x) for i in range(3))
    assert lip * np.linalg.norm(x - project(x - grad / lip, task.omega)) <= 1e-7
    # no random perturbation inside the ball does better
    best = task.objective(x)
    for _ in range(200):
        y = project(x + rng.normal(scale=0.05, size=x.size), task.omega)
        assert task.objective(y) >= best - 1e-12


# -- quadratic --------------------------------------------------------------------


def test_quadratic_identity_zero_b():
    task = quadratic_task([np.eye(3)] * 4, [np.zeros(3)] * 4)
    np.testing.assert_array_equal(task.optimum, np.zeros(3))
    assert task.mu == pytest.approx(1.0)


def test_quadratic_two_node_example():
    task = quadratic_task([np.eye(2)] * 2, [np.array([2.0, 0.0]), np.array([0.0, 2.0])])
    np.testing.assert_allclose(task.optimum, [1.0, 1.0], atol=1e-15)


def test_quadratic_projected_optimum_isotropic():
    # F(x) = ||x||^2 - b.x with b far outside: minimizer over the ball is radius * b/||b||
    b = np.array([30.0, -40.0])
    task = quadratic_task([np.eye(2)] * 2, [b / 2, b / 2], ConstraintSet(1.0))
    direction = b / np.linalg.norm(b)
    np.testing.assert_allclose(task.optimum, direction, atol=1e-12)
    # line check along the radial direction
    radii = np.linspace(-1.0, 1.0, 2001)
    values = [task.objective(r * direction) for r in radii]
    assert radii[int(np.argmin(values))] == pytest.approx(1.0)


def test_quadratic_singular_rejected():
    q = np.diag([1.0, 0.0])
    with pytest.raises(SingularSystemError):
        quadratic_task([q, q], [np.zeros(2)] * 2)
    with pytest.raises(DimensionMismatchError):
        quadratic_task([np.eye(2)], [np.zeros(3)])


def test_quadratic_gradient_and_strong_convexity():
    rng = np.random.default_rng(5)
    task = random_quadratic_task(3, 4, rng)
    for i in range(3):
        for _ in range(50):
            x, y = rng.normal(scale=3.0, size=(2, 4))
            fd = _central_difference(lambda v: task.loss(i, v), x)
            assert np.linalg.norm(task.gradient(i, x) - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)
            rhs = task.loss(i, x) + task.gradient(i, x) @ (y - x) + 0.5 * task.mu * np.sum((y - x) ** 2)
            assert task.loss(i, y) >= rhs - 1e-10


@pytest.mark.parametrize("b_scale, radius", [(1.0, 10.0), (20.0, 1.0)])
def test_centralized_projected_gd_reaches_oracle(b_scale, radius):
    rng = np.random.default_rng(2)
    task = random_quadratic_task(4, 5, rng, b_scale=b_scale, omega=ConstraintSet(radius))
    lip = np.linalg.eigvalsh(task.q_sum).max()
    x = np.zeros(5)
    for _ in range(20000):
        x = project(x - (task.q_sum @ x - task.b_sum) / lip, task.omega)
    assert np.linalg.norm(x - task.optimum) <= 1e-6
    if b_scale > 1:
        assert np.linalg.norm(task.optimum) == pytest.approx(radius)
