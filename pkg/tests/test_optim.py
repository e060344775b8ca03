import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minivfi import optim as O
from minivfi import tensor as T
from minivfi.netdef import TeacherConfig, build_teacher, new_checkpoint
from minivfi.tensor import Tensor

from oracles import lasso_cd, lasso_objective

TINY = TeacherConfig(unet=(4, 8, 8), branch_b=4, fusion=4, refine=2)


def lasso_problem(seed, n=60, d=20):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    x_true = np.where(rng.random(d) < 0.4, rng.standard_normal(d), 0.0)
    y = A @ x_true + 0.05 * rng.standard_normal(n)
    return A, y


def smooth_grad(A, y, x: Tensor) -> np.ndarray:
    """Gradient of 0.5/n ||Ax - y||^2 through the autodiff library."""
    x.zero_grad()
    r = T.sub(_matvec(A, x), T.Tensor(y))
    T.backward(T.mul(T.tsum(T.mul(r, r)), 0.5 / len(y)))
    return x.grad


def _matvec(A, x: Tensor) -> Tensor:
    # (n,d) * (d,) summed over d
    return T.tsum(T.mul(T.Tensor(A), T.reshape(x, (1, -1))), axis=1)


def solve_prox(A, y, lam, steps=4000):
    lr = len(y) / np.linalg.norm(A, 2) ** 2
    x = Tensor(np.zeros(A.shape[1]), requires_grad=True)
    for _ in range(steps):
        g = smooth_grad(A, y, x)
        O.prox_sg_step([x], [g], lr, lam)
    return x.data


@pytest.mark.parametrize("seed", range(3))
def test_prox_sg_matches_coordinate_descent(seed):
    A, y = lasso_problem(seed)
    lam = 0.05
    ref = lasso_objective(A, y, lam, lasso_cd(A, y, lam))
    got = lasso_objective(A, y, lam, solve_prox(A, y, lam))
    assert abs(got - ref) < 1e-6


def test_soft_threshold():
    np.testing.assert_array_equal(O.soft_threshold(np.array([-3.0, -0.5, 0.0, 0.2, 2.0]), 1.0),
                                  [-2.0, 0.0, 0.0, 0.0, 1.0])


def test_orthant_step_projects_sign_flips_to_zero():
    p = Tensor(np.array([0.5, -0.5, 0.01, 0.0]))
    g = np.array([0.0, 0.0, 1.0, -5.0])
    O.orthant_step([p], [g], lr=0.1, lam=0.0, sign_ref=[np.sign(p.data)])
    np.testing.assert_array_equal(p.data, [0.5, -0.5, 0.0, 0.0])


def test_orthant_step_shape_check():
    with pytest.raises(T.ShapeError):
        O.orthant_step([Tensor(np.ones(3))], [np.ones(3)], 0.1, 0.0, [np.ones(2)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_orthant_phase_on_lasso_never_flips_and_only_sparsifies(seed):
    A, y = lasso_problem(seed % 1000)
    lam = 0.05
    lr = len(y) / np.linalg.norm(A, 2) ** 2
    x = Tensor(np.random.default_rng(seed).standard_normal(20), requires_grad=True)
    zeros = int((x.data == 0).sum())
    for _ in range(50):
        before = np.sign(x.data)
        g = smooth_grad(A, y, x)
        O.orthant_step([x], [g], lr, lam, [before])
        after = np.sign(x.data)
        assert np.all((after == before) | (after == 0))
        z = int((x.data == 0).sum())
        assert z >= zeros
        zeros = z


def test_adamax_matches_reference_update():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    p = Tensor(w0.copy(), requires_grad=True)
    st_ = O.AdaMaxState(lr=0.01)
    m, u, w = np.zeros(5), np.zeros(5), w0.copy()
    for t, g in enumerate(grads, start=1):
        p.grad = g
        O.adamax_step([p], st_)
        m = 0.9 * m + 0.1 * g
        u = np.maximum(0.999 * u, np.abs(g))
        w = w - 0.01 / (1 - 0.9**t) * m / (u + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-14)


def test_adamax_missing_grad():
    with pytest.raises(O.MissingGradError):
        O.adamax_step([Tensor(np.ones(2))], O.AdaMaxState())


def test_schedule_default_and_alternating():
    s = O.ObproxSchedule()
    assert [s.phase(e, 4) for e in range(4)] == ["prox", "prox", "orthant", "orthant"]
    a = O.ObproxSchedule(prox_epochs=1, orthant_epochs=2, alternating=True)
    assert [a.phase(e, 6) for e in range(6)] == ["prox", "orthant", "orthant"] * 2


def test_trajectory_csv_roundtrip():
    rows = [O.TrajectoryRow(0, "prox", 0.123456789, 0.9, 10, 100),
            O.TrajectoryRow(1, "orthant", 0.1, 1 / 3, 67, 100)]
    assert O.read_trajectory_csv(O.trajectory_csv(rows)) == rows
    assert O.trajectory_csv(rows).splitlines()[0] == "epoch,phase,loss,density,zeros,total"


def _tiny_train(n=4, res=16, seed=0):
    return np.random.default_rng(seed).random((n, 5, 1, res, res)).astype(np.float32)


def test_obprox_run_orthant_phase_keeps_signs():
    ckpt = new_checkpoint(build_teacher(TINY), seed=0)
    seen = {"prev": None, "zeros": []}

    def on_step(state, weights):
        cur = [np.sign(w.data).copy() for w in weights]
        if state.phase == "orthant" and seen["prev"] is not None:
            for b, a in zip(seen["prev"], cur):
                assert np.all((a == b) | (a == 0)), "orthant step flipped a sign"
            seen["zeros"].append(O.count_zeros(weights)[0])
        seen["prev"] = cur

    sparse, rows = O.obprox_run(ckpt, _tiny_train(), epochs=4, lam=5.0, lr=0.02, batch=2,
                                on_step=on_step)
    assert [r.phase for r in rows] == ["prox", "prox", "orthant", "orthant"]
    assert seen["zeros"] == sorted(seen["zeros"])
    assert rows[-1].density < 1.0
    assert sparse.meta["phase"] == "prune"
    # the input checkpoint is untouched
    assert ckpt.fingerprint() == new_checkpoint(build_teacher(TINY), seed=0).fingerprint()


def test_obprox_run_is_deterministic():
    ckpt = new_checkpoint(build_teacher(TINY), seed=1)
    a, _ = O.obprox_run(ckpt, _tiny_train(), epochs=2, lam=1.0, lr=0.01, batch=2, seed=3)
    b, _ = O.obprox_run(ckpt, _tiny_train(), epochs=2, lam=1.0, lr=0.01, batch=2, seed=3)
    assert a.fingerprint() == b.fingerprint()


def test_obprox_divergence_is_reported():
    ckpt = new_checkpoint(build_teacher(TINY), seed=0)
    bad = _tiny_train()
    bad[0, 2] = np.nan
    with pytest.raises(O.DivergenceError, match="epoch 0"):
        O.obprox_run(ckpt, bad, epochs=1, lam=0.0, lr=0.01, batch=4)
