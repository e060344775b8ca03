import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minivfi import losses as L
from minivfi import tensor as T
from minivfi.tensor import Tensor

from oracles import lap_loss_ref


def rand(seed, shape=(1, 1, 32, 32)):
    return np.random.default_rng(seed).random(shape)


def test_charbonnier_values():
    x = Tensor(rand(0))
    assert abs(L.charbonnier(x, x).item() - 1e-3) < 1e-12
    assert abs(L.charbonnier(Tensor(np.full(4, 0.003)), Tensor(np.zeros(4))).item()
               - math.sqrt(1e-5)) < 1e-12


def test_charbonnier_gradient_zero_at_zero_diff():
    x = Tensor(rand(1), requires_grad=True)
    T.backward(L.charbonnier(x, Tensor(x.data.copy())))
    assert np.all(x.grad == 0)


def test_l1_norm_and_prune_loss_composition():
    theta = [Tensor(np.array([1.0, -2.0])), Tensor(np.array([0.5]))]
    assert L.l1_norm(theta).item() == 3.5
    assert L.l1_norm([Tensor(np.zeros(5))]).item() == 0.0
    x = Tensor(rand(2))
    v = L.prune_loss(x, x, theta, lam=1e-4).item()
    assert abs(v - 1.35e-3) < 1e-12
    assert L.prune_loss(x, Tensor(rand(3)), theta, lam=0.0).item() == L.charbonnier(x, Tensor(rand(3))).item()


def test_prune_loss_subgradient_includes_lambda():
    w = Tensor(np.array([0.7, 0.0, -0.2]), requires_grad=True)
    x = Tensor(np.zeros(3))
    T.backward(L.prune_loss(x, x, [w], lam=1e-4))
    np.testing.assert_allclose(w.grad, [1e-4, 0.0, -1e-4], rtol=0, atol=1e-18)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1e-2), st.floats(0, 1e-2))
def test_prune_loss_monotone_in_lambda(seed, l1, l2):
    a, b = Tensor(rand(seed, (1, 1, 4, 4))), Tensor(rand(seed + 1, (1, 1, 4, 4)))
    w = [Tensor(np.random.default_rng(seed).standard_normal(6))]
    lo, hi = sorted((l1, l2))
    assert L.prune_loss(a, b, w, lo).item() <= L.prune_loss(a, b, w, hi).item()


def test_pyramid_constant_image():
    pyr = L.laplacian_pyramid(Tensor(np.full((1, 1, 32, 32), 0.4)), 5)
    for lev in pyr.levels[:-1]:
        assert np.abs(lev.data).max() < 1e-15
    np.testing.assert_allclose(pyr.levels[-1].data, 0.4)
    assert [lev.shape[-1] for lev in pyr.levels] == [32, 16, 8, 4, 2]


def test_pyramid_reconstruction():
    x = Tensor(rand(4))
    pyr = L.laplacian_pyramid(x, 5)
    assert np.abs(pyr.reconstruct().data - x.data).max() < 1e-5


def test_pyramid_single_level_and_divisibility():
    x = Tensor(rand(5, (1, 1, 6, 6)))
    np.testing.assert_array_equal(L.laplacian_pyramid(x, 1).levels[0].data, x.data)
    with pytest.raises(T.ShapeError):
        L.laplacian_pyramid(x, 3)


def test_lap_loss_matches_independent_pyramid():
    a, b = rand(6, (2, 1, 32, 32)), rand(7, (2, 1, 32, 32))
    assert abs(L.lap_loss(Tensor(a), Tensor(b)).item() - lap_loss_ref(a, b)) < 1e-6


def test_lap_loss_identity_and_symmetry():
    a, b = Tensor(rand(8)), Tensor(rand(9))
    assert L.lap_loss(a, a).item() == 0.0
    assert abs(L.lap_loss(a, b).item() - L.lap_loss(b, a).item()) < 1e-15
    with pytest.raises(T.ShapeError):
        L.lap_loss(a, Tensor(rand(1, (1, 1, 16, 16))))


def test_kd_total_composition():
    # alpha weights the ground-truth term: 0.1 * 2 + 3
    assert abs(L.combine_kd(2.0, 3.0, 0.1) - 3.2) < 1e-12
    out, gt, teach = (Tensor(rand(s)) for s in (10, 11, 12))
    terms = L.kd_total_loss(out, gt, teach, alpha=0.0)
    assert terms["total"].item() == terms["dist"].item()
    z = Tensor(rand(13))
    assert L.kd_total_loss(z, z, z)["total"].item() == 0.0


def test_kd_teacher_receives_no_gradient():
    out = Tensor(rand(14), requires_grad=True)
    teach = Tensor(rand(15), requires_grad=True)
    terms = L.kd_total_loss(out, Tensor(rand(16)), teach, alpha=0.1)
    T.backward(terms["total"])
    assert out.grad is not None
    assert teach.grad is None
