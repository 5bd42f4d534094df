"""Finite-difference verification of every backward pass."""

import numpy as np
import pytest

from voxsynth.gradcheck import (
    GradcheckReport,
    gradcheck,
    linear_probe,
    standard_suite,
)
from voxsynth.ops import conv3d, l1_loss, leaky_relu
from voxsynth.tensor import Tensor

TOL = 1e-4


def test_standard_suite_passes_everywhere():
    reports = dict(standard_suite(seed=0))
    # every differentiable op at three shapes, plus three composite networks
    op_names = {n.split("[")[0] for n in reports if "[" in n}
    assert len(op_names) == 10
    net_names = [n for n in reports if n.startswith("network_")]
    assert len(net_names) == 3
    for name, rep in reports.items():
        assert rep.ok(TOL), f"{name}: max rel err {rep.max_rel_err:.3g} {rep.worst}"


def test_suite_is_deterministic_per_seed():
    a = [(n, r.max_rel_err) for n, r in standard_suite(seed=1, shapes_per_op=1)]
    b = [(n, r.max_rel_err) for n, r in standard_suite(seed=1, shapes_per_op=1)]
    assert a == b


def test_linear_probe_gradient_is_exactly_its_weights():
    rng = np.random.default_rng(2)
    t = Tensor(rng.normal(size=(3, 4)).astype(np.float64), requires_grad=True)
    w = rng.normal(size=(3, 4))
    linear_probe(t, w).backward()
    assert np.array_equal(t.grad, w)


def test_gradcheck_catches_a_wrong_gradient():
    x = Tensor(np.full((4,), 2.0, dtype=np.float64), requires_grad=True)

    def bad_square():
        out = Tensor(np.float64(np.sum(x.values ** 2)))
        out.requires_grad = True
        out._parents = (x,)
        # wrong by a factor of two
        out._backward = lambda g: x.accumulate_grad(4.0 * x.values * float(g))
        return out

    rep = gradcheck(bad_square, [x], coords_per_tensor=4)
    assert not rep.ok(TOL)
    assert rep.max_rel_err > 0.3


def test_gradcheck_accepts_a_correct_composite():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 1, 4, 4, 4)), requires_grad=True)
    x.values = x.values.astype(np.float64)
    w = Tensor(rng.normal(size=(2, 1, 3, 3, 3)).astype(np.float64), requires_grad=True)
    target = rng.normal(size=(1, 2, 2, 2, 2)).astype(np.float64) + 3.0

    def forward():
        return l1_loss(conv3d(x, w), target)

    rep = gradcheck(forward, [x, w], coords_per_tensor=12, rng=np.random.default_rng(4))
    assert rep.ok(TOL)
    assert rep.n_coords == 24


def test_gradcheck_rejects_float32_leaves():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        gradcheck(lambda: l1_loss(x, np.zeros(3)), [x])


def test_gradcheck_rejects_nonscalar_target():
    x = Tensor(np.ones(3, dtype=np.float64), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        gradcheck(lambda: leaky_relu(x), [x])


def test_report_tracks_worst_coordinate():
    rep = GradcheckReport()
    assert rep.ok(1e-9)
    rep.max_rel_err = 0.5
    assert not rep.ok(1e-4)
