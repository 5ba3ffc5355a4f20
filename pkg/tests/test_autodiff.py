import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import primitive_graphs, tno_graph, vno_graph
from piano import autodiff as ad


@pytest.mark.parametrize("name", sorted(primitive_graphs()))
def test_primitive_gradients(name):
    graph, inputs = primitive_graphs(seed=3)[name]
    rep = ad.gradcheck_report(graph, inputs, eps=1e-4)
    assert rep["checked"] > 0
    assert rep["max_rel_error"] < 1e-6


@pytest.mark.parametrize("make", [tno_graph, vno_graph])
def test_model_graph_gradients(make):
    rep = ad.gradcheck_report(*make(seed=4), eps=1e-3, max_coords=120, seed=4)
    assert rep["checked"] >= 60
    assert rep["max_rel_error"] < 1e-4


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b)).value
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = np.sum(p[0, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_shared_node_accumulates():
    x = ad.parameter(np.array([[[[2.0]]]]))
    loss = ad.mean_square(ad.add(x, x))
    ad.backward(loss)
    assert x.grad.item() == pytest.approx(16.0)


def test_constants_get_no_grad():
    c = ad.constant(np.ones((1, 1, 2, 2)))
    p = ad.parameter(np.ones((1, 1, 2, 2)))
    ad.backward(ad.mean_square(ad.mul(c, p)))
    assert c.grad is None and p.grad is not None


def test_non_finite_forward_raises():
    with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
        ad.scale(ad.constant(np.full((1, 1, 2, 2), 1e308)), 1e10)


def test_backward_before_forward():
    graph = ad.DiffGraph(lambda P, I: {"loss": ad.mean_square(P["x"])}, {"x": np.ones((1, 1, 2, 2))})
    with pytest.raises(ad.GraphStateError):
        graph.backward()


def test_signature_checked():
    graph = ad.DiffGraph(lambda P, I: {"loss": ad.mean_square(I["u"])}, {},
                         signature={"u": (None, 1, 4, 4)})
    with pytest.raises(ad.ShapeError):
        graph.forward({"u": np.zeros((2, 2, 4, 4))})
    with pytest.raises(ad.ShapeError):
        graph.forward({})
    assert graph.loss_value({"u": np.ones((3, 1, 4, 4))}) == 1.0


def test_unreachable_params_get_zero_grads():
    graph = ad.DiffGraph(lambda P, I: {"loss": ad.mean_square(P["a"])},
                         {"a": np.ones((1, 1, 2, 2)), "b": np.ones(3)})
    graph.forward({})
    grads = graph.backward()
    assert np.array_equal(grads["b"], np.zeros(3))


def test_kink_crossing_is_skipped_not_failed():
    # With eps larger than |x| the perturbation crosses relu's kink at 0.
    graph = ad.DiffGraph(lambda P, I: {"loss": ad.mean_square(ad.relu(P["x"]))},
                         {"x": np.array([[[[1e-4, 1.0]]]])})
    rep = ad.gradcheck_report(graph, {}, eps=1e-3)
    assert rep["skipped"] == 1 and rep["checked"] == 1 and rep["max_rel_error"] < 1e-8
    loose = ad.gradcheck_report(graph, {}, eps=1e-3, skip_kinks=False)
    assert loose["max_rel_error"] > 1e-2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_resampling_backward_is_adjoint(seed):
    # d/dx mean(down(x)^2) = up(2 down(x) / n) / 4, and the mirror case for up2.
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.normal(size=(1, 2, 4, 6)))
    d = ad.avg_down2(x)
    ad.backward(ad.mean_square(d))
    up = np.repeat(np.repeat(2 * d.value / d.value.size, 2, 2), 2, 3) / 4
    assert np.allclose(x.grad, up)
    z = ad.parameter(rng.normal(size=(1, 2, 2, 3)))
    u = ad.up2(z)
    ad.backward(ad.mean_square(u))
    g = 2 * u.value / u.value.size
    assert np.allclose(z.grad, g.reshape(1, 2, 2, 2, 3, 2).sum(axis=(3, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_broadcast_grad_shapes(seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.normal(size=(2, 3, 4, 4)))
    b = ad.parameter(rng.normal(size=(1, 1, 4, 4)))
    ad.backward(ad.mean_square(ad.mul(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
