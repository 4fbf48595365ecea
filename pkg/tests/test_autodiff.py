"""Per-op finite-difference checks for the reverse-mode engine."""

import numpy as np
import pytest

from voxtract import autodiff as ad
from voxtract.autodiff import Parameter, Tensor
from voxtract.errors import StateError


def fd_check(build, params, step=1e-6, tol=1e-6):
    """Central differences on every entry of every Parameter in params."""
    for p in params:
        p.zero_grad()
    ad.backward(build())
    for p in params:
        flat = p.value.ravel()
        grad = p.grad.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            with ad.no_grad():
                up = float(build().value)
            flat[i] = saved - step
            with ad.no_grad():
                down = float(build().value)
            flat[i] = saved
            numeric = (up - down) / (2 * step)
            assert abs(numeric - grad[i]) < tol * max(1.0, abs(numeric)), (
                f"entry {i}: numeric {numeric} vs analytic {grad[i]}"
            )


@pytest.fixture
def g():
    return np.random.default_rng(7)


def test_elementwise_chain(g):
    a = Parameter(g.normal(size=(3, 4)))
    b = Parameter(g.normal(size=(3, 4)))

    def build():
        x = ad.param_tensor(a) * ad.param_tensor(b) + ad.param_tensor(a)
        y = ad.tanh(x) - ad.sigmoid(ad.param_tensor(b)) / 3.0
        return ad.tsum(y * y)

    fd_check(build, [a, b])


def test_broadcasting_bias(g):
    w = Parameter(g.normal(size=(5, 3)))
    bias = Parameter(g.normal(size=(3,)))

    def build():
        return ad.tsum(ad.silu(ad.param_tensor(w) + ad.param_tensor(bias)))

    fd_check(build, [w, bias])


def test_matmul_and_transpose(g):
    a = Parameter(g.normal(size=(4, 3)))
    b = Parameter(g.normal(size=(3, 5)))

    def build():
        return ad.tsum(ad.exp(0.1 * (ad.param_tensor(a) @ ad.param_tensor(b)).T))

    fd_check(build, [a, b])


def test_log_sqrt_power(g):
    a = Parameter(g.uniform(0.5, 2.0, size=(6,)))

    def build():
        t = ad.param_tensor(a)
        return ad.tsum(ad.log(t) + ad.sqrt(t) + t**3)

    fd_check(build, [a])


def test_sum_mean_axes(g):
    a = Parameter(g.normal(size=(4, 5)))

    def build():
        t = ad.param_tensor(a)
        return ad.tsum(ad.tmean(t, axis=1, keepdims=True) * ad.tsum(t, axis=0, keepdims=True))

    fd_check(build, [a])


def test_getitem_and_concat(g):
    a = Parameter(g.normal(size=(6, 4)))

    def build():
        t = ad.param_tensor(a)
        top = t[:3, :]
        bottom = t[3:, 1:3]
        joined = ad.concat([top[:, 1:3], bottom], axis=0)
        return ad.tsum(joined * joined)

    fd_check(build, [a])


def test_reshape_mean(g):
    a = Parameter(g.normal(size=(2, 6)))

    def build():
        return ad.tsum(ad.param_tensor(a).reshape(3, 2, 2).mean(axis=1))

    fd_check(build, [a])


def test_softmax_rows_gradient(g):
    a = Parameter(g.normal(size=(4, 7)))
    probe = g.normal(size=(4, 7))

    def build():
        return ad.tsum(ad.softmax_rows(ad.param_tensor(a)) * Tensor(probe))

    fd_check(build, [a])


def test_attend_gradient(g):
    p = Parameter(g.uniform(0.1, 1.0, size=(5, 5)))
    v = Parameter(g.normal(size=(5, 3)))

    def build():
        return ad.tsum(ad.attend(ad.param_tensor(p), ad.param_tensor(v)) ** 2)

    fd_check(build, [p, v])


def test_take_scatter_roundtrip_gradient(g):
    a = Parameter(g.normal(size=(10,)))
    idx = np.array([[0, 1, 2, 3], [2, 3, 4, 5], [4, 5, 6, 7]])

    def build():
        frames = ad.take(ad.param_tensor(a), idx)
        signal = ad.scatter_add(frames, idx, 10)
        return ad.tsum(signal * signal)

    fd_check(build, [a])


def test_depthwise_conv_gradient(g):
    x = Parameter(g.normal(size=(8, 3)))
    w = Parameter(g.normal(size=(3, 3)))

    def build():
        return ad.tsum(ad.depthwise_conv1d(ad.param_tensor(x), ad.param_tensor(w)) ** 2)

    fd_check(build, [x, w])


def test_hypot_gradient_and_zero_safety(g):
    re = Parameter(g.normal(size=(4,)) + 2.0)
    im = Parameter(g.normal(size=(4,)))

    def build():
        return ad.tsum(ad.hypot(ad.param_tensor(re), ad.param_tensor(im)))

    fd_check(build, [re, im])

    zero_re, zero_im = Parameter(np.zeros(3)), Parameter(np.zeros(3))
    out = ad.hypot(ad.param_tensor(zero_re), ad.param_tensor(zero_im))
    ad.backward(ad.tsum(out))
    assert np.all(zero_re.grad == 0.0)  # subgradient at the origin


def test_layer_norm_gradient(g):
    x = Parameter(g.normal(size=(5, 6)))
    gamma = Parameter(g.uniform(0.5, 1.5, size=(6,)))
    beta = Parameter(g.normal(size=(6,)))

    def build():
        out = ad.layer_norm(ad.param_tensor(x), ad.param_tensor(gamma), ad.param_tensor(beta))
        return ad.tsum(out**3)

    fd_check(build, [x, gamma, beta], tol=1e-5)


def test_relu_masks_gradient(g):
    a = Parameter(np.array([-1.0, 2.0, -3.0, 4.0]))
    ad.backward(ad.tsum(ad.relu(ad.param_tensor(a))))
    assert np.array_equal(a.grad, np.array([0.0, 1.0, 0.0, 1.0]))


def test_gradient_accumulates_across_uses(g):
    a = Parameter(np.array([2.0]))
    t = ad.param_tensor(a)
    ad.backward(t * t)  # d(a^2)/da = 2a
    assert np.allclose(a.grad, [4.0])


def test_no_grad_blocks_graph(g):
    a = Parameter(np.ones(3))
    with ad.no_grad():
        out = ad.tsum(ad.param_tensor(a) * 2.0)
    with pytest.raises(StateError):
        ad.backward(out)


def test_backward_seed_scales(g):
    a = Parameter(np.array([1.0, 2.0]))
    ad.backward(ad.tsum(ad.param_tensor(a) ** 2), seed=np.float64(0.5))
    assert np.allclose(a.grad, [1.0, 2.0])


def test_canonical_reductions_are_permutation_stable(g):
    scores = g.normal(size=(9, 9))
    v = g.normal(size=(9, 4))
    perm = g.permutation(9)
    with ad.no_grad():
        base_p = ad.softmax_rows(Tensor(scores)).value
        base_ctx = ad.attend(Tensor(base_p), Tensor(v)).value
        perm_p = ad.softmax_rows(Tensor(scores[perm][:, perm])).value
        perm_ctx = ad.attend(Tensor(perm_p), Tensor(v[perm])).value
    assert np.array_equal(perm_p, base_p[perm][:, perm])
    assert np.array_equal(perm_ctx, base_ctx[perm])
