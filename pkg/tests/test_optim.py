import numpy as np
import pytest

from regnn import autodiff as ad
from regnn.autodiff import Tensor, grad_check
from regnn.optim import AdamState, BatchNormState, adam_step, batch_norm, lr_at


def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(AdamState(), p, {"w": np.zeros(2)}, lr=0.01)
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])


@pytest.mark.parametrize("g", [1e-3, 0.7, -42.0])
def test_adam_first_step_magnitude(g):
    p = {"w": Tensor(np.array([0.0]))}
    state = AdamState()
    adam_step(state, p, {"w": np.array([g])}, lr=0.01)
    step = abs(p["w"].value[0])
    assert 0.99 * 0.01 <= step <= 0.01
    assert np.sign(p["w"].value[0]) == -np.sign(g)
    assert state.step == 1


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=0.05)
    for _ in range(200):
        ad.backward(ad.sum_(ad.square(ad.sub(w, Tensor([5.0])))))
        adam_step(state, {"w": w})
    assert abs(w.value[0] - 5.0) < 0.5


def test_adam_deterministic():
    def run():
        p = {"w": Tensor(np.array([0.3, -0.1]))}
        s = AdamState()
        for g in ([0.1, 0.2], [-0.5, 0.4], [0.9, -0.9]):
            adam_step(s, p, {"w": np.array(g)})
        return p["w"].value

    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_non_finite():
    p = {"w": Tensor(np.zeros(2)), "bias": Tensor(np.zeros(1))}
    with pytest.raises(FloatingPointError, match="bias"):
        adam_step(AdamState(), p, {"w": np.zeros(2), "bias": np.array([np.nan])})
    np.testing.assert_array_equal(p["w"].value, [0.0, 0.0])


@pytest.mark.parametrize("epoch, expected", [(0, 0.01), (49, 0.01), (50, 0.005), (100, 0.0025)])
def test_lr_schedule(epoch, expected):
    assert lr_at(epoch, 0.01) == pytest.approx(expected, rel=1e-15)


def test_batch_norm_identity_on_standardized_batch():
    x = np.array([[1.0, -1.0], [-1.0, 1.0]])
    bn = BatchNormState.create(2)
    out = batch_norm(Tensor(x), bn, training=True).value
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))


def test_batch_norm_constant_column():
    x = np.array([[3.0, 1.0], [3.0, 2.0], [3.0, 4.0]])
    bn = BatchNormState.create(2)
    bn.beta.value[:] = [0.25, 0.0]
    out = batch_norm(Tensor(x), bn, training=True).value
    np.testing.assert_allclose(out[:, 0], 0.25)


def test_batch_norm_eval_formula():
    rng = np.random.default_rng(3)
    bn = BatchNormState.create(3)
    bn.gamma.value[:] = rng.normal(size=3)
    bn.beta.value[:] = rng.normal(size=3)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    x = rng.normal(size=(4, 3))
    out = batch_norm(Tensor(x), bn, training=False).value
    for i in range(4):
        for j in range(3):
            ref = (x[i, j] - bn.running_mean[j]) / np.sqrt(bn.running_var[j] + 1e-5) * bn.gamma.value[j] + bn.beta.value[j]
            assert out[i, j] == pytest.approx(ref, rel=1e-12)


def test_batch_norm_running_stats_update():
    x = np.array([[0.0], [2.0], [4.0]])
    bn = BatchNormState.create(1)
    batch_norm(Tensor(x), bn, training=True)
    assert bn.running_mean[0] == pytest.approx(0.1 * 2.0)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 4.0)


def test_batch_norm_single_row_training_errors():
    with pytest.raises(ValueError, match="at least 2"):
        batch_norm(Tensor(np.ones((1, 2))), BatchNormState.create(2), training=True)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(5)
    bn = BatchNormState.create(3)
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, size=3)
    w = Tensor(rng.normal(size=(5, 3)))
    x = Tensor(rng.normal(size=(5, 3)))

    def f(x, gamma, beta):
        saved = (bn.running_mean.copy(), bn.running_var.copy())
        out = batch_norm(x, bn, training)
        bn.running_mean, bn.running_var = saved
        return ad.sum_(ad.mul(ad.square(out), w))

    bn.gamma.value[:] = rng.normal(size=3)
    assert grad_check(f, [x, bn.gamma, bn.beta], tol=1e-6).passed
