import math

import numpy as np
import pytest

from msdet import diffcore as dc
from tests.conftest import numeric_grad, rel_err


def _grad_of(build, *arrays):
    """Tape gradients of the scalar ``build(*tensors)`` w.r.t. every array."""
    ts = [dc.Tensor(a, requires_grad=True) for a in arrays]
    with dc.Tape() as tape:
        out = build(*ts)
    dc.backward(tape, out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def _value(build, *arrays):
    return build(*[dc.Tensor(a) for a in arrays]).item()


def _check(build, *arrays, tol=1e-4):
    grads = _grad_of(build, *arrays)
    for a, g in zip(arrays, grads):
        num = numeric_grad(lambda: _value(build, *arrays), a)
        assert rel_err(g, num) <= tol


@pytest.mark.parametrize("seed", range(5))
def test_linear_relu_sigmoid_grads(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    W = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    w_out = rng.normal(size=(4, 2))
    _check(lambda x, W, b: dc.weighted_sum(dc.sigmoid(dc.linear(x, W, b)), w_out), x, W, b)
    _check(lambda x, W, b: dc.weighted_sum(dc.softplus(dc.linear(x, W, b)), w_out), x, W, b)


def test_relu_forward_and_mask():
    x = dc.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.tsum(dc.relu(x))
    dc.backward(tape, y)
    assert y.item() == 2.0
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_extremes_are_finite():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    p = dc.sigmoid(z).data
    assert np.all(np.isfinite(p))
    assert p[0] == 0.0 and p[2] == 0.5 and p[-1] == 1.0
    sp = dc.softplus(z).data
    assert np.all(np.isfinite(sp))
    assert sp[-1] == 800.0


def test_exp_sum_log_values():
    assert dc.exp_sum_log(np.array([3.5])).item() == 3.5
    np.testing.assert_allclose(dc.exp_sum_log(np.zeros((2, 3))).data, np.full(3, math.log(2)))
    big = dc.exp_sum_log(np.array([1000.0, 1000.0])).item()
    assert big == pytest.approx(1000.0 + math.log(2))


def test_exp_sum_log_empty_rejected():
    with pytest.raises(ValueError):
        dc.exp_sum_log(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        dc.max_agg(np.zeros(0))


def test_max_agg_first_index_gets_gradient():
    x = dc.Tensor(np.array([[1.0, 5.0], [3.0, 5.0]]), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.tsum(dc.max_agg(x))
    dc.backward(tape, y)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_binary_logistic_loss_validation():
    with pytest.raises(ValueError):
        dc.binary_logistic_loss(np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        dc.binary_logistic_loss(np.zeros(2), np.array([0.0, 2.0]))
    assert dc.binary_logistic_loss(np.zeros(3), np.array([0.0, 1.0, 1.0])).item() == pytest.approx(math.log(2))


def test_softmax_cross_entropy_grad():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 4))
    t = rng.integers(0, 4, size=5)
    _check(lambda z: dc.softmax_cross_entropy(z, t), z)


def test_grad_reverse_forward_identity_and_backward_sign():
    x = dc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.weighted_sum(dc.grad_reverse(x, 0.3), np.array([2.0, 5.0]))
    assert y.item() == 2.0 - 10.0
    dc.backward(tape, y)
    np.testing.assert_allclose(x.grad, [-0.6, -1.5])
    with pytest.raises(ValueError):
        dc.grad_reverse(x, -0.1)


def test_grad_reverse_zero_lambda_blocks_gradient():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.tsum(dc.grad_reverse(x, 0.0))
    dc.backward(tape, y)
    assert np.all(x.grad == 0.0)


def test_backward_rejects_non_scalar():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.relu(x)
    with pytest.raises(ValueError):
        dc.backward(tape, y)


def test_linear_shape_errors_are_descriptive():
    with pytest.raises(ValueError, match="mismatch"):
        dc.linear(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_no_tape_records_nothing():
    x = dc.Tensor(np.ones(2), requires_grad=True)
    y = dc.tsum(x)
    assert y.item() == 2.0
    with dc.Tape() as tape:
        pass
    assert len(tape) == 0


def test_shared_input_gradients_accumulate():
    x = dc.Tensor(np.array([2.0]), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.add(dc.sum_squares(x), dc.scale(dc.tsum(x), 3.0))
    dc.backward(tape, y)
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


def test_sgd_step_momentum_and_decay():
    p = dc.ParamStore({"w": np.array([1.0])})
    cfg = dc.SgdConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.1)
    dc.sgd_step(p, {"w": np.array([2.0])}, cfg)
    # v = 2 + 0.1 * 1 = 2.1; w = 1 - 0.21
    assert p["w"].data[0] == pytest.approx(0.79)
    dc.sgd_step(p, {"w": np.array([0.0])}, cfg)
    # v = 0.5 * 2.1 + 0.1 * 0.79
    assert p["w"].data[0] == pytest.approx(0.79 - 0.1 * (1.05 + 0.079))


def test_sgd_rejects_non_finite():
    p = dc.ParamStore({"w": np.zeros(2)})
    with pytest.raises(dc.TrainingDiverged):
        dc.sgd_step(p, {"w": np.array([np.nan, 0.0])}, dc.SgdConfig())


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(momentum=1.0), dict(weight_decay=-1.0)])
def test_sgd_config_validation(kw):
    with pytest.raises(ValueError):
        dc.SgdConfig(**kw)


def test_param_store_duplicate_and_copy():
    p = dc.ParamStore({"a": np.ones(2)})
    with pytest.raises(KeyError):
        p.add("a", np.zeros(2))
    q = p.copy()
    q["a"].data[0] = 5.0
    assert p["a"].data[0] == 1.0
    assert not p.equal(q)
    view = p.subset("a")
    view["a"].data[1] = 7.0
    assert p["a"].data[1] == 7.0


def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    p = dc.ParamStore({"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)})
    path = tmp_path / "m.ckpt"
    dc.save_checkpoint(path, p, kind="test", step=3)
    q, header = dc.load_checkpoint(path)
    assert p.equal(q)
    assert header["kind"] == "test" and header["step"] == 3
    first = path.read_bytes()
    dc.save_checkpoint(path, q, kind="test", step=3)
    assert path.read_bytes() == first


def test_checkpoint_truncation_detected(tmp_path):
    p = dc.ParamStore({"w": np.ones(4)})
    path = tmp_path / "m.ckpt"
    dc.save_checkpoint(path, p)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        dc.load_checkpoint(path)
