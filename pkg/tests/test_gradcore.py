import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsrdc.errors import ContractError, NumericalDomainError, NumericalFailure
from hsrdc.gradcore import tensor as T
from hsrdc.gradcore.gradcheck import check_gradients
from hsrdc.gradcore.nn import MLP, Classifier, Conv2d, Linear, Whitener, batch_whiten, build_network, frozen
from hsrdc.gradcore.optim import SGD, Adam, make_optimizer
from hsrdc.gradcore.tensor import Tape, Tensor, backward, no_grad

TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# -- primitive examples -----------------------------------------------------------
def test_matmul_identity():
    A = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(T.matmul(np.eye(3), A).data, A)


def test_softmax_symmetric_row():
    assert np.allclose(T.softmax(np.zeros((1, 2)), axis=1).data, [[0.5, 0.5]])


def test_relu_negative_input_zero_and_zero_gradient():
    x = Tensor(np.array([1.0, 2.5]), requires_grad=True)
    y = T.relu(-x)
    backward(T.tsum(y))
    assert np.all(y.data == 0) and np.all(x.grad == 0)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4, 2)), requires_grad=True)
    backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4, 2)))


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("op", [T.log, lambda a: T.softmax(a, axis=1)])
def test_nonfinite_input_is_domain_error(op):
    with pytest.raises(NumericalDomainError):
        op(Tensor(np.array([[1.0, np.nan]])))


def test_log_clamps_at_floor():
    out = T.log(Tensor(np.array([0.0, 1e-20, 1.0])))
    assert np.allclose(out.data, [np.log(T.LOG_FLOOR), np.log(T.LOG_FLOOR), 0.0])


def test_non_participating_params_get_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    backward(T.tsum(a * 2.0), [a, b])
    assert np.array_equal(b.grad, np.zeros(3))


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    z = y + x
    tape = Tape.record(T.tsum(z * y))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent, live in zip(node._parents, node._live):
            if live:
                assert pos[id(parent)] < pos[id(node)]


@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_positive_and_normalized(n, k, seed):
    x = np.random.default_rng(seed).normal(scale=20.0, size=(n, k))
    p = T.softmax(x, axis=1).data
    assert np.all(p > 0) and np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_frozen_blocks_gradient_even_after_exit():
    rng = np.random.default_rng(1)
    m = Linear(3, 2, rng)
    other = leaf(rng, 3, 4)
    with frozen(m):
        out = m(other)
    loss = T.tsum(out * out)
    for p in m.parameters():
        p.grad = None
    backward(loss, m.parameters() + [other])
    assert all(np.all(p.grad == 0) for p in m.parameters())
    assert np.any(other.grad != 0)


def test_grad_reverse_flips_sign():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(T.tsum(T.grad_reverse(x, 0.5) * 3.0))
    assert np.allclose(x.grad, [-1.5, -1.5])


# -- finite-difference checks per primitive -----------------------------------------
PRIMS = {
    "add": lambda r: ((leaf(r, 3, 4), leaf(r, 1, 4)), lambda a, b: T.tsum((a + b) ** 2)),
    "sub": lambda r: ((leaf(r, 3, 4), leaf(r, 3, 1)), lambda a, b: T.tsum((a - b) ** 2)),
    "mul": lambda r: ((leaf(r, 3, 4), leaf(r, 4)), lambda a, b: T.tsum(T.tanh(a * b))),
    "div": lambda r: ((leaf(r, 3), Tensor(2.0 + r.random(3), requires_grad=True)),
                      lambda a, b: T.tsum(a / b)),
    "exp": lambda r: ((leaf(r, 2, 3),), lambda a: T.tsum(T.exp(a) * 0.3)),
    "log": lambda r: ((Tensor(0.5 + r.random((2, 3)), requires_grad=True),), lambda a: T.tsum(T.log(a))),
    "relu": lambda r: ((leaf(r, 4, 5),), lambda a: T.tsum(T.relu(a) * T.relu(a))),
    "sigmoid": lambda r: ((leaf(r, 4),), lambda a: T.tsum(T.sigmoid(a) ** 2)),
    "softmax": lambda r: ((leaf(r, 3, 4), leaf(r, 3, 4)),
                          lambda a, w: T.tsum(T.softmax(a, axis=1) * w)),
    "mean_sum": lambda r: ((leaf(r, 3, 4),),
                           lambda a: T.tsum(T.mean(a, axis=0) ** 2) + T.tsum(a, axis=1)[0]),
    "matmul": lambda r: ((leaf(r, 3, 4), leaf(r, 4, 2)), lambda a, b: T.tsum(T.tanh(T.matmul(a, b)))),
    "sqdist": lambda r: ((leaf(r, 3, 5), leaf(r, 3, 2)),
                         lambda a, b: T.tsum(1.0 / (1.0 + T.sqdist_columns(a, b)))),
    "transpose_reshape": lambda r: ((leaf(r, 2, 3, 4),),
                                    lambda a: T.tsum(T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)) ** 3)),
    "getitem_concat": lambda r: ((leaf(r, 4, 3), leaf(r, 2, 3)),
                                 lambda a, b: T.tsum(T.getitem(T.concat([a, b], axis=0), (np.array([0, 5, 5]), np.array([1, 2, 2]))) ** 2)),
    "conv2d": lambda r: ((leaf(r, 2, 2, 5, 5), leaf(r, 3, 2, 3, 3), leaf(r, 3)),
                         lambda x, w, b: T.tsum(T.tanh(T.conv2d(x, w, b, stride=2, padding=1)))),
    "upsample": lambda r: ((leaf(r, 1, 2, 3, 3), leaf(r, 1, 2, 6, 6)),
                           lambda x, w: T.tsum(T.upsample_bilinear(x, 2) * w)),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(3):
        rng = np.random.default_rng(seed)
        params, fn = PRIMS[name](rng)
        assert check_gradients(lambda: fn(*params), list(params)) <= TOL


def _spd_input(rng, d=3, b=8):
    return leaf(rng, d, b)


def test_sym_inv_sqrt_and_whitening_gradient():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        z = _spd_input(rng)
        w = Tensor(rng.standard_normal((3, 8)))
        assert check_gradients(lambda: T.tsum(batch_whiten(z) * w), [z]) <= TOL


def test_mlp_gradients_match_finite_differences():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        net = MLP([3, 5, 4, 2], rng, "tanh")
        x = Tensor(rng.standard_normal((3, 6)))
        assert check_gradients(lambda: T.tsum(net(x) ** 2), net.parameters()) <= TOL


def test_backward_is_bit_deterministic():
    def grads():
        rng = np.random.default_rng(7)
        net = MLP([4, 8, 3], rng)
        x = Tensor(rng.standard_normal((4, 10)))
        backward(T.tsum(T.softmax(T.transpose(net(x)), axis=1) ** 2))
        return [p.grad.copy() for p in net.parameters()]
    for a, b in zip(grads(), grads()):
        assert np.array_equal(a, b)


# -- conv and upsample oracles ---------------------------------------------------------
def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(x, w, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    assert np.allclose(out, ref)


def test_upsample_preserves_constants_and_factor_one():
    x = np.full((1, 1, 3, 4), 2.5)
    assert np.allclose(T.upsample_bilinear(x, 3).data, 2.5)
    y = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
    assert T.upsample_bilinear(y, 1) is y


# -- whitening -----------------------------------------------------------------------
def test_batch_whiten_moments():
    rng = np.random.default_rng(0)
    z = np.diag([1, 3, 0.5, 2]) @ rng.standard_normal((4, 200)) + 5.0
    w = batch_whiten(Tensor(z)).data
    assert np.abs(w.mean(axis=1)).max() <= 1e-10
    cov = w @ w.T / w.shape[1]
    assert np.linalg.norm(cov - np.eye(4)) <= 1e-6


def test_batch_whiten_idempotent_on_whitened_input():
    rng = np.random.default_rng(1)
    w = batch_whiten(Tensor(rng.standard_normal((3, 50)))).data
    assert np.allclose(batch_whiten(Tensor(w)).data, w, atol=1e-8)


def test_batch_whiten_needs_two_columns():
    with pytest.raises(ContractError):
        batch_whiten(Tensor(np.ones((3, 1))))


def test_whitener_matches_batch_whiten():
    z = np.random.default_rng(2).standard_normal((3, 40))
    assert np.allclose(Whitener(z)(z), batch_whiten(Tensor(z)).data, atol=1e-10)


# -- networks ------------------------------------------------------------------------
def test_build_network_shapes_and_probabilities():
    rng = np.random.default_rng(0)
    phi, f = build_network([2, 8, 6], 2, rng, hidden=4)
    z = phi(Tensor(np.array([[1.0], [0.0]])))
    assert z.shape == (6, 1)
    p = f(z).data
    assert p.shape == (1, 2) and p.sum() == pytest.approx(1.0)


def test_build_network_rejects_bad_specs():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        build_network([], 2, rng)
    with pytest.raises(ContractError):
        build_network([2, 0, 3], 2, rng)


def test_untrained_net_near_chance():
    rng = np.random.default_rng(5)
    accs = []
    for seed in range(5):
        phi, f = build_network([2, 16, 8], 2, np.random.default_rng(seed))
        x = rng.standard_normal((2, 10000))
        y = (x[0] > 0).astype(int)
        pred = np.argmax(f(phi(Tensor(x))).data, axis=1)
        accs.append(np.mean(pred == y))
    # single nets can be biased; averaged over nets the label is unpredictable
    assert abs(np.mean(accs) - 0.5) < 0.2


def test_state_dict_round_trip():
    rng = np.random.default_rng(0)
    a, b = Classifier(4, 3, 2, rng), Classifier(4, 3, 2, rng)
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)
    with pytest.raises(ContractError):
        b.load_state_dict({})


# -- optimizers ----------------------------------------------------------------------
def test_sgd_plain_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    SGD([p], lr=0.1, momentum=0.0).step()
    assert np.allclose(p.data, [0.95, 2.1])


def test_adam_first_step_magnitude_is_lr():
    for g in (1e-3, 1.0, 1e3):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([g])
        Adam([p], lr=0.01).step()
        assert abs(p.data[0]) == pytest.approx(0.01, rel=1e-4)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = Tensor(np.array([1.0, -3.0]), requires_grad=True)
    opt = make_optimizer(kind, [p], lr=0.1)
    opt.zero_grad()
    opt.step()
    assert np.array_equal(p.data, [1.0, -3.0])


def test_sgd_weight_decay_is_l2_term():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5).step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_nonfinite_gradient_aborts():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.inf])
    with pytest.raises(NumericalFailure):
        SGD([p], lr=0.1).step()


def test_global_norm_clip():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([30.0, 40.0])
    SGD([p], lr=1.0, momentum=0.0, clip_norm=5.0).step()
    assert np.allclose(p.data, [-3.0, -4.0])
    with pytest.raises(ContractError):
        SGD([p], lr=1.0, clip_norm=0.0)


def test_unknown_optimizer_and_bad_lr():
    with pytest.raises(ContractError):
        make_optimizer("rmsprop", [])
    with pytest.raises(ContractError):
        SGD([], lr=0.0)


def test_conv_module_shapes():
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 4, 3, rng, stride=2, padding=1)
    assert conv(Tensor(np.zeros((2, 3, 8, 8)))).shape == (2, 4, 4, 4)


def test_ndarray_on_the_left_defers_to_tensor():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = np.array([3.0, 4.0]) * a + np.array([1.0, 1.0]) - a
    assert isinstance(out, Tensor) and np.allclose(out.data, [3.0, 7.0])
