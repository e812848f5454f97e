import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfa_lab.errors import DimensionError, DomainError
from sfa_lab.nnet import (Batch, MlpSpec, ModelParams, accuracy, fisher_diagonal, flatten, forward,
                          init_params, loss_and_grad, unflatten)


def random_instance(rng, sizes=(4, 5, 3), n=8, activation="relu"):
    spec = MlpSpec(sizes, activation)
    params = ModelParams(spec, rng.normal(scale=0.7, size=spec.num_params))
    batch = Batch(rng.normal(size=(n, sizes[0])), rng.integers(0, sizes[-1], size=n))
    return params, batch


def finite_difference_grad(params, batch, h=1e-5):
    g = np.zeros_like(params.flat)
    for i in range(len(g)):
        up, down = params.flat.copy(), params.flat.copy()
        up[i] += h
        down[i] -= h
        g[i] = (loss_and_grad(params.with_flat(up), batch)[0]
                - loss_and_grad(params.with_flat(down), batch)[0]) / (2 * h)
    return g


def max_rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def test_spec_validation():
    with pytest.raises(DomainError):
        MlpSpec((3,))
    with pytest.raises(DomainError):
        MlpSpec((3, 0, 2))
    with pytest.raises(DomainError):
        MlpSpec((3, 2), "sigmoid")


def test_init_params():
    spec = MlpSpec((2, 3, 2))
    assert spec.num_params == (2 * 3 + 3) + (3 * 2 + 2) == 17
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert a.flat.tobytes() == b.flat.tobytes()
    for w, bias in a.layers():
        assert np.all(bias == 0)
        s = np.sqrt(6 / sum(w.shape))
        assert np.all(np.abs(w) <= s)
    assert not np.array_equal(init_params(spec, 8).flat, a.flat)


def test_flat_roundtrip_bitwise():
    rng = np.random.default_rng(1)
    spec = MlpSpec((5, 7, 4, 3))
    v = rng.normal(size=spec.num_params)
    assert flatten(unflatten(spec, v)).tobytes() == v.tobytes()


def test_layout_is_weights_then_bias_output_major():
    spec = MlpSpec((2, 3))
    flat = np.arange(spec.num_params, dtype=float)
    (w, b), = unflatten(spec, flat)
    assert np.array_equal(w, [[0, 1], [2, 3], [4, 5]])
    assert np.array_equal(b, [6, 7, 8])


def test_forward_examples():
    spec = MlpSpec((3, 4, 2))
    zero = ModelParams(spec, np.zeros(spec.num_params))
    assert np.array_equal(forward(zero, Batch(np.ones((2, 3)), [0, 1])), np.zeros((2, 2)))

    ident = ModelParams(MlpSpec((2, 2)), flatten([(np.eye(2), np.zeros(2))]))
    assert np.array_equal(forward(ident, Batch([[3.0, -1.0]], [0])), [[3.0, -1.0]])

    # worked by hand: z1 = [1-2, 0.5+4-1] = [-1, 3.5]; relu -> [0, 3.5]
    # z2 = [0*1 + 3.5*0 + 0.5, 0*-1 + 3.5*1 + 0] = [0.5, 3.5]
    p = ModelParams(MlpSpec((2, 2, 2)), flatten([
        (np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, -1.0])),
        (np.array([[1.0, 0.0], [-1.0, 1.0]]), np.array([0.5, 0.0])),
    ]))
    assert np.allclose(forward(p, Batch([[1.0, 2.0]], [0])), [[0.5, 3.5]], rtol=0, atol=1e-15)


def test_forward_dimension_mismatch():
    p = init_params(MlpSpec((3, 2)), 0)
    with pytest.raises(DimensionError):
        forward(p, Batch(np.ones((1, 4)), [0]))


def test_zero_params_loss_is_log_c():
    spec = MlpSpec((3, 4, 5))
    p = ModelParams(spec, np.zeros(spec.num_params))
    batch = Batch(np.random.default_rng(0).normal(size=(6, 3)), [0, 1, 2, 3, 4, 0])
    loss, g = loss_and_grad(p, batch)
    assert loss == pytest.approx(np.log(5), rel=1e-14)
    # hidden activations are zero, so only the output bias has a gradient: mean(1/C - onehot)
    (w1, b1), (w2, b2) = unflatten(spec, g)
    assert np.all(w1 == 0) and np.all(b1 == 0) and np.all(w2 == 0)
    expected = 1 / 5 - np.bincount(batch.labels, minlength=5) / 6
    np.testing.assert_allclose(b2, expected, atol=1e-15)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(3)
    params, batch = random_instance(rng, activation=activation)
    _, g = loss_and_grad(params, batch)
    assert max_rel_error(g, finite_difference_grad(params, batch)) < 1e-4


def test_duplicated_batch_leaves_loss_and_grad_unchanged():
    params, batch = random_instance(np.random.default_rng(4))
    doubled = Batch(np.vstack([batch.inputs, batch.inputs]), np.concatenate([batch.labels, batch.labels]))
    l1, g1 = loss_and_grad(params, batch)
    l2, g2 = loss_and_grad(params, doubled)
    assert l2 == pytest.approx(l1, rel=1e-13)
    np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    params, batch = random_instance(rng)
    perm = rng.permutation(len(batch))
    shuffled = Batch(batch.inputs[perm], batch.labels[perm])
    assert loss_and_grad(params, shuffled)[0] == pytest.approx(loss_and_grad(params, batch)[0], rel=1e-13)


def test_empty_batch_is_domain_error():
    p = init_params(MlpSpec((2, 2)), 0)
    with pytest.raises(DomainError):
        loss_and_grad(p, Batch(np.zeros((0, 2)), []))
    with pytest.raises(DomainError):
        accuracy(p, Batch(np.zeros((0, 2)), []))


def test_accuracy_examples():
    # zero logits everywhere: every row predicts class 0; two of four rows carry label 0
    spec = MlpSpec((2, 2))
    zero = ModelParams(spec, np.zeros(spec.num_params))
    data = Batch(np.array([[1, 0], [0, 1], [2, 2], [-1, 3]], float), [0, 1, 0, 1])
    assert accuracy(zero, data) == 0.5

    # separating net: class = which coordinate is larger
    sep = ModelParams(spec, flatten([(np.eye(2), np.zeros(2))]))
    x = np.array([[2.0, 1.0], [0.0, 3.0], [5.0, -1.0]])
    assert accuracy(sep, Batch(x, [0, 1, 0])) == 1.0
    assert accuracy(sep, Batch(x, [1, 0, 1])) == 0.0


def test_masked_accuracy_restricts_argmax():
    spec = MlpSpec((3, 3))
    p = ModelParams(spec, flatten([(np.eye(3), np.zeros(3))]))
    data = Batch(np.array([[0.0, 5.0, 1.0], [2.0, 9.0, 0.0]]), [2, 0])
    assert accuracy(p, data) == 0.0
    # restricted to {0, 2}: row 0 picks 2 (1 > 0), row 1 picks 0 (2 > 0)
    assert accuracy(p, data, allowed=(0, 2)) == 1.0


def test_fisher_single_example_closed_form():
    # softmax over two logits w0*x, w1*x is a logistic model; d log p_y / d w_y = (1 - p_y) x
    w = np.array([[0.3], [-0.8]])
    p = ModelParams(MlpSpec((1, 2)), flatten([(w, np.zeros(2))]))
    x, y = 1.7, 0
    z = w[:, 0] * x
    p_y = np.exp(z[y]) / np.exp(z).sum()
    f = fisher_diagonal(p, Batch([[x]], [y]))
    (fw, fb), = unflatten(p.spec, f)
    assert fw[y, 0] == pytest.approx((p_y - 1) ** 2 * x ** 2, rel=1e-12)
    assert fb[y] == pytest.approx((p_y - 1) ** 2, rel=1e-12)


def test_fisher_matches_per_example_gradients():
    rng = np.random.default_rng(5)
    params, batch = random_instance(rng, n=6)
    per_example = [loss_and_grad(params, Batch(batch.inputs[i:i + 1], batch.labels[i:i + 1]))[1]
                   for i in range(len(batch))]
    expected = np.mean([g ** 2 for g in per_example], axis=0)
    np.testing.assert_allclose(fisher_diagonal(params, batch), expected, rtol=1e-10, atol=1e-15)


def test_fisher_properties():
    rng = np.random.default_rng(6)
    params, batch = random_instance(rng, n=20)
    f = fisher_diagonal(params, batch, n_samples=7, seed=3)
    assert np.all(f >= 0) and np.all(np.isfinite(f))
    assert np.array_equal(f, fisher_diagonal(params, batch, n_samples=7, seed=3))
    # an input feature that is always zero gives its first-layer weights zero gradient
    x = batch.inputs.copy()
    x[:, 2] = 0.0
    (fw, _), _ = unflatten(params.spec, fisher_diagonal(params, Batch(x, batch.labels)))
    assert np.all(fw[:, 2] == 0)
    with pytest.raises(DomainError):
        fisher_diagonal(params, batch, n_samples=0)


def test_fisher_scales_quadratically_with_input_scale():
    rng = np.random.default_rng(7)
    spec = MlpSpec((4, 3))
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, size=10)
    c = 3.0
    f1 = fisher_diagonal(ModelParams(spec, flatten([(w, b)])), Batch(x, y))
    # logits unchanged when inputs grow by c and weights shrink by c
    f2 = fisher_diagonal(ModelParams(spec, flatten([(w / c, b)])), Batch(c * x, y))
    (fw1, fb1), = unflatten(spec, f1)
    (fw2, fb2), = unflatten(spec, f2)
    np.testing.assert_allclose(fw2, c ** 2 * fw1, rtol=1e-10)
    np.testing.assert_allclose(fb2, fb1, rtol=1e-10)
