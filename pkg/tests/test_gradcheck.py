"""Finite-difference verification of every registered op's adjoint."""

import numpy as np
import pytest

from poolforge import Tape, Tensor, grad_check
from poolforge.errors import NumericError
from poolforge.tensor import (
    add,
    batch_norm,
    concat,
    l2_normalize,
    log,
    matmul,
    mul,
    narrow,
    neg,
    NormState,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tanh,
    transpose,
)

RNG = np.random.default_rng(42)


def _weighted_sum(y, w):
    """Scalar-ize with fixed random weights so gradients are nontrivial."""
    return reduce_sum(mul(y, Tensor(w)))


class TestAnalyticCases:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0])
        report = grad_check(lambda t: reduce_sum(mul(t, t)), x, h=1e-5, tol=1e-8)
        assert report.passed, report

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal(7))
        target = np.zeros(7)
        target[2] = 1.0

        def loss(t):
            return neg(reduce_sum(mul(Tensor(target), log(softmax(t)))))

        report = grad_check(loss, logits, h=1e-5, tol=1e-6)
        assert report.passed, report

    def test_rejects_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        with pytest.raises(NumericError):
            grad_check(lambda t: reduce_sum(t), x)

    def test_rejects_out_of_range_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: reduce_sum(t), Tensor([1.0]), h=1e-2)

    def test_sampled_coordinates(self):
        x = Tensor(RNG.standard_normal((10, 10)))
        report = grad_check(lambda t: reduce_sum(mul(t, t)), x, sample=20,
                            rng=np.random.default_rng(1))
        assert report.coords_checked == 20
        assert report.passed


# One entry per registered op: (name, builder). The builder returns a pure
# scalar function of its tensor argument plus the point to check at.
def _op_cases():
    w23 = RNG.standard_normal((2, 3))
    w24 = RNG.standard_normal((2, 4))
    w43 = RNG.standard_normal((4, 3))
    w6 = RNG.standard_normal(6)
    wb = RNG.standard_normal((4, 2, 2))
    w83 = RNG.standard_normal((8, 3))

    a_fixed = Tensor(RNG.standard_normal((2, 3)))
    m_fixed = Tensor(RNG.standard_normal((3, 4)))
    mb_fixed = Tensor(RNG.standard_normal((4, 3, 2)))
    x83_fixed = Tensor(RNG.standard_normal((8, 3)))

    # Keep relu/sqrt/log probes away from their kinks and domain edges.
    positive = np.abs(RNG.standard_normal((2, 3))) + 0.5
    off_kink = RNG.standard_normal((2, 3))
    off_kink[np.abs(off_kink) < 0.1] += 0.5

    scale = Tensor(np.abs(RNG.standard_normal(3)) + 0.5)
    shift = Tensor(RNG.standard_normal(3))

    cases = [
        ("add", lambda x: _weighted_sum(add(x, a_fixed), w23),
         RNG.standard_normal((2, 3))),
        ("add_broadcast", lambda x: _weighted_sum(add(x, a_fixed), w23),
         RNG.standard_normal(3)),
        ("sub", lambda x: _weighted_sum(sub(a_fixed, x), w23),
         RNG.standard_normal((2, 3))),
        ("mul", lambda x: _weighted_sum(mul(x, a_fixed), w23),
         RNG.standard_normal((2, 3))),
        ("scalar_mul", lambda x: _weighted_sum(mul(x, 2.5), w23),
         RNG.standard_normal((2, 3))),
        ("neg", lambda x: _weighted_sum(neg(x), w23),
         RNG.standard_normal((2, 3))),
        ("matmul_lhs", lambda x: _weighted_sum(matmul(x, m_fixed), w24),
         RNG.standard_normal((2, 3))),
        ("matmul_rhs", lambda x: _weighted_sum(matmul(a_fixed, x), w24),
         RNG.standard_normal((3, 4))),
        ("matmul_batched", lambda x: _weighted_sum(matmul(x, mb_fixed), wb),
         RNG.standard_normal((4, 2, 3))),
        ("matmul_batched_broadcast",
         lambda x: _weighted_sum(matmul(x, mb_fixed), wb),
         RNG.standard_normal((2, 3))),
        ("matmul_vector", lambda x: reduce_sum(mul(matmul(a_fixed, x), 1.5)),
         RNG.standard_normal(3)),
        ("matmul_vector_lhs", lambda x: reduce_sum(matmul(x, m_fixed)),
         RNG.standard_normal(3)),
        ("relu", lambda x: _weighted_sum(relu(x), w23), off_kink),
        ("sigmoid", lambda x: _weighted_sum(sigmoid(x), w23),
         RNG.standard_normal((2, 3))),
        ("tanh", lambda x: _weighted_sum(tanh(x), w23),
         RNG.standard_normal((2, 3))),
        ("sqrt", lambda x: _weighted_sum(sqrt(x), w23), positive),
        ("log", lambda x: _weighted_sum(log(x), w23), positive + 0.5),
        ("reshape", lambda x: _weighted_sum(reshape(x, (6,)), w6),
         RNG.standard_normal((2, 3))),
        ("narrow", lambda x: _weighted_sum(narrow(x, 1, 1, 2), w23[:, :2]),
         RNG.standard_normal((2, 4))),
        ("transpose", lambda x: _weighted_sum(transpose(x), w23.T),
         RNG.standard_normal((2, 3))),
        ("concat", lambda x: _weighted_sum(concat([x, a_fixed], axis=0), w43),
         RNG.standard_normal((2, 3))),
        ("reduce_sum_axis", lambda x: _weighted_sum(reduce_sum(x, axis=0), w6[:3]),
         RNG.standard_normal((2, 3))),
        ("reduce_sum_all", lambda x: reduce_sum(x),
         RNG.standard_normal((2, 3))),
        ("reduce_mean", lambda x: _weighted_sum(reduce_mean(x, axis=1), w6[:2]),
         RNG.standard_normal((2, 3))),
        ("softmax", lambda x: _weighted_sum(softmax(x, axis=1), w23),
         RNG.standard_normal((2, 3))),
        ("l2_normalize", lambda x: _weighted_sum(l2_normalize(x, axis=1), w23),
         RNG.standard_normal((2, 3)) + 0.2),
    ]

    def bn_train(x):
        state = NormState(width=3)
        return _weighted_sum(batch_norm(x, scale, shift, state, training=True),
                             w83)

    frozen = NormState(width=3)
    frozen.running_mean[...] = RNG.standard_normal(3)
    frozen.running_var[...] = np.abs(RNG.standard_normal(3)) + 0.5

    def bn_infer(x):
        return _weighted_sum(batch_norm(x, scale, shift, frozen, training=False),
                             w23)

    cases.append(("batch_norm_train", bn_train, RNG.standard_normal((8, 3))))
    cases.append(("batch_norm_infer", bn_infer, RNG.standard_normal((2, 3))))

    def bn_scale(s):
        state = NormState(width=3)
        return _weighted_sum(batch_norm(x83_fixed, s, shift, state, training=True),
                             w83)

    def bn_shift(s):
        state = NormState(width=3)
        return _weighted_sum(batch_norm(x83_fixed, scale, s, state, training=True),
                             w83)

    cases.append(("batch_norm_scale", bn_scale, RNG.standard_normal(3)))
    cases.append(("batch_norm_shift", bn_shift, RNG.standard_normal(3)))
    return cases


@pytest.mark.parametrize("name,fn,point", _op_cases(),
                         ids=[c[0] for c in _op_cases()])
def test_every_op_matches_finite_differences(name, fn, point):
    report = grad_check(fn, Tensor(np.asarray(point, dtype=np.float64)),
                        h=1e-5, tol=1e-6)
    assert report.passed, f"{name}: {report}"
