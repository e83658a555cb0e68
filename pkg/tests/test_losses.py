import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import parameter_gradient_error, random_simplex

from lowbudget import losses
from lowbudget.autodiff import Tensor
from lowbudget.errors import ContractViolation
from lowbudget.network import Domain, build_mlp


def test_supervised_loss_value():
    p = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert losses.supervised_loss(p, [0, 0]).item() == pytest.approx(1.039721, abs=1e-6)


def test_supervised_loss_perfect_and_missing_labels():
    assert losses.supervised_loss(np.eye(3), [0, 1, 2]).item() == 0.0
    with pytest.raises(ContractViolation):
        losses.supervised_loss(np.eye(3), None)


def test_entropy_loss_values():
    assert losses.entropy_loss([[0.7, 0.2, 0.1]]).item() == pytest.approx(0.801819, abs=1e-6)
    assert losses.entropy_loss([[1.0, 0.0, 0.0]]).item() == 0.0
    assert losses.entropy_loss([[0.1] * 10]).item() == pytest.approx(math.log(10), abs=1e-12)


def test_consistency_loss_values():
    assert losses.consistency_loss([[1.0, 0.0]], [[0.5, 0.5]]).item() == pytest.approx(math.log(2), abs=1e-12)
    p = np.array([[0.3, 0.7], [0.6, 0.4]])
    assert losses.consistency_loss(p, p).item() == 0.0


def test_consistency_shape_mismatch():
    with pytest.raises(ContractViolation):
        losses.consistency_loss(np.full((2, 3), 1 / 3), np.full((2, 2), 0.5))


def test_total_loss_lambda():
    ls, lu = Tensor(1.25), Tensor(0.5)
    assert losses.total_loss(ls, lu, 0.0).item() == 1.25
    assert losses.total_loss(ls, lu, 2.0).item() == 2.25
    with pytest.raises(ContractViolation):
        losses.total_loss(ls, lu, -0.1)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 64),
    st.integers(2, 20),
    st.integers(0, 2**32 - 1),
    st.booleans(),
)
def test_identity_holds(batch, classes, seed, spiky):
    r = np.random.default_rng(seed)
    p, q = random_simplex(r, batch, classes, spiky), random_simplex(r, batch, classes, spiky)
    lhs = losses.entropy_loss(p).item() + losses.consistency_loss(p, q).item()
    assert abs(lhs - losses.unsupervised_loss(p, q).item()) <= 1e-12


def test_composite_loss_gradient_on_two_layer_model():
    r = np.random.default_rng(0)
    model = build_mlp(2, [6, 6], 3, seed=0)
    xs, ys = r.normal(size=(8, 2)), r.integers(0, 3, size=8)
    xt = r.normal(size=(8, 2))
    xp = xt + r.normal(scale=0.3, size=xt.shape)

    def loss():
        ls = losses.supervised_loss(model.forward(xs, Domain.SOURCE, True), ys)
        lu = losses.unsupervised_loss(model.forward(xt, Domain.TARGET, True),
                                      model.forward(xp, Domain.TARGET_PERTURBED, True))
        return losses.total_loss(ls, lu, 0.7)

    assert parameter_gradient_error(model.parameters(), loss) < 1e-4
