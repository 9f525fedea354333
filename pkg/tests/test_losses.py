import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from distillkit import ConfigurationError, InputError
from distillkit.losses import (
    LossWeights,
    Projection,
    feature_distillation_loss,
    response_distillation_loss,
    softmax_with_temperature,
    total_loss,
)

from _oracles import central_difference, numpy_softmax, relative_error

DIMS = [4, 16, 64]


def test_softmax_uniform_for_equal_logits():
    assert torch.allclose(softmax_with_temperature([0.0, 0.0, 0.0]), torch.full((3,), 1 / 3))


def test_softmax_direct_evaluation():
    p = softmax_with_temperature(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
    assert torch.allclose(p, torch.tensor([2 / 3, 1 / 3], dtype=torch.float64), atol=1e-12)


def test_softmax_high_temperature_limit():
    p = softmax_with_temperature(torch.tensor([10.0, 0.0], dtype=torch.float64), 1e6)
    assert (p - 0.5).abs().max() <= 1e-5


def test_softmax_matches_numpy_reference():
    z = np.random.default_rng(0).normal(size=(5, 7)) * 3
    for t in (0.5, 1.0, 4.0):
        ours = softmax_with_temperature(torch.tensor(z), t).numpy()
        np.testing.assert_allclose(ours, numpy_softmax(z, t), rtol=1e-12)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(t):
    with pytest.raises(ConfigurationError):
        softmax_with_temperature([1.0, 2.0], t)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40))
def test_softmax_sums_to_one(z):
    p = softmax_with_temperature(torch.tensor(z, dtype=torch.float64))
    assert abs(p.sum().item() - 1.0) <= 1e-6
    assert (p >= 0).all() and (p <= 1).all()


def test_response_loss_zero_on_identity():
    z = torch.randn(4, 6)
    assert response_distillation_loss(z, z.clone()).item() == 0.0


def test_response_loss_hand_value():
    # soft targets [1, 0] vs [0.5, 0.5]: ((0.5)^2 + (0.5)^2) / 2
    z_t = torch.tensor([[100.0, 0.0]], dtype=torch.float64)
    z_s = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    assert response_distillation_loss(z_t, z_s).item() == pytest.approx(0.25, abs=1e-12)


def test_response_loss_shift_invariant_and_symmetric():
    g = torch.Generator().manual_seed(1)
    z_t, z_s = torch.randn(3, 5, generator=g, dtype=torch.float64), torch.randn(3, 5, generator=g, dtype=torch.float64)
    base = response_distillation_loss(z_t, z_s)
    assert response_distillation_loss(z_t + 7.5, z_s + 7.5).item() == pytest.approx(base.item(), rel=1e-12)
    assert response_distillation_loss(z_s, z_t).item() == pytest.approx(base.item(), rel=1e-12)


def test_response_loss_shape_mismatch():
    with pytest.raises(InputError):
        response_distillation_loss(torch.randn(2, 3), torch.randn(2, 4))


def test_response_loss_on_logits_switch():
    z_t, z_s = torch.tensor([[2.0, 0.0]]), torch.tensor([[0.0, 0.0]])
    assert response_distillation_loss(z_t, z_s, on_logits=True).item() == pytest.approx(2.0)


@pytest.mark.parametrize("dim", DIMS)
@pytest.mark.parametrize("temperature", [1.0, 3.0])
def test_response_loss_gradient_matches_finite_differences(dim, temperature):
    g = torch.Generator().manual_seed(dim)
    z_t = torch.randn(3, dim, generator=g, dtype=torch.float64)
    z_s = torch.randn(3, dim, generator=g, dtype=torch.float64, requires_grad=True)
    response_distillation_loss(z_t, z_s, temperature).backward()
    numeric = central_difference(lambda: response_distillation_loss(z_t, z_s, temperature), z_s, eps=1e-4)
    assert relative_error(z_s.grad, numeric) <= 1e-4


def test_response_loss_blocks_teacher_gradient():
    z_t = torch.randn(2, 5, requires_grad=True)
    z_s = torch.randn(2, 5, requires_grad=True)
    loss = response_distillation_loss(z_t, z_s)
    loss.backward()
    assert z_t.grad is None
    assert z_s.grad is not None
    # the teacher value still matters
    assert response_distillation_loss(z_t + torch.tensor([1.0, 0, 0, 0, 0]), z_s).item() != loss.item()


def test_feature_loss_identity_cases():
    ident = Projection.identity(2)
    assert feature_distillation_loss(torch.tensor([[1.0, 2.0]]), torch.tensor([[1.0, 2.0]]), ident, ident) == 0
    value = feature_distillation_loss(torch.tensor([[1.0, 2.0]]), torch.tensor([[1.0, 0.0]]), ident, ident)
    assert value.item() == pytest.approx(2.0)


def test_feature_loss_across_unequal_widths():
    loss = feature_distillation_loss(torch.randn(4, 2048), torch.randn(4, 64), Projection(2048, 128), Projection(64, 128))
    assert torch.isfinite(loss) and loss.item() >= 0


def test_feature_loss_projection_mismatch():
    with pytest.raises(ConfigurationError):
        feature_distillation_loss(torch.randn(2, 8), torch.randn(2, 4), Projection(8, 16), Projection(4, 8))


def test_identity_projection_requires_equal_widths():
    with pytest.raises(ConfigurationError):
        Projection(4, 8, identity=True)


@pytest.mark.parametrize("dim", DIMS)
def test_feature_loss_gradients_match_finite_differences(dim):
    torch.manual_seed(dim)
    proj_t, proj_s = Projection(dim + 3, 8).double(), Projection(dim, 8).double()
    f_t = torch.randn(3, dim + 3, dtype=torch.float64)
    f_s = torch.randn(3, dim, dtype=torch.float64, requires_grad=True)

    def loss():
        return feature_distillation_loss(f_t, f_s, proj_t, proj_s)

    loss().backward()
    assert relative_error(f_s.grad, central_difference(loss, f_s)) <= 1e-4
    for p in list(proj_t.parameters()) + list(proj_s.parameters()):
        assert relative_error(p.grad, central_difference(loss, p)) <= 1e-4


def test_feature_loss_blocks_teacher_gradient():
    f_t = torch.randn(2, 6, requires_grad=True)
    proj = Projection.identity(6)
    feature_distillation_loss(f_t, torch.randn(2, 6, requires_grad=True), proj, proj).backward()
    assert f_t.grad is None


def test_total_loss_reduces_to_ce():
    ce = torch.tensor(0.7)
    br = total_loss(ce, resp=torch.tensor(0.3), feat=torch.tensor(0.2), weights=LossWeights(0, 0, 0))
    assert br.total.item() == pytest.approx(0.7)


def test_total_loss_arithmetic():
    br = total_loss(1.0, resp=0.5, weights=LossWeights(1.0, 0.0, 0.0))
    assert br.as_dict() == {"ce": 1.0, "resp": 0.5, "total": 1.5}


def test_doubling_feature_weight_doubles_contribution():
    ce, feat = torch.tensor(0.9), torch.tensor(0.37)
    one = total_loss(ce, feat=feat, weights=LossWeights(0, 1.5, 0)).total - ce
    two = total_loss(ce, feat=feat, weights=LossWeights(0, 3.0, 0)).total - ce
    assert two.item() == pytest.approx(2 * one.item(), rel=1e-6)


def test_negative_weight_rejected():
    with pytest.raises(ConfigurationError):
        LossWeights(resp=-0.1)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5),
    st.floats(0, 3), st.floats(0, 3), st.floats(0, 3),
)
def test_breakdown_identity(ce, resp, feat, rel, b1, b2, b3):
    br = total_loss(torch.tensor(ce, dtype=torch.float64), torch.tensor(resp, dtype=torch.float64),
                    torch.tensor(feat, dtype=torch.float64), torch.tensor(rel, dtype=torch.float64),
                    LossWeights(b1, b2, b3))
    assert abs(br.total.item() - (ce + b1 * resp + b2 * feat + b3 * rel)) <= 1e-6


def test_total_loss_gradient_reaches_every_weighted_term():
    terms = [torch.tensor(v, requires_grad=True) for v in (1.0, 0.2, 0.3, 0.4)]
    total_loss(*terms, weights=LossWeights(0.5, 2.0, 3.0)).total.backward()
    assert [t.grad.item() for t in terms] == [1.0, 0.5, 2.0, 3.0]
