import math

import pytest
import torch
from torch.autograd import gradcheck

from app.core.exceptions import ContractError, TrainingStepError
from app.schemas import LossWeights, WarpLossTerms
from app.services.loss_service import (
    BatchOutputs,
    combined_l1_loss,
    gan_loss,
    generator_adversarial_loss,
    perceptual_geometric_matching,
    total_objective,
    warp_loss,
)


def _t(*values: float) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


def _never_called(x: torch.Tensor) -> torch.Tensor:
    raise AssertionError("feature extractor should not run")


def test_gan_loss_matches_closed_form():
    rho = 0.25
    expected = (
        rho * math.log(0.8) + (1 - rho) * math.log(0.6)
        + rho * math.log(1 - 0.3) + (1 - rho) * math.log(1 - 0.1)
    )
    assert gan_loss(_t(0.8), _t(0.6), _t(0.3), _t(0.1), rho).item() == pytest.approx(expected)


def test_rho_selects_discriminator():
    a = gan_loss(_t(0.8), _t(0.2), _t(0.3), _t(0.9), rho=1.0)
    b = gan_loss(_t(0.8), _t(0.7), _t(0.3), _t(0.05), rho=1.0)
    assert a.item() == pytest.approx(b.item())
    c = gan_loss(_t(0.1), _t(0.6), _t(0.95), _t(0.2), rho=0.0)
    d = gan_loss(_t(0.9), _t(0.6), _t(0.15), _t(0.2), rho=0.0)
    assert c.item() == pytest.approx(d.item())


def test_gan_loss_is_maximized_by_a_perfect_discriminator():
    perfect = gan_loss(_t(1.0), _t(1.0), _t(0.0), _t(0.0), 0.5)
    fooled = gan_loss(_t(0.5), _t(0.5), _t(0.5), _t(0.5), 0.5)
    assert perfect.item() == pytest.approx(0.0, abs=1e-6)
    assert fooled.item() == pytest.approx(2 * math.log(0.5))
    assert math.isfinite(gan_loss(_t(0.0), _t(0.0), _t(1.0), _t(1.0), 0.5).item())


@pytest.mark.parametrize("rho", [-0.1, 1.5])
def test_rho_outside_unit_interval(rho):
    with pytest.raises(ContractError):
        gan_loss(_t(0.5), _t(0.5), _t(0.5), _t(0.5), rho)


def test_generator_adversarial_loss_falls_as_fakes_fool():
    worse = generator_adversarial_loss(_t(0.1), _t(0.1), 0.5)
    better = generator_adversarial_loss(_t(0.9), _t(0.9), 0.5)
    assert better.item() < worse.item()


def test_gan_loss_gradcheck():
    inputs = tuple((_t(0.2, 0.7, 0.45) + 0.01 * i).requires_grad_(True) for i in range(4))
    assert gradcheck(lambda a, s, af, sf: gan_loss(a, s, af, sf, 0.3), inputs)
    assert gradcheck(lambda af, sf: generator_adversarial_loss(af, sf, 0.3), inputs[2:])


def test_combined_l1():
    g = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    t = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    plain = combined_l1_loss(g, t, LossWeights(l1_weight=2.0), feature_extractor=_never_called)
    assert plain.item() == pytest.approx(1.0)
    perceptual = combined_l1_loss(g, t, LossWeights(l1_weight=1.0, perceptual_weight=0.5), feature_extractor=lambda x: 3 * x)
    assert perceptual.item() == pytest.approx(0.5 + 0.5 * 1.5)
    with pytest.raises(ContractError, match="dimension mismatch"):
        combined_l1_loss(g, t[:, :, :2], LossWeights())


def test_combined_l1_gradcheck():
    g = (torch.rand(1, 3, 3, 3, dtype=torch.float64) + 1.0).requires_grad_(True)
    t = torch.rand(1, 3, 3, 3, dtype=torch.float64)
    assert gradcheck(lambda x: combined_l1_loss(x, t, LossWeights(perceptual_weight=0.3), feature_extractor=torch.tanh), (g,))


def _outputs(generated: torch.Tensor) -> BatchOutputs:
    return BatchOutputs(
        generated=generated,
        target=torch.zeros_like(generated),
        d_a_real=_t(0.8), d_s_real=_t(0.7), d_a_fake=_t(0.3), d_s_fake=_t(0.4),
    )


def test_total_objective_combines_terms():
    w = LossWeights(alpha=0.5, rho=0.5, l1_weight=1.0)
    gen = torch.full((1, 3, 2, 2), 0.25, dtype=torch.float64)
    g_loss, d_loss = total_objective(_outputs(gen), w)
    expected_g = 0.5 * generator_adversarial_loss(_t(0.3), _t(0.4), 0.5).item() + 0.25
    assert g_loss.item() == pytest.approx(expected_g)
    assert d_loss.item() == pytest.approx(-gan_loss(_t(0.8), _t(0.7), _t(0.3), _t(0.4), 0.5).item())


def test_total_objective_rejects_non_finite():
    gen = torch.full((1, 3, 2, 2), float("nan"), dtype=torch.float64)
    with pytest.raises(TrainingStepError):
        total_objective(_outputs(gen), LossWeights())


def test_warp_loss_l1_terms():
    gt = torch.zeros(1, 3, 4, 4)
    s0 = torch.full((1, 3, 4, 4), 0.5)
    s1 = torch.full((1, 3, 4, 4), 0.25)
    terms = WarpLossTerms(I_gt=gt, I_stn_0=s0, I_stn_1=s1, lambdas=(2.0, 4.0, 0.0))
    assert warp_loss(terms, feature_extractor=_never_called).item() == pytest.approx(2.0)


def test_warp_loss_constant_images():
    gt = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
    terms = WarpLossTerms(I_gt=gt, I_stn_0=torch.full_like(gt, 0.3), I_stn_1=torch.full_like(gt, 0.1))
    assert abs(warp_loss(terms, feature_extractor=_never_called).item() - 0.4) <= 1e-12


def test_warp_loss_contract_errors():
    gt = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ContractError):
        warp_loss(WarpLossTerms(I_gt=gt, I_stn_0=gt[:, :2], I_stn_1=gt))
    with pytest.raises(ContractError):
        warp_loss(WarpLossTerms(I_gt=gt, I_stn_0=gt, I_stn_1=gt, lambdas=(1.0, -1.0, 0.0)))


def test_geometric_matching_hinge():
    gt = torch.zeros(1, 3, 4, 4)
    near = torch.full((1, 3, 4, 4), 0.1)
    far = torch.full((1, 3, 4, 4), 0.4)
    identity = lambda x: x  # noqa: E731
    # refined closer than coarse: no hinge penalty
    assert perceptual_geometric_matching(gt, far, near, identity).item() == pytest.approx(0.5)
    # refined farther than coarse: penalty d1 - d0
    assert perceptual_geometric_matching(gt, near, far, identity).item() == pytest.approx(0.8)
    terms = WarpLossTerms(I_gt=gt, I_stn_0=near, I_stn_1=far, lambdas=(0.0, 0.0, 1.0))
    assert warp_loss(terms, identity).item() == pytest.approx(0.8)


def test_warp_loss_gradcheck():
    gt = torch.zeros(1, 3, 3, 3, dtype=torch.float64)
    s0 = (torch.rand(1, 3, 3, 3, dtype=torch.float64) + 0.5).requires_grad_(True)
    s1 = (torch.rand(1, 3, 3, 3, dtype=torch.float64) + 2.0).requires_grad_(True)

    def f(a, b):
        return warp_loss(WarpLossTerms(I_gt=gt, I_stn_0=a, I_stn_1=b, lambdas=(1.0, 0.5, 0.25)), torch.tanh)

    assert gradcheck(f, (s0, s1))


def _toy_objective(theta: torch.Tensor, which: int) -> torch.Tensor:
    """A 64-parameter generator tanh(x W) whose fakes feed two logistic discriminators."""
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 8, dtype=torch.float64, generator=g) * 2 - 1
    generated = torch.tanh(x @ theta.view(8, 8))
    d_a_fake = torch.sigmoid(0.3 * generated.sum(dim=1))
    d_s_fake = torch.sigmoid(generated[:, ::2].mean(dim=1) - 0.2)
    outputs = BatchOutputs(
        generated=generated,
        target=torch.full_like(generated, 1.5),
        d_a_real=_t(0.8, 0.7, 0.9, 0.6), d_s_real=_t(0.65, 0.75, 0.85, 0.7),
        d_a_fake=d_a_fake, d_s_fake=d_s_fake,
    )
    return total_objective(outputs, LossWeights(alpha=0.7, rho=0.4, l1_weight=1.0))[which]


@pytest.mark.parametrize("which", [0, 1])
def test_total_objective_matches_central_differences(which):
    theta = (torch.rand(64, dtype=torch.float64, generator=torch.Generator().manual_seed(1)) - 0.5).requires_grad_(True)
    (analytic,) = torch.autograd.grad(_toy_objective(theta, which), theta)
    step = 1e-3
    numeric = torch.empty_like(analytic)
    with torch.no_grad():
        for i in range(theta.numel()):
            e = torch.zeros_like(theta)
            e[i] = step
            numeric[i] = (_toy_objective(theta + e, which) - _toy_objective(theta - e, which)) / (2 * step)
    rel = (analytic - numeric).abs().max() / analytic.abs().max()
    assert rel < 1e-4
