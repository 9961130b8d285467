import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conrad.diffusion import Conditioning, DiffusionSchedule, DiracProvider, ProviderError
from conrad.objectives import (
    LossReport,
    LossWeights,
    depth_loss,
    entropy_reg,
    orientation_reg,
    sds_adjoint,
    sds_surrogate,
    smoothness_reg,
    total_loss,
)


class TestSdsAdjoint:
    def test_dirac_adjoint_matches_algebra(self):
        # substitute the analytic denoiser into the residual: the noise draw cancels
        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(0)
        target = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64)
        image = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64)
        provider = DiracProvider(target, schedule)
        for _ in range(20):
            adjoint, t = sds_adjoint(image, provider, schedule, None, gen)
            a_bar = schedule.alpha_bar(t)
            expected = math.sqrt(a_bar) / math.sqrt(1 - a_bar) * (image - target)
            assert (adjoint - expected).abs().max() < 1e-6

    def test_fixed_point_zero_adjoint(self):
        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(1)
        target = torch.rand(4, 4, 3, generator=gen, dtype=torch.float64)
        provider = DiracProvider(target, schedule)
        adjoint, _ = sds_adjoint(target.clone(), provider, schedule, None, gen)
        assert adjoint.abs().max() < 1e-9

    def test_echo_provider_zero_adjoint(self):
        class Echo:
            def predict_noise(self, noisy, t, cond=None, epsilon=None):
                return epsilon

        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(2)
        image = torch.rand(4, 4, 3, generator=gen)
        adjoint, _ = sds_adjoint(image, Echo(), schedule, None, gen)
        assert (adjoint == 0).all()

    def test_retries_then_succeeds(self):
        class Flaky:
            def __init__(self):
                self.calls = 0

            def predict_noise(self, noisy, t, cond=None, epsilon=None):
                self.calls += 1
                if self.calls <= 2:
                    raise ProviderError("transient")
                return epsilon

        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(3)
        provider = Flaky()
        adjoint, _ = sds_adjoint(torch.rand(2, 2, 3, generator=gen), provider, schedule, None, gen)
        assert provider.calls == 3
        assert (adjoint == 0).all()

    def test_gives_up_after_max_retries(self):
        class Dead:
            def predict_noise(self, noisy, t, cond=None, epsilon=None):
                raise ProviderError("down")

        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(4)
        with pytest.raises(ProviderError):
            sds_adjoint(torch.rand(2, 2, 3, generator=gen), Dead(), schedule, None, gen)

    def test_shape_mismatch_detected_and_retried(self):
        class WrongShape:
            def predict_noise(self, noisy, t, cond=None, epsilon=None):
                return torch.zeros(1, 1, 3)

        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(5)
        with pytest.raises(ProviderError):
            sds_adjoint(torch.rand(2, 2, 3, generator=gen), WrongShape(), schedule, None, gen)

    def test_timestep_range_respected(self):
        schedule = DiffusionSchedule()
        gen = torch.Generator().manual_seed(6)
        target = torch.rand(2, 2, 3, generator=gen)
        provider = DiracProvider(target, schedule)
        for _ in range(200):
            _, t = sds_adjoint(target, provider, schedule, None, gen, t_range=(0.02, 0.98))
            assert 20 <= t <= 980

    def test_surrogate_gradient_is_adjoint(self):
        image = torch.rand(3, 3, 3, requires_grad=True)
        adjoint = torch.randn(3, 3, 3)
        sds_surrogate(image, adjoint).backward()
        assert torch.allclose(image.grad, adjoint)


class TestDepthLoss:
    def test_affine_invariance(self):
        gen = torch.Generator().manual_seed(0)
        d = torch.rand(8, 8, generator=gen, dtype=torch.float64)
        mask = torch.ones(8, 8)
        loss, degen = depth_loss(d, 2.0 * d + 3.0, mask)
        assert not degen
        assert abs(loss.item()) < 1e-9

    def test_anticorrelation(self):
        gen = torch.Generator().manual_seed(1)
        d = torch.rand(8, 8, generator=gen, dtype=torch.float64)
        loss, degen = depth_loss(d, -d, torch.ones(8, 8))
        assert not degen
        assert loss.item() == pytest.approx(2.0, abs=1e-9)

    def test_constant_estimate_degenerate(self):
        gen = torch.Generator().manual_seed(2)
        d = torch.rand(8, 8, generator=gen)
        loss, degen = depth_loss(d, torch.full((8, 8), 3.0), torch.ones(8, 8))
        assert degen and loss.item() == 0.0

    def test_too_few_pixels_degenerate(self):
        mask = torch.zeros(4, 4)
        mask[0, 0] = 1.0
        loss, degen = depth_loss(torch.rand(4, 4), torch.rand(4, 4), mask)
        assert degen and loss.item() == 0.0

    def test_mask_and_alpha_select_pixels(self):
        d = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        est = torch.tensor([[1.0, 2.0], [-5.0, -9.0]])
        mask = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
        loss, degen = depth_loss(d, est, mask)
        assert not degen
        assert abs(loss.item()) < 1e-6  # bottom row (anti-correlated) excluded

    def test_gradient_only_through_rendered(self):
        d = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
        est = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
        loss, _ = depth_loss(d, est, torch.ones(4, 4))
        loss.backward()
        assert d.grad is not None and d.grad.abs().sum() > 0
        assert est.grad is None

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(1e-3, 1e3), b=st.floats(-100, 100))
    def test_affine_invariance_property(self, a, b):
        gen = torch.Generator().manual_seed(7)
        d = torch.rand(6, 6, generator=gen, dtype=torch.float64)
        e = torch.rand(6, 6, generator=gen, dtype=torch.float64)
        mask = torch.ones(6, 6)
        base, _ = depth_loss(d, e, mask)
        scaled, _ = depth_loss(d, a * e + b, mask)
        assert abs(base.item() - scaled.item()) < 1e-6


class TestEntropyReg:
    def test_half_is_ln2(self):
        val = entropy_reg(torch.full((10,), 0.5))
        assert val.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_endpoints_near_zero(self):
        val = entropy_reg(torch.tensor([0.0, 1.0, 0.0, 1.0]))
        assert val.item() < 2e-4

    def test_quarter_value(self):
        val = entropy_reg(torch.tensor([0.25]))
        expected = -0.25 * math.log(0.25) - 0.75 * math.log(0.75)
        assert val.item() == pytest.approx(expected, abs=1e-6)
        assert val.item() == pytest.approx(0.5623, abs=1e-4)

    def test_concave_with_max_at_half(self):
        h = 1e-4
        for a in (0.2, 0.4, 0.5, 0.6, 0.8):
            f = lambda v: entropy_reg(torch.tensor([v], dtype=torch.float64)).item()
            second = (f(a + h) - 2 * f(a) + f(a - h)) / h**2
            assert second < 0
        grid = torch.linspace(0.01, 0.99, 99, dtype=torch.float64)
        vals = torch.tensor([entropy_reg(g[None]) for g in grid])
        assert grid[vals.argmax()].item() == pytest.approx(0.5, abs=0.02)


class TestOrientationReg:
    def test_facing_camera_zero(self):
        d = torch.tensor([[0.0, 0.0, 1.0]])
        n = -d
        assert orientation_reg(torch.ones(1), n, d).item() == 0.0

    def test_facing_away_worst_case(self):
        d = torch.tensor([[0.0, 0.0, 1.0]])
        assert orientation_reg(torch.ones(1), d.clone(), d).item() == pytest.approx(1.0)

    def test_perpendicular_zero(self):
        d = torch.tensor([[0.0, 0.0, 1.0]])
        n = torch.tensor([[1.0, 0.0, 0.0]])
        assert orientation_reg(torch.ones(1), n, d).item() == 0.0

    def test_zero_when_all_normals_face_camera(self):
        gen = torch.Generator().manual_seed(0)
        d = torch.randn(50, 3, generator=gen)
        d = d / d.norm(dim=-1, keepdim=True)
        n = -d  # all strictly facing the camera
        w = torch.rand(50, generator=gen)
        assert orientation_reg(w, n, d).item() == 0.0

    def test_degenerate_normals_skipped(self):
        d = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        n = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        deg = torch.tensor([True, False])
        assert orientation_reg(torch.ones(2), n, d, deg).item() == pytest.approx(1.0)


class TestSmoothnessReg:
    def test_linear_field_constant_normals(self):
        density = lambda x: 5.0 - x[:, 2]
        gen = torch.Generator().manual_seed(0)
        pts = torch.rand(32, 3, dtype=torch.float64)
        val = smoothness_reg(density, pts, gen)
        assert val.item() < 1e-9

    def test_zero_perturbation(self):
        density = lambda x: torch.exp(-x.norm(dim=-1) ** 2)
        gen = torch.Generator().manual_seed(1)
        pts = torch.rand(16, 3, dtype=torch.float64) * 0.5 + 0.2
        val = smoothness_reg(density, pts, gen, max_perturb=0.0)
        assert val.item() == 0.0

    def test_smoother_field_scores_lower(self):
        # same sphere-ish bump at two transition widths
        def make_density(width):
            return lambda x: torch.sigmoid((1.0 - x.norm(dim=-1)) / width)

        gen1 = torch.Generator().manual_seed(2)
        gen2 = torch.Generator().manual_seed(2)
        pts = torch.rand(64, 3, dtype=torch.float64) * 0.6 + 0.55  # around the shell
        sharp = smoothness_reg(make_density(0.02), pts, gen1)
        smooth = smoothness_reg(make_density(0.3), pts, gen2)
        assert smooth.item() < sharp.item()


class TestTotalLoss:
    def test_all_zero(self):
        w = LossWeights()
        assert float(total_loss(torch.zeros(()), 0.0, 0.0, 0.0, 0.0, w)) == 0.0

    def test_depth_only_default_weight(self):
        w = LossWeights()
        total = total_loss(torch.zeros(()), torch.tensor(0.2), 0.0, 0.0, 0.0, w)
        assert float(total) == pytest.approx(2.0)

    def test_entropy_weight_linear(self):
        base = LossWeights()
        double = LossWeights(entropy=0.02)
        t1 = float(total_loss(torch.zeros(()), 0.0, torch.tensor(1.5), 0.0, 0.0, base))
        t2 = float(total_loss(torch.zeros(()), 0.0, torch.tensor(1.5), 0.0, 0.0, double))
        assert t2 == pytest.approx(2 * t1)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(depth=-1.0)

    def test_non_finite_total_rejected(self):
        with pytest.raises(ArithmeticError):
            total_loss(torch.tensor(float("inf")), 0.0, 0.0, 0.0, 0.0, LossWeights())


class TestLossReport:
    def test_json_line_fields(self):
        rep = LossReport(step=3, sds=0.1, depth=0.2, entropy=0.3, orientation=0.0,
                         smoothness=0.4, total=5.0, warm_alpha=0.5, timestep=123)
        line = rep.to_json_line()
        assert '"step": 3' in line and '"timestep": 123' in line

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            LossReport(step=0, sds=float("nan"), depth=0, entropy=0, orientation=0,
                       smoothness=0, total=0, warm_alpha=0, timestep=1)
