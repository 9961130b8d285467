import math

import pytest
import torch

from conrad.cameras import REFERENCE_POSE, CameraIntrinsics, RayBundle, generate_rays
from conrad.constraints import (
    ConstrainedField,
    ReferenceConditioning,
    VisibilityDepthMap,
    WarmStartSchedule,
    bilinear_sample,
    compute_visibility_depth,
    constrained_color,
    constrained_density,
    warm_alpha,
)
from conrad.volume import MarchConfig, march_rays, render_view

from conftest import FnField, tiny_field


def single_ray_bundle(direction=(1.0, 0.0, 0.0)):
    return RayBundle(
        origins=torch.zeros(1, 3),
        directions=torch.tensor([list(direction)]),
        pixel_coords=torch.zeros(1, 2, dtype=torch.long),
    )


def disk_conditioning(size=16, disk_radius=0.35, color=(0.25, 0.5, 0.75)):
    """Binary disk mask with a constant-color foreground."""
    intr = CameraIntrinsics(width=size, height=size)
    rr, cc = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    r = torch.sqrt((rr - (size - 1) / 2) ** 2 + (cc - (size - 1) / 2) ** 2) / size
    mask = (r < disk_radius).float()
    image = torch.ones(size, size, 3)
    image[mask > 0] = torch.tensor(color)
    return ReferenceConditioning(image=image, mask=mask, est_depth=None,
                                 pose=REFERENCE_POSE, intrinsics=intr)


class TestWarmAlpha:
    def test_endpoints_and_midpoint(self):
        sched = WarmStartSchedule(total_steps=1000)
        assert warm_alpha(0, sched) == 0.0
        assert warm_alpha(250, sched) == 0.5
        assert warm_alpha(500, sched) == 1.0
        assert warm_alpha(1000, sched) == 1.0

    def test_piecewise_linear(self):
        sched = WarmStartSchedule(total_steps=100)
        ramp = [warm_alpha(s, sched) for s in range(0, 51)]
        for i, a in enumerate(ramp):
            assert abs(a - i / 50) < 1e-12
        assert all(warm_alpha(s, sched) == 1.0 for s in range(50, 101))

    def test_out_of_range_rejected(self):
        sched = WarmStartSchedule(total_steps=10)
        with pytest.raises(ValueError):
            warm_alpha(-1, sched)
        with pytest.raises(ValueError):
            warm_alpha(11, sched)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            WarmStartSchedule(total_steps=10, plateau_fraction=0.0)


class TestVisibilityDepth:
    def test_single_opaque_sample(self):
        def density(x):
            t = x[:, 0]
            return torch.where((t > 1.6) & (t < 2.4), torch.full_like(t, 1e9),
                               torch.zeros_like(t))

        cfg = MarchConfig(n_samples=5, near=0.0, far=4.0)
        vmap = compute_visibility_depth(density, single_ray_bundle(),
                                        CameraIntrinsics(width=1, height=1), cfg)
        assert vmap.valid.all()
        assert vmap.values[0, 0].item() == pytest.approx(2.0, abs=1e-6)

    @pytest.mark.parametrize("n_samples", [128, 256])
    def test_homogeneous_medium_closed_form(self, n_samples):
        t_star = -math.log(1 - 0.9 * (1 - math.exp(-4.0)))  # ~2.1499
        cfg = MarchConfig(n_samples=n_samples, near=0.0, far=4.0)
        vmap = compute_visibility_depth(lambda x: torch.ones(x.shape[0]),
                                        single_ray_bundle(),
                                        CameraIntrinsics(width=1, height=1), cfg, eta=0.1)
        spacing = 4.0 / n_samples
        assert abs(vmap.values[0, 0].item() - t_star) <= spacing

    def test_zero_density_invalid_with_far(self):
        cfg = MarchConfig(n_samples=16, near=0.5, far=3.5)
        vmap = compute_visibility_depth(lambda x: torch.zeros(x.shape[0]),
                                        single_ray_bundle(),
                                        CameraIntrinsics(width=1, height=1), cfg)
        assert not vmap.valid.any()
        assert vmap.values[0, 0].item() == pytest.approx(3.5)

    def test_eta_validated(self):
        cfg = MarchConfig(n_samples=8, near=0.0, far=1.0)
        for eta in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                compute_visibility_depth(lambda x: torch.ones(x.shape[0]),
                                         single_ray_bundle(),
                                         CameraIntrinsics(width=1, height=1), cfg, eta=eta)

    def test_random_profiles_match_bruteforce_oracle(self):
        # independent float64 cumulative-weight quadrature per ray
        gen = torch.Generator().manual_seed(11)
        cfg = MarchConfig(n_samples=64, near=0.2, far=3.8)
        for _ in range(25):
            levels = torch.rand(64, generator=gen) * 4.0

            def density(x, lv=levels):
                idx = ((x[:, 0] - 0.2) / 3.6 * 64).long().clamp(0, 63)
                return lv[idx]

            vmap = compute_visibility_depth(density, single_ray_bundle(),
                                            CameraIntrinsics(width=1, height=1), cfg)
            # oracle: direct float64 recurrence on the same sample grid
            ts = torch.linspace(0.2, 3.8, 65, dtype=torch.float64)
            mids = (ts[:-1] + ts[1:]) / 2
            delta = ts[1:] - ts[:-1]
            sig = density(torch.stack([mids.float(), torch.zeros(64), torch.zeros(64)], -1)).double()
            a = 1 - torch.exp(-sig * delta)
            T = torch.cumprod(torch.cat([torch.ones(1, dtype=torch.float64), 1 - a]), 0)[:-1]
            cum = torch.cumsum(T * a, 0)
            total = cum[-1]
            if total < 1e-4:
                assert not vmap.valid[0, 0]
                continue
            k = int((cum >= 0.9 * total).nonzero()[0])
            assert abs(vmap.values[0, 0].item() - mids[k].item()) <= (3.6 / 64) + 1e-6


class TestConstrainedColor:
    def test_exact_pixel_hit_full_alpha(self):
        cond = disk_conditioning()
        vmap = VisibilityDepthMap(values=torch.full((16, 16), 10.0),
                                  valid=torch.ones(16, 16, dtype=torch.bool))
        rays = generate_rays(cond.pose, cond.intrinsics)
        center = 8 * 16 + 8
        x = (rays.origins[center] + 2.0 * rays.directions[center])[None]
        c_raw = torch.tensor([[0.9, 0.1, 0.9]])
        out = constrained_color(x, c_raw, vmap, cond, alpha_ws=1.0)
        assert torch.allclose(out[0], torch.tensor([0.25, 0.5, 0.75]), atol=1e-6)

    def test_beyond_visibility_depth_unchanged(self):
        cond = disk_conditioning()
        vmap = VisibilityDepthMap(values=torch.full((16, 16), 1.0),
                                  valid=torch.ones(16, 16, dtype=torch.bool))
        rays = generate_rays(cond.pose, cond.intrinsics)
        center = 8 * 16 + 8
        x = (rays.origins[center] + 2.5 * rays.directions[center])[None]
        c_raw = torch.tensor([[0.9, 0.1, 0.9]])
        out = constrained_color(x, c_raw, vmap, cond, alpha_ws=1.0)
        assert torch.equal(out, c_raw)

    def test_annealed_blend(self):
        cond = disk_conditioning(color=(1.0, 1.0, 1.0))
        vmap = VisibilityDepthMap(values=torch.full((16, 16), 10.0),
                                  valid=torch.ones(16, 16, dtype=torch.bool))
        rays = generate_rays(cond.pose, cond.intrinsics)
        center = 8 * 16 + 8
        x = (rays.origins[center] + 2.0 * rays.directions[center])[None]
        out = constrained_color(x, torch.zeros(1, 3), vmap, cond, alpha_ws=0.5)
        assert torch.allclose(out[0], torch.full((3,), 0.5), atol=1e-6)

    def test_out_of_frustum_untouched(self):
        cond = disk_conditioning()
        vmap = VisibilityDepthMap(values=torch.full((16, 16), 10.0),
                                  valid=torch.ones(16, 16, dtype=torch.bool))
        x = torch.tensor([[10.0, 0.0, 0.0]])  # behind the reference camera
        c_raw = torch.tensor([[0.3, 0.3, 0.3]])
        out = constrained_color(x, c_raw, vmap, cond, alpha_ws=1.0)
        assert torch.equal(out, c_raw)

    def test_monotone_in_alpha(self):
        cond = disk_conditioning()
        vmap = VisibilityDepthMap(values=torch.full((16, 16), 10.0),
                                  valid=torch.ones(16, 16, dtype=torch.bool))
        rays = generate_rays(cond.pose, cond.intrinsics)
        center = 8 * 16 + 8
        x = (rays.origins[center] + 2.0 * rays.directions[center])[None]
        c_raw = torch.tensor([[0.9, 0.1, 0.9]])
        ref = torch.tensor([0.25, 0.5, 0.75])
        last = None
        for a in (0.0, 0.25, 0.5, 0.75, 1.0):
            out = constrained_color(x, c_raw, vmap, cond, alpha_ws=a)
            dist = (out[0] - ref).abs().sum().item()
            if last is not None:
                assert dist <= last + 1e-9
            last = dist


class TestConstrainedDensity:
    def test_background_zeroed_at_full_alpha(self):
        cond = disk_conditioning()
        x = torch.tensor([[-1.4, 1.4, 1.4]])  # projects near the image corner (mask 0)
        rays = generate_rays(cond.pose, cond.intrinsics)
        corner = rays.origins[0] + 2.0 * rays.directions[0]
        out = constrained_density(corner[None], torch.tensor([5.0]), cond, alpha_ws=1.0)
        assert out[0].item() == pytest.approx(0.0, abs=1e-12)

    def test_foreground_untouched(self):
        cond = disk_conditioning()
        rays = generate_rays(cond.pose, cond.intrinsics)
        center = 8 * 16 + 8
        x = (rays.origins[center] + 2.0 * rays.directions[center])[None]
        for a in (0.0, 0.3, 1.0):
            out = constrained_density(x, torch.tensor([5.0]), cond, alpha_ws=a)
            assert out[0].item() == pytest.approx(5.0, abs=1e-6)

    def test_annealed_multiplier(self):
        cond = disk_conditioning()
        rays = generate_rays(cond.pose, cond.intrinsics)
        corner = rays.origins[0] + 2.0 * rays.directions[0]
        out = constrained_density(corner[None], torch.tensor([2.0]), cond, alpha_ws=0.5)
        assert out[0].item() == pytest.approx(1.0, abs=1e-6)

    def test_out_of_frustum_mask_is_one(self):
        cond = disk_conditioning()
        x = torch.tensor([[10.0, 0.0, 0.0]])
        out = constrained_density(x, torch.tensor([3.0]), cond, alpha_ws=1.0)
        assert out[0].item() == pytest.approx(3.0)

    def test_background_density_monotone_in_alpha(self):
        cond = disk_conditioning()
        rays = generate_rays(cond.pose, cond.intrinsics)
        corner = rays.origins[0] + 2.0 * rays.directions[0]
        vals = [
            constrained_density(corner[None], torch.tensor([2.0]), cond, alpha_ws=a)[0].item()
            for a in (0.0, 0.5, 1.0)
        ]
        assert vals[0] >= vals[1] >= vals[2]


def fidelity_check(field, cond, march_cfg, eta=0.1):
    """Render the reference view at full constraint strength and return
    (max foreground violation, max background alpha)."""
    rays = generate_rays(cond.pose, cond.intrinsics)
    with torch.no_grad():
        vmap = compute_visibility_depth(field.density, rays, cond.intrinsics, march_cfg, eta=eta)
        cfield = ConstrainedField(field, cond, vmap, alpha_ws=1.0)
        view = render_view(cond.pose, cond.intrinsics, cfield, march_cfg)

    mask = cond.mask
    # interior foreground / background: binary value shared with 4-neighbours
    fg = mask > 0.5
    bg = ~fg
    inner_fg = fg.clone()
    inner_bg = bg.clone()
    for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        inner_fg &= torch.roll(fg, shifts=shift, dims=(0, 1))
        inner_bg &= torch.roll(bg, shifts=shift, dims=(0, 1))

    fg_sel = inner_fg & vmap.valid
    bound = eta + (1.0 - view.alpha_map[fg_sel])
    err = (view.image[fg_sel] - cond.image[fg_sel]).abs().max(dim=-1).values
    max_violation = (err - bound).max().item() if fg_sel.any() else -1.0
    max_bg_alpha = view.alpha_map[inner_bg].max().item() if inner_bg.any() else 0.0
    return max_violation, max_bg_alpha


class TestReferenceFidelity:
    def test_holds_for_random_parameters(self):
        cond = disk_conditioning()
        cfg = MarchConfig(n_samples=48, stratified=False, perturb=False)
        for seed in range(5):
            field = tiny_field(seed=seed, levels=4, table_log2=10, finest=128)
            violation, bg_alpha = fidelity_check(field, cond, cfg)
            assert violation <= 1e-6, f"seed {seed}: fg violation {violation}"
            assert bg_alpha < 1e-5, f"seed {seed}: bg alpha {bg_alpha}"

    def test_visibility_idempotent_under_constraint(self):
        cond = disk_conditioning()
        cfg = MarchConfig(n_samples=48, stratified=False, perturb=False)
        field = tiny_field(seed=3, levels=4, table_log2=10, finest=128)
        rays = generate_rays(cond.pose, cond.intrinsics)
        v1 = compute_visibility_depth(field.density, rays, cond.intrinsics, cfg)
        cfield = ConstrainedField(field, cond, v1, alpha_ws=1.0)
        v2 = compute_visibility_depth(cfield.density, rays, cond.intrinsics, cfg)
        fg = cond.mask > 0.5
        inner = fg.clone()
        for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            inner &= torch.roll(fg, shifts=shift, dims=(0, 1))
        sel = inner & v1.valid & v2.valid
        assert (v2.values[sel] <= v1.values[sel] + 1e-5).all()


class TestBilinearSample:
    def test_center_tap_exact(self):
        grid = torch.arange(12.0).reshape(3, 4)
        out = bilinear_sample(grid, torch.tensor([[1.0, 2.0]]))
        assert out.item() == 6.0

    def test_snap_absorbs_roundoff(self):
        grid = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        noisy = torch.tensor([[1e-5, 1.0 - 1e-5]])
        assert bilinear_sample(grid, noisy).item() == 1.0

    def test_interpolates_between_centers(self):
        grid = torch.tensor([[0.0, 1.0]])
        out = bilinear_sample(grid, torch.tensor([[0.0, 0.5]]))
        assert out.item() == pytest.approx(0.5)

    def test_edge_clamp(self):
        grid = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = bilinear_sample(grid, torch.tensor([[-3.0, -3.0], [9.0, 9.0]]))
        assert out[0].item() == 1.0 and out[1].item() == 4.0


class TestReferenceConditioningValidation:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ReferenceConditioning(
                image=torch.ones(4, 4, 3), mask=torch.ones(5, 5), est_depth=None,
                pose=REFERENCE_POSE, intrinsics=CameraIntrinsics(width=4, height=4),
            )

    def test_mask_range_checked(self):
        with pytest.raises(ValueError):
            ReferenceConditioning(
                image=torch.ones(4, 4, 3), mask=torch.full((4, 4), 2.0), est_depth=None,
                pose=REFERENCE_POSE, intrinsics=CameraIntrinsics(width=4, height=4),
            )
