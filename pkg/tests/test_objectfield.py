import numpy as np
import pytest
import torch

from scenescale.geometry import Ray
from scenescale.objectfield import (DENSITY_SHIFT, RenderConfig, VMField,
                                    field_backward, query_color, query_density,
                                    render_ray_independent, render_rays,
                                    upsample_field)

torch.set_num_threads(1)


def zero_field(res=8, dtype=torch.float32, **kw):
    f = VMField(resolution=res, dtype=dtype, **kw)
    with torch.no_grad():
        for p in f.parameters():
            p.zero_()
    return f


def dense_density_oracle(field: VMField, pts: np.ndarray) -> np.ndarray:
    """Direct evaluation of the factored density on a dense tensor.

    The product of a bilinear plane interpolation and a linear line
    interpolation equals the trilinear interpolation of their outer-product
    tensor, so the factored model is reconstructed densely and interpolated
    with plain numpy.
    """
    res = field.resolution
    aabb = field.aabb.detach().numpy().astype(np.float64)
    dense = np.zeros(res)
    plane_axes = ((0, 1), (0, 2), (1, 2))
    line_axes = (2, 1, 0)
    for j in range(3):
        plane = field.density_planes[j].detach().numpy()[0]  # [C, res_b, res_a]
        line = field.density_lines[j].detach().numpy()[0, :, :, 0]  # [C, res_v]
        a, b = plane_axes[j]
        v = line_axes[j]
        for c in range(plane.shape[0]):
            outer = np.einsum("ba,v->abv", plane[c], line[c])
            dense += np.moveaxis(outer, (0, 1, 2), (a, b, v))
    out = np.empty(pts.shape[0])
    for i, p in enumerate(pts):
        u = (p - aabb[0]) / (aabb[1] - aabb[0]) * (np.array(res) - 1)
        if np.any(u < 0) or np.any(u > np.array(res) - 1):
            out[i] = 0.0
            continue
        i0 = np.clip(np.floor(u).astype(int), 0, np.array(res) - 2)
        w = u - i0
        acc = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wt = ((w[0] if dx else 1 - w[0]) * (w[1] if dy else 1 - w[1])
                          * (w[2] if dz else 1 - w[2]))
                    acc += wt * dense[i0[0] + dx, i0[1] + dy, i0[2] + dz]
        out[i] = np.log1p(np.exp(min(acc + DENSITY_SHIFT, 30.0))) \
            if acc + DENSITY_SHIFT < 30 else acc + DENSITY_SHIFT
    return out


class TestQueryDensity:
    def test_zero_field_is_empty(self):
        f = zero_field()
        assert query_density(f, [0.5, 0.5, 0.5]) < 1e-4

    def test_outside_aabb_exact_zero(self):
        f = VMField(resolution=8, seed=1)
        assert query_density(f, [1.5, 0.5, 0.5]) == 0.0
        assert query_density(f, [-0.1, 0.5, 0.5]) == 0.0

    def test_matches_dense_oracle(self):
        f = VMField(resolution=8, seed=2, dtype=torch.float64)
        rng = np.random.default_rng(0)
        pts = rng.random((200, 3))
        got = np.array([query_density(f, p) for p in pts])
        want = dense_density_oracle(f, pts)
        assert np.abs(got - want).max() < 1e-5

    def test_single_component_product(self):
        f = zero_field(res=8, dtype=torch.float64)
        with torch.no_grad():
            f.density_planes[0][0, 0].fill_(2.0)
            f.density_lines[0][0, 0].fill_(3.0)
        got = query_density(f, [0.3, 0.6, 0.2])
        want = float(np.log1p(np.exp(6.0 + DENSITY_SHIFT)))
        assert got == pytest.approx(want, rel=1e-6)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            query_density(VMField(resolution=4), [np.nan, 0, 0])


class TestQueryColor:
    def test_zero_mlp_gives_half(self):
        f = zero_field()
        c = query_color(f, [0.5, 0.5, 0.5], [0, 0, 1])
        assert np.allclose(c, 0.5)

    def test_view_independent_when_encoding_off(self):
        f = VMField(resolution=8, seed=3, use_viewdirs=False)
        a = query_color(f, [0.4, 0.5, 0.6], [0, 0, 1])
        b = query_color(f, [0.4, 0.5, 0.6], [0, 0, -1])
        assert np.array_equal(a, b)

    def test_view_dependent_when_encoding_on(self):
        f = VMField(resolution=8, seed=3, use_viewdirs=True)
        a = query_color(f, [0.4, 0.5, 0.6], [0, 0, 1])
        b = query_color(f, [0.4, 0.5, 0.6], [0, 0, -1])
        assert not np.allclose(a, b)

    def test_in_unit_range(self):
        f = VMField(resolution=8, seed=4)
        c = query_color(f, [0.2, 0.8, 0.5], [0, 1, 0])
        assert (c >= 0).all() and (c <= 1).all()


class TestRenderRay:
    def test_zero_field_black_background(self):
        f = zero_field()
        ray = Ray(np.array([0.5, 0.5, -0.2]), np.array([0.0, 0.0, 1.0]))
        cfg = RenderConfig(samples_per_ray=64, near=0.01, far=1.5)
        color, depth, opacity = render_ray_independent(f, ray, cfg)
        assert opacity < 1e-3
        assert np.abs(color).max() < 1e-3

    def test_zero_field_white_background(self):
        f = zero_field()
        ray = Ray(np.array([0.5, 0.5, -0.2]), np.array([0.0, 0.0, 1.0]))
        cfg = RenderConfig(samples_per_ray=64, near=0.01, far=1.5,
                           white_background=True)
        color, _, opacity = render_ray_independent(f, ray, cfg)
        assert np.abs(color - 1.0).max() < 1e-3

    def test_homogeneous_medium_transmittance(self):
        # constant density everywhere in the box: opacity = 1 - exp(-sigma L)
        f = zero_field(res=8, dtype=torch.float64)
        sigma = 1.7
        raw = np.log(np.expm1(sigma))  # softplus inverse
        with torch.no_grad():
            f.density_planes[0][0, 0].fill_(1.0)
            f.density_lines[0][0, 0].fill_(raw - DENSITY_SHIFT)
        ray = Ray(np.array([0.5, 0.5, 0.0]), np.array([0.0, 0.0, 1.0]))
        cfg = RenderConfig(samples_per_ray=256, near=0.0, far=1.0)
        _, _, opacity = render_ray_independent(f, ray, cfg)
        want = 1.0 - np.exp(-sigma * 1.0)
        assert abs(opacity - want) < 1e-3

    def test_opaque_slab_depth(self):
        # oracle: brute-force fine quadrature of the same density profile
        f = zero_field(res=64, dtype=torch.float64)
        with torch.no_grad():
            f.density_planes[0][0, 0].fill_(1.0)
            prof = torch.zeros(64, dtype=torch.float64)
            prof[38:44] = 500.0  # opaque slab around z* ~ 0.63
            f.density_lines[0][0, :, :, 0].copy_(prof[None, :].expand(16, 64))
        ray = Ray(np.array([0.5, 0.5, 0.0]), np.array([0.0, 0.0, 1.0]))
        M = 128
        cfg = RenderConfig(samples_per_ray=M, near=0.0, far=1.0)
        _, depth, opacity = render_ray_independent(f, ray, cfg)
        # fine quadrature oracle along the same line
        import scenescale.objectfield as of
        z = np.linspace(0, 1, 20000)
        with torch.no_grad():
            pts = np.stack([np.full_like(z, 0.5), np.full_like(z, 0.5), z], axis=1)
            sig = f.density(torch.as_tensor(pts)).numpy()
        dz = z[1] - z[0]
        alpha = 1 - np.exp(-sig * dz)
        trans = np.concatenate([[1.0], np.cumprod(1 - alpha)[:-1]])
        w = trans * alpha
        z_star = (w * z).sum() / w.sum()
        assert opacity > 0.99
        assert abs(depth - z_star) <= 1.0 / M + 1e-6

    def test_weights_partition(self):
        f = VMField(resolution=8, seed=5)
        rng = np.random.default_rng(1)
        o = rng.random((32, 3)) * 0.2
        d = rng.normal(size=(32, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        cfg = RenderConfig(samples_per_ray=48, near=0.01, far=2.0)
        with torch.no_grad():
            out = render_rays(f, o, d, cfg)
        w = out["weights"].numpy()
        assert (w >= 0).all() and (w <= 1).all()
        assert np.abs(w.sum(1) - out["opacity"].numpy()).max() < 1e-6
        assert (out["opacity"].numpy() <= 1 + 1e-6).all()

    def test_deterministic_given_seed(self):
        f = VMField(resolution=8, seed=6)
        o = np.full((4, 3), 0.4)
        d = np.tile([0.0, 0.0, 1.0], (4, 1))
        cfg = RenderConfig(samples_per_ray=32, near=0.01, far=1.2, jitter=True)
        outs = []
        for _ in range(2):
            g = torch.Generator().manual_seed(11)
            with torch.no_grad():
                outs.append(render_rays(f, o, d, cfg, generator=g))
        assert torch.equal(outs[0]["color"], outs[1]["color"])
        assert torch.equal(outs[0]["depth"], outs[1]["depth"])


class TestFieldBackward:
    def test_zero_grad_in_zero_grad_out(self):
        f = VMField(resolution=6, seed=7)
        cfg = RenderConfig(samples_per_ray=16, near=0.05, far=1.4)
        out = render_rays(f, np.full((4, 3), 0.4), np.tile([0, 0, 1.0], (4, 1)), cfg)
        grads = field_backward(f, [out["color"]], [torch.zeros_like(out["color"])])
        assert all(torch.count_nonzero(g) == 0 for g in grads.values())

    def test_linearity_over_rays(self):
        f = VMField(resolution=6, seed=8, dtype=torch.float64)
        cfg = RenderConfig(samples_per_ray=16, near=0.05, far=1.4,
                           color_weight_cutoff=0.0)
        o = np.array([[0.4, 0.4, 0.1], [0.6, 0.5, 0.1]])
        d = np.tile([0.0, 0.0, 1.0], (2, 1))

        def grad_for(rows):
            out = render_rays(f, o[rows], d[rows], cfg)
            g = torch.ones_like(out["color"])
            return field_backward(f, [out["color"]], [g])

        g_both = grad_for([0, 1])
        g_a = grad_for([0])
        g_b = grad_for([1])
        for name in g_both:
            assert torch.allclose(g_both[name], g_a[name] + g_b[name],
                                  atol=1e-9, rtol=1e-7)

    def test_matches_finite_differences(self):
        f = VMField(resolution=6, seed=9, dtype=torch.float64)
        # push one factor pair up so rays carry real opacity: gradients are
        # then checked in the regime trained fields operate in
        with torch.no_grad():
            f.density_planes[0][0, 0].add_(3.0)
            f.density_lines[0][0, 0].add_(3.0)
        cfg = RenderConfig(samples_per_ray=16, near=0.05, far=1.5,
                           color_weight_cutoff=0.0)
        rng = np.random.default_rng(2)
        o = rng.random((6, 3)) * 0.3
        d = rng.normal(size=(6, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        gw = torch.as_tensor(rng.normal(size=(6, 3)))

        def loss_value():
            out = render_rays(f, o, d, cfg)
            return (out["color"] * gw).sum() + 0.3 * out["depth"].sum() \
                + 0.2 * out["opacity"].sum()

        loss = loss_value()
        names, params = zip(*f.named_parameters())
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        def central_diff(flat, i, eps):
            with torch.no_grad():
                flat[i] += eps
            lp = float(loss_value().detach())
            with torch.no_grad():
                flat[i] -= 2 * eps
            lm = float(loss_value().detach())
            with torch.no_grad():
                flat[i] += eps
            return (lp - lm) / (2 * eps)

        checked = 0
        for p, g in zip(params, grads):
            if g is None:
                continue
            flat = p.detach().reshape(-1)
            for i in rng.choice(flat.numel(), size=min(3, flat.numel()),
                                replace=False):
                fd1 = central_diff(flat, i, 1e-6)
                fd2 = central_diff(flat, i, 2e-6)
                an = float(g.reshape(-1)[i])
                # |fd1 - fd2| estimates the difference oracle's own error
                # (roundoff + truncation + ReLU kinks inside the stencil); the
                # 1e-4 relative criterion applies where the oracle is clean
                tol = max(1e-4 * max(abs(fd1), abs(an)), 3 * abs(fd1 - fd2), 1e-8)
                assert abs(fd1 - an) <= tol
                checked += 1
        assert checked > 20

    def test_stale_tape_raises(self):
        f = VMField(resolution=6, seed=10)
        cfg = RenderConfig(samples_per_ray=8, near=0.05, far=1.0)
        out = render_rays(f, np.full((2, 3), 0.4), np.tile([0, 0, 1.0], (2, 1)), cfg)
        detached = out["color"].detach()
        with pytest.raises(RuntimeError):
            field_backward(f, [detached], [torch.ones_like(detached)])


class TestUpsample:
    def test_same_resolution_identical(self):
        f = VMField(resolution=8, seed=11)
        g = upsample_field(f, 8)
        for (na, a), (_, b) in zip(f.named_parameters(), g.named_parameters()):
            assert torch.equal(a, b), na

    def test_constant_grids_stay_constant(self):
        f = zero_field(res=6)
        with torch.no_grad():
            for p in f.density_planes:
                p.fill_(0.7)
            for p in f.density_lines:
                p.fill_(0.2)
        g = upsample_field(f, 13)
        for p in g.density_planes:
            assert torch.allclose(p, torch.tensor(0.7), atol=1e-6)
        for p in g.density_lines:
            assert torch.allclose(p, torch.tensor(0.2), atol=1e-6)

    def test_shrink_rejected(self):
        f = VMField(resolution=8)
        with pytest.raises(ValueError):
            upsample_field(f, 4)

    def test_field_function_preserved_within_nyquist_bound(self):
        f = VMField(resolution=8, seed=12, dtype=torch.float64)
        g = upsample_field(f, 17)
        rng = np.random.default_rng(3)
        pts = rng.random((100, 3))
        before = np.array([query_density(f, p) for p in pts])
        after = np.array([query_density(g, p) for p in pts])
        # empirical bound from factor first differences: linear resampling of a
        # piecewise-linear signal deviates at most ~ the largest per-cell jump
        bound = 0.0
        for j in range(3):
            dp = f.density_planes[j].detach().numpy()[0]
            dl = f.density_lines[j].detach().numpy()[0, :, :, 0]
            jump_p = max(np.abs(np.diff(dp, axis=1)).max(),
                         np.abs(np.diff(dp, axis=2)).max(initial=0.0))
            jump_l = np.abs(np.diff(dl, axis=1)).max()
            bound += (jump_p * np.abs(dl).max() + np.abs(dp).max() * jump_l) \
                * dp.shape[0]
        assert np.abs(before - after).max() <= 5.0 * bound
