import math

import numpy as np
import pytest

from conftest import rel_err, small_scene
from sdfsplat.envmap import cube_energy, rotate_cube, texel_directions, texel_solid_angles
from sdfsplat.raster import rasterize
from sdfsplat.shading import (
    EnvironmentLight, _dfg_cached, dfg_integrate, ggx_alpha, mc_reference_points, mc_reference_shade,
    precompute_dfg_lut, prefilter_environment, prefilter_operator, sample_dfg, shade_adjoint,
    shade_deferred, shade_points, shade_points_adjoint, smith_visibility,
)
from sdfsplat.synthetic import random_environment


def _view(nov):
    return np.array([math.sqrt(max(0.0, 1 - nov * nov)), 0.0, nov])


# --- DFG table -------------------------------------------------------------------------

def dfg_uniform_oracle(nov, rough, n=1 << 18, seed=0):
    """(F1, F2) by uniform hemisphere sampling of the GGX lobe, no importance sampling."""
    rng = np.random.default_rng(seed)
    u1, u2 = rng.random(n), rng.random(n)
    cos_t = u1
    sin_t = np.sqrt(1 - cos_t**2)
    L = np.stack([sin_t * np.cos(2 * np.pi * u2), sin_t * np.sin(2 * np.pi * u2), cos_t], -1)
    V = _view(nov)
    H = L + V
    H /= np.linalg.norm(H, axis=1, keepdims=True)
    a = rough**2
    noh, nol, voh = H[:, 2], L[:, 2], H @ V
    D = a * a / (np.pi * (noh**2 * (a * a - 1) + 1) ** 2)
    vis = smith_visibility(nol, nov, a)
    f = D * vis * nol * 2 * np.pi  # pdf of uniform hemisphere sampling is 1 / (2 pi)
    fc = (1 - voh) ** 5
    return np.array([np.mean(f * (1 - fc)), np.mean(f * fc)])


def test_dfg_smooth_head_on_limit():
    F1, F2 = dfg_integrate(1.0, 0.01, samples=1 << 16)
    assert abs(F1 - 1) < 0.02 and abs(F2) < 0.02


@pytest.mark.parametrize("nov,rough", [(0.2, 0.4), (0.5, 0.5), (0.9, 0.7), (0.3, 1.0), (0.7, 0.3)])
def test_dfg_table_matches_uniform_sampling(nov, rough):
    lut = precompute_dfg_lut()
    got = sample_dfg(lut, np.array([nov]), np.array([rough]))[0][0]
    ref = dfg_uniform_oracle(nov, rough)
    assert np.all(np.abs(got - ref) < 0.01 + 0.02 * ref)


def test_dfg_bounds_and_determinism():
    lut = precompute_dfg_lut(32, 512)
    assert np.all((lut >= 0) & (lut <= 1))
    again = _dfg_cached.__wrapped__(32, 512)
    assert lut.tobytes() == again.tobytes()
    with pytest.raises(ValueError):
        precompute_dfg_lut(8, 1024)


def test_dfg_sample_gradients_fd(rng):
    lut = precompute_dfg_lut()
    nov, r = rng.uniform(0.05, 0.95, 20), rng.uniform(0.05, 0.95, 20)
    _, dn, dr = sample_dfg(lut, nov, r)
    h = 1e-6
    fdn = (sample_dfg(lut, nov + h, r)[0] - sample_dfg(lut, nov - h, r)[0]) / (2 * h)
    fdr = (sample_dfg(lut, nov, r + h)[0] - sample_dfg(lut, nov, r - h)[0]) / (2 * h)
    assert np.allclose(dn, fdn, atol=1e-5) and np.allclose(dr, fdr, atol=1e-5)


# --- prefiltering ---------------------------------------------------------------------

def test_constant_environment_prefilters_to_itself():
    env = EnvironmentLight.constant(32).prefilter()
    for level in env.specular:
        assert np.all(np.abs(level - 1) < 0.01)
    assert np.all(np.abs(env.irradiance - math.pi) < 0.02 * math.pi)


def test_single_texel_stays_a_near_delta_at_low_roughness():
    res = 64
    tex = np.zeros((6, res, res, 1))
    tex[4, 31, 31] = 1.0
    src = texel_directions(res)[4, 31, 31]
    out = prefilter_operator(res, 0.05, 64) @ tex.reshape(-1, 1)
    w = texel_solid_angles(res).reshape(-1)
    ang = np.degrees(np.arccos(np.clip(texel_directions(res).reshape(-1, 3) @ src, -1, 1)))
    energy = w * out[:, 0]
    assert energy[ang <= 5].sum() >= 0.99 * energy.sum()
    # level 0 is the radiance itself
    env = prefilter_environment(np.repeat(tex, 3, -1))
    assert np.array_equal(env.specular[0], env.radiance)


def test_irradiance_energy_is_rotation_invariant():
    env = random_environment(32, seed=4)
    R = np.linalg.qr(np.random.default_rng(2).standard_normal((3, 3)))[0]
    a = prefilter_environment(env).irradiance
    b = prefilter_environment(rotate_cube(env, R)).irradiance
    assert rel_err(cube_energy(a), cube_energy(b)) < 0.02


def test_prefilter_rejects_negative_radiance():
    with pytest.raises(ValueError):
        prefilter_environment(-np.ones((6, 8, 8, 3)))


def test_radiance_grad_is_adjoint_of_prefilter(rng):
    env = EnvironmentLight(rng.uniform(0, 1, (6, 16, 16, 3)), levels=4).prefilter()
    gs = [rng.standard_normal(s.shape) for s in env.specular]
    gi = rng.standard_normal(env.irradiance.shape)
    lhs = sum(np.sum(a * b) for a, b in zip(gs, env.specular)) + np.sum(gi * env.irradiance)
    rhs = np.sum(env.radiance * env.radiance_grad(gs, gi))
    assert rel_err(lhs, rhs) < 1e-10


# --- split-sum shading -------------------------------------------------------------------

def test_lambert_under_constant_light():
    env = EnvironmentLight.constant(32)
    n = np.array([[0, 0, 1.0]] * 3)
    v = np.stack([_view(c) for c in (0.2, 0.6, 1.0)])
    white, _ = shade_points(np.ones((3, 3)), np.ones(3), np.zeros(3), n, v, env)
    black, _ = shade_points(np.zeros((3, 3)), np.ones(3), np.zeros(3), n, v, env)
    assert np.all(np.abs(white - black - 1) < 0.02)


def test_metal_has_no_diffuse():
    env = prefilter_environment(random_environment(16, seed=1))
    n = np.array([[0, 0, 1.0]])
    c, cache = shade_points(np.zeros((1, 3)), [0.4], [1.0], n, _view(0.7)[None], env)
    assert np.array_equal(c, cache.spec * (0.0 + cache.F[:, 1:2]))


def test_split_sum_matches_monte_carlo_under_constant_light():
    env = EnvironmentLight.constant(32)
    R, M, N = np.meshgrid(np.linspace(0.2, 1.0, 5), np.linspace(0, 1, 5), np.linspace(0.2, 1.0, 5),
                          indexing="ij")
    R, M, N = R.ravel(), M.ravel(), N.ravel()
    a = np.tile([0.8, 0.5, 0.3], (len(R), 1))
    n = np.tile([0, 0, 1.0], (len(R), 1))
    v = np.stack([_view(c) for c in N])
    ss, _ = shade_points(a, R, M, n, v, env)
    mc = mc_reference_points(a, R, M, n, v, env.radiance, samples=1 << 14)
    assert np.max(np.abs(ss - mc) / mc) < 0.05


def test_shade_is_homogeneous_in_radiance():
    base = random_environment(16, seed=3)
    n = np.tile([0, 0.6, 0.8], (4, 1))
    v = np.stack([_view(c) for c in (0.3, 0.5, 0.7, 0.9)])
    args = (np.full((4, 3), 0.6), [0.2, 0.5, 0.7, 1.0], [0, 0.3, 0.7, 1.0], n, v)
    c1, _ = shade_points(*args, prefilter_environment(base))
    c3, _ = shade_points(*args, prefilter_environment(3.0 * base))
    assert np.allclose(c3, 3.0 * c1, rtol=1e-12)


def _furnace_grid():
    R, M, N = np.meshgrid(np.linspace(0.1, 1, 10), [0.0, 0.5, 1.0], np.linspace(0.1, 1, 10),
                          indexing="ij")
    R, M, N = R.ravel(), M.ravel(), N.ravel()
    a = np.ones((len(R), 3))
    n = np.tile([0, 0, 1.0], (len(R), 1))
    v = np.stack([_view(c) for c in N])
    env = EnvironmentLight.constant(32)
    split, _ = shade_points(a, R, M, n, v, env)
    mc = mc_reference_points(a, R, M, n, v, env.radiance, samples=1 << 13)
    return split[:, 0], mc[:, 0]


def test_white_furnace_band_where_the_brdf_conserves_energy():
    # single-scattering GGX loses energy on rough metals, and the uncoupled
    # Lambert + specular sum gains it on smooth dielectrics at grazing angles,
    # so the band is checked where the reference integral itself respects it
    split, mc = _furnace_grid()
    inside = (mc >= 0.85) & (mc <= 1.25)
    assert inside.sum() >= 200
    assert np.all((split[inside] >= 0.8) & (split[inside] <= 1.3))
    # and outside it the split sum tracks the reference rather than the band
    assert np.all(np.abs(split - mc) / mc < 0.1)


@pytest.mark.xfail(strict=True, reason="the reference BRDF itself leaves the band at the grid corners")
def test_white_furnace_band_over_the_full_grid():
    split, _ = _furnace_grid()
    assert np.all((split >= 0.8) & (split <= 1.3))


def test_shade_points_adjoint_fd(rng):
    env = prefilter_environment(random_environment(16, seed=2))
    k = 20
    a = rng.uniform(0.1, 0.9, (k, 3))
    r = rng.uniform(0.05, 0.95, k)
    m = rng.uniform(0.05, 0.95, k)
    n = rng.standard_normal((k, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    v = n + 0.5 * rng.standard_normal((k, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    g = rng.standard_normal((k, 3))

    def f(a_, r_, m_, n_):
        return np.sum(g * shade_points(a_, r_, m_, n_, v, env)[0], axis=1)

    _, cache = shade_points(a, r, m, n, v, env)
    ga, gr, gm, gn, _, _ = shade_points_adjoint(a, r, m, n, env, cache, g)
    h = 1e-6
    for c in range(3):
        e = np.zeros((k, 3))
        e[:, c] = h
        assert rel_err(ga[:, c], (f(a + e, r, m, n) - f(a - e, r, m, n)) / (2 * h), 1e-4) < 1e-3
        assert np.allclose(gn[:, c], (f(a, r, m, n + e) - f(a, r, m, n - e)) / (2 * h), atol=1e-4)
    assert np.allclose(gr, (f(a, r + h, m, n) - f(a, r - h, m, n)) / (2 * h), atol=1e-4)
    assert rel_err(gm, (f(a, r, m + h, n) - f(a, r, m - h, n)) / (2 * h), 1e-4) < 1e-3


def _gbuffer_scene(seed=4):
    cloud, cam = small_scene(seed, n=8, res=12)
    return rasterize(cloud, cam), cam


def test_zero_upstream_zero_gradients():
    gb, cam = _gbuffer_scene()
    env = prefilter_environment(random_environment(8, seed=0))
    chans, genv = shade_adjoint(gb, env, cam, np.zeros((12, 12, 3)))
    assert not genv.any() and not any(v.any() for v in chans.values())


@pytest.mark.parametrize("background,mirror", [(None, False), ("env", False), (None, True)])
def test_environment_gradient_is_exact(background, mirror):
    # the image is linear in the radiance, so one-texel perturbations are exact oracles
    gb, cam = _gbuffer_scene()
    if mirror:
        # smooth metal: only texels around the reflected directions are queried
        gb.metallic[:] = 1.0
        gb.roughness[:] = 0.0
    rad = random_environment(8, seed=5)
    g = np.random.default_rng(0).standard_normal((12, 12, 3))
    _, genv = shade_adjoint(gb, prefilter_environment(rad), cam, g, background=background)
    base = np.sum(g * shade_deferred(gb, prefilter_environment(rad), cam, background))
    fd = np.zeros_like(rad)
    for idx in np.ndindex(rad.shape[:3]):
        bumped = rad.copy()
        bumped[idx] += 1.0
        fd[idx] = np.sum(g * shade_deferred(gb, prefilter_environment(bumped), cam, background)) - base
    fd = fd[..., 0]  # channels are independent, so one bump of all three sums them
    genv = genv.sum(-1)
    assert np.allclose(genv, fd, atol=1e-9)
    # gradient support is exactly the set of texels that influence the image
    assert np.array_equal(np.abs(genv) > 1e-12, np.abs(fd) > 1e-12)
    if mirror:
        assert 0 < np.count_nonzero(genv) < genv.size // 2


def test_gbuffer_channel_gradients_fd(rng):
    gb, cam = _gbuffer_scene()
    env = prefilter_environment(random_environment(16, seed=5))
    g = rng.standard_normal((12, 12, 3))
    chans, _ = shade_adjoint(gb, env, cam, g)

    def f():
        return np.sum(g * shade_deferred(gb, env, cam))

    h = 1e-6
    covered = np.argwhere(gb.alpha > 0.01)[:10]
    for name in ("albedo", "roughness", "metallic", "alpha"):
        arr = getattr(gb, name)
        for (y, x) in covered:
            sl = (y, x, 0) if arr.ndim == 3 else (y, x)
            keep = arr[sl]
            arr[sl] = keep + h
            fp = f()
            arr[sl] = keep - h
            fm = f()
            arr[sl] = keep
            assert abs(chans[name][sl] - (fp - fm) / (2 * h)) < 1e-4 * max(1.0, abs(chans[name][sl]))


# --- Monte-Carlo reference -----------------------------------------------------------------

def test_mc_black_environment_is_zero():
    out = mc_reference_shade([0.5, 0.5, 0.5], 0.5, 0.5, [0, 0, 1], [0, 0, 1], np.zeros((6, 8, 8, 3)))
    assert np.all(out == 0.0)


def test_mc_diffuse_lobe_integrates_to_albedo():
    out = mc_reference_shade([1, 1, 1], 1.0, 0.0, [0, 0, 1], _view(0.6), np.ones((6, 8, 8, 3)),
                             samples=1 << 16, lobes="diffuse")
    assert np.all(np.abs(out - 1) < 0.01)


def test_mc_rejects_few_samples():
    with pytest.raises(ValueError):
        mc_reference_shade([1, 1, 1], 1.0, 0.0, [0, 0, 1], [0, 0, 1], np.ones((6, 8, 8, 3)),
                           samples=512)


def test_mc_error_shrinks_with_samples():
    rad = random_environment(16, seed=7)
    args = (np.array([[0.6, 0.5, 0.4]]), [0.5], [0.5], np.array([[0, 0, 1.0]]), _view(0.7)[None], rad)
    truth = mc_reference_points(*args, samples=1 << 20, seed=999)[0]
    mse = []
    for n in (1024, 2048):
        est = np.array([mc_reference_points(*args, samples=n, seed=s)[0] for s in range(50)])
        mse.append(np.mean((est - truth) ** 2))
    assert 2 * 0.7 <= mse[0] / mse[1] <= 2 * 1.3


def test_mc_is_deterministic_per_seed():
    rad = random_environment(8, seed=1)
    a = mc_reference_shade([0.5] * 3, 0.3, 0.2, [0, 0, 1], _view(0.5), rad, samples=2048, seed=5)
    b = mc_reference_shade([0.5] * 3, 0.3, 0.2, [0, 0, 1], _view(0.5), rad, samples=2048, seed=5)
    assert a.tobytes() == b.tobytes()
