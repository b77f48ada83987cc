import math

import numpy as np
import pytest

from solofield.field import FieldConfig, GradBuffers, grid_init
from solofield.render import (
    ALBEDO_SHADING,
    BackgroundGrads,
    BackgroundModel,
    Camera,
    ShadingSpec,
    ViewGrads,
    background_backward,
    background_eval,
    camera_from_spherical,
    camera_ray,
    composite,
    composite_backward,
    composite_normals,
    init_background,
    render_view,
    render_view_backward,
    sample_ray,
    shade,
)


def test_camera_center_pixel_points_at_target():
    cam = Camera(position=np.array([0.0, 0.5, 1.8]), look_at=np.zeros(3),
                 fov_deg=50, width=9, height=9)
    ray = camera_ray(cam, (4, 4))
    expected = -cam.position / np.linalg.norm(cam.position)
    assert np.allclose(ray.direction, expected, atol=1e-9)
    assert np.isclose(np.linalg.norm(ray.direction), 1.0)


def test_camera_corner_rays_subtend_fov_across_width():
    # oracle: image plane at unit distance spans 2*tan(fov/2) horizontally;
    # pixel centers of the left/right columns sit half a pixel inside
    W = H = 33
    fov = 55.0
    cam = Camera(position=np.array([0.0, 0.0, 2.0]), fov_deg=fov, width=W, height=H)
    mid = H // 2
    r_left = camera_ray(cam, (0, mid))
    r_right = camera_ray(cam, (W - 1, mid))
    got = math.degrees(math.acos(np.clip(np.dot(r_left.direction, r_right.direction), -1, 1)))
    tanw = math.tan(math.radians(fov) / 2)
    expected = 2 * math.degrees(math.atan(tanw * (1 - 1 / W)))
    assert abs(got - expected) < 1e-9


def test_camera_ray_near_far_from_bbox():
    cam = Camera(position=np.array([0.0, 0.0, 1.8]), fov_deg=40, width=5, height=5)
    ray = camera_ray(cam, (2, 2), half_extent=0.375)
    assert np.isclose(ray.near, 1.8 - 0.375)
    assert np.isclose(ray.far, 1.8 + 0.375)
    # corner pixel at tiny fov still hits; a camera aimed away misses
    side = Camera(position=np.array([0.0, 0.0, 1.8]), look_at=np.array([0.0, 0.0, 5.0]),
                  fov_deg=40, width=5, height=5)
    miss = camera_ray(side, (2, 2))
    assert miss.far <= miss.near


def test_camera_from_spherical_reference_pose():
    cam = camera_from_spherical(1.8, azimuth_deg=0.0, elevation_deg=15.0, fov_deg=40)
    assert np.isclose(np.linalg.norm(cam.position), 1.8)
    assert np.isclose(cam.position[1], 1.8 * math.sin(math.radians(15)))
    assert np.allclose(cam.look_at, 0)
    overhead = camera_from_spherical(1.8, 0.0, 90.0)
    assert np.isclose(overhead.position[1], 1.8)
    overhead.basis()  # must not blow up on the up-axis singularity


def test_camera_rejects_degenerate():
    with pytest.raises(ValueError):
        Camera(position=np.zeros(3), look_at=np.zeros(3))
    with pytest.raises(ValueError):
        Camera(position=np.ones(3), fov_deg=240)
    cam = Camera(position=np.ones(3), width=4, height=4)
    with pytest.raises(ValueError):
        camera_ray(cam, (4, 0))


def test_sample_ray_uniform_and_stratified():
    from solofield.render import Ray
    ray = Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]), near=1.0, far=2.0)
    ts, delta = sample_ray(ray, 4)
    assert np.isclose(delta, 0.25)
    assert np.allclose(ts, [1.125, 1.375, 1.625, 1.875])
    rng = np.random.default_rng(0)
    ts2, _ = sample_ray(ray, 64, stratified=True, rng=rng)
    bins = np.floor((ts2 - 1.0) / (0.25 / 16))
    edges = 1.0 + np.arange(64) * (1.0 / 64)
    assert np.all(ts2 >= edges) and np.all(ts2 < edges + 1.0 / 64)
    with pytest.raises(ValueError):
        sample_ray(ray, 1)


def test_composite_empty_and_saturated():
    rgb, op, depth, w = composite(np.zeros(8), np.ones((8, 3)) * 0.7, 0.1)
    assert np.allclose(rgb, 0) and op == 0
    sig = np.zeros(8)
    sig[3] = 1e9
    col = np.zeros((8, 3))
    col[3] = (0.2, 0.4, 0.6)
    rgb, op, _, w = composite(sig, col, 0.1)
    assert np.isclose(op, 1.0)
    assert np.allclose(rgb, col[3], atol=1e-9)


def test_composite_homogeneous_medium_oracle():
    # constant sigma=1 across unit length: opacity -> 1 - e^{-1}
    n = 1000
    rgb, op, _, _ = composite(np.ones(n), np.ones((n, 3)), 1.0 / n)
    assert abs(op - (1 - math.exp(-1))) < 1e-3


def test_composite_matches_sequential_absorption():
    rng = np.random.default_rng(1)
    sig = rng.uniform(0, 30, size=(5, 16))
    col = rng.random((5, 16, 3))
    delta = rng.uniform(0.01, 0.1, size=5)
    rgb, op, depth, w = composite(sig, col, delta)
    for r in range(5):
        T = 1.0
        acc = np.zeros(3)
        ws = []
        for i in range(16):
            a = 1 - math.exp(-sig[r, i] * delta[r])
            ws.append(T * a)
            acc += T * a * col[r, i]
            T *= 1 - a
        assert np.allclose(rgb[r], acc, atol=1e-6)
        assert np.isclose(op[r], 1 - T, atol=1e-6)
        assert np.allclose(w[r], ws, atol=1e-6)
        # partition of unity
        assert np.isclose(w[r].sum() + T, 1.0, atol=1e-12)


def test_composite_opacity_monotone_in_density():
    rng = np.random.default_rng(2)
    sig = rng.uniform(0, 5, size=(1, 12))
    col = rng.random((1, 12, 3))
    _, op0, _, _ = composite(sig, col, 0.05)
    for i in range(12):
        bumped = sig.copy()
        bumped[0, i] += 0.1
        _, op1, _, _ = composite(bumped, col, 0.05)
        assert op1 >= op0


def test_composite_rejects_bad_inputs():
    with pytest.raises(ValueError):
        composite(np.array([1.0, np.nan]), np.ones((2, 3)), 0.1)
    with pytest.raises(ValueError):
        composite(np.array([1.0, -0.5]), np.ones((2, 3)), 0.1)


def test_composite_backward_matches_fd():
    rng = np.random.default_rng(3)
    sig = rng.uniform(0.1, 8.0, size=(3, 10))
    col = rng.random((3, 10, 3))
    delta = np.array([0.03, 0.05, 0.07])
    G = rng.standard_normal((3, 10))

    def f(s):
        _, _, _, w = composite(s, col, delta)
        return float(np.sum(w * G))

    _, _, _, w = composite(sig, col, delta)
    dsig = composite_backward(sig, delta, w, G)
    h = 1e-6
    for _ in range(20):
        r, i = rng.integers(0, 3), rng.integers(0, 10)
        s2 = sig.copy()
        s2[r, i] += h
        fp = f(s2)
        s2[r, i] -= 2 * h
        fm = f(s2)
        fd = (fp - fm) / (2 * h)
        assert abs(fd - dsig[r, i]) < 1e-5 * max(1.0, abs(fd))


def test_composite_normals_simple_cases():
    n = np.zeros((1, 4, 3))
    n[0, 2] = (0, 0, 1.0)
    w = np.zeros((1, 4))
    w[0, 2] = 0.83
    out = composite_normals(n, w)
    assert np.allclose(out[0], (0, 0, 0.83))
    assert np.allclose(composite_normals(n, np.zeros((1, 4))), 0)


def test_shade_modes():
    alb = np.array([[0.3, 0.5, 0.9]])
    pts = np.zeros((1, 3))
    spec = ShadingSpec(mode="albedo")
    assert np.allclose(shade(alb, pts, None, spec), alb)

    light = np.array([0.0, 2.0, 0.0])
    # normal perpendicular to the light direction: ambient only
    n_perp = np.array([[1.0, 0.0, 0.0]])
    spec = ShadingSpec(mode="diffuse", light_position=light, light_color=0.9, ambient=0.1)
    assert np.allclose(shade(alb, pts, n_perp, spec), 0.1 * alb)

    # textureless facing the light: full white
    n_up = np.array([[0.0, 1.0, 0.0]])
    spec = ShadingSpec(mode="textureless", light_position=light, light_color=0.9, ambient=0.1)
    assert np.allclose(shade(alb, pts, n_up, spec), 1.0)

    with pytest.raises(ValueError):
        ShadingSpec(mode="phong")


def test_background_zero_init_is_midgray():
    bg = init_background(0, zero=True)
    out = background_eval(bg, np.array([[0.0, 0.0, 1.0]]))
    assert np.allclose(out, 0.5)
    bg2 = init_background(3)
    d = np.array([[0.3, -0.4, 0.866]])
    assert np.array_equal(background_eval(bg2, d), background_eval(bg2, d))


def test_background_gradients_match_fd():
    bg = init_background(1, dtype=np.float64)
    rng = np.random.default_rng(4)
    dirs = rng.standard_normal((12, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    W = rng.standard_normal((12, 3))

    def f():
        return float(np.sum(background_eval(bg, dirs) * W))

    grads = BackgroundGrads.zeros_like(bg)
    background_backward(bg, dirs, W, grads)
    h = 1e-6
    for arr, garr in [(bg.w1, grads.w1), (bg.b1, grads.b1), (bg.w2, grads.w2), (bg.b2, grads.b2)]:
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 5)):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            assert abs(fd - gflat[i]) < 1e-6 * max(1.0, abs(fd))


def _toy_model(dtype=np.float64, blob=True, seed=0, feature_scale=0.4):
    cfg = FieldConfig(num_levels=4, feature_dim=2, base_resolution=8, max_resolution=24,
                      grid_cap=24, decoder_hidden=16, decoder_layers=3, blob_enabled=blob)
    m = grid_init(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for g in m.grids:
        g += rng.uniform(-feature_scale, feature_scale, size=g.shape)
    return m


def test_render_empty_field_is_pure_background():
    cfg = FieldConfig(num_levels=2, feature_dim=2, base_resolution=8, max_resolution=16,
                      grid_cap=16, decoder_hidden=8, decoder_layers=2, blob_enabled=False)
    m = grid_init(cfg, seed=0, dtype=np.float64)
    # force the density head to strongly negative raw values => sigma ~ 0
    m.decoder_w[-1][:] = 0
    m.decoder_b[-1][:] = np.array([-40.0, 0.0, 0.0, 0.0])
    bg = init_background(2, dtype=np.float64)
    cam = camera_from_spherical(1.8, 30, 15, fov_deg=40, width=12, height=12)
    out = render_view(m, cam, bg=bg, n_samples=24)
    assert np.max(out.opacity) < 1e-12
    expect = background_eval(bg, out.dirs.reshape(-1, 3)).reshape(12, 12, 3)
    assert np.allclose(out.rgb, expect, atol=1e-9)


def test_render_blob_opacity_is_radial_bump():
    # blob-only field seen from the reference camera: opacity peaks at the
    # image center and decays monotonically along the diagonal, symmetric
    cfg = FieldConfig(num_levels=2, feature_dim=2, base_resolution=8, max_resolution=16,
                      grid_cap=16, decoder_hidden=8, decoder_layers=2, blob_enabled=True)
    m = grid_init(cfg, seed=0, dtype=np.float64)
    for g in m.grids:
        g[:] = 0
    for w in m.decoder_w:
        w[:] = 0
    for b in m.decoder_b:
        b[:] = 0
    b_last = m.decoder_b[-1]
    b_last[0] = -40.0  # kill the constant softplus floor; only the blob remains
    H = 13
    cam = camera_from_spherical(1.8, 0, 0, fov_deg=40, width=H, height=H)
    out = render_view(m, cam, n_samples=96)
    mid = H // 2
    center = out.opacity[mid, mid]

    # analytic projection of the blob along the central ray
    ray = camera_ray(cam, (mid, mid))
    ts = np.linspace(ray.near, ray.far, 20001)
    p = ray.origin + ts[:, None] * ray.direction
    sig = 5.0 * np.exp(-np.sum(p * p, axis=1) / (2 * 0.2**2))
    expected = 1 - np.exp(-np.trapezoid(sig, ts))
    assert abs(center - expected) < 1e-3

    diag = np.array([out.opacity[mid + k, mid + k] for k in range(mid + 1)])
    assert np.all(np.diff(diag) <= 1e-12)
    assert np.allclose(out.opacity, out.opacity[::-1, :], atol=1e-6)
    assert np.allclose(out.opacity, out.opacity[:, ::-1], atol=1e-6)


def test_render_doubling_samples_converges():
    m = _toy_model()
    cam = camera_from_spherical(1.5, 40, 20, fov_deg=45, width=10, height=10)
    a = render_view(m, cam, n_samples=64)
    b = render_view(m, cam, n_samples=128)
    assert np.max(np.abs(a.rgb - b.rgb)) < 1e-2


def test_render_deterministic_across_chunk_sizes():
    m = _toy_model(dtype=np.float32)
    cam = camera_from_spherical(1.4, 100, 35, fov_deg=50, width=9, height=9)
    spec = ShadingSpec(mode="diffuse", light_position=np.array([1.0, 2.0, 0.5]))
    a = render_view(m, cam, spec=spec, n_samples=16, stratified=True, seed=7, chunk_rays=5)
    b = render_view(m, cam, spec=spec, n_samples=16, stratified=True, seed=7, chunk_rays=81)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.normals, b.normals)


def full_pipeline_scalar(model, bg, cam, spec, coeffs, n_samples, seed):
    out = render_view(model, cam, spec=spec, bg=bg, n_samples=n_samples,
                      stratified=True, seed=seed, want_normals=True,
                      want_sample_normals=True)
    A, B, C, D, E = coeffs
    return float(np.sum(out.rgb * A) + np.sum(out.opacity * B)
                 + np.sum(out.normals * C) + np.sum(out.weights * D)
                 + np.sum(out.sample_normals * E))


def test_render_gradients_match_fd_end_to_end():
    # every output head at once: rgb, opacity, normal map, weights, sample normals
    m = _toy_model(dtype=np.float64)
    bg = init_background(5, dtype=np.float64)
    cam = camera_from_spherical(1.6, 25, 20, fov_deg=45, width=8, height=8)
    spec = ShadingSpec(mode="diffuse", light_position=np.array([0.8, 1.9, 0.7]))
    n_samples, seed = 12, 11
    rng = np.random.default_rng(12)
    H, W = 8, 8
    coeffs = (rng.standard_normal((H, W, 3)), rng.standard_normal((H, W)),
              rng.standard_normal((H, W, 3)), rng.standard_normal((H, W, n_samples)),
              rng.standard_normal((H, W, n_samples, 3)))

    grads, bg_grads = render_view_backward(
        m, cam, ViewGrads(d_rgb=coeffs[0], d_opacity=coeffs[1], d_normal_map=coeffs[2],
                          d_weights=coeffs[3], d_sample_normals=coeffs[4]),
        spec=spec, bg=bg, n_samples=n_samples, stratified=True, seed=seed)

    def f():
        return full_pipeline_scalar(m, bg, cam, spec, coeffs, n_samples, seed)

    h = 1e-6
    fd_list, an_list = [], []
    params = [(m.grids[0], grads.grids[0]), (m.grids[2], grads.grids[2]),
              (m.decoder_w[0], grads.decoder_w[0]), (m.decoder_w[2], grads.decoder_w[2]),
              (m.decoder_b[0], grads.decoder_b[0]),
              (bg.w1, bg_grads.w1), (bg.w2, bg_grads.w2)]
    for arr, garr in params:
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        nz = np.nonzero(np.abs(gflat) > 1e-9)[0]
        if len(nz) == 0:
            continue
        pick = nz[rng.integers(0, len(nz), size=min(6, len(nz)))]
        for i in pick:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            fd_list.append((fp - fm) / (2 * h))
            an_list.append(gflat[i])
    fd_vec, an_vec = np.array(fd_list), np.array(an_list)
    rel = np.linalg.norm(fd_vec - an_vec) / max(np.linalg.norm(fd_vec), 1e-12)
    assert rel < 1e-3, f"relative gradient error {rel:.2e}"
