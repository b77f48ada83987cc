import numpy as np

from solofield.scenes import (
    SphereScene,
    held_out_cameras,
    reference_view,
    render_scene,
    stored_view_cameras,
    stored_views,
)


def test_density_profile():
    s = SphereScene()
    assert abs(s.density(np.zeros((1, 3)))[0] - s.peak_density) < 1e-6
    at_surface = s.density(np.array([[s.radius, 0, 0]]))[0]
    assert np.isclose(at_surface, s.peak_density / 2)
    far = s.density(np.array([[0.36, 0, 0]]))[0]
    assert far < 0.01
    assert s.density(np.array([[0.0, 0.375, 0.0]]))[0] < 0.01


def test_albedo_range_and_symmetry():
    s = SphereScene()
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((100, 3)) * 0.2
    alb = s.albedo(pts)
    assert np.all(alb >= 0.5 - s.color_amp - 1e-9)
    assert np.all(alb <= 0.5 + s.color_amp + 1e-9)
    # albedo depends only on direction
    a1 = s.albedo(np.array([[0.1, 0.0, 0.0]]))
    a2 = s.albedo(np.array([[0.2, 0.0, 0.0]]))
    assert np.allclose(a1, a2)


def test_render_scene_silhouette():
    s = SphereScene()
    cam, image, mask = reference_view(s, res=48)
    h = 48 // 2
    assert mask[h, h] == 1.0
    assert mask[0, 0] == 0.0 and mask[-1, -1] == 0.0
    # background shows through where the mask is empty
    assert np.allclose(image[0, 0], s.background, atol=1e-6)
    # disc area matches the analytic solid angle within a few pixels' worth
    out = render_scene(s, cam)
    assert np.isclose(out.opacity[h, h], 1.0, atol=1e-3)

    # determinism
    out2 = render_scene(s, cam)
    assert np.array_equal(out.rgb, out2.rgb)


def test_stored_views_layout():
    cams = stored_view_cameras()
    assert len(cams) == 26
    r = [np.linalg.norm(c.position) for c in cams]
    assert np.allclose(r, 1.8)
    views = stored_views(SphereScene(), res=16, n_samples=64)
    assert len(views) == 26
    assert views[0][1].shape == (16, 16, 3)
    held = held_out_cameras(res=16)
    assert len(held) == 8
    els = [np.degrees(np.arcsin(c.position[1] / np.linalg.norm(c.position)))
           for c in held]
    assert np.allclose(els, 15.0)


def test_surface_points():
    s = SphereScene()
    pts = s.surface_points(1000, np.random.default_rng(1))
    assert np.allclose(np.linalg.norm(pts, axis=1), s.radius, atol=1e-12)
    assert np.abs(pts.mean(axis=0)).max() < 0.03
