import itertools

import numpy as np
import pytest

from splatseg.camera import (OVERLAP_HI, OVERLAP_LO, Camera, compute_frustum, frustum_overlap,
                             gaussians_in_frustum, in_view, load_cameras, look_at, mine_view_pairs,
                             project_point, project_points, save_cameras)
from splatseg.raster import RasterConfig, project_gaussians
from splatseg.scene import GaussianScene, quat_to_rotmat
from splatseg.synthetic import camera_ring, random_scene


def _cam(**kw):
    K = np.array([[50.0, 0, 32.0], [0, 50.0, 24.0], [0, 0, 1]])
    args = dict(K=K, R=np.eye(3), t=np.zeros(3), width=64, height=48, near=0.5, far=10.0)
    args.update(kw)
    return Camera(**args)


def _points_scene(pts):
    n = len(pts)
    return GaussianScene(np.asarray(pts, dtype=float), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full((n, 3), -3.0), np.zeros(n), np.zeros((n, 16, 3)))


def test_optical_axis_projects_to_principal_point():
    cam = _cam()
    p = project_point(cam, [0.0, 0.0, 3.0])
    assert (p.u, p.v, p.depth, p.in_front) == (32.0, 24.0, 3.0, True)


def test_hand_substitution():
    # pick x so that R x + t = (1, 0, f); with cx = 0 this gives u = fx / f
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    R = quat_to_rotmat(q / np.linalg.norm(q))
    t = np.array([0.3, -0.2, 1.0])
    f = 2.0
    K = np.array([[7.0, 0, 0.0], [0, 7.0, 5.0], [0, 0, 1]])
    cam = Camera(K, R, t, 20, 20)
    x = R.T @ (np.array([1.0, 0.0, f]) - t)
    p = project_point(cam, x)
    assert p.u == pytest.approx(7.0 / f, abs=1e-12)
    assert p.v == pytest.approx(5.0, abs=1e-12)
    assert p.depth == pytest.approx(f, abs=1e-12)


def test_behind_camera_flagged_not_raised():
    p = project_point(_cam(), [0.0, 0.0, -1.0])
    assert not p.in_front and np.isnan(p.u)


def test_camera_validation():
    with pytest.raises(ValueError):
        _cam(near=2.0, far=1.0)
    with pytest.raises(ValueError):
        _cam(R=np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(ValueError):
        _cam(K=np.diag([0.0, 1.0, 1.0]))


def test_cameras_json_round_trip(tmp_path):
    cams = camera_ring(4, 32, 24, seed=1)
    save_cameras(tmp_path / "cameras.json", cams)
    back = load_cameras(tmp_path / "cameras.json")
    for a, b in zip(cams, back):
        assert np.array_equal(a.K, b.K) and np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
        assert (a.width, a.height, a.near, a.far) == (b.width, b.height, b.near, b.far)


def test_look_at_points_forward():
    cam = look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], 40, 30)
    p = project_point(cam, [0.0, 0.0, 0.0])
    assert p.u == pytest.approx(20.0) and p.v == pytest.approx(15.0)
    np.testing.assert_allclose(cam.center, [1.0, 2.0, 3.0], atol=1e-12)


def test_frustum_plane_normals_unit_and_centre_inside():
    cam = camera_ring(1, 64, 48, seed=3)[0]
    fr = compute_frustum(cam)
    np.testing.assert_allclose(np.linalg.norm(fr.normals, axis=1), 1.0, atol=1e-12)
    mid = cam.center + cam.forward * (cam.near + cam.far) / 2
    assert fr.contains(mid[None])[0]
    behind = cam.center - cam.forward
    assert not fr.contains(behind[None])[0]


@pytest.mark.parametrize("seed", range(3))
def test_frustum_matches_projection_oracle(seed):
    cam = camera_ring(3, 64, 48, seed=seed)[seed]
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-6, 6, size=(10000, 3))
    assert np.array_equal(compute_frustum(cam).contains(pts), in_view(cam, pts))


def test_membership_cases():
    cam = _cam()
    fr = compute_frustum(cam)
    assert gaussians_in_frustum(fr, GaussianScene.empty()).size == 0
    centre = np.array([0.0, 0.0, 5.0])
    scene = _points_scene(np.tile(centre, (6, 1)))
    assert gaussians_in_frustum(fr, scene).tolist() == list(range(6))
    rnd = random_scene(300, seed=2, extent=2.0)
    ref = [i for i in range(len(rnd)) if in_view(cam, rnd.means[i:i + 1])[0]]
    assert gaussians_in_frustum(fr, rnd).tolist() == ref


def test_overlap_identical_symmetric_and_disjoint():
    from splatseg.synthetic import make_room_scene

    scene = make_room_scene(3, 600, seed=4)
    cams = camera_ring(3, 64, 48, seed=0)
    a, b = cams[0], cams[1]
    assert gaussians_in_frustum(compute_frustum(a), scene).size > 0
    assert frustum_overlap(scene, a, a) == 1.0
    assert frustum_overlap(scene, a, b) == frustum_overlap(scene, b, a)
    front = _cam()
    back = _cam(R=np.diag([-1.0, 1.0, -1.0]))
    pts = _points_scene(np.random.default_rng(0).uniform([-0.3, -0.3, 2.0], [0.3, 0.3, 4.0], (50, 3)))
    assert frustum_overlap(pts, front, back) == 0.0
    assert frustum_overlap(pts, front, front) == 1.0


def _overlap_oracle(scene, a, b):
    ga = {i for i in range(len(scene)) if in_view(a, scene.means[i:i + 1])[0]}
    gb = {i for i in range(len(scene)) if in_view(b, scene.means[i:i + 1])[0]}
    if not ga or not gb:
        return 0.0
    return len(ga & gb) / min(len(ga), len(gb))


def test_mining_matches_exhaustive_oracle():
    from splatseg.synthetic import make_room_scene

    scene = make_room_scene(4, 1500, seed=0)
    cams = camera_ring(4, 64, 64, seed=0)
    got = mine_view_pairs(scene, cams)
    want = []
    for m, n in itertools.combinations(range(4), 2):
        ov = _overlap_oracle(scene, cams[m], cams[n])
        if OVERLAP_LO <= ov <= OVERLAP_HI:
            want.append((m, n, ov))
    assert [(m, n) for m, n, _ in got] == [(m, n) for m, n, _ in want]
    np.testing.assert_allclose([o for *_, o in got], [o for *_, o in want])
    assert sorted(got) == got


def test_mining_defaults_and_edge_cases():
    assert (OVERLAP_LO, OVERLAP_HI) == (0.3, 0.8)
    scene = random_scene(50, seed=1)
    assert mine_view_pairs(scene, [_cam()]) == []
    with pytest.raises(ValueError):
        mine_view_pairs(scene, [_cam()], lo=0.8, hi=0.3)


def test_rigid_transform_leaves_memberships_unchanged():
    from splatseg.synthetic import make_room_scene

    scene = make_room_scene(3, 800, seed=5)
    cams = camera_ring(3, 48, 48, seed=5)
    rng = np.random.default_rng(9)
    q = rng.normal(size=4)
    Q = quat_to_rotmat(q / np.linalg.norm(q))
    s = rng.normal(size=3)
    moved = scene.copy()
    moved.means = scene.means @ Q.T + s
    mcams = [Camera(c.K, c.R @ Q.T, c.t - c.R @ Q.T @ s, c.width, c.height, c.near, c.far) for c in cams]
    for c, mc in zip(cams, mcams):
        assert np.array_equal(gaussians_in_frustum(compute_frustum(c), scene),
                              gaussians_in_frustum(compute_frustum(mc), moved))


# -- EWA projection ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_projected_covariance_matches_monte_carlo(seed):
    """Small Gaussians far from the camera: linearised projection ~ sampled image covariance."""
    rng = np.random.default_rng(seed)
    cam = _cam(K=np.array([[400.0, 0, 32.0], [0, 400.0, 24.0], [0, 0, 1]]))
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    mean = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 4.0])
    scales = np.log(rng.uniform(0.005, 0.02, 3))
    g = GaussianScene(mean[None], q[None], scales[None], np.array([3.0]), np.zeros((1, 16, 3)))
    sp = project_gaussians(cam, g, RasterConfig(lowpass=0.0), cull_footprint=False)
    Sigma = g.covariances()[0]
    x = rng.multivariate_normal(mean, Sigma, size=200000)
    pr = project_points(cam, x)
    emp = np.cov(np.stack([pr.u, pr.v]))
    np.testing.assert_allclose(sp.cov2d[0], emp, rtol=0.03, atol=0.03 * np.abs(emp).max())
    np.testing.assert_allclose(sp.mean2d[0], [pr.u.mean(), pr.v.mean()], atol=0.05)


def test_lowpass_added_to_diagonal():
    g = random_scene(5, seed=1)
    cam = look_at([0, 0, 0], [0, 0, 1], 64, 64, near=0.1)
    a = project_gaussians(cam, g, RasterConfig(lowpass=0.0), cull_footprint=False)
    b = project_gaussians(cam, g, RasterConfig(lowpass=0.3), cull_footprint=False)
    np.testing.assert_allclose(b.cov2d - a.cov2d, np.broadcast_to(0.3 * np.eye(2), a.cov2d.shape), atol=1e-12)
