import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from trackplan import geometry as geo
from trackplan.geometry import CameraIntrinsics, RigidTransform

finite = st.floats(-3, 3, allow_nan=False)
twists = arrays(np.float64, 6, elements=st.floats(-1.8, 1.8, allow_nan=False))
points = arrays(np.float64, 3, elements=st.floats(-5, 5, allow_nan=False))


def rand_transform(g):
    w = g.normal(size=3)
    w *= g.uniform(0, 3) / np.linalg.norm(w)
    return geo.exp_map(np.concatenate([w, g.normal(size=3)]))


def test_compose_identity_and_inverse():
    T = rand_transform(np.random.default_rng(0))
    I = RigidTransform.identity()
    C = geo.compose(I, T)
    assert np.allclose(C.rotation, T.rotation) and np.allclose(C.translation, T.translation)
    back = geo.compose(T, geo.invert(T))
    assert np.allclose(back.matrix(), np.eye(4), atol=1e-9)


def test_compose_rz_angles_add():
    a = RigidTransform(geo.rot_z(np.radians(30)))
    b = RigidTransform(geo.rot_z(np.radians(60)))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(geo.compose(a, b).rotation, expected, atol=1e-12)


def test_apply_examples():
    assert np.array_equal(geo.apply(RigidTransform.identity(), [1, 2, 3]), [1.0, 2.0, 3.0])
    T = RigidTransform(np.eye(3), [0.1, 0, 0])
    assert np.allclose(geo.apply(T, [0, 0, 2]), [0.1, 0, 2])
    R = RigidTransform(geo.rot_z(np.pi / 2))
    assert np.allclose(geo.apply(R, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_project_examples():
    K1 = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 10, 10)
    assert np.allclose(geo.project(K1, [0, 0, 1]), [0, 0])
    K = CameraIntrinsics(100.0, 100.0, 128.0, 128.0, 256, 256)
    assert np.allclose(geo.project(K, [0.5, -0.2, 2.0]), [153.0, 118.0], atol=1e-12)
    with pytest.raises(geo.NonPositiveDepth):
        geo.project(K, [0, 0, 0.0])
    with pytest.raises(geo.NonPositiveDepth):
        geo.project(K, [[0, 0, 1.0], [0, 0, -1.0]])


def test_backproject_examples():
    K = CameraIntrinsics(100.0, 100.0, 128.0, 128.0, 256, 256)
    assert np.allclose(geo.backproject(K, [128, 128], 3.0), [0, 0, 3.0])
    assert np.allclose(geo.backproject(K, [153, 118], 2.0), [0.5, -0.2, 2.0], atol=1e-12)
    with pytest.raises(geo.NonPositiveDepth):
        geo.backproject(K, [1, 1], 0.0)


def test_backproject_roundtrip_many():
    g = np.random.default_rng(1)
    K = CameraIntrinsics.default()
    q = g.uniform(0, 256, size=(1000, 2))
    d = g.uniform(0.1, 10, size=1000)
    assert np.abs(geo.project(K, geo.backproject(K, q, d)) - q).max() < 1e-9


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    K = CameraIntrinsics.default(128, 200.0)
    assert CameraIntrinsics.from_dict(K.to_dict()) == K


def test_exp_zero_and_rz():
    assert np.array_equal(geo.exp_map(np.zeros(6)).matrix(), np.eye(4))
    th = 0.1
    T = geo.exp_map([0, 0, th, 0, 0, 0])
    c, s = np.cos(th), np.sin(th)
    assert np.allclose(T.rotation, [[c, -s, 0], [s, c, 0], [0, 0, 1]], atol=1e-15)
    assert np.array_equal(T.translation, np.zeros(3))


def test_log_near_pi_raises():
    with pytest.raises(geo.NearPiRotation):
        geo.log_map(RigidTransform(geo.rot_x(np.pi - 1e-8)))


def test_exp_log_roundtrip_1000():
    g = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        w = g.normal(size=3)
        w *= g.uniform(0, 3) / np.linalg.norm(w)
        x = np.concatenate([w, g.normal(size=3)])
        worst = max(worst, np.abs(geo.log_map(geo.exp_map(x)) - x).max())
    assert worst < 1e-9


def test_long_chain_stays_orthonormal():
    g = np.random.default_rng(3)
    T = RigidTransform.identity()
    for _ in range(100):
        T = geo.compose(T, rand_transform(g))
        R = T.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-7
        assert abs(np.linalg.det(R) - 1) < 1e-7


def test_serialization_roundtrip():
    T = rand_transform(np.random.default_rng(4))
    rows = geo.transform_to_list(T)
    assert np.array(rows).shape == (3, 4)
    assert np.array_equal(geo.transform_from_list(rows).matrix(), T.matrix())


def test_transform_is_immutable():
    T = RigidTransform.identity()
    with pytest.raises(ValueError):
        T.rotation[0, 0] = 2.0


@given(twists, twists, points)
def test_apply_compose_associates(xa, xb, p):
    a, b = geo.exp_map(xa), geo.exp_map(xb)
    lhs = geo.apply(geo.compose(a, b), p)
    rhs = geo.apply(a, geo.apply(b, p))
    assert np.allclose(lhs, rhs, atol=1e-9)


@given(twists)
def test_exp_log_property(x):
    assert np.allclose(geo.log_map(geo.exp_map(x)), x, atol=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-2, 2, allow_nan=False)),
       st.floats(0.5, 4.0), st.floats(1e-3, 1e3))
def test_project_scale_invariant(xy, z, lam):
    K = CameraIntrinsics.default()
    p = np.array([xy[0], xy[1], z])
    assert np.allclose(geo.project(K, p), geo.project(K, lam * p), atol=1e-9)


@settings(max_examples=50)
@given(twists)
def test_exp_gives_rotation(x):
    R = geo.exp_map(x).rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9
