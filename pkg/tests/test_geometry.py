import numpy as np
import pytest

from kplift import autodiff as ad
from kplift import geometry as geo
from kplift.autodiff import Tensor


def test_rotation_orthonormal_input_gives_identity():
    r = geo.rotation_from_6d(np.array([1.0, 0, 0, 0, 1.0, 0]))
    assert np.allclose(r, np.eye(3), atol=1e-15)


def test_rotation_scale_invariance():
    r = geo.rotation_from_6d(np.array([2.0, 0, 0, 0, 3.0, 0]))
    assert np.allclose(r, np.eye(3), atol=1e-15)


def test_rotation_hand_gram_schmidt():
    r = geo.rotation_from_6d(np.array([0.0, 1, 0, 1, 1, 0]))
    expected = np.column_stack([[0, 1, 0], [1, 0, 0], [0, 0, -1.0]])
    assert np.allclose(r, expected, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_rotation_validity_bulk(seed):
    rng = np.random.default_rng(seed)
    for _ in range(500):
        r = geo.rotation_from_6d(rng.standard_normal(6))
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-6
        assert abs(np.linalg.det(r) - 1.0) < 1e-6


def test_rotation_degenerate_zero_input_recovers_by_perturbation():
    r = geo.rotation_from_6d(np.zeros(6))
    assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-6


def test_rotation_parallel_vectors_recover():
    r = geo.rotation_from_6d(np.array([1.0, 0, 0, 2.0, 0, 0]))
    assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-6


def test_rotation_gradients_match_fd():
    rng = np.random.default_rng(5)
    raw0 = rng.standard_normal(6)
    target = rng.standard_normal((3, 3))

    def fn(t):
        r = geo.rotation_from_6d(t)
        return ad.tsum(ad.huber(r - Tensor(target), 0.3))

    assert ad.finite_difference_check(fn, raw0, step=1e-6) < 1e-6


def test_reshape_structure_layout():
    x = geo.reshape_structure(np.array([1.0, 2, 3, 4, 5, 6]))
    assert np.array_equal(x, np.array([[1.0, 4], [2, 5], [3, 6]]))


def test_reshape_structure_zero():
    assert np.array_equal(geo.reshape_structure(np.zeros(9)), np.zeros((3, 3)))


def test_reshape_roundtrip_exact():
    rng = np.random.default_rng(2)
    s = rng.standard_normal(3 * 7)
    assert np.array_equal(geo.flatten_structure(geo.reshape_structure(s)), s)


def test_reshape_rejects_bad_length():
    with pytest.raises(ValueError, match="divisible by 3"):
        geo.reshape_structure(np.zeros(7))


def test_project_identity_drops_depth():
    y = geo.orthographic_project(np.eye(3), np.array([[1.0], [2], [3]]))
    assert np.array_equal(y, [[1.0], [2.0]])


def test_project_pi_about_x():
    rx = np.array([[1.0, 0, 0], [0, -1, 0], [0, 0, -1]])
    y = geo.orthographic_project(rx, np.array([[1.0], [2], [3]]))
    assert np.allclose(y, [[1.0], [-2.0]], atol=1e-15)


def test_project_zero_structure():
    r = geo.random_rotation(np.random.default_rng(0))
    assert np.array_equal(geo.orthographic_project(r, np.zeros((3, 4))), np.zeros((2, 4)))


def test_depth_flip_definition():
    x = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(geo.depth_flip(x), [[1.0], [2.0], [-3.0]])


def test_depth_flip_involution_and_flat():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 5))
    assert np.array_equal(geo.depth_flip(geo.depth_flip(x)), x)
    flat = x.copy()
    flat[2] = 0.0
    assert np.array_equal(geo.depth_flip(flat), flat)


def test_flip_ambiguity_preserves_projection():
    # Projection of the depth-flipped camera-frame shape equals the original
    # projection: the ambiguity behind best-of-two MPJPE scoring.
    rng = np.random.default_rng(9)
    for _ in range(20):
        r = geo.random_rotation(rng)
        x = rng.standard_normal((3, 6))
        cam = r @ x
        y1 = cam[0:2, :]
        y2 = geo.depth_flip(cam)[0:2, :]
        assert np.max(np.abs(y1 - y2)) < 1e-9


def test_random_rotation_uniform_validity():
    rng = np.random.default_rng(3)
    for _ in range(200):
        r = geo.random_rotation(rng)
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12
