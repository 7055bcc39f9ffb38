import numpy as np
import pytest

from tensorpot import tensors


def test_decompose_identity_is_pure_trace():
    dec = tensors.decompose(np.eye(3))
    assert np.array_equal(dec.scalar_part, np.eye(3))
    assert np.array_equal(dec.vector_part, np.zeros((3, 3)))
    assert np.array_equal(dec.traceless_part, np.zeros((3, 3)))


def test_decompose_skew_is_pure_vector():
    x = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    dec = tensors.decompose(x)
    assert np.array_equal(dec.scalar_part, np.zeros((3, 3)))
    assert np.array_equal(dec.vector_part, x)
    assert np.array_equal(dec.traceless_part, np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_decompose_random_invariants(seed):
    x = np.random.default_rng(seed).normal(size=(3, 3))
    dec = tensors.decompose(x)
    # scalar part is (tr/3) Id exactly
    assert np.array_equal(dec.scalar_part, (np.trace(x) / 3.0) * np.eye(3))
    # antisymmetry / symmetry / tracelessness
    assert np.abs(dec.vector_part + dec.vector_part.T).max() < 1e-15
    assert np.abs(dec.traceless_part - dec.traceless_part.T).max() < 1e-15
    assert abs(np.trace(dec.traceless_part)) < 1e-12
    # reconstruction oracle: I + A + S == X
    assert np.abs(dec.recompose() - x).max() < 1e-12


def test_decompose_is_projection_on_pure_inputs():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 3))
    pure = tensors.decompose(x)
    for part, slot in [
        (pure.scalar_part, "scalar_part"),
        (pure.vector_part, "vector_part"),
        (pure.traceless_part, "traceless_part"),
    ]:
        again = tensors.decompose(part)
        assert np.abs(getattr(again, slot) - part).max() < 1e-14
        others = [p for name, p in (("scalar_part", again.scalar_part),
                                    ("vector_part", again.vector_part),
                                    ("traceless_part", again.traceless_part))
                  if name != slot]
        for other in others:
            assert np.abs(other).max() < 1e-14


@pytest.mark.parametrize("seed", range(10))
def test_decompose_equivariance_under_o3(seed):
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(2, 4, 3, 3))
    r = tensors.random_orthogonal(seed, allow_reflection=True)
    rot = r @ x @ r.T
    a = tensors.decompose(rot)
    b = tensors.decompose(x)
    assert np.abs(a.scalar_part - r @ b.scalar_part @ r.T).max() < 1e-12
    assert np.abs(a.vector_part - r @ b.vector_part @ r.T).max() < 1e-12
    assert np.abs(a.traceless_part - r @ b.traceless_part @ r.T).max() < 1e-12


def test_decompose_rejects_nonfinite():
    bad = np.full((3, 3), np.nan)
    with pytest.raises(tensors.NonFiniteInputError):
        tensors.decompose(bad)


def test_frobenius_norm_sq_values():
    assert tensors.frobenius_norm_sq(np.eye(3)) == 3.0
    assert tensors.frobenius_norm_sq(np.zeros((3, 3))) == 0.0
    assert tensors.frobenius_norm_sq(np.ones((3, 3))) == 9.0


@pytest.mark.parametrize("seed", range(8))
def test_frobenius_norm_invariant_under_o3(seed):
    x = np.random.default_rng(seed).normal(size=(3, 3))
    r = tensors.random_orthogonal(seed + 50, allow_reflection=True)
    a = tensors.frobenius_norm_sq(r @ x @ r.T)
    b = tensors.frobenius_norm_sq(x)
    assert abs(a - b) / b < 1e-12


def test_matmul_trivials():
    b = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(tensors.matmul(np.eye(3), b), b)
    assert np.array_equal(tensors.matmul(b, np.zeros((3, 3))), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(6))
def test_matmul_rotation_orthogonality(seed):
    r = tensors.random_orthogonal(seed, allow_reflection=False)
    assert np.abs(tensors.matmul(r, r.T) - np.eye(3)).max() < 1e-14


def test_normalize_feature_zero_and_identity():
    assert np.array_equal(tensors.normalize_feature(np.zeros((3, 3))), np.zeros((3, 3)))
    out = tensors.normalize_feature(np.eye(3))
    assert np.abs(out - np.eye(3) / (np.sqrt(3.0) + 1.0)).max() == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_normalize_feature_norm_below_one(seed):
    x = np.random.default_rng(seed).normal(size=(5, 3, 3)) * 10.0 ** (seed - 4)
    out = tensors.normalize_feature(x)
    norms = np.sqrt(tensors.frobenius_norm_sq(out))
    assert np.all(norms < 1.0)


def test_random_orthogonal_is_orthogonal_and_deterministic():
    for seed in range(30):
        r = tensors.random_orthogonal(seed)
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-13
        assert abs(abs(np.linalg.det(r)) - 1.0) < 1e-13
    assert np.array_equal(tensors.random_orthogonal(0), tensors.random_orthogonal(0))


def test_random_orthogonal_reflection_flags():
    dets = [np.linalg.det(tensors.random_orthogonal(s)) for s in range(40)]
    assert any(d < 0 for d in dets) and any(d > 0 for d in dets)
    for s in range(10):
        r = tensors.random_orthogonal(s, allow_reflection=False)
        assert abs(np.linalg.det(r) - 1.0) < 1e-13


def test_skew_from_vector_matches_cross_product():
    rng = np.random.default_rng(7)
    v = rng.normal(size=3)
    w = rng.normal(size=3)
    assert np.abs(tensors.skew_from_vector(v) @ w - np.cross(v, w)).max() < 1e-15


def test_traceless_outer_is_symmetric_traceless():
    v = np.random.default_rng(9).normal(size=(4, 3))
    s = tensors.traceless_outer(v)
    assert np.abs(s - np.swapaxes(s, -1, -2)).max() == 0.0
    assert np.abs(np.trace(s, axis1=-2, axis2=-1)).max() < 1e-15
