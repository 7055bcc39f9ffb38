"""Rank-2 Cartesian tensor algebra on stacked 3x3 matrices.

Every function accepts arrays whose trailing two axes are the matrix axes,
so a per-atom per-channel feature block of shape (n_atoms, n_channels, 3, 3)
is handled in a single call. All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EYE3",
    "IrrepDecomposition",
    "NonFiniteInputError",
    "decompose",
    "frobenius_norm_sq",
    "matmul",
    "normalize_feature",
    "random_orthogonal",
    "skew_from_vector",
    "traceless_outer",
]

EYE3 = np.eye(3)


class NonFiniteInputError(ValueError):
    """Raised when a tensor operation receives NaN or Inf entries."""


def _as_mat3(x, op: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != (3, 3):
        raise ValueError(f"{op}: expected trailing (3, 3) axes, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError(f"{op}: non-finite entries in input")
    return x


@dataclass(frozen=True)
class IrrepDecomposition:
    """Unique split of a rank-2 tensor into trace, antisymmetric and
    symmetric-traceless components. ``scalar_part`` is a multiple of the
    identity, ``vector_part`` is skew-symmetric, ``traceless_part`` is
    symmetric with zero trace."""

    scalar_part: np.ndarray
    vector_part: np.ndarray
    traceless_part: np.ndarray

    def recompose(self) -> np.ndarray:
        return self.scalar_part + self.vector_part + self.traceless_part


def decompose(x) -> IrrepDecomposition:
    """Project onto the three O(3)-irreducible components of a 3x3 tensor."""
    x = _as_mat3(x, "decompose")
    xt = np.swapaxes(x, -1, -2)
    trace = np.trace(x, axis1=-2, axis2=-1)[..., None, None]
    scalar = (trace / 3.0) * EYE3
    vector = 0.5 * (x - xt)
    traceless = 0.5 * (x + xt) - scalar
    return IrrepDecomposition(scalar, vector, traceless)


def frobenius_norm_sq(x) -> np.ndarray:
    """Sum of squared entries over the trailing matrix axes."""
    x = _as_mat3(x, "frobenius_norm_sq")
    return np.sum(x * x, axis=(-2, -1))


def matmul(a, b) -> np.ndarray:
    """Matrix product over the trailing axes, batched over the leading ones."""
    a = _as_mat3(a, "matmul")
    b = _as_mat3(b, "matmul")
    return a @ b


def normalize_feature(x) -> np.ndarray:
    """Divide each 3x3 block by (its Frobenius norm + 1).

    The denominator is always >= 1, so every output block has norm < 1.
    """
    x = _as_mat3(x, "normalize_feature")
    norm = np.sqrt(frobenius_norm_sq(x))[..., None, None]
    return x / (norm + 1.0)


def skew_from_vector(v) -> np.ndarray:
    """Cross-product matrix of a 3-vector (trailing axis), K(v) w = v x w.

    This is the parity-odd seed: under improper transforms it picks up a
    det(R) factor on top of the R . Rt conjugation.
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def traceless_outer(v) -> np.ndarray:
    """Symmetric traceless seed v vT - |v|^2/3 * Id for a trailing 3-vector."""
    v = np.asarray(v, dtype=np.float64)
    outer = v[..., :, None] * v[..., None, :]
    tr = np.sum(v * v, axis=-1)[..., None, None]
    return outer - (tr / 3.0) * EYE3


def random_orthogonal(seed: int, allow_reflection: bool = True) -> np.ndarray:
    """Deterministic random orthogonal 3x3 matrix.

    Drawn via QR of a Gaussian matrix with the sign convention that makes the
    factorization unique. With ``allow_reflection`` both determinant signs
    occur across seeds; otherwise the result is a proper rotation.
    """
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diagonal(r))
    flip = allow_reflection and rng.random() < 0.5
    det = np.linalg.det(q)
    if not allow_reflection and det < 0:
        q[:, 0] = -q[:, 0]
    elif flip:
        q[:, 0] = -q[:, 0]
    return q
