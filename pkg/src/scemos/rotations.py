"""6D rotation representation and conversions.

Rotations are parameterized by the first two columns of the rotation matrix;
the matrix is recovered by Gram-Schmidt orthonormalization and a cross
product for the third column.
"""

import numpy as np

from .errors import DegenerateRotation, NotARotation

_EPS_NORM = 1e-8


def rot6d_to_matrix(r6):
    """Convert a 6-vector (two stacked 3-vectors) to a 3x3 rotation matrix."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape != (6,):
        raise DegenerateRotation(f"expected 6 floats, got shape {r6.shape}")
    a, b = r6[:3], r6[3:]
    na = np.linalg.norm(a)
    if na < _EPS_NORM:
        raise DegenerateRotation("first basis vector has near-zero norm")
    x = a / na
    b_orth = b - np.dot(x, b) * x
    nb = np.linalg.norm(b_orth)
    if nb < _EPS_NORM:
        raise DegenerateRotation("basis vectors are parallel beyond tolerance")
    y = b_orth / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def matrix_to_rot6d(R):
    """Return the first two columns of an orthonormal rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got shape {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-5):
        raise NotARotation("matrix is not orthonormal within 1e-5")
    if np.linalg.det(R) < 0:
        raise NotARotation("matrix has negative determinant")
    return np.concatenate([R[:, 0], R[:, 1]])


def rot6d_to_matrix_batch(r6):
    """Vectorized rot6d -> matrix for an (..., 6) array.

    Degenerate rows raise, matching the scalar path.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a, b = r6[..., :3], r6[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < _EPS_NORM):
        raise DegenerateRotation("first basis vector has near-zero norm")
    x = a / na
    b_orth = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b_orth, axis=-1, keepdims=True)
    if np.any(nb < _EPS_NORM):
        raise DegenerateRotation("basis vectors are parallel beyond tolerance")
    y = b_orth / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d_batch(R):
    """Vectorized matrix -> rot6d for an (..., 3, 3) array (no validity check)."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot_z(yaw):
    """Rotation about the world up axis (+Z) by ``yaw`` radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R):
    """Heading angle of a rotation: where the body-forward axis (+Y) points.

    Measured about +Z so that rot_z(yaw) @ [0,1,0] equals the horizontal
    projection of R @ [0,1,0].
    """
    fwd = R @ np.array([0.0, 1.0, 0.0])
    return float(np.arctan2(-fwd[0], fwd[1]))
