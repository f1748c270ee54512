"""Input validation helpers.

Small checks shared by the geometric types and the estimator front-end, in the
spirit of sklearn's ``check_array``: coerce to float64 ndarrays, verify shape
and finiteness, raise ``ValueError`` with the argument name on failure.
"""

import numpy as np

ROTATION_TOL = 1e-9


def as_vector3(x, name="x"):
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name}: expected a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: contains non-finite values")
    return v


def as_matrix3(x, name="x"):
    m = np.asarray(x, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"{name}: expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains non-finite values")
    return m


def as_points(x, name="points"):
    """Coerce to an (N, 3) float64 array; an empty input becomes (0, 3)."""
    p = np.asarray(x, dtype=np.float64)
    if p.size == 0:
        return p.reshape(0, 3)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name}: expected an (N, 3) array, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name}: contains non-finite values")
    return p


def check_rotation(r, name="rotation", tol=ROTATION_TOL):
    """Verify r is a proper rotation: orthonormal within tol, det = +1 within tol."""
    r = as_matrix3(r, name)
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"{name}: not orthonormal (max deviation {err:.3e})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > tol:
        raise ValueError(f"{name}: determinant {det:.12f} != +1 (improper rotation)")
    return r


def check_covariance(c, name="covariance", sym_tol=1e-12, min_eig=0.0):
    """Verify c is symmetric within sym_tol with eigenvalues >= min_eig."""
    c = as_matrix3(c, name)
    if np.abs(c - c.T).max() > sym_tol:
        raise ValueError(f"{name}: not symmetric within {sym_tol}")
    if min_eig > 0.0:
        smallest = np.linalg.eigvalsh(c)[0]
        if smallest < min_eig * (1.0 - 1e-9):
            raise ValueError(f"{name}: smallest eigenvalue {smallest:.3e} < {min_eig:.3e}")
    return c


def check_probability(p, name="p"):
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name}: probability {p} outside [0, 1]")
    return p


def check_nonnegative(x, name="x"):
    x = float(x)
    if not np.isfinite(x) or x < 0.0:
        raise ValueError(f"{name}: expected a non-negative finite value, got {x}")
    return x


def check_positive(x, name="x"):
    x = float(x)
    if not np.isfinite(x) or x <= 0.0:
        raise ValueError(f"{name}: expected a positive finite value, got {x}")
    return x
