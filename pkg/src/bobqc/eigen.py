"""Closed-form eigenvalues of real symmetric 3x3 matrices."""
from __future__ import annotations

import math

import numpy as np


def eigvalsh3(a) -> tuple[float, float, float]:
    """Eigenvalues of a symmetric 3x3 matrix in ascending order.

    Trigonometric solution of the characteristic cubic (Smith 1961).  Only
    the upper triangle is read.  Deterministic: no iteration, no LAPACK.
    """
    a = np.asarray(a, dtype=np.float64)
    a00, a01, a02 = float(a[0, 0]), float(a[0, 1]), float(a[0, 2])
    a11, a12 = float(a[1, 1]), float(a[1, 2])
    a22 = float(a[2, 2])

    p1 = a01 * a01 + a02 * a02 + a12 * a12
    if p1 == 0.0:
        return tuple(sorted((a00, a11, a22)))

    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    # det(B) / 2 with B = (A - qI) / p
    det = (
        b00 * (b11 * b22 - a12 * a12)
        - a01 * (a01 * b22 - a12 * a02)
        + a02 * (a01 * a12 - b11 * a02)
    )
    r = det / (2.0 * p * p * p)
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0

    hi = q + 2.0 * p * math.cos(phi)
    lo = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    mid = 3.0 * q - hi - lo
    return tuple(sorted((lo, mid, hi)))
