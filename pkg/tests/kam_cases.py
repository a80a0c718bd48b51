"""Shared constructions for the KAM tests."""

import numpy as np

from cocycle_lab import FourierMap, matrix_log_map, norm_h

RHO = 0.3
ENERGY = 2 * np.cos(2 * np.pi * RHO)


def dual_amo(lambda_inv, E=ENERGY, radius=8):
    """``A(x) = [[E - 2 li cos 2 pi x, -1], [1, 0]]`` written as ``A0 e^{f0(x)}``."""
    A0 = np.array([[E, -1], [1, 0]], dtype=complex)
    c = np.zeros((3, 2, 2), dtype=complex)
    c[1] = A0
    c[0, 0, 0] = c[2, 0, 0] = -lambda_inv
    f0 = matrix_log_map(FourierMap(c).left(np.linalg.inv(A0)), radius=radius)
    return A0, f0


def dual_amo_with_norm(target, h=0.2):
    _, f1 = dual_amo(1.0)
    li = target / norm_h(f1, h)
    for _ in range(3):
        _, f = dual_amo(li)
        li *= target / norm_h(f, h)
    return li, *dual_amo(li)
