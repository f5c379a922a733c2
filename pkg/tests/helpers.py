"""Shared test oracles."""
from __future__ import annotations

import numpy as np


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


def numeric_grad(f, arr, h=1e-6, index=None):
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def fd_check(f, arr, analytic, h=1e-6) -> float:
    num = numeric_grad(f, arr, h)
    return rel_error(np.asarray(analytic).reshape(-1), num)


# acceptance results, criterion number -> (status, title, detail); printed by conftest
ACCEPTANCE: dict = {}
