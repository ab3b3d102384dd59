"""Regenerate the canonical fixture law: binary W, Z = m1, M_k = m2, L = m3, binary Y."""

from __future__ import annotations

import itertools
import sys

import numpy as np
from scipy.special import expit

from targetmed.oracle import CANONICAL_LAW, DiscreteLaw


def _table(shape, fn):
    out = np.zeros(shape)
    for idx in itertools.product(*(range(s) for s in shape)):
        out[idx] = round(float(np.clip(expit(fn(*idx)), 0.15, 0.85)), 2)
    return out


def build() -> DiscreteLaw:
    w_values = np.array([[0.0], [1.0]])
    p_w = np.array([0.45, 0.55])
    p_a1 = np.array([0.4, 0.6])
    w = w_values[:, 0]
    m1 = _table((2, 2), lambda i, a: -0.3 + 0.8 * a + 0.4 * w[i])
    m2 = _table((2, 2, 2), lambda i, a, z: -0.5 + 0.9 * a + 0.6 * z + 0.3 * w[i])
    m3 = _table((2, 2, 2, 2), lambda i, a, z, k: -0.3 + 0.5 * a + 0.3 * z + 0.8 * k
                - 0.4 * w[i] * k)
    y = _table((2, 2, 2, 2, 2), lambda i, a, z, k, l: -0.9 + 0.6 * a + 0.4 * z + 0.9 * k
               + 0.5 * l + 0.3 * w[i] - 0.4 * a * k)
    return DiscreteLaw(w_values, p_w, p_a1, (m1, m2, m3), y, ("w1",), ("m1", "m2", "m3"))


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else CANONICAL_LAW
    build().save(path)
    print(f"wrote {path}")
