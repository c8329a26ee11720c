"""Loss-curvature probes: Hessian-vector products and the top eigenvalue.

Hv is computed by central finite differences of the analytic gradient,
(g(theta + eps*v) - g(theta - eps*v)) / (2*eps), which is accurate enough in
float64 for ratio-based curvature comparisons without a second-order engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import DTYPE
from .model import NumericsError, backward


def hessian_vector_product(model, batch, labels, v):
    """Hv for the mean cross-entropy Hessian; restores the model afterward."""
    theta = model.get_params()
    v = np.asarray(v, dtype=DTYPE)
    if v.shape != theta.shape:
        raise ValueError(f"vector shape {v.shape} != parameter count {theta.shape}")
    eps = 1e-3 * (1.0 + np.abs(theta).max())
    try:
        model.set_params(theta + eps * v)
        g_plus = backward(model, batch, labels).flat()
        model.set_params(theta - eps * v)
        g_minus = backward(model, batch, labels).flat()
    finally:
        model.set_params(theta)
    hv = (g_plus - g_minus) / (2.0 * eps)
    if not np.all(np.isfinite(hv)):
        bad = int(np.argmax(~np.isfinite(hv)))
        raise NumericsError(f"non-finite Hessian-vector product near flat index {bad}")
    return hv


@dataclass
class EigenEstimate:
    value: float
    converged: bool
    iterations: int


def top_eigenvalue(model, batch, labels, iters=30, seed=0):
    """Power iteration with a Rayleigh-quotient readout; |lambda_max| estimate.

    Deterministic for a fixed seed. If the relative change between the last
    two estimates exceeds 1e-2 the result is flagged as low confidence
    (converged=False) but still returned.
    """
    if iters < 10:
        raise ValueError("power iteration needs at least 10 iterations")
    rng = np.random.default_rng(seed)
    n = model.get_params().size
    v = rng.standard_normal(n).astype(DTYPE)
    v /= np.linalg.norm(v)
    lam = 0.0
    rel_change = np.inf
    prev = None
    for it in range(iters):
        hv = hessian_vector_product(model, batch, labels, v)
        lam = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm < 1e-12:
            return EigenEstimate(value=0.0, converged=True, iterations=it + 1)
        v = hv / norm
        if prev is not None:
            rel_change = abs(lam - prev) / max(abs(lam), 1e-12)
            if rel_change <= 1e-5:
                return EigenEstimate(value=abs(lam), converged=True, iterations=it + 1)
        prev = lam
    return EigenEstimate(value=abs(lam), converged=rel_change <= 1e-2, iterations=iters)
