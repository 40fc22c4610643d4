"""Cold-load-pickup demand: sampled delayed-exponential curve and per-step demand."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netmodel import ClpuParams


@dataclass(frozen=True)
class ClpuCurve:
    samples: np.ndarray  # D(1..N), index 0 holds D(1)
    deltas: np.ndarray   # dD(1..N), dD(1) = 0

    @property
    def n(self) -> int:
        return len(self.samples)


def scale_factor(params: ClpuParams, k: int) -> float:
    """D(k) for sample ``k >= 1`` (1 = pickup instant)."""
    if k <= params.delay_steps:
        return params.s_u
    return params.s_d + (params.s_u - params.s_d) * math.exp(-params.alpha_decay * (k - params.delay_steps))


def sample_curve(params: ClpuParams) -> ClpuCurve:
    """Sample the curve at ``params.n_samples`` equally spaced points and difference it."""
    d = np.array([scale_factor(params, k) for k in range(1, params.n_samples + 1)])
    deltas = np.zeros_like(d)
    deltas[1:] = np.diff(d)
    return ClpuCurve(d, deltas)


def demand_factors(curve: ClpuCurve, s_u: float, history: Sequence[int]) -> np.ndarray:
    """Per-step demand multiplier from a 0/1 pickup history.

    ``history[t]`` is the pickup status at step ``t`` (0-based).  The factor
    at step t is ``s_u*s[t] + sum_k dD(k) * s[t-k+1]`` which, for a single
    0 -> 1 transition, walks along the sampled curve and then stays at D(N).
    """
    s = np.asarray(history, dtype=int)
    if np.any((s != 0) & (s != 1)):
        raise ValueError("pickup history must be 0/1")
    if np.any(np.diff(s) < 0):
        raise ValueError("pickup history must be non-decreasing (a picked-up load is never dropped)")
    out = s_u * s.astype(float)
    for k in range(2, curve.n + 1):
        if k - 1 >= len(s):
            break
        out[k - 1:] += curve.deltas[k - 1] * s[: len(s) - k + 1]
    return out


def load_at_step(curve: ClpuCurve, s_u: float, history: Sequence[int], p_load, q_load):
    """Per-step (P, Q) demand arrays for one load, shape (T, 3)."""
    f = demand_factors(curve, s_u, history)
    return np.outer(f, np.asarray(p_load, float)), np.outer(f, np.asarray(q_load, float))


def clpu_coefficients(curve: ClpuCurve, s_u: float, t: int) -> list[tuple[int, float]]:
    """Affine coefficients of the step-``t`` factor in the pickup binaries.

    Returns ``[(tau, coef), ...]`` such that factor(t) = sum coef * s[tau]; steps
    are 1-based and only ``tau >= 1`` appear.
    """
    coefs = [(t, s_u)]
    for k in range(2, curve.n + 1):
        tau = t - k + 1
        if tau < 1:
            break
        coefs.append((tau, float(curve.deltas[k - 1])))
    return coefs
