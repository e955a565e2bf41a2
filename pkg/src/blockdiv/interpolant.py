"""Linear stochastic interpolant between data and Gaussian noise.

``x_t = alpha(t) * x_star + sigma(t) * eps`` with ``alpha = 1 - t`` and
``sigma = t``. Functions accept numpy arrays or ``Tensor`` values; the
arithmetic is the same either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LinearSchedule:
    def alpha(self, t):
        return 1.0 - t

    def sigma(self, t):
        return t

    def alpha_dot(self, t):
        return -1.0 + 0.0 * t

    def sigma_dot(self, t):
        return 1.0 + 0.0 * t

    def diffusion(self, t):
        """SDE diffusion coefficient w_t (equal to sigma_t)."""
        return self.sigma(t)


LINEAR = LinearSchedule()


def _check_t(t, lo_open: bool = False) -> None:
    arr = np.asarray(t, dtype=float)
    if lo_open:
        if (arr <= 0).any() or (arr > 1).any():
            raise ValueError(f"t must lie in (0, 1], got {t}")
    elif (arr < 0).any() or (arr > 1).any():
        raise ValueError(f"t must lie in [0, 1], got {t}")


def _per_sample(t, like):
    """Reshape a per-sample time vector so it broadcasts against ``like``."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (np.ndim(like) - t.ndim))


def interpolate(x_star, eps, t, schedule: LinearSchedule = LINEAR):
    """Noisy sample at time ``t``; ``t`` may be a scalar or one value per row."""
    if np.shape(x_star) != np.shape(eps):
        raise ValueError("x_star and eps must have equal shapes")
    _check_t(t)
    tt = _per_sample(t, x_star)
    return schedule.alpha(tt) * np.asarray(x_star) + schedule.sigma(tt) * np.asarray(eps)


def velocity_target(x_star, eps, t=None, schedule: LinearSchedule = LINEAR):
    """Regression target alpha_dot * x_star + sigma_dot * eps (t-independent here)."""
    if np.shape(x_star) != np.shape(eps):
        raise ValueError("x_star and eps must have equal shapes")
    tt = _per_sample(0.0 if t is None else t, x_star)
    return schedule.alpha_dot(tt) * np.asarray(x_star) + schedule.sigma_dot(tt) * np.asarray(eps)


def score_from_velocity(x, v, t, schedule: LinearSchedule = LINEAR):
    """Score of the marginal at time ``t`` recovered from the velocity field.

    ``s = -(alpha * v - alpha_dot * x) / (sigma * (alpha * sigma_dot - alpha_dot * sigma))``,
    i.e. ``-E[eps | x_t = x] / sigma``. Undefined at ``t = 0``.
    """
    if np.shape(x) != np.shape(v):
        raise ValueError("x and v must have equal shapes")
    _check_t(t, lo_open=True)
    tt = _per_sample(t, x)
    a, s = schedule.alpha(tt), schedule.sigma(tt)
    a_dot, s_dot = schedule.alpha_dot(tt), schedule.sigma_dot(tt)
    denom = a * s_dot - a_dot * s
    return -(a * np.asarray(v) - a_dot * np.asarray(x)) / (s * denom)


def gaussian_velocity(x, t):
    """Exact velocity field when the data law is N(0, 1) per coordinate."""
    c = (1.0 - t) ** 2 + t ** 2
    return (2.0 * t - 1.0) * np.asarray(x) / c
