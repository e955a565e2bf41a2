"""Reverse-time Euler ODE and Euler-Maruyama SDE samplers.

Integration runs on a uniform grid from ``t = 1`` down to ``t_min``. A
velocity function has the signature ``v(x, t) -> ndarray`` with ``t`` a
Python float shared by the whole batch.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from .config import ModelConfig, SampleConfig
from .interpolant import LINEAR, score_from_velocity
from .model import Params, forward
from .tensor import Rng, Tensor

Velocity = Callable[[np.ndarray, float], np.ndarray]


def cfg_velocity(v_cond, v_uncond, g: float):
    """Classifier-free guidance; ``g = 1`` returns ``v_cond``, ``g = 0`` returns ``v_uncond``."""
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ValueError("conditional and unconditional velocities differ in shape")
    if g == 1.0:
        return np.asarray(v_cond)
    return np.asarray(v_uncond) + g * (np.asarray(v_cond) - np.asarray(v_uncond))


def ode_step(x: np.ndarray, t: float, h: float, velocity: Velocity) -> np.ndarray:
    if h <= 0 or t - h < -1e-12:
        raise ValueError(f"invalid step: t={t}, h={h}")
    return x - h * velocity(x, t)


def em_sde_step(x: np.ndarray, t: float, h: float, velocity: Velocity,
                noise: np.ndarray | None, t_min: float = 1e-3,
                diffusion: Callable[[float], float] | None = None) -> np.ndarray:
    """One reverse-time Euler-Maruyama step from ``t`` to ``t - h``.

    ``noise`` is a standard normal draw shaped like ``x``; pass ``None`` to
    take a deterministic step (used for the final step).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if t - h < t_min - 1e-12:
        raise ValueError(f"step would go below t_min ({t} - {h} < {t_min})")
    w = LINEAR.diffusion(t) if diffusion is None else diffusion(t)
    v = velocity(x, t)
    if w == 0.0:
        return x - h * v
    drift = v - 0.5 * w * score_from_velocity(x, v, t)
    out = x - h * drift
    if noise is not None:
        out = out + np.sqrt(w * h) * noise
    return out


def time_grid(num_steps: int, t_min: float) -> np.ndarray:
    return np.linspace(1.0, t_min, num_steps + 1)


def chain_noise(n: int, shape: tuple[int, ...], num_steps: int, seed: int):
    """Initial states and per-step noise, each chain from its own stream."""
    x0 = np.empty((n,) + shape)
    z = np.empty((num_steps, n) + shape)
    root = Rng(seed)
    for i in range(n):
        rng = root.spawn(i)
        x0[i] = rng.normal(shape)
        z[:, i] = rng.normal((num_steps,) + shape)
    return x0, z


def integrate(velocity: Velocity, shape: tuple[int, ...], cfg: SampleConfig,
              diffusion: Callable[[float], float] | None = None) -> np.ndarray:
    """Draw ``cfg.num_samples`` samples of per-sample ``shape``."""
    n = cfg.num_samples
    if n == 0:
        return np.zeros((0,) + tuple(shape))
    x, z = chain_noise(n, tuple(shape), cfg.num_steps, cfg.seed)
    ts = time_grid(cfg.num_steps, cfg.t_min)
    for k in range(cfg.num_steps):
        t, h = float(ts[k]), float(ts[k] - ts[k + 1])
        if cfg.mode == "ode":
            x = ode_step(x, t, h, velocity)
        else:
            last = k == cfg.num_steps - 1
            x = em_sde_step(x, t, h, velocity, None if last else z[k], cfg.t_min, diffusion)
    return x


# ------------------------------------------------------------ model bridge


def model_velocity(params: Params, mcfg: ModelConfig, labels: np.ndarray | None,
                   cfg_scale: float = 1.0, counter: list[int] | None = None) -> Velocity:
    """Velocity closure for a trained model.

    ``labels=None`` samples unconditionally (null class). Guidance with
    ``cfg_scale != 1`` doubles the forward passes; ``cfg_scale == 1``
    runs only the conditional branch.
    """
    frozen = {k: Tensor(p.data) for k, p in params.items()}

    def run(x, t, y):
        if counter is not None:
            counter[0] += 1
        out, _ = forward(frozen, mcfg, x, t, y)
        return out.data

    def v(x: np.ndarray, t: float) -> np.ndarray:
        n = x.shape[0]
        null = np.full(n, mcfg.null_class)
        if labels is None:
            return run(x, t, null)
        v_cond = run(x, t, labels)
        if cfg_scale == 1.0:
            return v_cond
        return cfg_velocity(v_cond, run(x, t, null), cfg_scale)

    return v


def sample_labels(mcfg: ModelConfig, cfg: SampleConfig) -> np.ndarray | None:
    if cfg.class_id is None:
        return None
    if not 0 <= cfg.class_id < mcfg.num_classes:
        raise ValueError(f"class id {cfg.class_id} outside [0, {mcfg.num_classes})")
    return np.full(cfg.num_samples, cfg.class_id)


def sample(params: Params, mcfg: ModelConfig, cfg: SampleConfig,
           labels: np.ndarray | None = None, counter: list[int] | None = None) -> np.ndarray:
    """Samples in data shape, ``[num_samples, *data_shape]``.

    ``labels`` overrides ``cfg.class_id`` with one class per sample.
    """
    if labels is None:
        labels = sample_labels(mcfg, cfg)
    elif len(labels) != cfg.num_samples:
        raise ValueError("need one label per sample")
    if mcfg.data_mode == "points":
        shape = (mcfg.input_dim,)
    else:
        shape = (mcfg.in_channels, mcfg.image_size, mcfg.image_size)
    return integrate(model_velocity(params, mcfg, labels, cfg.cfg_scale, counter), shape, cfg)


def write_samples(path: str | Path, samples: np.ndarray, labels: np.ndarray | None,
                  null_class: int, meta: dict | None = None) -> None:
    """CSV ``x,y,class`` for 2-D points, otherwise a container with ``samples``."""
    path = Path(path)
    n = samples.shape[0]
    cls = np.full(n, null_class) if labels is None else np.asarray(labels)
    if samples.ndim == 2 and samples.shape[1] == 2:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "class"])
            for (a, b), c in zip(samples, cls):
                writer.writerow([repr(float(a)), repr(float(b)), int(c)])
        return
    container.write(path, {"samples": samples, "labels": cls.astype(float)}, meta or {})
