"""Finite-difference verification of every loss component's gradient.

For each component the analytic gradient over all model parameters is
probed along random unit directions and at sampled single coordinates,
and compared with central differences. The reported error for a
component is ``max |analytic - numeric| / max(|analytic|, |numeric|)``
taken over all probes, i.e. relative to the gradient's own scale.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .interpolant import interpolate
from .losses import alignment_loss, disp_loss, flow_matching_loss, mi_loss, orth_loss
from .model import Params, forward, perturb_params, to_tokens
from .tensor import Rng, Tensor
from .trainer import Batch, compute_loss, draw_batch, init_state, run_alignment, run_pairs

COMPONENTS = ("flow_matching", "orth", "mi", "disp", "align", "total")
STEP = 1e-5
TOLERANCE = 1e-5

TINY = {
    "model": {"num_blocks": 4, "hidden_dim": 16, "num_heads": 2, "patch_size": 2,
              "time_freq_dim": 16, "use_long_residual": True},
    "data": {"mode": "grid", "image_size": 4, "channels": 1, "num_classes": 4},
    "train": {"batch_size": 2, "alignment": True, "align_depth": 1, "align_dim": 8,
              "label_dropout_prob": 0.0},
    "diversity": {"enabled": True},
}


def tiny_config() -> RunConfig:
    return RunConfig.from_dict(TINY)


def check_size(config: RunConfig) -> None:
    m = config.model
    if m.num_blocks > 4 or m.hidden_dim > 16:
        raise ConfigError(f"gradcheck needs a tiny model (L <= 4, D <= 16), got "
                          f"L={m.num_blocks}, D={m.hidden_dim}")


def component_losses(config: RunConfig, batch: Batch) -> dict[str, Callable[[Params], Tensor]]:
    """Scalar-valued loss closures over a fixed batch, one per component."""
    mcfg = config.model
    pairs = run_pairs(config)
    alignment = run_alignment(config)
    x_t = interpolate(batch.x, batch.eps, batch.t)
    eps = config.diversity.eps

    def feats(params):
        return forward(params, mcfg, x_t, batch.t, batch.y)

    def fm(params):
        return flow_matching_loss(feats(params)[0], batch.x, batch.eps, batch.t)

    def orth(params):
        return orth_loss(feats(params)[1], pairs, eps)

    def mi(params):
        return mi_loss(feats(params)[1], pairs, eps)

    def disp(params):
        return disp_loss(feats(params)[1], pairs, eps)

    out = {"flow_matching": fm, "orth": orth, "mi": mi, "disp": disp}

    if alignment is not None:
        y_star = alignment.encoder(to_tokens(batch.x, mcfg))

        def align(params):
            return alignment_loss(feats(params)[1][alignment.depth], y_star, params)

        out["align"] = align

    # the adaptive weight is a constant of the objective; freeze it at the base point
    frozen: dict[str, float] = {}

    def total(params):
        if "w" not in frozen:
            _, metrics = compute_loss(params, config, batch, pairs, alignment)
            frozen["w"] = metrics["w"]
        loss, _ = compute_loss(params, config, batch, pairs, alignment, fixed_w=frozen["w"])
        return loss

    out["total"] = total
    return out


def _shift(params: Params, direction: dict[str, np.ndarray], h: float) -> Params:
    return {k: Tensor(p.data + h * direction[k]) for k, p in params.items()}


def check_component(loss_fn: Callable[[Params], Tensor], params: Params, rng: Rng,
                    directions: int = 3, coords_per_tensor: int = 1,
                    corrupt: bool = False) -> float:
    loss = loss_fn(params)
    table = T.backward(loss)
    grads = {k: np.asarray(table.get(p, np.zeros(p.shape))) for k, p in params.items()}
    if corrupt:
        grads = {k: g * 1.01 + 1e-3 for k, g in grads.items()}

    probes: list[dict[str, np.ndarray]] = []
    for _ in range(directions):
        d = {k: rng.normal(p.shape) for k, p in params.items()}
        norm = np.sqrt(sum(float((v * v).sum()) for v in d.values()))
        probes.append({k: v / norm for k, v in d.items()})
    for name, p in params.items():
        for idx in rng.integers(0, p.size, coords_per_tensor):
            d = {k: np.zeros(q.shape) for k, q in params.items()}
            d[name].flat[int(idx)] = 1.0
            probes.append(d)

    analytic, numeric = [], []
    for d in probes:
        analytic.append(sum(float((grads[k] * d[k]).sum()) for k in params))
        up = loss_fn(_shift(params, d, STEP)).item()
        down = loss_fn(_shift(params, d, -STEP)).item()
        numeric.append((up - down) / (2 * STEP))
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def run_gradcheck(config: RunConfig | None = None, draws: int = 5, seed: int = 0,
                  corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per component over ``draws`` random parameter/batch draws."""
    config = config or tiny_config()
    check_size(config)
    if corrupt is not None and corrupt not in COMPONENTS:
        raise ValueError(f"unknown component {corrupt!r}")
    worst: dict[str, float] = {}
    base = init_state(config)
    for k in range(draws):
        rng = Rng(seed).spawn(k)
        params = perturb_params(base.params, rng, std=0.2)
        batch = draw_batch(config, rng)
        for name, fn in component_losses(config, batch).items():
            err = check_component(fn, params, rng, corrupt=(name == corrupt))
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


__all__ = ["COMPONENTS", "STEP", "TOLERANCE", "tiny_config", "check_size", "run_gradcheck",
           "check_component", "component_losses"]
