"""AdamW training loop, metrics log and checkpoint persistence."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import container
from . import tensor as T
from .config import RunConfig
from .data import sample_batch
from .interpolant import interpolate
from .losses import AlignmentTarget, PairSet, TargetEncoder, init_projector, select_pairs, total_loss
from .model import Params, forward, init_params, to_tokens
from .tensor import Rng

METRIC_KEYS = ("l_fm", "l_orth", "l_mi", "l_disp", "l_div", "w", "l_align", "l_total")


class NumericError(FloatingPointError):
    """A loss or gradient went non-finite; ``component`` names the culprit."""

    def __init__(self, component: str, detail: str = ""):
        self.component = component
        super().__init__(f"non-finite value in {component}" + (f": {detail}" if detail else ""))


@dataclass
class TrainState:
    config: RunConfig
    params: Params
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng: Rng
    step: int = 0
    running: dict[str, float] = field(default_factory=lambda: {"l_fm_ema": 0.0})


# ------------------------------------------------------------------ set-up


def init_state(config: RunConfig) -> TrainState:
    seed = config.train.seed
    init_rng = Rng(seed).spawn(0)
    params = init_params(config.model, init_rng)
    if config.train.alignment:
        params.update(init_projector(config.model.hidden_dim, config.train.align_dim, init_rng))
    zeros = {k: np.zeros(p.shape) for k, p in params.items()}
    return TrainState(config=config, params=params, m=dict(zeros),
                      v={k: z.copy() for k, z in zeros.items()}, rng=Rng(seed))


def run_pairs(config: RunConfig) -> PairSet:
    L = config.model.num_blocks
    return select_pairs(L, config.diversity.subset_size(L), config.diversity.seed)


def run_alignment(config: RunConfig) -> AlignmentTarget | None:
    if not config.train.alignment:
        return None
    enc = TargetEncoder.create(config.model.token_dim, config.train.align_dim,
                               seed=config.train.seed + 7919)
    return AlignmentTarget(enc, config.train.align_depth, config.train.align_coef)


# --------------------------------------------------------------- optimizer


def adamw_step(params: Params, grads: dict[str, np.ndarray], m: dict[str, np.ndarray],
               v: dict[str, np.ndarray], step: int, lr: float = 1e-4,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One bias-corrected Adam update with decoupled weight decay.

    ``step`` is the 1-based index of this update. Returns new
    ``(params, m, v)`` dicts; the inputs are left untouched.
    """
    b1, b2 = betas
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {list(g.shape)}, "
                               f"expected {list(p.shape)}")
        if not np.isfinite(g).all():
            raise NumericError(f"gradient of {name}")
        mi = b1 * m[name] + (1.0 - b1) * g
        vi = b2 * v[name] + (1.0 - b2) * (g * g)
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        data = data - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        new_p[name] = T.parameter(data, name)
        new_m[name], new_v[name] = mi, vi
    return new_p, new_m, new_v


# ---------------------------------------------------------------- stepping


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def draw_batch(config: RunConfig, rng: Rng) -> Batch:
    tc = config.train
    x, y = sample_batch(config.data, tc.batch_size, rng)
    drop = rng.uniform(tc.batch_size) < tc.label_dropout_prob
    y = np.where(drop, config.model.null_class, y)
    t = rng.uniform(tc.batch_size)
    eps = rng.normal(x.shape)
    return Batch(x=x, y=y, t=t, eps=eps)


def compute_loss(params: Params, config: RunConfig, batch: Batch, pairs: PairSet,
                 alignment: AlignmentTarget | None = None, fixed_w: float | None = None):
    x_t = interpolate(batch.x, batch.eps, batch.t)
    try:
        v_pred, features = forward(params, config.model, x_t, batch.t, batch.y)
    except T.NonFiniteError as exc:
        raise NumericError("forward", str(exc)) from exc
    y_star = None
    if alignment is not None:
        y_star = alignment.encoder(to_tokens(batch.x, config.model))
    try:
        return total_loss(v_pred, features, batch.x, batch.eps, batch.t,
                          diversity=config.diversity, pairs=pairs, alignment=alignment,
                          y_star=y_star, params=params, fixed_w=fixed_w)
    except T.NonFiniteError as exc:
        raise NumericError("loss", str(exc)) from exc


def train_step(state: TrainState, batch: Batch | None = None,
               pairs: PairSet | None = None,
               alignment: AlignmentTarget | None = None) -> tuple[TrainState, dict[str, float]]:
    """Forward, loss, backward and one AdamW update.

    The batch (including label dropout, times and noise) is drawn from the
    state's own rng unless given. Returns a new state; the input state is
    not modified.
    """
    config = state.config
    rng = state.rng.copy()
    if batch is None:
        batch = draw_batch(config, rng)
    if pairs is None:
        pairs = run_pairs(config)
    if alignment is None:
        alignment = run_alignment(config)
    loss, metrics = compute_loss(state.params, config, batch, pairs, alignment)
    for key in METRIC_KEYS:
        if not math.isfinite(metrics[key]):
            raise NumericError(key)
    try:
        table = T.backward(loss)
    except T.NonFiniteError as exc:
        raise NumericError("backward", str(exc)) from exc
    grads = {k: table.get(p, np.zeros(p.shape)) for k, p in state.params.items()}
    tc = config.train
    params, m, v = adamw_step(state.params, grads, state.m, state.v, state.step + 1,
                              tc.learning_rate, tc.betas, tc.adam_eps, tc.weight_decay)
    ema = state.running["l_fm_ema"]
    ema = metrics["l_fm"] if state.step == 0 else 0.99 * ema + 0.01 * metrics["l_fm"]
    new = TrainState(config=config, params=params, m=m, v=v, rng=rng,
                     step=state.step + 1, running={"l_fm_ema": ema})
    return new, metrics


def iterate(state: TrainState, steps: int) -> Iterator[tuple[TrainState, dict[str, float]]]:
    pairs, alignment = run_pairs(state.config), run_alignment(state.config)
    for _ in range(steps):
        state, metrics = train_step(state, pairs=pairs, alignment=alignment)
        yield state, metrics


def train(state: TrainState, out_dir: str | Path | None = None,
          on_step: Callable[[TrainState, dict[str, float]], None] | None = None) -> TrainState:
    """Run until ``config.train.total_steps``, logging and checkpointing into ``out_dir``.

    Metrics go to ``metrics.jsonl`` (one object per step, appended); a
    checkpoint ``ckpt_{step:07d}.ddit`` is written every
    ``checkpoint_every`` steps, plus ``last.ddit`` at the end.
    """
    tc = state.config.train
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.step == 0:
            save_checkpoint(state, out / f"ckpt_{0:07d}.ddit")
        log = open(out / "metrics.jsonl", "a" if state.step else "w")
    try:
        remaining = max(0, tc.total_steps - state.step)
        tick = time.perf_counter()
        for state, metrics in iterate(state, remaining):
            now = time.perf_counter()
            if log is not None:
                record = {"step": state.step, **{k: metrics[k] for k in METRIC_KEYS},
                          "wallclock_ms": round(1000.0 * (now - tick), 3)}
                log.write(json.dumps(record) + "\n")
                if state.step % tc.checkpoint_every == 0:
                    save_checkpoint(state, out / f"ckpt_{state.step:07d}.ddit")
            tick = now
            if on_step is not None:
                on_step(state, metrics)
    finally:
        if log is not None:
            log.close()
    if out is not None:
        save_checkpoint(state, out / "last.ddit")
    return state


# -------------------------------------------------------------- checkpoint


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = {}
    for prefix, table in (("param/", {k: p.data for k, p in state.params.items()}),
                          ("adam_m/", state.m), ("adam_v/", state.v)):
        for name, arr in table.items():
            tensors[prefix + name] = arr
    meta = {"config": state.config.to_dict(), "step": state.step,
            "rng": state.rng.state_hex(), "running": state.running}
    return container.encode(tensors, meta)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def state_from_container(tensors: dict[str, np.ndarray], meta: dict) -> TrainState:
    try:
        config = RunConfig.from_dict(meta["config"])
        step, rng_hex = int(meta["step"]), meta["rng"]
        running = dict(meta.get("running", {"l_fm_ema": 0.0}))
    except (KeyError, TypeError) as exc:
        raise container.MalformedContainerError(f"checkpoint manifest lacks {exc}") from exc
    params, m, v = {}, {}, {}
    for key, arr in tensors.items():
        prefix, _, name = key.partition("/")
        if prefix == "param":
            params[name] = T.parameter(arr, name)
        elif prefix == "adam_m":
            m[name] = arr
        elif prefix == "adam_v":
            v[name] = arr
    if set(params) != set(m) or set(params) != set(v):
        raise container.MalformedContainerError("parameter and moment sets differ")
    return TrainState(config=config, params=params, m=m, v=v, rng=Rng.from_hex(rng_hex),
                      step=step, running=running)


def load_checkpoint(path: str | Path) -> TrainState:
    return state_from_container(*container.read(path))
