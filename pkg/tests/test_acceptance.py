"""The ten acceptance criteria, at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed together at
the end of the pytest run. Criteria 7 and 8 train real models and take a
few minutes each on one CPU core.
"""

import time

import numpy as np
import pytest

from blockdiv import tensor as T
from blockdiv.analysis import LINEAR, RBF, cka, diversity_summary, gram, hsic, similarity_matrix
from blockdiv.config import RunConfig, SampleConfig
from blockdiv.data import gaussian8_centers, sample_batch
from blockdiv.gradcheck import COMPONENTS, TOLERANCE, run_gradcheck, tiny_config
from blockdiv.interpolant import gaussian_velocity, interpolate
from blockdiv.losses import (PairSet, adaptive_weight, disp_loss, flow_matching_loss, mi_loss,
                             orth_loss)
from blockdiv.model import forward
from blockdiv.sampler import integrate, sample
from blockdiv.tensor import Rng, Tensor
from blockdiv.trainer import (checkpoint_bytes, draw_batch, init_state, iterate,
                              load_checkpoint, save_checkpoint, train_step)

import conftest
from test_analysis import hsic_bruteforce, orthogonal
from test_losses import disp_oracle, mi_oracle


def report(number: int, title: str, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


def test_01_gradient_fidelity():
    config = tiny_config()
    m = config.model
    assert (m.num_blocks, m.hidden_dim, m.token_count, config.train.batch_size) == (4, 16, 4, 2)
    assert config.diversity.enabled
    start = time.perf_counter()
    errors = run_gradcheck(config, draws=5, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = set(errors) == set(COMPONENTS) and worst <= TOLERANCE and elapsed < 120
    report(1, "gradient fidelity", ok,
           f"max rel err {worst:.2e} over {len(errors)} components, 5 draws, {elapsed:.0f}s")


def test_02_cka_invariances():
    rng = Rng(2)
    x, y = rng.normal((40, 8)), rng.normal((40, 8))
    q = orthogonal(rng, 8)
    base = cka(x, y, LINEAR)
    dev = {
        "self": abs(cka(x, x, LINEAR) - 1.0),
        "self_rbf": abs(cka(x, x, RBF) - 1.0),
        "symmetry": abs(cka(x, y, LINEAR) - cka(y, x, LINEAR)),
        "symmetry_rbf": abs(cka(x, y, RBF) - cka(y, x, RBF)),
        "orthogonal": abs(cka(x @ q, y, LINEAR) - base),
        "scale": abs(cka(3.7 * x, y, LINEAR) - base),
        "scale_rbf": abs(cka(3.7 * x, y, RBF) - cka(x, y, RBF)),
    }
    ok = (dev["self"] <= 1e-10 and dev["self_rbf"] <= 1e-10 and dev["symmetry"] <= 1e-10
          and dev["symmetry_rbf"] <= 1e-10 and dev["orthogonal"] <= 1e-8
          and dev["scale"] <= 1e-8 and dev["scale_rbf"] <= 1e-8)
    report(2, "CKA invariances", ok, f"largest deviation {max(dev.values()):.1e}")


def test_03_hsic_oracle():
    rng = Rng(3)
    worst = 0.0
    for shape in ((4, 3), (8, 5)):
        x, y = rng.normal(shape), rng.normal(shape)
        for kernel in (LINEAR, RBF):
            k, l = gram(x, kernel), gram(y, kernel)
            worst = max(worst, abs(hsic(k, l) - hsic_bruteforce(k, l)))
    report(3, "HSIC oracle", worst <= 1e-10, f"max |matrix - brute force| {worst:.1e}")


def test_04_diversity_oracles():
    pairs = PairSet.from_blocks([0, 1, 2])
    worst = 0.0
    for seed in range(5):
        rng = Rng(40 + seed)
        arrays = [rng.normal((2, 3, 4)) for _ in range(3)]
        feats = [Tensor(a) for a in arrays]
        worst = max(worst, abs(mi_loss(feats, pairs).item() - mi_oracle(arrays, pairs.pairs)),
                    abs(disp_loss(feats, pairs).item() - disp_oracle(arrays, (0, 1, 2))))
    pair = PairSet.from_blocks([0, 1])
    e0, e1 = np.zeros((2, 2, 3)), np.zeros((2, 2, 3))
    e0[..., 0], e1[..., 1] = 1.0, 2.0
    extremes = tuple(orth_loss([Tensor(a), Tensor(b)], pair).item()
                     for a, b in ((e0, e0), (e0, e1), (e0, -e0)))
    ok = worst <= 1e-12 and extremes == (1.0, 0.0, -1.0)
    report(4, "diversity-loss oracles", ok,
           f"mi/disp max dev {worst:.1e}; orth extremes {extremes}")


def test_05_adaptive_weight():
    cases = {0.6: 1.0, 0.5: 0.8, 0.3: 0.4, 0.1: 0.0, -0.2: 0.0}
    got = {l: adaptive_weight(l, 0.1, 0.5) for l in cases}
    ok = got == cases
    report(5, "adaptive weight", ok, ", ".join(f"w({l})={got[l]:g}" for l in cases))


def test_06_sampler_oracle():
    start = time.perf_counter()
    ode = integrate(gaussian_velocity, (1,), SampleConfig(mode="ode", num_steps=250,
                                                          num_samples=4096, seed=6, t_min=1e-3))
    sde = integrate(gaussian_velocity, (1,), SampleConfig(mode="sde", num_steps=250,
                                                          num_samples=8192, seed=6, t_min=1e-3))
    elapsed = time.perf_counter() - start
    ok = (0.9 <= ode.var() <= 1.1 and 0.85 <= sde.var() <= 1.15 and abs(sde.mean()) <= 0.05
          and elapsed < 60)
    report(6, "sampler oracle", ok,
           f"ODE var {ode.var():.3f}; SDE var {sde.var():.3f}, mean {sde.mean():+.3f}; "
           f"{elapsed:.1f}s")


@pytest.mark.slow
def test_07_end_to_end_training():
    config = RunConfig()
    assert (config.model.num_blocks, config.model.hidden_dim, config.train.batch_size,
            config.train.total_steps, config.data.kind) == (6, 64, 128, 5000, "gaussian8")
    assert config.diversity.enabled
    start = time.perf_counter()
    state, l_fm = init_state(config), []
    for state, metrics in iterate(state, config.train.total_steps):
        l_fm.append(metrics["l_fm"])
    l_fm = np.array(l_fm)
    # metrics index k holds step k + 1
    ratio = l_fm[-100:].mean() / l_fm[99:199].mean()
    x = sample(state.params, config.model,
               SampleConfig(mode="ode", num_steps=250, num_samples=4096, seed=7))
    d = ((x[:, None, :] - gaussian8_centers()[None]) ** 2).sum(-1)
    frac = np.bincount(d.argmin(1), minlength=8) / len(x)
    elapsed = time.perf_counter() - start
    ok = ratio <= 0.7 and frac.min() >= 0.02 and elapsed < 1800
    report(7, "end-to-end toy training", ok,
           f"loss ratio {ratio:.3f}; min mode share {frac.min():.3f}; {elapsed / 60:.1f} min")


DIVERSITY_STEPS = 1000


def _summary(config: RunConfig) -> float:
    state = init_state(config)
    for state, _ in iterate(state, DIVERSITY_STEPS):
        pass
    rng = Rng(99)
    x, y = sample_batch(config.data, 256, rng)
    eps = rng.normal(x.shape)
    t = np.full(len(x), 0.5)
    _, feats = forward(state.params, config.model, interpolate(x, eps, t), t, y)
    return diversity_summary(similarity_matrix(feats, LINEAR))


@pytest.mark.slow
def test_08_directional_diversity():
    # diversity run: the full method (long residuals + diversity loss);
    # baseline: the plain block stack without either, same seeds/steps/data
    wins, gaps = 0, []
    for seed in range(3):
        train = {"seed": seed, "total_steps": DIVERSITY_STEPS}
        diverse = RunConfig().with_overrides(train=train, diversity={"enabled": True},
                                             model={"use_long_residual": True})
        baseline = RunConfig().with_overrides(train=train, diversity={"enabled": False},
                                              model={"use_long_residual": False})
        gap = _summary(baseline) - _summary(diverse)
        gaps.append(gap)
        wins += gap >= 0.01
    report(8, "directional diversity effect", wins >= 2,
           f"baseline - diverse summary per seed {[round(g, 4) for g in gaps]}; {wins}/3 >= 0.01")


def test_09_determinism_and_persistence(tmp_path):
    config = RunConfig().with_overrides(train={"batch_size": 32})
    runs = [[m["l_total"] for _, m in iterate(init_state(config), 10)] for _ in range(2)]
    same_losses = runs[0] == runs[1]

    state = init_state(config)
    for state, _ in iterate(state, 5):
        pass
    save_checkpoint(state, tmp_path / "a.ddit")
    loaded = load_checkpoint(tmp_path / "a.ddit")
    save_checkpoint(loaded, tmp_path / "b.ddit")
    same_bytes = (tmp_path / "a.ddit").read_bytes() == (tmp_path / "b.ddit").read_bytes()
    after = [[m["l_total"] for _, m in iterate(s, 10)] for s in (state, loaded)]
    ends = []
    for s in (state, loaded):
        for s, _ in iterate(s, 10):
            pass
        ends.append(checkpoint_bytes(s))
    same_traj = after[0] == after[1] and ends[0] == ends[1]
    ok = same_losses and same_bytes and same_traj
    report(9, "determinism and persistence", ok,
           f"10-step losses equal: {same_losses}; save/load/save identical: {same_bytes}; "
           f"post-load trajectory identical: {same_traj}")


def test_10_long_residual_liveness():
    config = RunConfig()
    state = init_state(config)
    # one optimizer step moves the zero-initialised output layer off zero
    state, _ = train_step(state)
    batch = draw_batch(config, Rng(10))
    x_t = interpolate(batch.x, batch.eps, batch.t)
    v, _ = forward(state.params, config.model, x_t, batch.t, batch.y)
    grads = T.backward(flow_matching_loss(v, batch.x, batch.eps, batch.t))
    targets = sorted(config.model.skip_pairs)
    norms = [float(np.abs(grads.get(state.params[f"fuse.{l}.linear.w"], 0.0)).max())
             for l in targets]
    off = init_state(config.with_overrides(model={"use_long_residual": False}))
    leftover = [k for k in off.params if k.startswith("fuse.")]
    ok = len(targets) == 3 and min(norms) > 0 and not leftover
    report(10, "long-residual liveness", ok,
           f"fusion grad max-abs per junction {[f'{n:.1e}' for n in norms]}; "
           f"fusion params with flag off: {len(leftover)}")
