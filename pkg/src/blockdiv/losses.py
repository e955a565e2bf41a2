"""Flow matching, cross-block diversity and feature alignment losses.

All losses take a feature stack: a list with one ``[N, T, D]`` tensor per
block. The three diversity terms are evaluated over a fixed set of block
pairs chosen once per run (see :func:`select_pairs`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from . import tensor as T
from .config import DiversityConfig
from .interpolant import velocity_target
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class PairSet:
    blocks: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a pair set needs at least one pair")
        for i, j in self.pairs:
            if not i < j:
                raise ValueError(f"pair ({i}, {j}) is not ordered i < j")

    @classmethod
    def from_blocks(cls, blocks) -> PairSet:
        blocks = tuple(sorted(int(b) for b in blocks))
        return cls(blocks, tuple(itertools.combinations(blocks, 2)))

    @property
    def involved(self) -> tuple[int, ...]:
        return tuple(sorted({b for p in self.pairs for b in p}))


def select_pairs(num_blocks: int, subset_size: int, seed: int) -> PairSet:
    """Pick ``subset_size`` blocks without replacement, then take all pairs."""
    if not 2 <= subset_size <= num_blocks:
        raise ValueError(f"subset size {subset_size} outside [2, {num_blocks}]")
    if subset_size == num_blocks:
        return PairSet.from_blocks(range(num_blocks))
    chosen = Rng(seed).choice(num_blocks, subset_size, replace=False)
    return PairSet.from_blocks(chosen)


# ------------------------------------------------------------ diversity


def block_mean(f: Tensor) -> Tensor:
    """Average over the sample and token axes: ``[N,T,D] -> [D]``."""
    return T.mean(f, axis=(0, 1))


def orth_loss(features: list[Tensor], pairs: PairSet, eps: float = 1e-8) -> Tensor:
    """Mean cosine similarity between block-mean vectors over the pairs."""
    unit = {b: T.l2_normalize(block_mean(features[b]), eps) for b in pairs.involved}
    terms = [T.sum_(unit[i] * unit[j]) for i, j in pairs.pairs]
    return T.scale(_total(terms), 1.0 / len(terms))


def mi_loss(features: list[Tensor], pairs: PairSet, eps: float = 1e-8) -> Tensor:
    """Mean token-matched cosine similarity between blocks over the pairs."""
    unit = {b: T.l2_normalize(features[b], eps) for b in pairs.involved}
    terms = [T.mean(T.sum_(unit[i] * unit[j], -1)) for i, j in pairs.pairs]
    return T.scale(_total(terms), 1.0 / len(terms))


def disp_loss(features: list[Tensor], pairs: PairSet, eps: float = 1e-8) -> Tensor:
    """Negative variance of the peak-normalized per-channel mean activation.

    Each block in the pair set is flattened to ``[N*T, D]`` and every
    channel (column) is l2-normalized across the ``N*T`` rows. The signed
    column means are averaged over the blocks, divided by their largest
    magnitude, and the population variance over channels is negated.
    """
    blocks = pairs.involved
    n, tok, d = features[blocks[0]].shape
    if d < 2:
        raise ValueError("dispersion needs at least two channels")
    if n * tok < 2:
        raise ValueError("dispersion needs at least two rows")
    col_means = []
    for b in blocks:
        flat = T.reshape(features[b], (n * tok, d))
        col_means.append(T.mean(T.l2_normalize(flat, eps, axis=0), axis=0))
    a = T.scale(_total(col_means), 1.0 / len(col_means))
    a_norm = a / (T.max_(T.abs_(a), axis=0) + eps)
    centred = a_norm - T.mean(a_norm)
    return T.neg(T.mean(T.square(centred)))


def diversity_loss(features: list[Tensor], cfg: DiversityConfig,
                   pairs: PairSet) -> tuple[Tensor, dict[str, Tensor]]:
    parts = {
        "orth": orth_loss(features, pairs, cfg.eps),
        "mi": mi_loss(features, pairs, cfg.eps),
        "disp": disp_loss(features, pairs, cfg.eps),
    }
    total = (T.scale(parts["orth"], cfg.lambda_orth) + T.scale(parts["mi"], cfg.lambda_mi)
             + T.scale(parts["disp"], cfg.lambda_disp))
    return total, parts


def adaptive_weight(l_div: float, lo: float = 0.1, hi: float = 0.5) -> float:
    """Piecewise gate on the diversity loss; the ramp keeps the fixed 0.5 divisor."""
    if lo >= hi:
        raise ValueError("lo must be below hi")
    l_div = float(l_div)
    if l_div > hi:
        return 1.0
    if l_div > lo:
        # decimal arithmetic on the shortest reprs, so w(0.3) is 0.4 and not 0.39999999999999997
        return float((Decimal(repr(l_div)) - Decimal(repr(float(lo)))) / Decimal("0.5"))
    return 0.0


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------- flow matching


def flow_matching_loss(v_pred: Tensor, x_star, eps, t) -> Tensor:
    target = velocity_target(x_star, eps, t)
    if v_pred.shape != np.shape(target):
        raise T.ShapeError(f"prediction {list(v_pred.shape)} vs target {list(np.shape(target))}")
    return T.mean(T.square(v_pred - Tensor(target)))


# -------------------------------------------------------------- alignment


@dataclass(frozen=True)
class TargetEncoder:
    """Frozen random token-wise MLP standing in for a pretrained encoder."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, in_dim: int, out_dim: int, seed: int, hidden: int = 64) -> TargetEncoder:
        rng = Rng(seed)
        return cls(rng.normal((in_dim, hidden)) / math.sqrt(in_dim),
                   0.1 * rng.normal(hidden),
                   rng.normal((hidden, out_dim)) / math.sqrt(hidden),
                   0.1 * rng.normal(out_dim))

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        h = tokens @ self.w1 + self.b1
        h = h / (1.0 + np.exp(-h))
        return h @ self.w2 + self.b2


@dataclass(frozen=True)
class AlignmentTarget:
    encoder: TargetEncoder
    depth: int
    coef: float = 0.5


def init_projector(hidden_dim: int, out_dim: int, rng: Rng,
                   width: int | None = None) -> dict[str, Tensor]:
    width = width or 2 * hidden_dim
    dims = [(hidden_dim, width), (width, width), (width, out_dim)]
    params = {}
    for k, (fi, fo) in enumerate(dims, start=1):
        limit = math.sqrt(6.0 / (fi + fo))
        params[f"align.fc{k}.w"] = T.parameter(rng.uniform((fi, fo), -limit, limit),
                                               f"align.fc{k}.w")
        params[f"align.fc{k}.b"] = T.parameter(np.zeros(fo), f"align.fc{k}.b")
    return params


def project(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = T.silu(T.linear(h, params["align.fc1.w"], params["align.fc1.b"]))
    h = T.silu(T.linear(h, params["align.fc2.w"], params["align.fc2.b"]))
    return T.linear(h, params["align.fc3.w"], params["align.fc3.b"])


def alignment_loss(h: Tensor, y_star: np.ndarray, params: dict[str, Tensor],
                   eps: float = 1e-8) -> Tensor:
    """Negative mean token-wise cosine between frozen targets and projected states."""
    if h.shape[:2] != np.shape(y_star)[:2]:
        raise T.ShapeError(f"hidden tokens {list(h.shape[:2])} vs targets "
                           f"{list(np.shape(y_star)[:2])}")
    return alignment_from_projection(project(h, params), y_star, eps)


def alignment_from_projection(proj: Tensor, y_star: np.ndarray, eps: float = 1e-8) -> Tensor:
    return T.neg(T.mean(T.cosine_similarity(Tensor(y_star), proj, eps)))


# ------------------------------------------------------------------ total


def total_loss(v_pred: Tensor, features: list[Tensor], x_star, eps, t, *,
               diversity: DiversityConfig | None = None, pairs: PairSet | None = None,
               alignment: AlignmentTarget | None = None, y_star: np.ndarray | None = None,
               params: dict[str, Tensor] | None = None,
               fixed_w: float | None = None) -> tuple[Tensor, dict[str, float]]:
    """``L_fm + coef * L_align + w(L_div) * L_div`` with ``w`` held constant.

    Diversity terms are always reported; they only enter the objective when
    ``diversity.enabled``. ``fixed_w`` overrides the adaptive gate (used by
    finite-difference checks, which must not see ``w`` move).
    """
    l_fm = flow_matching_loss(v_pred, x_star, eps, t)
    total = l_fm
    metrics = {"l_fm": l_fm.item(), "l_orth": 0.0, "l_mi": 0.0, "l_disp": 0.0,
               "l_div": 0.0, "w": 0.0, "l_align": 0.0}

    if alignment is not None:
        l_align = alignment_loss(features[alignment.depth], y_star, params)
        total = total + T.scale(l_align, alignment.coef)
        metrics["l_align"] = l_align.item()

    if diversity is not None:
        active = diversity.enabled
        feats = features if active else [f.detach() for f in features]
        l_div, parts = diversity_loss(feats, diversity, pairs)
        metrics.update(l_orth=parts["orth"].item(), l_mi=parts["mi"].item(),
                       l_disp=parts["disp"].item(), l_div=l_div.item())
        if active:
            w = fixed_w if fixed_w is not None else adaptive_weight(
                l_div.item(), diversity.adaptive_lo, diversity.adaptive_hi)
            metrics["w"] = w
            if w != 0.0:
                total = total + T.scale(l_div, w)

    metrics["l_total"] = total.item()
    return total, metrics
