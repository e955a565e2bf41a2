"""HSIC / CKA similarity between per-block representations.

Feature matrices are ``n x p`` numpy arrays: one row per token instance.
Kernels are described by small dicts, e.g. ``{"name": "linear"}``,
``{"name": "rbf"}`` (median-heuristic bandwidth) or
``{"name": "polynomial", "degree": 2}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .tensor import Rng

LINEAR = {"name": "linear"}
RBF = {"name": "rbf"}


class DegenerateFeaturesError(ValueError):
    pass


def _kernel(kernel) -> dict[str, Any]:
    if isinstance(kernel, str):
        kernel = {"name": kernel}
    if kernel.get("name") not in ("linear", "rbf", "polynomial"):
        raise ValueError(f"unknown kernel {kernel!r}")
    return kernel


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {list(x.shape)}")
    if x.shape[0] < 2:
        raise ValueError("need at least two rows")
    return x


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def median_bandwidth(x: np.ndarray) -> float:
    """Median of the nonzero pairwise Euclidean distances."""
    d = np.sqrt(pairwise_sq_dists(x)[np.triu_indices(x.shape[0], k=1)])
    d = d[d > 0]
    if d.size == 0:
        raise DegenerateFeaturesError("all rows identical: RBF bandwidth undefined")
    return float(np.median(d))


def gram(x, kernel=LINEAR) -> np.ndarray:
    x = _as_matrix(x)
    kernel = _kernel(kernel)
    name = kernel["name"]
    if name == "linear":
        return x @ x.T
    if name == "rbf":
        sigma = kernel.get("sigma") or median_bandwidth(x)
        return np.exp(-pairwise_sq_dists(x) / (2.0 * sigma ** 2))
    degree = int(kernel.get("degree", 2))
    return (x @ x.T + float(kernel.get("coef0", 1.0))) ** degree


def center(k: np.ndarray) -> np.ndarray:
    """``H K H`` with ``H = I - 11^T / n``."""
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """``Tr(K H L H) / (n - 1)^2``."""
    k, l = np.asarray(k, dtype=float), np.asarray(l, dtype=float)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"Gram shapes differ: {list(k.shape)} vs {list(l.shape)}")
    n = k.shape[0]
    if n < 2:
        raise ValueError("HSIC needs n >= 2")
    return float((center(k) * l.T).sum() / (n - 1) ** 2)


def _cka_from_centered(kc: np.ndarray, lc: np.ndarray) -> float:
    xy = (kc * lc).sum()
    xx = (kc * kc).sum()
    yy = (lc * lc).sum()
    if xx <= 0 or yy <= 0:
        raise DegenerateFeaturesError("zero self-HSIC (constant features)")
    return float(xy / np.sqrt(xx * yy))


def cka(x, y, kernel=LINEAR) -> float:
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("feature matrices need the same number of rows")
    return _cka_from_centered(center(gram(x, kernel)), center(gram(y, kernel)))


# --------------------------------------------------------- block matrices


@dataclass
class CkaMatrix:
    values: np.ndarray
    kernel: dict[str, Any]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        names = [f"b{i}" for i in range(self.num_blocks)]
        lines = ["," + ",".join(names)]
        for name, row in zip(names, self.values):
            lines.append(name + "," + ",".join(f"{v:.10g}" for v in row))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path, kernel=LINEAR) -> CkaMatrix:
        rows = Path(path).read_text().strip().splitlines()
        values = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
        return cls(values, _kernel(kernel))


def flatten_block(f) -> np.ndarray:
    f = np.asarray(getattr(f, "data", f), dtype=float)
    return f.reshape(-1, f.shape[-1])


def similarity_matrix(features: Sequence, kernel=RBF, subsample: int = 512,
                      seed: int = 0, meta: dict[str, Any] | None = None) -> CkaMatrix:
    """Pairwise CKA between every block of a feature stack.

    Each block is flattened to ``[N*T, D]``; if that exceeds ``subsample``
    rows, the same seeded row subset is used for every block.
    """
    if len(features) < 2:
        raise ValueError("need at least two blocks")
    mats = [flatten_block(f) for f in features]
    n = mats[0].shape[0]
    if any(m.shape[0] != n for m in mats):
        raise ValueError("all blocks must have the same number of rows")
    if n > subsample:
        rows = np.sort(Rng(seed).choice(n, subsample, replace=False))
        mats = [m[rows] for m in mats]
    kernel = _kernel(kernel)
    centred = [center(gram(m, kernel)) for m in mats]
    L = len(mats)
    values = np.eye(L)
    for i in range(L):
        values[i, i] = _cka_from_centered(centred[i], centred[i])
        for j in range(i + 1, L):
            values[i, j] = values[j, i] = _cka_from_centered(centred[i], centred[j])
    return CkaMatrix(values, kernel, dict(meta or {}))


def diversity_summary(m: CkaMatrix | np.ndarray) -> float:
    """Mean of the strict upper triangle; lower means more diverse blocks."""
    values = m.values if isinstance(m, CkaMatrix) else np.asarray(m, dtype=float)
    L = values.shape[0]
    if L < 2:
        raise ValueError("need at least two blocks")
    return float(values[np.triu_indices(L, k=1)].mean())
