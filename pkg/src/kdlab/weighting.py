"""Per-batch sample weights computed from distillation gaps.

All schemes operate on detached gap values (plain arrays), so weights are
constants during differentiation: the gradient of the weighted loss treats
w_i as fixed coefficients. Soft schemes normalize to sum 1; hard-discard
emits 0/1 masks; frozen-variance weights come from a saved per-sample
variance table and are normalized to mean 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tensor import DomainError, Tensor

SCHEME_KINDS = ("equal", "hard_mining", "hard_discard", "soft_exp", "soft_poly", "frozen_variance")


def _gap_values(d) -> np.ndarray:
    arr = d.data if isinstance(d, Tensor) else np.asarray(d, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"expected a non-empty 1-D gap vector, got shape {arr.shape}")
    return arr


def equal_weights(n: int) -> np.ndarray:
    return np.ones(n)


def soft_exp_weights(d, temperature: float) -> np.ndarray:
    """w_i = exp(-d_i/T) / sum_j exp(-d_j/T), computed with a max shift."""
    if temperature <= 0:
        raise DomainError(f"soft_exp_weights: temperature must be positive, got {temperature}")
    d = _gap_values(d)
    z = -(d - d.min()) / temperature
    w = np.exp(z)
    return w / w.sum()


def soft_poly_weights(d, alpha: float) -> np.ndarray:
    """w_i = (1 + d_i)^-alpha / sum_j (1 + d_j)^-alpha."""
    if alpha <= 0:
        raise DomainError(f"soft_poly_weights: alpha must be positive, got {alpha}")
    d = _gap_values(d)
    if np.any(d < 0):
        raise DomainError("soft_poly_weights: gaps must be non-negative")
    w = (1.0 + d) ** (-alpha)
    return w / w.sum()


def hard_mining_weights(d, temperature: float) -> np.ndarray:
    """Sign-flipped soft-exp: w_i = exp(+d_i/T) / sum_j exp(+d_j/T)."""
    if temperature <= 0:
        raise DomainError(f"hard_mining_weights: temperature must be positive, got {temperature}")
    d = _gap_values(d)
    z = (d - d.max()) / temperature
    w = np.exp(z)
    return w / w.sum()


def hard_discard_weights(d, k: int) -> np.ndarray:
    """Weight 0 for the k largest gaps, 1 elsewhere.

    Ties at the cutoff keep the lower batch index (the higher index is
    treated as the larger gap).
    """
    d = _gap_values(d)
    n = d.size
    if not 0 <= k < n:
        raise DomainError(f"hard_discard_weights: k={k} must satisfy 0 <= k < {n}")
    w = np.ones(n)
    if k:
        order = np.lexsort((-np.arange(n), -d))
        w[order[:k]] = 0.0
    return w


def frozen_variance_weights(table: Mapping[int, float], batch_ids: Sequence[int]) -> np.ndarray:
    """w_i = 1/sigma_i^2 looked up from a saved variance table, then
    normalized to mean 1 over the batch."""
    w = np.empty(len(batch_ids))
    for i, sid in enumerate(batch_ids):
        sid = int(sid)
        if sid not in table:
            raise KeyError(f"sample id {sid} missing from the variance table")
        var = table[sid]
        if var <= 0:
            raise DomainError(f"non-positive variance {var} for sample id {sid}")
        w[i] = 1.0 / var
    return w * (len(w) / w.sum())


@dataclass(frozen=True)
class WeightingScheme:
    """Configuration for one gap-to-weights rule."""

    kind: str
    temperature: float = 1.0
    alpha: float = 1.0
    discard_count: int = 0
    variance_table: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown weighting scheme '{self.kind}'")
        if self.kind == "frozen_variance" and self.variance_table is None:
            raise ValueError("frozen_variance scheme needs a variance table")

    def weights(self, d, batch_ids: Sequence[int] | None = None) -> np.ndarray:
        d = _gap_values(d)
        if self.kind == "equal":
            return equal_weights(d.size)
        if self.kind == "soft_exp":
            return soft_exp_weights(d, self.temperature)
        if self.kind == "soft_poly":
            return soft_poly_weights(d, self.alpha)
        if self.kind == "hard_mining":
            return hard_mining_weights(d, self.temperature)
        if self.kind == "hard_discard":
            return hard_discard_weights(d, self.discard_count)
        if batch_ids is None:
            raise ValueError("frozen_variance weights need the batch sample ids")
        return frozen_variance_weights(self.variance_table, batch_ids)


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear ramp of the distillation weight from 0 to ``final_lambda``
    over the first ``warmup_epochs`` epochs (0 means always the final value)."""

    warmup_epochs: int
    final_lambda: float

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.final_lambda < 0:
            raise ValueError("final_lambda must be >= 0")


def lambda_at(schedule: WarmupSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule.warmup_epochs == 0:
        return schedule.final_lambda
    return schedule.final_lambda * min(1.0, epoch / schedule.warmup_epochs)


def load_variance_table(path: str | Path) -> dict[int, float]:
    """Parse a ``sample_id,sigma_squared`` text table."""
    table: dict[int, float] = {}
    lines = Path(path).read_text().splitlines()
    for ln, line in enumerate(lines):
        line = line.strip()
        if not line or line == "sample_id,sigma_squared":
            continue
        sid, var = line.split(",")
        table[int(sid)] = float(var)
    if not table:
        raise ValueError(f"variance table {path} holds no rows")
    return table


def save_variance_table(path: str | Path, ids: Sequence[int], sigma_sq: Sequence[float]) -> None:
    rows = ["sample_id,sigma_squared"]
    rows.extend(f"{int(i)},{repr(float(v))}" for i, v in zip(ids, sigma_sq))
    Path(path).write_text("\n".join(rows) + "\n")
