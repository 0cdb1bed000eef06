"""Heteroscedastic uncertainty loss for distillation.

Each sample's teacher target is modeled as the student value plus Gaussian
noise with a learned, input-dependent variance. Minimizing the negative log
likelihood gives, per element,

    residual^2 / sigma^2 + ln sigma^2

so 1/sigma^2 acts as a learned per-sample weight: samples the student finds
hard to mimic get a large predicted variance and a small effective weight,
while confidently mimicked samples are amplified. The log-variance is
clamped to [-10, 10] before exponentiation so both terms stay finite even
when a residual collapses to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import Network, VarianceHead
from .tensor import ShapeError, Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class VariancePrediction:
    """Predicted log variance, shape [N, D] (or [N, 1] for a single
    variance per sample)."""

    log_var: Tensor

    def __post_init__(self):
        if self.log_var.ndim != 2:
            raise ShapeError(f"log variance must be 2-D, got {self.log_var.shape}")

    def sigma_sq_values(self) -> np.ndarray:
        """Detached sigma^2 after clamping, for reporting."""
        return np.exp(np.clip(self.log_var.data, LOG_VAR_MIN, LOG_VAR_MAX))


@dataclass
class UncertaintyLossTerms:
    """The loss and its decomposition; ``total = data_term + reg_term``."""

    total: Tensor
    data_term: Tensor
    reg_term: Tensor
    per_sample_effect: np.ndarray = field(repr=False)


def uncertainty_loss(student: Tensor, teacher: Tensor, var: VariancePrediction) -> UncertaintyLossTerms:
    """Mean over all N*D elements of residual^2/sigma^2 + ln sigma^2.

    ``teacher`` is detached; gradients reach the student values through the
    data term and the variance prediction through both terms. A [N, 1] log
    variance is shared across the D target dimensions.
    """
    if student.shape != teacher.shape:
        raise ShapeError(f"uncertainty_loss: student {student.shape} vs teacher {teacher.shape}")
    if student.ndim != 2:
        raise ShapeError(f"uncertainty_loss: expects [N, D] values, got {student.shape}")
    n, d = student.shape
    lv = var.log_var
    if lv.shape[0] != n or lv.shape[1] not in (1, d):
        raise ShapeError(
            f"uncertainty_loss: log variance {lv.shape} does not match targets {(n, d)}"
        )

    teacher = teacher.detach() if (teacher.requires_grad or teacher._node is not None) else teacher
    s_clamped = T.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)
    inv_sigma_sq = T.exp(T.scale(s_clamped, -1.0))
    if lv.shape[1] == 1 and d > 1:
        ones_row = Tensor(np.ones((1, d)))
        inv_sigma_sq = T.matmul(inv_sigma_sq, ones_row)
        s_clamped = T.matmul(s_clamped, ones_row)

    sq = T.square(T.sub(student, teacher))
    data_term = T.mean(T.mul(sq, inv_sigma_sq))
    reg_term = T.mean(s_clamped)
    total = T.add(data_term, reg_term)

    gaps = sq.data.mean(axis=1)
    eff_weight = np.exp(-np.clip(lv.data, LOG_VAR_MIN, LOG_VAR_MAX)).mean(axis=1)
    return UncertaintyLossTerms(
        total=total,
        data_term=data_term,
        reg_term=reg_term,
        per_sample_effect=eff_weight * gaps,
    )


def extract_variance_table(
    net: Network,
    head: VarianceHead,
    inputs: np.ndarray,
    ids: np.ndarray,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Per-sample sigma^2 (mean over variance dimensions) for a dataset.

    Runs in evaluation mode (running BN statistics, no graph), so two
    extraction passes over the same model produce identical tables. Returns
    (ids, sigma_sq, degenerate) where ``degenerate`` flags a head whose
    predictions are constant across samples (e.g. never trained).
    """
    sig = np.empty(len(ids))
    with T.no_grad():
        for lo in range(0, len(ids), batch_size):
            hi = min(lo + batch_size, len(ids))
            out = net.forward(Tensor(inputs[lo:hi]), train=False)
            lv = head.predict_log_variance(out.embedding, batch_stats=False)
            sig[lo:hi] = np.exp(np.clip(lv.data, LOG_VAR_MIN, LOG_VAR_MAX)).mean(axis=1)
    degenerate = bool(np.ptp(sig) < 1e-9)
    return np.asarray(ids).copy(), sig, degenerate


def spearman_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"spearman: need two equal-length 1-D arrays, got {a.shape} and {b.shape}")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j)
        i = j + 1
    return ranks


@dataclass
class VarianceGapBin:
    bin_low: float
    bin_high: float
    proportion: float
    mean_gap: float
    mean_effect: float


@dataclass
class VarianceGapReport:
    bins: list[VarianceGapBin]
    spearman: float
    n_samples: int


def variance_gap_report(
    variance_table: dict[int, float],
    gap_table: dict[int, float],
    bins: int = 10,
) -> VarianceGapReport:
    """Bin samples by predicted variance and summarize gap and effect.

    ``effect`` is (1/sigma^2) * gap, the post-weighting contribution of a
    sample. Also reports the Spearman rank correlation between sigma^2 and
    gap over all shared sample ids.
    """
    if bins < 2:
        raise ValueError(f"variance_gap_report: bins must be >= 2, got {bins}")
    shared = sorted(set(variance_table) & set(gap_table))
    if not shared:
        raise ValueError("variance_gap_report: the tables share no sample ids")
    var = np.array([variance_table[i] for i in shared])
    gaps = np.array([gap_table[i] for i in shared])

    lo, hi = var.min(), var.max()
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, var, side="right") - 1, 0, bins - 1)
    effect = gaps / var

    out = []
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        out.append(
            VarianceGapBin(
                bin_low=float(edges[b]),
                bin_high=float(edges[b + 1]),
                proportion=count / len(shared),
                mean_gap=float(gaps[mask].mean()) if count else 0.0,
                mean_effect=float(effect[mask].mean()) if count else 0.0,
            )
        )
    return VarianceGapReport(
        bins=out,
        spearman=spearman_correlation(var, gaps),
        n_samples=len(shared),
    )
