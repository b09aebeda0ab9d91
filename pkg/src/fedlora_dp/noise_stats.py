"""Monte Carlo and closed-form statistics of noise-perturbed factor products.

For clean factors B (m x r) and A (r x n) perturbed by independent isotropic
Gaussian matrices, the perturbed product (B + beta)(A + alpha) is unbiased for
B A, and its total elementwise variance (sum over entries of per-entry
variances) has the exact closed form

    n * sa^2 * ||B||_F^2  +  m * sb^2 * ||A||_F^2  +  m * n * r * sb^2 * sa^2.

A three-term bound with the m and n coefficients on the first two terms
exchanged is also evaluated for reporting; it coincides with the exact value
whenever m == n but is not an upper bound on asymmetric shapes.
"""

import math
from dataclasses import dataclass

import numpy as np

from .linalg import RngStream, as_matrix

__all__ = [
    "NoiseModel",
    "NoiseStats",
    "VarianceReport",
    "SweepRow",
    "noise_product_stats",
    "mc_expectation_diff",
    "mc_total_variance",
    "exact_total_variance",
    "variance_bound",
    "variance_report",
    "rank_sweep",
    "size_sweep",
]


@dataclass(frozen=True)
class NoiseModel:
    """Noise scales applied to the tall factor (beta) and the wide factor (alpha)."""

    sigma_beta: float
    sigma_alpha: float

    def __post_init__(self):
        if self.sigma_beta < 0 or self.sigma_alpha < 0:
            raise ValueError(
                f"noise scales must be >= 0, got ({self.sigma_beta}, {self.sigma_alpha})"
            )


@dataclass(frozen=True)
class NoiseStats:
    """Monte Carlo summary of the perturbed product."""

    mean_diff: float
    std_error: float
    total_variance: float
    n_draws: int


@dataclass(frozen=True)
class VarianceReport:
    """Monte Carlo estimate next to the exact formula and the reported bound."""

    mc_estimate: float
    exact_formula: float
    bound: float
    m: int
    n: int
    r: int
    model: NoiseModel


@dataclass(frozen=True)
class SweepRow:
    """One sweep point: configuration label plus its noise statistics."""

    key: str
    value: str
    mean_diff: float
    std_error: float
    mc_variance: float
    exact_variance: float
    bound: float


def _chunk_size(m: int, n: int, r: int) -> int:
    biggest = max(m * r, r * n, m * n)
    return max(1, 500_000 // biggest)


def noise_product_stats(
    b: np.ndarray,
    a: np.ndarray,
    model: NoiseModel,
    n_draws: int,
    rng: RngStream,
) -> NoiseStats:
    """Single-pass Monte Carlo over perturbed products.

    Draws are generated in fixed-size chunks with per-chunk sub-streams and
    accumulated in chunk order, so the result is independent of scheduling.
    Reports the entry-averaged mean of (B+beta)(A+alpha) - BA with its standard
    error, and the unbiased per-entry sample variance summed over entries.
    """
    b = as_matrix(b, "b factor")
    a = as_matrix(a, "a factor")
    if b.shape[1] != a.shape[0]:
        raise ValueError(f"factor shapes {b.shape} and {a.shape} do not chain")
    if n_draws < 2:
        raise ValueError(f"need at least 2 draws, got {n_draws}")

    m, r = b.shape
    n = a.shape[1]
    if model.sigma_beta == 0 and model.sigma_alpha == 0:
        return NoiseStats(mean_diff=0.0, std_error=0.0, total_variance=0.0, n_draws=n_draws)
    clean = b @ a
    chunk = _chunk_size(m, n, r)

    sum_prod = np.zeros((m, n))
    sum_sq = np.zeros((m, n))
    per_draw_mean = np.empty(n_draws)

    done = 0
    chunk_index = 0
    while done < n_draws:
        count = min(chunk, n_draws - done)
        gen = rng.child(chunk_index).generator()
        if model.sigma_beta > 0:
            beta = model.sigma_beta * gen.standard_normal((count, m, r))
            tall = b + beta
        else:
            tall = np.broadcast_to(b, (count, m, r))
        if model.sigma_alpha > 0:
            alpha = model.sigma_alpha * gen.standard_normal((count, r, n))
            wide = a + alpha
        else:
            wide = np.broadcast_to(a, (count, r, n))
        prods = tall @ wide
        sum_prod += prods.sum(axis=0)
        sum_sq += (prods * prods).sum(axis=0)
        per_draw_mean[done:done + count] = (prods - clean).mean(axis=(1, 2))
        done += count
        chunk_index += 1

    mean_diff = float(per_draw_mean.mean())
    std_error = float(per_draw_mean.std(ddof=1) / math.sqrt(n_draws))
    var_entries = (sum_sq - sum_prod * sum_prod / n_draws) / (n_draws - 1)
    total_variance = float(np.maximum(var_entries, 0.0).sum())
    return NoiseStats(
        mean_diff=mean_diff,
        std_error=std_error,
        total_variance=total_variance,
        n_draws=n_draws,
    )


def mc_expectation_diff(
    b: np.ndarray,
    a: np.ndarray,
    model: NoiseModel,
    n_draws: int,
    rng: RngStream,
) -> tuple[float, float]:
    """Entry-averaged Monte Carlo mean of the perturbed-minus-clean product, with its SE."""
    if n_draws < 100:
        raise ValueError(f"need at least 100 draws, got {n_draws}")
    stats = noise_product_stats(b, a, model, n_draws, rng)
    return stats.mean_diff, stats.std_error


def mc_total_variance(
    b: np.ndarray,
    a: np.ndarray,
    model: NoiseModel,
    n_draws: int,
    rng: RngStream,
) -> float:
    """Unbiased per-entry sample variance of the perturbed product, summed over entries."""
    if n_draws < 1000:
        raise ValueError(f"need at least 1000 draws, got {n_draws}")
    return noise_product_stats(b, a, model, n_draws, rng).total_variance


def exact_total_variance(b: np.ndarray, a: np.ndarray, model: NoiseModel) -> float:
    """Closed-form total elementwise variance of the perturbed product."""
    b = as_matrix(b, "b factor")
    a = as_matrix(a, "a factor")
    if b.shape[1] != a.shape[0]:
        raise ValueError(f"factor shapes {b.shape} and {a.shape} do not chain")
    m, r = b.shape
    n = a.shape[1]
    sb2 = model.sigma_beta**2
    sa2 = model.sigma_alpha**2
    norm_b2 = float(np.sum(b * b))
    norm_a2 = float(np.sum(a * a))
    return n * sa2 * norm_b2 + m * sb2 * norm_a2 + m * n * r * sb2 * sa2


def variance_bound(b: np.ndarray, a: np.ndarray, model: NoiseModel) -> float:
    """Three-term bound with the outer-dimension coefficients exchanged.

    Evaluates m*sa^2*||B||^2 + n*sb^2*||A||^2 + m*n*r*sb^2*sa^2.  Reported
    alongside the exact value; equal to it when m == n.
    """
    b = as_matrix(b, "b factor")
    a = as_matrix(a, "a factor")
    if b.shape[1] != a.shape[0]:
        raise ValueError(f"factor shapes {b.shape} and {a.shape} do not chain")
    m, r = b.shape
    n = a.shape[1]
    sb2 = model.sigma_beta**2
    sa2 = model.sigma_alpha**2
    norm_b2 = float(np.sum(b * b))
    norm_a2 = float(np.sum(a * a))
    return m * sa2 * norm_b2 + n * sb2 * norm_a2 + m * n * r * sb2 * sa2


def variance_report(
    b: np.ndarray,
    a: np.ndarray,
    model: NoiseModel,
    n_draws: int,
    rng: RngStream,
) -> VarianceReport:
    """Bundle the Monte Carlo estimate with both closed forms."""
    return VarianceReport(
        mc_estimate=mc_total_variance(b, a, model, n_draws, rng),
        exact_formula=exact_total_variance(b, a, model),
        bound=variance_bound(b, a, model),
        m=b.shape[0],
        n=a.shape[1],
        r=b.shape[1],
        model=model,
    )


def _scaled_factors(
    m: int, n: int, r: int, norm_b: float, norm_a: float, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian factors rescaled to exact Frobenius norms (zero stays zero)."""
    gen = rng.generator()
    b = gen.standard_normal((m, r))
    a = gen.standard_normal((r, n))
    b = b * (norm_b / np.linalg.norm(b)) if norm_b > 0 else np.zeros((m, r))
    a = a * (norm_a / np.linalg.norm(a)) if norm_a > 0 else np.zeros((r, n))
    return b, a


def rank_sweep(
    ranks: list[int],
    m: int,
    n: int,
    model: NoiseModel,
    n_draws: int,
    rng: RngStream,
    norm_b: float = 1.0,
    norm_a: float = 1.0,
) -> list[SweepRow]:
    """Noise statistics across inner ranks at fixed factor norms and noise scales."""
    if sorted(ranks) != list(ranks) or any(r < 1 for r in ranks):
        raise ValueError(f"ranks must be positive and ascending, got {ranks}")
    rows = []
    for i, r in enumerate(ranks):
        b, a = _scaled_factors(m, n, r, norm_b, norm_a, rng.child(i, 0))
        stats = noise_product_stats(b, a, model, n_draws, rng.child(i, 1))
        rows.append(
            SweepRow(
                key="rank",
                value=str(r),
                mean_diff=stats.mean_diff,
                std_error=stats.std_error,
                mc_variance=stats.total_variance,
                exact_variance=exact_total_variance(b, a, model),
                bound=variance_bound(b, a, model),
            )
        )
    return rows


def size_sweep(
    dim_pairs: list[tuple[int, int]],
    rank: int,
    model: NoiseModel,
    n_draws: int,
    rng: RngStream,
    norm_b: float = 1.0,
    norm_a: float = 1.0,
) -> list[SweepRow]:
    """Noise statistics across outer dimensions at a fixed rank."""
    if not dim_pairs:
        raise ValueError("need at least one (m, n) pair")
    rows = []
    for i, (m, n) in enumerate(dim_pairs):
        b, a = _scaled_factors(m, n, rank, norm_b, norm_a, rng.child(i, 0))
        stats = noise_product_stats(b, a, model, n_draws, rng.child(i, 1))
        rows.append(
            SweepRow(
                key="size",
                value=f"{m}x{n}",
                mean_diff=stats.mean_diff,
                std_error=stats.std_error,
                mc_variance=stats.total_variance,
                exact_variance=exact_total_variance(b, a, model),
                bound=variance_bound(b, a, model),
            )
        )
    return rows
