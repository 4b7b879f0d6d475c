"""Evaluation metrics over completed chains: total-variation distance against
exact tables, multi-chain batch-mean effective sample size, autocorrelation,
and moment estimation bias/variance summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import SupportMismatchError, UndefinedESSError
from .targets import LatticeSpec

METRIC_CSV_HEADER = ("metric", "coords", "n_draws", "mean", "sd")


@dataclass
class ChainRecord:
    """One chain's history: draws (as lattice values), matching energies,
    accepted-step count over the recorded window, the seed descriptor, the
    kernel id, and a snapshot of the configuration that produced it."""

    draws: np.ndarray
    energies: np.ndarray
    accept_count: int
    seed: object
    kernel_id: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        self.energies = np.asarray(self.energies, dtype=float)
        if self.draws.ndim != 2 or self.energies.shape != (self.draws.shape[0],):
            raise ValueError("draws must be (T, d) with matching energies")

    @property
    def n_draws(self) -> int:
        return int(self.draws.shape[0])


def tv_distance(p, q) -> float:
    """Half the L1 distance between two probability tables on one support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise SupportMismatchError(f"table shapes differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def empirical_pmf(draws, lattice: LatticeSpec, coords) -> np.ndarray:
    """Frequency table of the selected coordinate tuple over the draws."""
    draws = np.asarray(draws, dtype=float)
    coords = tuple(int(c) for c in coords)
    K = lattice.n_values
    idx = np.stack([lattice.index_of(draws[:, c]) for c in coords], axis=0)
    flat = np.ravel_multi_index(idx, (K,) * len(coords))
    counts = np.bincount(flat, minlength=K ** len(coords)).astype(float)
    return (counts / counts.sum()).reshape((K,) * len(coords))


def ess_multichain(x) -> float:
    """Batch-mean effective sample size from m chains of length T.

    ESS = T * W / B with W the pooled within-chain variance and B the
    between-chain variance of the chain means.  Raises
    :class:`UndefinedESSError` when all chain means coincide (B = 0).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected an (n_chains, n_draws) array")
    m, T = x.shape
    if m < 2 or T < 2:
        raise ValueError("need at least two chains with at least two draws")
    chain_means = x.mean(axis=1)
    grand_mean = chain_means.mean()
    within = ((x - chain_means[:, None]) ** 2).sum() / (m * (T - 1))
    between = T * ((chain_means - grand_mean) ** 2).sum() / (m - 1)
    if between == 0.0:
        raise UndefinedESSError("all chain means identical; ESS undefined")
    return float(T * within / between)


def acf(x, max_lag: int) -> np.ndarray:
    """Autocorrelation with the bounded 1/T normalization, lags 0..max_lag."""
    x = np.asarray(x, dtype=float)
    T = x.size
    if T <= max_lag:
        raise ValueError("series shorter than requested lag range")
    centered = x - x.mean()
    denom = float((centered * centered).sum())
    if denom == 0.0:
        raise ValueError("zero-variance series has no autocorrelation")
    full = np.correlate(centered, centered, mode="full")
    return full[T - 1 : T + max_lag] / denom


def exact_moments(pmf: np.ndarray, values: np.ndarray):
    """First and second moments of a joint table over a shared value set.

    Returns (mean (d,), second (d,), cross (d, d) with E[s_i s_j] off the
    diagonal).
    """
    d = pmf.ndim
    mean = np.empty(d)
    second = np.empty(d)
    for i in range(d):
        marg = pmf.sum(axis=tuple(a for a in range(d) if a != i))
        mean[i] = marg @ values
        second[i] = marg @ values**2
    cross = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            if i == j:
                cross[i, j] = second[i]
                continue
            marg = pmf.sum(axis=tuple(a for a in range(d) if a not in (i, j)))
            if i > j:
                marg = marg.T
            cross[i, j] = values @ marg @ values
    return mean, second, cross


def moment_report(records, exact: dict | None = None) -> dict:
    """Across-chain squared bias and variance of E[s_i], E[s_i^2], E[s_i s_j].

    Per-chain estimates feed an across-chain mean (bias against the exact
    moments, when available) and variance; results are averaged over
    coordinates for the first two families and over index pairs for the
    cross moments.  Without exact moments the bias entries are None.
    """
    draws = [np.asarray(r.draws if isinstance(r, ChainRecord) else r, dtype=float) for r in records]
    if len(draws) < 2:
        raise ValueError("need at least two chains for across-chain variance")
    d = draws[0].shape[1]
    est_mean = np.stack([x.mean(axis=0) for x in draws])
    est_second = np.stack([(x**2).mean(axis=0) for x in draws])
    iu = np.triu_indices(d, k=1)
    est_cross = np.stack([(x.T @ x / x.shape[0])[iu] for x in draws])

    report = {}
    for name, est, truth in (
        ("mean", est_mean, None if exact is None else exact["mean"]),
        ("second", est_second, None if exact is None else exact["second"]),
        ("cross", est_cross, None if exact is None else exact["cross"][iu] if d > 1 else None),
    ):
        if est.shape[1] == 0:
            report[name] = {"bias2": None, "variance": None}
            continue
        across = est.mean(axis=0)
        variance = est.var(axis=0, ddof=1).mean()
        bias2 = None if truth is None else float(((across - truth) ** 2).mean())
        report[name] = {"bias2": bias2, "variance": float(variance)}
    return report


def write_metric_rows(path, rows):
    """Write diagnostics rows with the ``metric,coords,n_draws,mean,sd`` schema."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_CSV_HEADER)
        for metric, coords, n_draws, mean, sd in rows:
            writer.writerow([metric, coords, n_draws, repr(float(mean)), repr(float(sd))])
