"""Benchmark target distributions on finite product lattices.

A target couples a lattice support with a negative potential ``f`` (so that
pi(s) is proportional to exp(f(s))) and the gradient of ``f`` taken through
its natural continuous extension.  Evaluators are pure: repeated calls at the
same point return bit-identical values, and cached matrices are built once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EnumerationBudgetError

# Full-lattice enumeration cap (number of joint states).
ENUMERATION_BUDGET = 10**7


@dataclass(frozen=True)
class LatticeSpec:
    """Product support ``{a_1 < ... < a_K}^dim`` with one shared value set."""

    dim: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if self.dim < 1:
            raise ValueError("lattice dimension must be a positive integer")
        if values.ndim != 1 or values.size < 2:
            raise ValueError("lattice needs an ordered set of at least two values")
        if not np.all(np.diff(values) > 0):
            raise ValueError("lattice values must be strictly ascending")
        object.__setattr__(self, "values", values)

    @property
    def n_values(self) -> int:
        return int(self.values.size)

    def index_of(self, s) -> np.ndarray:
        """Map a lattice point (values) to per-coordinate indices."""
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.values, s), 0, self.n_values - 1)
        if not np.array_equal(self.values[idx], s):
            raise ValueError("point is not on the lattice")
        return idx

    def random_point(self, rng) -> np.ndarray:
        return self.values[rng.integers(0, self.n_values, size=self.dim)]


class TargetModel:
    """Evaluator contract shared by all targets.

    Subclasses implement ``f`` and ``grad_f`` for one lattice point; the
    batched variants default to loops and are overridden where a vectorized
    form exists.  ``quadratic_coeff`` is ``(W_true, b)`` whenever
    f(s) = 1/2 s^T W_true s + b^T s holds exactly, else ``None``.
    """

    quadratic_coeff = None

    def __init__(self, lattice: LatticeSpec):
        self.lattice = lattice

    def f(self, s) -> float:
        raise NotImplementedError

    def grad_f(self, s) -> np.ndarray:
        raise NotImplementedError

    def f_batch(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.f(p) for p in points])

    def grad_batch(self, points: np.ndarray) -> np.ndarray:
        return np.stack([self.grad_f(p) for p in points])


class QuadraticTarget(TargetModel):
    """Exactly-quadratic negative potential f(s) = 1/2 s^T W_true s + b^T s."""

    def __init__(self, lattice: LatticeSpec, w_true, b):
        super().__init__(lattice)
        w_true = np.asarray(w_true, dtype=float)
        b = np.asarray(b, dtype=float)
        d = lattice.dim
        if w_true.shape != (d, d):
            raise ValueError("W_true must be dim x dim")
        if b.shape != (d,):
            raise ValueError("b must have length dim")
        if not np.allclose(w_true, w_true.T, atol=1e-12):
            raise ValueError("W_true must be symmetric")
        self.W_true = w_true
        self.b = b
        self.quadratic_coeff = (self.W_true, self.b)

    def f(self, s) -> float:
        s = np.asarray(s, dtype=float)
        return float(0.5 * ((s @ self.W_true) * s).sum() + self.b @ s)

    def grad_f(self, s) -> np.ndarray:
        return np.asarray(s, dtype=float) @ self.W_true + self.b

    def f_batch(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return 0.5 * ((points @ self.W_true) * points).sum(axis=1) + points @ self.b

    def grad_batch(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.W_true + self.b


def integer_lattice(dim: int, k: int) -> LatticeSpec:
    """The symmetric integer lattice {-k, ..., k}^dim."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return LatticeSpec(dim, np.arange(-k, k + 1, dtype=float))


def discrete_gaussian(d: int, k: int, sigma: float, rho: float) -> QuadraticTarget:
    """Equi-correlated Gaussian potential restricted to {-k..k}^d.

    f(s) = -1/2 s^T Sigma^{-1} s with Sigma = sigma^2 [rho 11^T + (1-rho) I].
    The inverse is formed once through the rank-one update formula and cached
    inside the returned quadratic target (W_true = -Sigma^{-1}, b = 0).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    low = -1.0 / (d - 1) if d > 1 else -np.inf
    if not (low < rho < 1.0):
        raise ValueError(
            f"rho={rho} leaves the covariance indefinite; need {low} < rho < 1"
        )
    lattice = integer_lattice(d, k)
    # (c I + g 11^T)^-1 = (1/c)(I - g/(c + d g) 11^T), c = sigma^2 (1-rho)
    c = sigma**2 * (1.0 - rho)
    shrink = rho / (1.0 - rho + d * rho)
    sigma_inv = (np.eye(d) - shrink * np.ones((d, d))) / c
    sigma_inv = 0.5 * (sigma_inv + sigma_inv.T)
    return QuadraticTarget(lattice, -sigma_inv, np.zeros(d))


class MixtureTarget(TargetModel):
    """Log-sum of isotropic Gaussian kernels, evaluated with log-sum-exp."""

    def __init__(self, lattice: LatticeSpec, means, variances):
        super().__init__(lattice)
        means = np.asarray(means, dtype=float)
        variances = np.asarray(variances, dtype=float)
        if means.ndim != 2 or means.shape[1] != lattice.dim:
            raise ValueError("means must be (n_components, dim)")
        if variances.shape != (means.shape[0],):
            raise ValueError("variances must have one entry per component")
        if np.any(variances <= 0):
            raise ValueError("component variances must be positive")
        self.means = means
        self.variances = variances

    def _log_kernels(self, s):
        diff = s - self.means
        return -0.5 * (diff * diff).sum(axis=1) / self.variances

    def f(self, s) -> float:
        return float(logsumexp(self._log_kernels(np.asarray(s, dtype=float))))

    def grad_f(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        lk = self._log_kernels(s)
        w = np.exp(lk - logsumexp(lk))
        return ((self.means - s) / self.variances[:, None] * w[:, None]).sum(axis=0)

    def f_batch(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        diff = points[:, None, :] - self.means[None, :, :]
        lk = -0.5 * (diff * diff).sum(axis=2) / self.variances[None, :]
        return logsumexp(lk, axis=1)

    def grad_batch(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        diff = self.means[None, :, :] - points[:, None, :]
        lk = -0.5 * (diff * diff).sum(axis=2) / self.variances[None, :]
        w = np.exp(lk - logsumexp(lk, axis=1)[:, None])
        return (diff / self.variances[None, :, None] * w[:, :, None]).sum(axis=1)


def quadratic_mixture(
    d: int = 10,
    k: int = 10,
    M: int = 9,
    means=None,
    variances=None,
) -> MixtureTarget:
    """Mixture-of-quadratics benchmark on {-k..k}^d.

    With the default arguments the component means are equally spaced along
    the diagonal, mu_m = (-5.625 + 1.125 m) * 1 for m = 1..M, and outer
    components get larger variances, sigma_m^2 = 2.10 + 0.15 |m - 5|.
    """
    if M < 1:
        raise ValueError("need at least one mixture component")
    if means is None:
        means = np.stack(
            [(-5.625 + 1.125 * m) * np.ones(d) for m in range(1, M + 1)]
        )
    if variances is None:
        variances = np.array([2.10 + 0.15 * abs(m - 5) for m in range(1, M + 1)])
    return MixtureTarget(integer_lattice(d, k), means, variances)


class ClockPottsTarget(TargetModel):
    """Planar-rotor spins on a periodic square lattice.

    Spins live on an LxL torus and take values {0..q-1}, mapped to angles
    theta_i = 2 pi s_i / q.  The energy sums cos(theta_i - theta_j) over the
    right and down neighbor of every site (2 L^2 edge terms; on the 2x2
    torus each physical pair therefore appears twice).
    """

    def __init__(self, side: int, q: int, coupling: float):
        if side < 2:
            raise ValueError("side must be >= 2")
        if q < 2:
            raise ValueError("q must be >= 2")
        d = side * side
        super().__init__(LatticeSpec(d, np.arange(q, dtype=float)))
        self.side = side
        self.q = q
        self.coupling = float(coupling)
        self.angle_scale = 2.0 * np.pi / q
        sites = np.arange(d).reshape(side, side)
        right = np.roll(sites, -1, axis=1).reshape(-1)
        down = np.roll(sites, -1, axis=0).reshape(-1)
        left = np.roll(sites, 1, axis=1).reshape(-1)
        up = np.roll(sites, 1, axis=0).reshape(-1)
        self._edge_ends = right, down
        self._neighbors = np.stack([right, left, down, up], axis=1)

    def f(self, s) -> float:
        theta = np.asarray(s, dtype=float) * self.angle_scale
        right, down = self._edge_ends
        return self.coupling * float(
            np.cos(theta - theta[right]).sum() + np.cos(theta - theta[down]).sum()
        )

    def grad_f(self, s) -> np.ndarray:
        theta = np.asarray(s, dtype=float) * self.angle_scale
        return (
            -self.coupling
            * self.angle_scale
            * np.sin(theta[:, None] - theta[self._neighbors]).sum(axis=1)
        )

    def f_batch(self, points) -> np.ndarray:
        theta = np.asarray(points, dtype=float) * self.angle_scale
        right, down = self._edge_ends
        return self.coupling * (
            np.cos(theta - theta[:, right]).sum(axis=1)
            + np.cos(theta - theta[:, down]).sum(axis=1)
        )

    def grad_batch(self, points) -> np.ndarray:
        theta = np.asarray(points, dtype=float) * self.angle_scale
        return (
            -self.coupling
            * self.angle_scale
            * np.sin(theta[:, :, None] - theta[:, self._neighbors]).sum(axis=2)
        )


def clock_potts(side: int, q: int, coupling: float = 1.0) -> ClockPottsTarget:
    """Periodic clock-spin benchmark; ``coupling`` +1 ferro, -1 antiferro."""
    return ClockPottsTarget(side, q, coupling)


def enumerate_joint(target: TargetModel, coords=None, budget: int = ENUMERATION_BUDGET):
    """Exact pmf table of the requested coordinate tuple.

    Sums exp(f(s) - max f) over the whole lattice, then marginalizes onto
    ``coords`` (all coordinates when None).  Raises
    :class:`EnumerationBudgetError` when K^d exceeds ``budget``.
    """
    lattice = target.lattice
    K, d = lattice.n_values, lattice.dim
    total = K**d
    if total > budget:
        raise EnumerationBudgetError(
            f"enumeration of {K}^{d} = {total} states exceeds budget {budget}"
        )
    if coords is None:
        coords = tuple(range(d))
    coords = tuple(int(c) for c in coords)
    if len(coords) == 0:
        raise ValueError("coords must name at least one coordinate")
    if len(set(coords)) != len(coords) or not all(0 <= c < d for c in coords):
        raise ValueError("coords must be distinct coordinate indices")

    shape = (K,) * d
    energies = np.empty(total)
    chunk = 1 << 15
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        idx = np.unravel_index(np.arange(start, stop), shape)
        pts = lattice.values[np.stack(idx, axis=1)]
        energies[start:stop] = target.f_batch(pts)

    weights = np.exp(energies - energies.max()).reshape(shape)
    other = tuple(ax for ax in range(d) if ax not in coords)
    table = weights.sum(axis=other) if other else weights
    # remaining axes are sorted(coords); permute into the requested order
    order = [sorted(coords).index(c) for c in coords]
    table = np.transpose(table, order)
    table = table / table.sum()
    return table
