"""Preconditioner calibration: coupling-matrix estimation from burn-in samples,
diagonal shift selection, and condition-number-driven factorization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lstsq, solve_continuous_lyapunov

from .errors import CalibrationError, RankDeficiencyError
from .targets import TargetModel

# Relative eigenvalue floor below which the Gram matrix of state moves is
# treated as singular.
RANK_TOL = 1e-10

# Largest dimension for which the dense Kronecker system is allowed.
KRON_MAX_DIM = 32


@dataclass(frozen=True)
class Preconditioner:
    """Symmetric coupling matrix W, diagonal shift lam (D = lam I), and a
    factor L with W + lam I = L L^T, plus cached inverse-transpose and
    log-determinant data."""

    W: np.ndarray
    lam: float
    L: np.ndarray
    L_inv_T: np.ndarray
    factorization_kind: str
    W_shifted: np.ndarray = field(repr=False, default=None)
    logdet: float = 0.0

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(),
            "lambda": self.lam,
            "L": self.L.tolist(),
            "kind": self.factorization_kind,
            "logdet": self.logdet,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Preconditioner":
        w = np.asarray(payload["W"], dtype=float)
        lam = float(payload["lambda"])
        ell = np.asarray(payload["L"], dtype=float)
        return cls(
            W=w,
            lam=lam,
            L=ell,
            L_inv_T=np.linalg.inv(ell.T),
            factorization_kind=payload["kind"],
            W_shifted=w + lam * np.eye(w.shape[0]),
            logdet=float(payload.get("logdet", 0.0)),
        )


@dataclass
class CalibrationSample:
    """Burn-in trajectory: states s_1..s_{T+1} with matching gradients and
    energies.  Consecutive duplicates are allowed (rejected moves) but the
    distinct difference vectors must span the space for calibration."""

    states: np.ndarray
    grads: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.grads = np.asarray(self.grads, dtype=float)
        self.energies = np.asarray(self.energies, dtype=float)
        n = self.states.shape[0]
        if n < 2:
            raise ValueError("calibration needs at least two states")
        if self.grads.shape != self.states.shape:
            raise ValueError("grads must match states in shape")
        if self.energies.shape != (n,):
            raise ValueError("energies must match states in length")

    @classmethod
    def from_states(cls, target: TargetModel, states) -> "CalibrationSample":
        states = np.asarray(states, dtype=float)
        return cls(states, target.grad_batch(states), target.f_batch(states))

    def differences(self):
        """State and gradient one-step differences with zero moves dropped."""
        ds = np.diff(self.states, axis=0)
        df = np.diff(self.grads, axis=0)
        keep = np.any(ds != 0.0, axis=1)
        return ds[keep], df[keep], keep


def calibrate_w_gradient_diff(sample: CalibrationSample, method: str = "lyapunov") -> np.ndarray:
    """Estimate W by matching gradient differences to W times state moves.

    Solves the symmetric-constrained least-squares stationarity equation
    (Ds^T Ds) W + W (Ds^T Ds) = Ds^T Df + Df^T Ds, either with the
    Bartels-Stewart continuous-Lyapunov solver or, for small dimension, the
    dense Kronecker linear system.
    """
    ds, df, _ = sample.differences()
    d = ds.shape[1]
    if ds.shape[0] < d:
        raise RankDeficiencyError(
            f"only {ds.shape[0]} distinct moves for dimension {d}; sample more burn-in"
        )
    gram = ds.T @ ds
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= RANK_TOL * eigvals[-1]:
        raise RankDeficiencyError(
            "state moves do not span the space (Gram matrix numerically singular)"
        )
    rhs = ds.T @ df + df.T @ ds
    if method == "lyapunov":
        w = solve_continuous_lyapunov(gram, rhs)
    elif method == "kron":
        if d > KRON_MAX_DIM:
            raise CalibrationError(f"Kronecker solve limited to dim <= {KRON_MAX_DIM}")
        eye = np.eye(d)
        system = np.kron(eye, gram) + np.kron(gram, eye)
        w = np.linalg.solve(system, rhs.reshape(-1)).reshape(d, d)
    else:
        raise ValueError(f"unknown solver {method!r}; use 'lyapunov' or 'kron'")
    return 0.5 * (w + w.T)


def _vech_indices(d: int):
    return [(i, j) for i in range(d) for j in range(i, d)]


def calibrate_w_energy_diff(sample: CalibrationSample) -> np.ndarray:
    """Estimate W by least squares on second-order energy-difference residuals.

    Each move contributes a_t = f(s_{t+1}) - f(s_t) - grad f(s_t)^T (s_{t+1}-s_t)
    regressed on the half-vectorized outer product of the move, solved by a
    rank-revealing orthogonal factorization.
    """
    ds, _, keep = sample.differences()
    d = ds.shape[1]
    n_par = d * (d + 1) // 2
    grads = sample.grads[:-1][keep]
    e = sample.energies
    a = (e[1:] - e[:-1])[keep] - (grads * ds).sum(axis=1)

    pairs = _vech_indices(d)
    design = np.empty((ds.shape[0], n_par))
    for col, (i, j) in enumerate(pairs):
        if i == j:
            design[:, col] = 0.5 * ds[:, i] * ds[:, i]
        else:
            design[:, col] = ds[:, i] * ds[:, j]
    if ds.shape[0] < n_par:
        raise RankDeficiencyError(
            f"{ds.shape[0]} distinct moves cannot identify {n_par} matrix entries"
        )
    solution, _, rank, _ = lstsq(design, a, lapack_driver="gelsy")
    if rank < n_par:
        raise RankDeficiencyError(
            f"design matrix rank {rank} < {n_par}; moves do not identify W"
        )
    w = np.zeros((d, d))
    for col, (i, j) in enumerate(pairs):
        w[i, j] = solution[col]
        w[j, i] = solution[col]
    return w


def lambda_shift(w: np.ndarray, delta: float) -> float:
    """Diagonal shift making W + lam I positive definite with floor delta.

    lam = delta - min(0, lambda_min(W)), so the smallest eigenvalue of the
    shifted matrix equals delta when W has a nonpositive eigenvalue and
    lambda_min(W) + delta otherwise.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    w = np.asarray(w, dtype=float)
    lam_min = float(np.linalg.eigvalsh(w)[0])
    return delta - min(0.0, lam_min)


def factorize(w: np.ndarray, lam: float, cond_threshold: float = 100.0) -> Preconditioner:
    """Factor W + lam I = L L^T, choosing the factor by condition number.

    Below ``cond_threshold`` L is the lower-triangular Cholesky factor;
    otherwise L = U Lambda^{1/2} from the eigendecomposition (eigenvalues
    sorted descending for reproducibility).
    """
    w = np.asarray(w, dtype=float)
    d = w.shape[0]
    shifted = w + lam * np.eye(d)
    eigvals = np.linalg.eigvalsh(shifted)
    if eigvals[0] <= 0:
        raise CalibrationError(
            f"W + lambda I is not positive definite (min eigenvalue {eigvals[0]:.3e})"
        )
    cond = eigvals[-1] / eigvals[0]
    if cond < cond_threshold:
        try:
            ell = np.linalg.cholesky(shifted)
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(f"Cholesky factorization failed: {exc}") from exc
        kind = "cholesky"
    else:
        vals, vecs = np.linalg.eigh(shifted)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        ell = vecs * np.sqrt(vals)[None, :]
        kind = "eigen"
    return Preconditioner(
        W=w,
        lam=float(lam),
        L=ell,
        L_inv_T=np.linalg.inv(ell.T),
        factorization_kind=kind,
        W_shifted=shifted,
        logdet=float(np.log(eigvals).sum()),
    )


def first_order_preconditioner(dim: int, delta: float, cond_threshold: float = 100.0) -> Preconditioner:
    """The W = 0 specialization: lam = delta and L = sqrt(delta) I."""
    w = np.zeros((dim, dim))
    return factorize(w, lambda_shift(w, delta), cond_threshold)


def exact_quadratic_preconditioner(
    target: TargetModel, delta: float, cond_threshold: float = 100.0
) -> Preconditioner:
    """Use the target's true quadratic coefficient matrix as W."""
    if target.quadratic_coeff is None:
        raise CalibrationError("target has no exact quadratic coefficient matrix")
    w_true, _ = target.quadratic_coeff
    return factorize(w_true, lambda_shift(w_true, delta), cond_threshold)


def scaling_check(target: TargetModel, c: float, sample: CalibrationSample, method: str = "gradient_diff"):
    """Calibrate on the sample and on its rescaled copy (states times c).

    Under y = c s the energies are unchanged and gradients scale by 1/c; the
    returned pair (W_s, W_y) satisfies W_y = W_s / c^2 up to solver noise.
    """
    del target  # states/grads/energies already carry everything needed
    if c == 0:
        raise ValueError("scale factor must be nonzero")
    if method == "gradient_diff":
        calibrate = calibrate_w_gradient_diff
    elif method == "energy_diff":
        calibrate = calibrate_w_energy_diff
    else:
        raise ValueError(f"unknown calibration method {method!r}")
    w_s = calibrate(sample)
    scaled = CalibrationSample(
        states=c * sample.states,
        grads=sample.grads / c,
        energies=sample.energies,
    )
    w_y = calibrate(scaled)
    return w_s, w_y
