"""Transition kernels: auxiliary-variable Gibbs, preconditioned gradient
proposals with and without momentum, over-relaxed state updates, and a
random-walk Metropolis baseline.

Randomness consumption per step is fixed so that shared-seed comparisons are
well defined:

* ``git_gibbs`` / ``pavg``: d standard normals, d coordinate uniforms
  (ascending), one acceptance uniform (drawn and ignored by ``git_gibbs``).
* ``vpdhams``: d standard normals (momentum refresh), d coordinate uniforms,
  one acceptance uniform.
* ``opdhams``: d standard normals, two uniforms per coordinate ascending
  (interval draw, reflection draw), one acceptance uniform.
* ``metropolis``: d coordinate uniforms, one acceptance uniform.

At exactly ``epsilon = 1`` the refresh is degenerate (the intermediate
momentum equals the current momentum) and the momentum kernels skip the
normal draws entirely.

Each solo step accepts an optional pre-drawn ``noise`` tuple in the same
order, which substitutes for the generator draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InvalidStateError, NumericGuardError
from .precondition import Preconditioner, first_order_preconditioner
from .proposals import (
    LOG_FLOOR,
    build_proposal,
    over_relax_log_prob,
    over_relax_log_prob_rows,
    over_relax_rows_from_cdf,
    over_relax_sample_rows,
    sample_rows_inverse_cdf,
)
from .targets import TargetModel

KERNELS = ("metropolis", "git_gibbs", "pavg", "vpdhams", "opdhams")
MOMENTUM_KERNELS = ("vpdhams", "opdhams")


@dataclass(frozen=True)
class SamplerConfig:
    """Tuning parameters; each kernel reads only its relevant fields."""

    epsilon: float = 0.9
    delta: float = 0.1
    phi: float = 0.0
    beta: float = 1.0
    r: int = 1

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.phi < 0.0:
            raise ValueError("phi must be nonnegative")
        if self.r < 1:
            raise ValueError("r must be a positive integer")


@dataclass
class ChainState:
    """Lattice point plus, for momentum kernels, the transformed momentum."""

    s: np.ndarray
    v: np.ndarray | None = None


@dataclass
class StepOutcome:
    next: ChainState
    accepted: bool
    log_accept_ratio: float
    proposal: np.ndarray


def momentum_init(pre: Preconditioner, rng) -> np.ndarray:
    """Stationary momentum draw, distributed N(0, (W + lam I)^-1)."""
    return rng.standard_normal(pre.dim) @ pre.L_inv_T.T


def _refresh_momentum(v, eps, refresh, pre):
    """Partial momentum refresh; the eps = 1 boundary keeps v unchanged."""
    if eps == 1.0:
        return v
    return eps * v + math.sqrt(1.0 - eps * eps) * (refresh @ pre.L_inv_T.T)


def _sq(x: np.ndarray) -> float:
    return float((x * x).sum())


def _require_quadratic_match(target: TargetModel, pre: Preconditioner):
    if target.quadratic_coeff is None:
        raise ContractError("auxiliary Gibbs requires an exactly quadratic target")
    w_true, _ = target.quadratic_coeff
    if not np.allclose(w_true, pre.W, atol=1e-10, rtol=0.0):
        raise ContractError("preconditioner W does not match the target's quadratic matrix")


def git_gibbs_step(state: ChainState, target: TargetModel, pre: Preconditioner, rng, noise=None) -> StepOutcome:
    """Auxiliary-variable Gibbs sweep for quadratic targets; never rejects.

    Consumes the same variate pattern as the accept-reject kernels so that
    shared-seed trajectory comparisons line up step for step.
    """
    _require_quadratic_match(target, pre)
    lattice = target.lattice
    d = lattice.dim
    if noise is None:
        z_noise, coord_u, _ = rng.standard_normal(d), rng.random(d), rng.random()
    else:
        z_noise, coord_u, _ = noise
    s = state.s
    z = s + z_noise @ pre.L_inv_T.T
    fwd = build_proposal(target.grad_f(s), s, z, pre, lattice.values)
    idx_star = sample_rows_inverse_cdf(fwd.pmf_rows(), coord_u)
    s_star = lattice.values[idx_star]
    return StepOutcome(ChainState(s_star, None), True, 0.0, s_star)


def pavg_step(state: ChainState, target: TargetModel, pre: Preconditioner, rng, noise=None) -> StepOutcome:
    """Preconditioned auxiliary-variable step (momentum-free kernel)."""
    lattice = target.lattice
    d = lattice.dim
    if noise is None:
        z_noise, coord_u, acc_u = rng.standard_normal(d), rng.random(d), rng.random()
    else:
        z_noise, coord_u, acc_u = noise
    s = state.s
    z = s + z_noise @ pre.L_inv_T.T
    fwd = build_proposal(target.grad_f(s), s, z, pre, lattice.values)
    idx_star = sample_rows_inverse_cdf(fwd.pmf_rows(), coord_u)
    s_star = lattice.values[idx_star]
    bwd = build_proposal(target.grad_f(s_star), s_star, z, pre, lattice.values)
    idx_t = lattice.index_of(s)
    delta = (
        target.f(s_star)
        - target.f(s)
        - 0.5 * _sq((z - s_star) @ pre.L)
        + 0.5 * _sq((z - s) @ pre.L)
        + bwd.log_prob_indices(idx_t)
        - fwd.log_prob_indices(idx_star)
    )
    if not math.isfinite(delta):
        raise NumericGuardError("non-finite acceptance log-ratio")
    accepted = delta >= 0.0 or acc_u < math.exp(min(delta, 0.0))
    next_s = s_star if accepted else s
    return StepOutcome(ChainState(next_s, None), accepted, float(delta), s_star)


def vpdhams_transition_terms(s_t, v_half, s_star, target: TargetModel, pre: Preconditioner, config: SamplerConfig):
    """Closed-form quantities of the momentum kernel for a given proposal.

    Returns a dict with the deterministic momentum proposal ``v_star``, the
    normalized forward/backward proposal log-probabilities, the joint
    log-densities (up to the shared constant) of the endpoints, and the
    acceptance log-ratio ``delta``.
    """
    lattice = target.lattice
    values = lattice.values
    grad_t = target.grad_f(s_t)
    grad_star = target.grad_f(s_star)
    z_f = s_t - v_half
    v_star = -v_half + s_t - s_star + config.phi * (grad_star - grad_t + (s_t - s_star) @ pre.W)
    z_b = s_star + v_star
    fwd = build_proposal(grad_t, s_t, z_f, pre, values)
    bwd = build_proposal(grad_star, s_star, z_b, pre, values)
    idx_t = lattice.index_of(s_t)
    idx_star = lattice.index_of(s_star)
    log_q_fwd = fwd.log_prob_indices(idx_star)
    log_q_bwd = bwd.log_prob_indices(idx_t)
    log_joint_fwd = target.f(s_t) - 0.5 * _sq(v_half @ pre.L)
    log_joint_bwd = target.f(s_star) - 0.5 * _sq(v_star @ pre.L)
    delta = log_joint_bwd - log_joint_fwd + log_q_bwd - log_q_fwd
    return {
        "v_star": v_star,
        "delta": float(delta),
        "log_q_fwd": log_q_fwd,
        "log_q_bwd": log_q_bwd,
        "log_joint_fwd": log_joint_fwd,
        "log_joint_bwd": log_joint_bwd,
        "forward_proposal": fwd,
    }


def vpdhams_step(state: ChainState, target: TargetModel, pre: Preconditioner, config: SamplerConfig, rng, noise=None) -> StepOutcome:
    """Momentum kernel: partial refresh, negated-momentum proposal, gradient
    correction, generalized Metropolis acceptance.  Rejection stores the
    negated intermediate momentum."""
    if state.v is None:
        raise InvalidStateError("momentum kernel requires a state with momentum")
    lattice = target.lattice
    d = lattice.dim
    eps = config.epsilon
    if noise is None:
        refresh = rng.standard_normal(d) if eps < 1.0 else None
        coord_u, acc_u = rng.random(d), rng.random()
    else:
        refresh, coord_u, acc_u = noise
    s = state.s
    v_half = _refresh_momentum(state.v, eps, refresh, pre)
    z = s - v_half
    fwd = build_proposal(target.grad_f(s), s, z, pre, lattice.values)
    idx_star = sample_rows_inverse_cdf(fwd.pmf_rows(), coord_u)
    s_star = lattice.values[idx_star]
    terms = vpdhams_transition_terms(s, v_half, s_star, target, pre, config)
    delta = terms["delta"]
    if not math.isfinite(delta):
        raise NumericGuardError("non-finite acceptance log-ratio")
    accepted = delta >= 0.0 or acc_u < math.exp(min(delta, 0.0))
    if accepted:
        nxt = ChainState(s_star, terms["v_star"])
    else:
        nxt = ChainState(s, -v_half)
    return StepOutcome(nxt, accepted, delta, s_star)


def opdhams_transition_terms(s_t, v_half, s_star, target: TargetModel, pre: Preconditioner, config: SamplerConfig):
    """Like :func:`vpdhams_transition_terms` but with over-relaxed proposal
    probabilities computed from the exact conditional law per coordinate."""
    lattice = target.lattice
    values = lattice.values
    beta = config.beta
    grad_t = target.grad_f(s_t)
    grad_star = target.grad_f(s_star)
    z_f = s_t - v_half
    v_star = -v_half + s_t - s_star + config.phi * (grad_star - grad_t + (s_t - s_star) @ pre.W)
    z_b = s_star + v_star
    fwd = build_proposal(grad_t, s_t, z_f, pre, values)
    bwd = build_proposal(grad_star, s_star, z_b, pre, values)
    idx_t = lattice.index_of(s_t)
    idx_star = lattice.index_of(s_star)
    pmf_f = fwd.pmf_rows()
    pmf_b = bwd.pmf_rows()
    log_q_fwd = sum(
        over_relax_log_prob(pmf_f[j], int(idx_t[j]), int(idx_star[j]), beta) for j in range(lattice.dim)
    )
    log_q_bwd = sum(
        over_relax_log_prob(pmf_b[j], int(idx_star[j]), int(idx_t[j]), beta) for j in range(lattice.dim)
    )
    log_joint_fwd = target.f(s_t) - 0.5 * _sq(v_half @ pre.L)
    log_joint_bwd = target.f(s_star) - 0.5 * _sq(v_star @ pre.L)
    delta = log_joint_bwd - log_joint_fwd + log_q_bwd - log_q_fwd
    return {
        "v_star": v_star,
        "delta": float(delta),
        "log_q_fwd": log_q_fwd,
        "log_q_bwd": log_q_bwd,
        "log_joint_fwd": log_joint_fwd,
        "log_joint_bwd": log_joint_bwd,
        "forward_proposal": fwd,
    }


def opdhams_step(state: ChainState, target: TargetModel, pre: Preconditioner, config: SamplerConfig, rng, noise=None) -> StepOutcome:
    """Momentum kernel with the state proposed coordinate-wise by CDF-space
    over-relaxation around the current point."""
    if state.v is None:
        raise InvalidStateError("momentum kernel requires a state with momentum")
    lattice = target.lattice
    d = lattice.dim
    eps = config.epsilon
    if noise is None:
        refresh = rng.standard_normal(d) if eps < 1.0 else None
        pairs = rng.random((d, 2))
        acc_u = rng.random()
    else:
        refresh, pairs, acc_u = noise
    s = state.s
    v_half = _refresh_momentum(state.v, eps, refresh, pre)
    z = s - v_half
    fwd = build_proposal(target.grad_f(s), s, z, pre, lattice.values)
    pmf = fwd.pmf_rows()
    idx_t = lattice.index_of(s)
    idx_star = over_relax_sample_rows(pmf, idx_t, config.beta, pairs[:, 0], pairs[:, 1])
    s_star = lattice.values[idx_star]
    terms = opdhams_transition_terms(s, v_half, s_star, target, pre, config)
    delta = terms["delta"]
    if not math.isfinite(delta):
        raise NumericGuardError("non-finite acceptance log-ratio")
    accepted = delta >= 0.0 or acc_u < math.exp(min(delta, 0.0))
    if accepted:
        nxt = ChainState(s_star, terms["v_star"])
    else:
        nxt = ChainState(s, -v_half)
    return StepOutcome(nxt, accepted, delta, s_star)


def metropolis_step(state: ChainState, target: TargetModel, r: int, rng, noise=None) -> StepOutcome:
    """Random-walk baseline: per coordinate, propose uniformly among values
    within index distance ``r`` (clipped at the lattice ends, current value
    permitted), with the clipping asymmetry corrected in the acceptance."""
    if r < 1:
        raise ValueError("r must be >= 1")
    lattice = target.lattice
    K = lattice.n_values
    d = lattice.dim
    if noise is None:
        coord_u, acc_u = rng.random(d), rng.random()
    else:
        coord_u, acc_u = noise
    idx = lattice.index_of(state.s)
    lo = np.maximum(idx - r, 0)
    hi = np.minimum(idx + r, K - 1)
    width = hi - lo + 1
    idx_star = lo + np.minimum((coord_u * width).astype(np.int64), width - 1)
    s_star = lattice.values[idx_star]
    lo_b = np.maximum(idx_star - r, 0)
    hi_b = np.minimum(idx_star + r, K - 1)
    width_b = hi_b - lo_b + 1
    delta = (
        target.f(s_star)
        - target.f(state.s)
        + float(np.log(width).sum())
        - float(np.log(width_b).sum())
    )
    accepted = delta >= 0.0 or acc_u < math.exp(min(delta, 0.0))
    next_s = s_star if accepted else state.s
    return StepOutcome(ChainState(next_s, None), accepted, float(delta), s_star)


@dataclass(frozen=True)
class BoundKernel:
    """A kernel id with a preconditioner already attached."""

    kernel_id: str
    pre: Preconditioner

    def step(self, state, target, config, rng, noise=None):
        return step_kernel(self.kernel_id, state, target, self.pre, config, rng, noise)


def first_order_specialize(kernel: str, delta: float, dim: int, cond_threshold: float = 100.0) -> BoundKernel:
    """The W = 0 specialization of a preconditioned kernel: lam = delta and
    L = sqrt(delta) I.  Labeled a first-order specialization in outputs."""
    if kernel not in ("pavg", "vpdhams", "opdhams"):
        raise ValueError("first-order specialization applies to pavg/vpdhams/opdhams")
    return BoundKernel(kernel, first_order_preconditioner(dim, delta, cond_threshold))


def step_kernel(kernel_id: str, state: ChainState, target: TargetModel, pre, config: SamplerConfig, rng, noise=None) -> StepOutcome:
    """Uniform dispatcher over the kernel registry."""
    if kernel_id == "metropolis":
        return metropolis_step(state, target, config.r, rng, noise)
    if kernel_id == "git_gibbs":
        return git_gibbs_step(state, target, pre, rng, noise)
    if kernel_id == "pavg":
        return pavg_step(state, target, pre, rng, noise)
    if kernel_id == "vpdhams":
        return vpdhams_step(state, target, pre, config, rng, noise)
    if kernel_id == "opdhams":
        return opdhams_step(state, target, pre, config, rng, noise)
    raise ValueError(f"unknown kernel {kernel_id!r}")


@dataclass
class ChainRunResult:
    """Lockstep multi-chain run output: per-chain draw indices into the
    lattice values, energies of the recorded states, and per-step acceptance
    flags."""

    indices: np.ndarray
    energies: np.ndarray
    accepted: np.ndarray

    @property
    def n_chains(self) -> int:
        return self.indices.shape[0]


def _log_rows_batch(coeff, lam, values, quad_term):
    logits = quad_term + coeff[..., None] * values
    peak = logits.max(axis=-1)
    log_norms = np.log(np.exp(logits - peak[..., None]).sum(axis=-1)) + peak
    return np.maximum(logits - log_norms[..., None], LOG_FLOOR)


def _take_point_logprob(log_rows, idx):
    return np.take_along_axis(log_rows, idx[..., None], axis=-1)[..., 0].sum(axis=-1)


def run_chains(
    kernel_id: str,
    target: TargetModel,
    pre: Preconditioner | None,
    config: SamplerConfig,
    n_steps: int,
    rngs,
    init_indices: np.ndarray,
) -> ChainRunResult:
    """Advance independent chains in lockstep with per-chain generators.

    Chain ``i`` consumes exactly the variates its solo ``*_step`` twin would,
    in the same order, so a one-chain lockstep run reproduces the solo
    trajectory bit for bit.  Momentum kernels draw their initial momentum
    from each chain's generator before the first step.
    """
    if kernel_id not in KERNELS:
        raise ValueError(f"unknown kernel {kernel_id!r}")
    lattice = target.lattice
    m = len(rngs)
    d = lattice.dim
    idx = np.asarray(init_indices, dtype=np.int64)
    if idx.shape != (m, d):
        raise ValueError("init_indices must be (n_chains, dim)")

    out_idx = np.empty((m, n_steps, d), dtype=np.int16)
    out_energy = np.empty((m, n_steps))
    out_accept = np.empty((m, n_steps), dtype=bool)

    if kernel_id == "metropolis":
        _run_metropolis(target, config, n_steps, rngs, idx, out_idx, out_energy, out_accept)
    else:
        if pre is None:
            raise ValueError(f"kernel {kernel_id!r} requires a preconditioner")
        if kernel_id == "git_gibbs":
            _require_quadratic_match(target, pre)
        _run_product_family(
            kernel_id, target, pre, config, n_steps, rngs, idx, out_idx, out_energy, out_accept
        )
    return ChainRunResult(out_idx, out_energy, out_accept)


def _run_metropolis(target, config, n_steps, rngs, idx, out_idx, out_energy, out_accept):
    lattice = target.lattice
    vals = lattice.values
    K = lattice.n_values
    m, d = idx.shape
    r = config.r
    S = vals[idx]
    F = target.f_batch(S)
    coord_u = np.empty((m, d))
    acc_u = np.empty(m)
    for t in range(n_steps):
        for i, g in enumerate(rngs):
            coord_u[i] = g.random(d)
        lo = np.maximum(idx - r, 0)
        hi = np.minimum(idx + r, K - 1)
        width = hi - lo + 1
        idx_star = lo + np.minimum((coord_u * width).astype(np.int64), width - 1)
        S_star = vals[idx_star]
        F_star = target.f_batch(S_star)
        width_b = np.minimum(idx_star + r, K - 1) - np.maximum(idx_star - r, 0) + 1
        delta = F_star - F + np.log(width).sum(axis=1) - np.log(width_b).sum(axis=1)
        for i, g in enumerate(rngs):
            acc_u[i] = g.random()
        accept = (delta >= 0.0) | (acc_u < np.exp(np.minimum(delta, 0.0)))
        idx = np.where(accept[:, None], idx_star, idx)
        F = np.where(accept, F_star, F)
        out_idx[:, t] = idx
        out_energy[:, t] = F
        out_accept[:, t] = accept


def _run_product_family(kernel_id, target, pre, config, n_steps, rngs, idx, out_idx, out_energy, out_accept):
    lattice = target.lattice
    vals = lattice.values
    m, d = idx.shape
    momentum = kernel_id in MOMENTUM_KERNELS
    over_relaxed = kernel_id == "opdhams"
    gibbs = kernel_id == "git_gibbs"

    W = pre.W
    Wl = pre.W_shifted
    L = pre.L
    LinvT_T = pre.L_inv_T.T
    lam = pre.lam
    quad_term = -0.5 * lam * vals**2
    eps = config.epsilon
    refresh_scale = math.sqrt(1.0 - eps * eps)
    phi = config.phi
    beta = config.beta

    S = vals[idx]
    F = target.f_batch(S)
    G = target.grad_batch(S)
    V = None
    if momentum:
        V = np.empty((m, d))
        for i, g in enumerate(rngs):
            V[i] = g.standard_normal(d) @ LinvT_T

    normals = np.empty((m, d))
    coord_u = np.empty((m, d))
    pairs = np.empty((m, d, 2))
    acc_u = np.empty(m)

    degenerate_refresh = momentum and eps == 1.0
    for t in range(n_steps):
        if not degenerate_refresh:
            for i, g in enumerate(rngs):
                normals[i] = g.standard_normal(d)
        if momentum:
            v_half = V if degenerate_refresh else eps * V + refresh_scale * (normals @ LinvT_T)
            z = S - v_half
        else:
            z = S + normals @ LinvT_T
        coeff = G - S @ W
        coeff = coeff + z @ Wl
        if not np.all(np.isfinite(coeff)):
            raise NumericGuardError("non-finite proposal logits")
        log_rows = _log_rows_batch(coeff, lam, vals, quad_term)
        pmf = np.exp(log_rows)

        if over_relaxed:
            for i, g in enumerate(rngs):
                pairs[i] = g.random((d, 2))
            cdf_f = np.cumsum(pmf, axis=-1)
            cdf_f[..., -1] = 1.0
            idx_star = over_relax_rows_from_cdf(cdf_f, idx, beta, pairs[..., 0], pairs[..., 1])
            lp_f = over_relax_log_prob_rows(cdf_f, idx, idx_star, beta).sum(axis=-1)
        else:
            for i, g in enumerate(rngs):
                coord_u[i] = g.random(d)
            idx_star = sample_rows_inverse_cdf(pmf, coord_u)
            lp_f = _take_point_logprob(log_rows, idx_star)

        S_star = vals[idx_star]
        F_star = target.f_batch(S_star)

        if gibbs:
            for i, g in enumerate(rngs):
                acc_u[i] = g.random()  # parity with the accept-reject kernels
            idx = idx_star
            S = S_star
            F = F_star
            G = target.grad_batch(S_star)
            out_idx[:, t] = idx
            out_energy[:, t] = F
            out_accept[:, t] = True
            continue

        G_star = target.grad_batch(S_star)
        if momentum:
            v_star = -v_half + S - S_star + phi * (G_star - G + (S - S_star) @ W)
            z_b = S_star + v_star
            kin_new = 0.5 * ((v_star @ L) ** 2).sum(axis=1)
            kin_old = 0.5 * ((v_half @ L) ** 2).sum(axis=1)
        else:
            z_b = z
            kin_new = 0.5 * (((z - S_star) @ L) ** 2).sum(axis=1)
            kin_old = 0.5 * (((z - S) @ L) ** 2).sum(axis=1)
        coeff_b = G_star - S_star @ W
        coeff_b = coeff_b + z_b @ Wl
        if not np.all(np.isfinite(coeff_b)):
            raise NumericGuardError("non-finite proposal logits")
        log_rows_b = _log_rows_batch(coeff_b, lam, vals, quad_term)
        if over_relaxed:
            cdf_b = np.cumsum(np.exp(log_rows_b), axis=-1)
            cdf_b[..., -1] = 1.0
            lp_b = over_relax_log_prob_rows(cdf_b, idx_star, idx, beta).sum(axis=-1)
        else:
            lp_b = _take_point_logprob(log_rows_b, idx)

        with np.errstate(invalid="ignore"):
            delta = F_star - F - kin_new + kin_old + lp_b - lp_f
        if not np.all(np.isfinite(delta)):
            raise NumericGuardError("non-finite acceptance log-ratio")
        for i, g in enumerate(rngs):
            acc_u[i] = g.random()
        accept = (delta >= 0.0) | (acc_u < np.exp(np.minimum(delta, 0.0)))

        idx = np.where(accept[:, None], idx_star, idx)
        S = vals[idx]
        F = np.where(accept, F_star, F)
        G = np.where(accept[:, None], G_star, G)
        if momentum:
            V = np.where(accept[:, None], v_star, -v_half)
        out_idx[:, t] = idx
        out_energy[:, t] = F
        out_accept[:, t] = accept
