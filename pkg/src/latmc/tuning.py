"""Parameter tuning: stepsize search targeting an acceptance rate, and the
staged grid search selecting parameters by energy effective sample size."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedESSError
from .diagnostics import ess_multichain
from .precondition import factorize, lambda_shift
from .samplers import MOMENTUM_KERNELS, SamplerConfig, run_chains
from .targets import TargetModel

# Acceptance-rate window gating stepsize candidates before ESS ranking.
ACCEPT_WINDOW = (0.5, 0.9)


@dataclass
class TuneTrace:
    """Record of a tuning run: stepsizes tried, observed acceptance rates,
    the chosen stepsize, and the energy-ESS table of the grid stages."""

    deltas: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    chosen: float | None = None
    ess_table: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "deltas": [float(x) for x in self.deltas],
            "rates": [float(x) for x in self.rates],
            "chosen": None if self.chosen is None else float(self.chosen),
            "ess_table": {key: value for key, value in self.ess_table.items()},
        }


def _probe_run(kernel_id, target, pre, config, chains, length, rng, burn_in=0):
    """Short lockstep run returning (acceptance rate, energy ESS or None),
    both measured after the probe burn-in."""
    child = rng.spawn(chains)
    lattice = target.lattice
    init = np.stack([g.integers(0, lattice.n_values, size=lattice.dim) for g in child])
    result = run_chains(kernel_id, target, pre, config, burn_in + length, child, init)
    rate = float(result.accepted[:, burn_in:].mean())
    if chains >= 2 and length >= 2:
        try:
            ess = ess_multichain(result.energies[:, burn_in:])
        except UndefinedESSError:
            ess = None
    else:
        ess = None
    return rate, ess


def target_acceptance(
    kernel: str,
    target: TargetModel,
    w_matrix,
    delta0: float,
    alpha_target: float,
    rng,
    a: float = 0.6,
    M: int = 20,
    probe_len: int = 200,
    config: SamplerConfig = SamplerConfig(),
    cond_threshold: float = 100.0,
) -> TuneTrace:
    """Multiplicative stepsize search targeting an acceptance rate.

    At stage m the stepsize moves by exp(+(1+m)^-a) when the observed rate is
    below the target and exp(-(1+m)^-a) when above (unchanged on exact
    equality); the returned trace marks the stepsize whose rate came closest,
    first-found on ties.
    """
    if delta0 <= 0:
        raise ValueError("delta0 must be positive")
    if not 0.0 < alpha_target < 1.0:
        raise ValueError("alpha_target must lie strictly inside (0, 1)")
    if a <= 0 or M < 1:
        raise ValueError("need a > 0 and M >= 1")
    w_matrix = np.asarray(w_matrix, dtype=float)
    trace = TuneTrace()
    delta = float(delta0)
    for m in range(M + 1):
        cfg = SamplerConfig(
            epsilon=config.epsilon, delta=delta, phi=config.phi, beta=config.beta, r=config.r
        )
        pre = factorize(w_matrix, lambda_shift(w_matrix, delta), cond_threshold)
        rate, _ = _probe_run(kernel, target, pre, cfg, chains=1, length=probe_len, rng=rng)
        trace.deltas.append(delta)
        trace.rates.append(rate)
        step = (1.0 + m) ** (-a)
        if rate < alpha_target:
            delta = delta * float(np.exp(step))
        elif rate > alpha_target:
            delta = delta * float(np.exp(-step))
    best = int(np.argmin([abs(r - alpha_target) for r in trace.rates]))
    trace.chosen = trace.deltas[best]
    return trace


def _rank_candidates(entries):
    """Pick the best (parameter, ess, rate) entry: ESS-maximal among
    candidates inside the acceptance window (all candidates when the window
    is empty), undefined ESS last, ties toward the smaller parameter."""
    lo, hi = ACCEPT_WINDOW
    gated = [e for e in entries if lo <= e[2] <= hi]
    pool = gated if gated else entries
    best = None
    for param, ess, rate in pool:
        if ess is None:
            continue
        if best is None or ess > best[1]:
            best = (param, ess, rate)
    if best is None:
        # every candidate had undefined ESS; fall back to the smallest parameter
        best = pool[0]
    return best


def staged_grid_search(
    kernel_family: str,
    target: TargetModel,
    pre_builder,
    grids: dict,
    chains: int,
    length: int,
    rng,
    epsilon: float = 0.9,
    beta: float = 1.0,
    r: int = 1,
    burn_in: int = 0,
) -> tuple[SamplerConfig, TuneTrace]:
    """Stagewise parameter selection by energy ESS.

    Stage 1 fixes the auto-regression parameter (default 0.9) and the
    over-relaxation parameter.  Stage 2 grid-searches the stepsize with
    phi = 0; stage 3 keeps the chosen stepsize and selects phi.  Candidates
    are ranked by the energy-series ESS of short probe runs, undefined ESS
    ranking last, with deterministic ties toward the smaller stepsize and
    then the smaller phi.  The whole search is a pure function of the probe
    seeds and the grids.
    """
    deltas = sorted(float(x) for x in grids.get("delta", []))
    phis = sorted(float(x) for x in grids.get("phi", [0.0]))
    if not deltas:
        raise ConfigError("empty stepsize grid")
    if not phis:
        raise ConfigError("empty phi grid")

    trace = TuneTrace()
    stage2 = []
    for delta in deltas:
        cfg = SamplerConfig(epsilon=epsilon, delta=delta, phi=0.0, beta=beta, r=r)
        rate, ess = _probe_run(kernel_family, target, pre_builder(delta), cfg, chains, length, rng, burn_in)
        stage2.append((delta, ess, rate))
        trace.deltas.append(delta)
        trace.rates.append(rate)
        key = f"stage2:epsilon={epsilon!r},delta={delta!r},phi=0.0,beta={beta!r},r={r}"
        trace.ess_table[key] = None if ess is None else float(ess)
    best_delta, _, _ = _rank_candidates(stage2)
    trace.chosen = best_delta

    if kernel_family in MOMENTUM_KERNELS:
        stage3 = []
        for phi in phis:
            cfg = SamplerConfig(epsilon=epsilon, delta=best_delta, phi=phi, beta=beta, r=r)
            rate, ess = _probe_run(
                kernel_family, target, pre_builder(best_delta), cfg, chains, length, rng, burn_in
            )
            stage3.append((phi, ess, rate))
            key = f"stage3:epsilon={epsilon!r},delta={best_delta!r},phi={phi!r},beta={beta!r},r={r}"
            trace.ess_table[key] = None if ess is None else float(ess)
        best_phi, _, _ = _rank_candidates(stage3)
    else:
        best_phi = 0.0

    return (
        SamplerConfig(epsilon=epsilon, delta=best_delta, phi=best_phi, beta=beta, r=r),
        trace,
    )
