"""Samplers for Boltzmann machines and Ising problems, plus the fidelity
and stability benchmark harnesses.

Three sampling routes:

* ``gibbs_sample``: systematic-scan Gibbs over binary states.  The scan
  visits sites 0..n-1 in order; one sweep = n conditional updates with
  p(z_l = 1 | rest) = logistic(-dE_l / T), dE_l = h_l + sum_m W_lm z_m.
* ``simulated_annealing``: single-spin-flip Metropolis over spin states
  under a temperature schedule; each schedule step is one sweep of n
  proposal attempts.  Tracks the incumbent best state per run.
* ``exact_sampler``: i.i.d. inverse-CDF draws over the enumerated
  distribution (n <= 25), the ground-truth reference.

All randomness comes from the counter-based splitmix64 streams defined in
``rng`` (the same constants are inlined in the jitted kernels below and
cross-checked by tests).  Chains and restarts get derived per-slot keys and
write to preassigned rows, so results are bit-identical no matter how the
parallel loop is scheduled.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

# the bundled TBB is too old for numba's TBB layer; pick OpenMP up front
# instead of letting numba warn and fall through
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numba
from numba import njit, prange

if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

from . import energy as en
from .rng import counter_uniforms, derive_seed
from .textio import fmt

# splitmix64 constants, duplicated from rng for use inside jitted code
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_U1 = np.uint64(1)
_INV53 = 2.0 ** -53


@njit(cache=True, inline="always")
def _u01(key, ctr):
    z = key + ctr * _GOLD
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    z = z ^ (z >> _S31)
    return (np.float64(z >> _S11) + 0.5) * _INV53


@dataclass(frozen=True)
class SampleSet:
    """Immutable batch of states with their energies and sampler metadata."""

    samples: np.ndarray
    energies: np.ndarray
    variable_kind: str
    seed: int
    sampler_id: str
    sweeps_per_sample: int
    burn_in: int
    temperature: float

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.int8)
        energies = np.array(self.energies, dtype=np.float64)
        samples.setflags(write=False)
        energies.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "energies", energies)
        if samples.ndim != 2:
            raise ValueError("samples must be a 2-d matrix")
        if energies.shape != (samples.shape[0],):
            raise ValueError("energies length must match sample count")
        if self.variable_kind == "binary":
            if samples.size and not np.all((samples == 0) | (samples == 1)):
                raise ValueError("binary samples must contain only 0/1")
        elif self.variable_kind == "spin":
            if samples.size and not np.all((samples == -1) | (samples == 1)):
                raise ValueError("spin samples must contain only -1/+1")
        else:
            raise ValueError(f"unknown variable_kind {self.variable_kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    def as_binary(self) -> np.ndarray:
        if self.variable_kind == "binary":
            return self.samples
        return en.spins_to_binary(self.samples)


@dataclass(frozen=True)
class AnnealSchedule:
    """Monotone cooling schedule; n_steps is the number of sweeps."""

    t_start: float
    t_end: float
    n_steps: int
    shape: str = "geometric"

    def __post_init__(self):
        if not (self.t_start > self.t_end > 0):
            raise ValueError("need t_start > t_end > 0")
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        if self.shape not in ("geometric", "linear"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")

    def temperatures(self) -> np.ndarray:
        if self.n_steps == 1:
            return np.array([self.t_start])
        k = np.arange(self.n_steps) / (self.n_steps - 1)
        if self.shape == "geometric":
            return self.t_start * (self.t_end / self.t_start) ** k
        return self.t_start + (self.t_end - self.t_start) * k


def default_schedule(n_spins: int) -> AnnealSchedule:
    """Geometric 10 -> 0.05 over 50*n sweeps; solves the 1000-node ladder
    reliably in seconds on one core."""
    return AnnealSchedule(10.0, 0.05, 50 * n_spins, "geometric")


@dataclass(frozen=True)
class FidelityReport:
    slope: float
    intercept: float
    pearson_r: float
    n_distinct_states: int
    kT: float

    def __post_init__(self):
        if not -1.0 <= self.pearson_r <= 1.0:
            raise ValueError("pearson_r outside [-1, 1]")


@njit(cache=True, parallel=True)
def _gibbs_kernel(W, h, temperature, n_sweeps, burn_in, chain_keys,
                  keep_counts, offsets, out):
    n = h.shape[0]
    for c in prange(chain_keys.shape[0]):
        key = chain_keys[c]
        ctr = np.uint64(0)
        z = np.zeros(n, dtype=np.int8)
        for l in range(n):
            ctr += _U1
            if _u01(key, ctr) < 0.5:
                z[l] = 1
        kept = 0
        total = burn_in + keep_counts[c] * n_sweeps
        for sweep in range(total):
            for l in range(n):
                dE = h[l]
                for m in range(n):
                    dE += W[l, m] * z[m]
                a = dE / temperature
                if a > 0.0:
                    e = np.exp(-a)
                    p1 = e / (1.0 + e)
                else:
                    p1 = 1.0 / (1.0 + np.exp(a))
                ctr += _U1
                z[l] = 1 if _u01(key, ctr) < p1 else 0
            if sweep >= burn_in and (sweep - burn_in + 1) % n_sweeps == 0:
                row = offsets[c] + kept
                for l in range(n):
                    out[row, l] = z[l]
                kept += 1


def gibbs_sample(bm: en.BoltzmannMachine, n_samples: int, n_sweeps: int = 1,
                 burn_in: int = 100, temperature: float = 1.0, seed: int = 0,
                 n_chains: int = 16) -> SampleSet:
    """Systematic-scan Gibbs sampling of p(z) ~ exp(-E(z)/T).

    The kept samples are split as evenly as possible across ``n_chains``
    parallel chains (chain c uses the derived key derive_seed(seed, c)) and
    merged in chain order, so the output is independent of thread
    scheduling and bit-identical across reruns.
    """
    if n_samples < 1 or n_sweeps < 1 or burn_in < 0 or n_chains < 1:
        raise ValueError("counts must be positive (burn_in may be zero)")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    n_chains = min(n_chains, n_samples)
    base, rem = divmod(n_samples, n_chains)
    keep = np.full(n_chains, base, dtype=np.int64)
    keep[:rem] += 1
    offsets = np.concatenate(([0], np.cumsum(keep)[:-1]))
    keys = np.array([derive_seed(seed, c) for c in range(n_chains)],
                    dtype=np.uint64)
    out = np.zeros((n_samples, bm.n), dtype=np.int8)
    _gibbs_kernel(bm.W, bm.h, float(temperature), n_sweeps, burn_in,
                  keys, keep, offsets, out)
    energies = en.bm_energies(out, bm)
    return SampleSet(out, energies, "binary", seed, "gibbs",
                     n_sweeps, burn_in, temperature)


@njit(cache=True, parallel=True)
def _sa_kernel(indptr, indices, weights, field, mu, temps, run_keys,
               final_spins, best_spins, best_energy):
    n = field.shape[0]
    for r in prange(run_keys.shape[0]):
        key = run_keys[r]
        ctr = np.uint64(0)
        sigma = np.empty(n, dtype=np.int8)
        for i in range(n):
            ctr += _U1
            sigma[i] = 1 if _u01(key, ctr) < 0.5 else -1
        # cache of local coupling sums: lf[i] = sum_j J_ij sigma_j
        lf = np.zeros(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                s += weights[k] * sigma[indices[k]]
            lf[i] = s
        E = 0.0
        for i in range(n):
            E += -0.5 * sigma[i] * lf[i] - mu * field[i] * sigma[i]
        bestE = E
        for i in range(n):
            best_spins[r, i] = sigma[i]
        for t in range(temps.shape[0]):
            T = temps[t]
            for i in range(n):
                dE = 2.0 * sigma[i] * (lf[i] + mu * field[i])
                accept = dE <= 0.0
                if not accept:
                    ctr += _U1
                    accept = _u01(key, ctr) < np.exp(-dE / T)
                if accept:
                    sigma[i] = -sigma[i]
                    E += dE
                    for k in range(indptr[i], indptr[i + 1]):
                        lf[indices[k]] += 2.0 * weights[k] * sigma[i]
                    if E < bestE:
                        bestE = E
                        for m in range(n):
                            best_spins[r, m] = sigma[m]
        for i in range(n):
            final_spins[r, i] = sigma[i]
        best_energy[r] = bestE


def _coupling_csr(J: np.ndarray):
    rows, cols = np.nonzero(J)
    counts = np.bincount(rows, minlength=J.shape[0])
    indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return indptr, cols.astype(np.int64), J[rows, cols].astype(np.float64)


def _sa_runs(p: en.IsingProblem, schedule: AnnealSchedule, n_runs: int,
             seed: int):
    """All restarts of the annealer; returns final and incumbent states with
    exactly recomputed energies (the kernel's running sums only steer the
    search)."""
    if n_runs < 1:
        raise ValueError("need at least one run")
    indptr, indices, weights = _coupling_csr(p.J)
    temps = schedule.temperatures()
    keys = np.array([derive_seed(seed, r) for r in range(n_runs)],
                    dtype=np.uint64)
    final_spins = np.zeros((n_runs, p.n_spins), dtype=np.int8)
    best_spins = np.zeros((n_runs, p.n_spins), dtype=np.int8)
    best_energy = np.zeros(n_runs, dtype=np.float64)
    _sa_kernel(indptr, indices, weights, p.field, float(p.mu), temps, keys,
               final_spins, best_spins, best_energy)
    best_exact = en.ising_energies(best_spins, p)
    final_exact = en.ising_energies(final_spins, p)
    return final_spins, final_exact, best_spins, best_exact


def simulated_annealing(p: en.IsingProblem, schedule: AnnealSchedule | None = None,
                        n_runs: int = 20, seed: int = 0):
    """Independent Metropolis annealing restarts.

    Returns (best_sigma, best_energy, SampleSet of final states).  Run r
    draws from the derived key derive_seed(seed, r); the best state is the
    lowest incumbent energy over runs, ties broken by run index.
    """
    if schedule is None:
        schedule = default_schedule(p.n_spins)
    final_spins, final_e, best_spins, best_e = _sa_runs(p, schedule, n_runs, seed)
    winner = int(np.argmin(best_e))
    finals = SampleSet(final_spins, final_e, "spin", seed, "sa",
                       schedule.n_steps, 0, schedule.t_end)
    return best_spins[winner].copy(), float(best_e[winner]), finals


def exact_sampler(bm: en.BoltzmannMachine, n_samples: int, seed: int = 0) -> SampleSet:
    """I.i.d. inverse-CDF draws over the enumerated distribution (n <= 25)."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    energies = en.enumerate_energies(bm)
    neg = -energies
    w = np.exp(neg - neg.max())
    probs = w / w.sum()
    cum = np.cumsum(probs)
    u = counter_uniforms(derive_seed(seed, 0), 0, n_samples)
    idx = np.searchsorted(cum, u, side="right")
    idx = np.minimum(idx, probs.size - 1)
    bits = ((idx[:, None] >> np.arange(bm.n)) & 1).astype(np.int8)
    return SampleSet(bits, energies[idx], "binary", seed, "exact", 0, 0, 1.0)


def negative_phase_moments(s: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Sample first and second moments E[z_l], E[z_l z_m]; pair diagonal
    carries the mean (z_l^2 = z_l for binary states)."""
    if s.n_samples == 0:
        raise ValueError("empty sample set")
    Z = s.as_binary().astype(np.float64)
    mean = Z.mean(axis=0)
    pair = Z.T @ Z / Z.shape[0]
    np.fill_diagonal(pair, mean)
    return mean, pair


def log_z_paper_estimate(s: SampleSet, bm: en.BoltzmannMachine) -> float:
    """Mean sample energy, the parity estimator for log Z.

    This is NOT log Z (for W=0, h=0 it returns 0 while log Z = n ln 2) and
    is quarantined from all gradient paths; training subtracts negative-
    phase moments instead, which is exact.  Reported for comparison only.
    """
    if s.n_samples == 0:
        raise ValueError("empty sample set")
    return float(np.mean(en.bm_energies(s.as_binary(), bm)))


def boltzmann_fidelity(s: SampleSet, bm: en.BoltzmannMachine, kT: float = 1.0) -> FidelityReport:
    """Regress ln(empirical state frequency) on E/kT over well-observed states.

    A sampler faithful to the Boltzmann law gives slope -1 (at the model's
    native temperature) and strongly negative Pearson r.  States need >= 5
    occurrences to qualify and >= 10 distinct states must qualify.
    """
    if not kT > 0:
        raise ValueError("kT must be positive")
    Z = s.as_binary()
    idx = en.states_to_indices(Z)
    states, counts = np.unique(idx, return_counts=True)
    qual = counts >= 5
    if int(qual.sum()) < 10:
        raise ValueError(
            f"too few distinct states: {int(qual.sum())} occur >= 5 times, need 10")
    states = states[qual]
    counts = counts[qual]
    bits = ((states[:, None] >> np.arange(bm.n)) & 1).astype(np.float64)
    x = en.bm_energies(bits, bm) / kT
    y = np.log(counts / s.n_samples)
    if np.std(x) < 1e-12:
        raise ValueError("too few distinct energies for a regression")
    xc = x - x.mean()
    yc = y - y.mean()
    slope = float(xc @ yc / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    r = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
    return FidelityReport(slope, intercept, r, int(states.size), kT)


def empirical_tv_distance(s: SampleSet, probabilities: np.ndarray) -> float:
    """Total variation distance between sampled state frequencies and a
    reference distribution over all 2^n states."""
    idx = en.states_to_indices(s.as_binary())
    freq = np.bincount(idx, minlength=probabilities.size) / s.n_samples
    return float(0.5 * np.abs(freq - probabilities).sum())


def stability_harness(p: en.IsingProblem, known_optimum: float, batch: int = 512,
                      interval_seconds: float = 1.0, duration_seconds: float = 60.0,
                      schedule: AnnealSchedule | None = None, seed: int = 0,
                      atol: float = 1e-9):
    """Repeated batched solving: every interval, run `batch` independent SA
    solves and record the fraction whose incumbent energy reaches
    known_optimum (an energy; callers translate cut targets via
    H = |E| - 2*cut).

    Returns rows (tick, t_seconds, success_fraction, wall_s).  Everything
    except the wall clock column is deterministic: tick t draws its run
    keys from derive_seed(seed, t).
    """
    if interval_seconds <= 0 or duration_seconds <= 0:
        raise ValueError("interval and duration must be positive")
    if batch < 1:
        raise ValueError("batch must be positive")
    if schedule is None:
        schedule = default_schedule(p.n_spins)
    n_ticks = max(1, int(round(duration_seconds / interval_seconds)))
    rows = []
    t0 = time.monotonic()
    for tick in range(n_ticks):
        _, _, _, best_e = _sa_runs(p, schedule, batch, derive_seed(seed, tick))
        success = float(np.mean(best_e <= known_optimum + atol))
        wall = time.monotonic() - t0
        rows.append((tick, tick * interval_seconds, success, wall))
        if tick + 1 < n_ticks:
            remaining = (tick + 1) * interval_seconds - (time.monotonic() - t0)
            if remaining > 0:
                time.sleep(remaining)
    return rows


def save_sample_set(s: SampleSet, path) -> None:
    """CSV with header 'energy,z0,z1,...'; one sample per row."""
    header = "energy," + ",".join(f"z{l}" for l in range(s.n))
    lines = [header]
    for i in range(s.n_samples):
        lines.append(fmt(s.energies[i]) + "," +
                     ",".join(str(int(v)) for v in s.samples[i]))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_sample_set(path) -> SampleSet:
    """Rebuild a SampleSet from CSV; the variable kind is inferred from the
    entry domain (any -1 means spin) and sampler metadata is not persisted."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("energy,"):
        raise ValueError(f"{path}: not a sample CSV")
    n = len(lines[0].split(",")) - 1
    rows = []
    energies = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != n + 1:
            raise ValueError(f"{path}: ragged row {ln!r}")
        energies.append(float(parts[0]))
        rows.append([int(v) for v in parts[1:]])
    samples = np.array(rows, dtype=np.int8).reshape(len(rows), n)
    kind = "spin" if np.any(samples == -1) else "binary"
    return SampleSet(samples, np.array(energies), kind, 0, "csv", 0, 0, 1.0)
