"""Finite populations of controlled on/off loads under a broadcast signal.

Loads evolve independently given the signal, each drawing its next state
from its class's transition row by inverse-CDF sampling.  All randomness
comes from counter-based streams keyed by (seed, purpose, time), so a run
is reproducible bit-for-bit and does not depend on how loads are
partitioned across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .markov import MODE_OFF, MODE_ON, StateSpace, TransitionFamily, transition_matrix

_KEY_TAG = 0x5EED
STREAM_TRANSITION = 0
STREAM_OBSERVE = 1
STREAM_INIT = 2
STREAM_MC = 3


def stream_generator(seed: int, stream: int, t: int) -> np.random.Generator:
    """Generator for the (seed, stream, t) counter block.

    The step and stream ids go in the high counter words; the free-running
    low word then gives each block 2^64 draws without overlapping any
    other (seed, stream, t) block.
    """
    bits = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, _KEY_TAG],
                            counter=[0, t, stream, 0])
    return np.random.Generator(bits)


@dataclass
class PopulationState:
    """States, QoS accumulators and opt-out flags for N loads at time t."""

    states: np.ndarray          # int64 state indices, 0-based
    classes: np.ndarray         # int32 class index per load
    qos: np.ndarray             # float64 discounted accumulators
    forced_mode: np.ndarray     # int8: -1 free, else the forced mode
    t: int
    seed: int
    d: int

    @property
    def n_loads(self) -> int:
        return self.states.size

    @property
    def optout_mask(self) -> np.ndarray:
        return self.forced_mode >= 0

    def copy(self) -> "PopulationState":
        return PopulationState(self.states.copy(), self.classes.copy(),
                               self.qos.copy(), self.forced_mode.copy(),
                               self.t, self.seed, self.d)


def init_population(families: list[TransitionFamily], counts, seed: int,
                    initial=None) -> PopulationState:
    """Draw initial load states i.i.d. per class.

    ``initial`` may be a list of per-class pmfs; by default each class
    starts from its invariant distribution at zero signal.
    """
    from .markov import invariant_pmf

    counts = [int(c) for c in np.atleast_1d(counts)]
    if len(counts) != len(families):
        raise ValueError("need one load count per class")
    if any(c < 1 for c in counts):
        raise ValueError("class counts must be positive")
    d = families[0].d
    if any(f.d != d for f in families):
        raise ValueError("all classes must share the state dimension")
    if initial is None:
        initial = [invariant_pmf(transition_matrix(f, 0.0)) for f in families]
    n_total = sum(counts)
    states = np.empty(n_total, dtype=np.int64)
    classes = np.empty(n_total, dtype=np.int32)
    gen = stream_generator(seed, STREAM_INIT, 0)
    u = gen.random(n_total)
    pos = 0
    for c, (count, pmf) in enumerate(zip(counts, initial)):
        pmf = np.asarray(pmf, dtype=float)
        cum = np.cumsum(pmf)
        cum[-1] = 1.0
        sl = slice(pos, pos + count)
        states[sl] = np.searchsorted(cum, u[sl], side="right")
        classes[sl] = c
        pos += count
    return PopulationState(states=states, classes=classes,
                           qos=np.zeros(n_total),
                           forced_mode=np.full(n_total, -1, np.int8),
                           t=0, seed=int(seed), d=d)


def transition_kernel(states: np.ndarray, u: np.ndarray,
                      cum_rows: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of next states; pure in (states, u, cum_rows)."""
    nxt = np.empty_like(states)
    for s in np.unique(states):
        mask = states == s
        nxt[mask] = np.searchsorted(cum_rows[s], u[mask], side="right")
    return np.minimum(nxt, cum_rows.shape[1] - 1)


def _conditioned_cum(P: np.ndarray, mode_mask: np.ndarray):
    sub = P * mode_mask[None, :]
    tot = sub.sum(axis=1, keepdims=True)
    ok = tot[:, 0] > 0
    sub[ok] = sub[ok] / tot[ok]
    return np.cumsum(sub, axis=1), ok


def step_population(pop: PopulationState, families: list[TransitionFamily],
                    zeta: float) -> PopulationState:
    """Advance every load one step under signal ``zeta`` (in place).

    Free loads follow their class's tilted matrix.  Loads with a forced
    mode ignore the signal: they transition by the nominal matrix
    conditioned on staying in the forced mode, or jump to the forced
    mode's entry state when currently in the other mode.
    """
    zeta = float(zeta)
    if not np.isfinite(zeta):
        raise ValueError(f"signal value must be finite, got {zeta}")
    u = stream_generator(pop.seed, STREAM_TRANSITION, pop.t).random(pop.n_loads)
    nxt = np.empty_like(pop.states)
    any_forced = bool(np.any(pop.forced_mode >= 0))
    for c, fam in enumerate(families):
        in_class = pop.classes == c
        if not np.any(in_class):
            continue
        P = fam.matrix(zeta)
        cum = np.cumsum(P, axis=1)
        free = in_class & (pop.forced_mode < 0)
        if np.any(free):
            nxt[free] = transition_kernel(pop.states[free], u[free], cum)
        if any_forced:
            P0 = fam.matrix(0.0)
            space = fam.state_space
            for target in (MODE_OFF, MODE_ON):
                forced = in_class & (pop.forced_mode == target)
                if not np.any(forced):
                    continue
                cond_cum, has_mass = _conditioned_cum(P0, space.mode == target)
                in_target = space.mode[pop.states] == target
                same = forced & in_target & has_mass[pop.states]
                if np.any(same):
                    nxt[same] = transition_kernel(pop.states[same], u[same], cond_cum)
                hop = forced & ~same
                if np.any(hop):
                    jump = space.forced_target(target)
                    nxt[hop] = jump[pop.states[hop]]
    pop.states = nxt
    pop.t += 1
    return pop


def empirical_distribution(pop: PopulationState) -> np.ndarray:
    """Histogram of load states on the d-simplex (exact counts / N)."""
    return state_counts(pop) / pop.n_loads


def state_counts(pop: PopulationState) -> np.ndarray:
    return np.bincount(pop.states, minlength=pop.d)


@dataclass(frozen=True)
class ObservationModel:
    """Random-sampling measurement: average power over n distinct loads."""

    n: int
    C: np.ndarray               # per-state power, kW
    ybar: float                 # nominal average power, kW

    def __post_init__(self):
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        if self.n < 1:
            raise ValueError(f"sample size must be at least 1, got {self.n}")
        if np.any(self.C < 0):
            raise ValueError("per-state power must be nonnegative")


def sample_indices(n: int, n_loads: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform n-subset of load indices, without replacement."""
    if n >= n_loads:
        return np.arange(n_loads)
    keys = gen.random(n_loads)
    return np.argpartition(keys, n - 1)[:n]


def observe(pop: PopulationState, obs: ObservationModel) -> float:
    """Average power over a fresh random sample of ``obs.n`` distinct loads."""
    if obs.n > pop.n_loads:
        raise ValueError(f"cannot sample {obs.n} of {pop.n_loads} loads")
    if obs.n == pop.n_loads:
        return float(obs.C[pop.states].mean())
    gen = stream_generator(pop.seed, STREAM_OBSERVE, pop.t)
    idx = sample_indices(obs.n, pop.n_loads, gen)
    return float(obs.C[pop.states[idx]].mean())


@dataclass(frozen=True)
class QosSpec:
    """Discounted per-load service score: qos' = beta * qos + ell(state).

    ``ell`` must average to zero under the class's invariant distribution,
    so the accumulator measures deviation from nominal service.
    """

    ell: np.ndarray
    beta: float
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ell", np.asarray(self.ell, dtype=float))
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.beta}")
        if self.bounds is not None:
            lo, hi = self.bounds
            if not lo < hi:
                raise ValueError(f"opt-out bounds must satisfy lo < hi, got {self.bounds}")

    def check_centering(self, pi0: np.ndarray, tol: float = 1e-8) -> None:
        drift = float(self.ell @ pi0)
        if abs(drift) > tol:
            raise ValueError(f"qos score has stationary drift {drift:.3e} (> {tol:g})")


def power_deviation_qos(space: StateSpace, pi0: np.ndarray, beta: float,
                        bounds=None) -> QosSpec:
    """Score = power draw minus its stationary mean (centered by construction)."""
    power = space.power
    return QosSpec(ell=power - float(power @ pi0), beta=beta, bounds=bounds)


def mode_indicator_qos(space: StateSpace, beta: float, bounds=None) -> QosSpec:
    """Score = +1 while on, -1 while off (centered only for 50% duty)."""
    ell = np.where(space.mode == MODE_ON, 1.0, -1.0)
    return QosSpec(ell=ell, beta=beta, bounds=bounds)


def update_qos(pop: PopulationState, specs) -> PopulationState:
    """Apply the discounted recursion using each load's current state."""
    specs = _per_class(specs, pop)
    if len({s.beta for s in specs}) > 1:
        raise ValueError("all classes must share the qos discount")
    ell = np.stack([s.ell for s in specs])
    pop.qos = specs[0].beta * pop.qos + ell[pop.classes, pop.states]
    return pop


def apply_optout(pop: PopulationState, specs) -> PopulationState:
    """Flag loads whose QoS left the band; the flag forces the coming step.

    A load at or above the upper bound is forced off (it has consumed more
    than its share), at or below the lower bound forced on; everything
    else follows the broadcast signal.
    """
    specs = _per_class(specs, pop)
    forced = np.full(pop.n_loads, -1, dtype=np.int8)
    for c, spec in enumerate(specs):
        if spec.bounds is None:
            continue
        lo, hi = spec.bounds
        in_class = pop.classes == c
        forced[in_class & (pop.qos >= hi)] = MODE_OFF
        forced[in_class & (pop.qos <= lo)] = MODE_ON
    pop.forced_mode = forced
    return pop


def _per_class(specs, pop: PopulationState) -> list[QosSpec]:
    if isinstance(specs, QosSpec):
        return [specs] * (int(pop.classes.max()) + 1)
    return list(specs)


def qos_population_stats(pop: PopulationState) -> tuple[float, float]:
    """Sample mean and unbiased sample variance of the QoS accumulators."""
    if pop.n_loads < 2:
        raise ValueError("need at least 2 loads for a sample variance")
    return float(pop.qos.mean()), float(pop.qos.var(ddof=1))


@dataclass(frozen=True)
class MartingaleCheck:
    """Monte-Carlo conditional means of the state and observation noise."""

    w_mean_max: float           # max |mean W entry|
    w_sigmas: float             # that entry in units of its standard error
    v_mean: float               # |mean V|
    v_sigmas: float
    trials: int


def martingale_noise_check(family: TransitionFamily, pop: PopulationState,
                           obs: ObservationModel, trials: int, zeta: float = 0.0,
                           seed: int = 0, chunk: int = 2048) -> MartingaleCheck:
    """Estimate E[W | state] and E[V | state] from repeated one-step draws.

    W is the empirical-distribution innovation Phi' - A Phi and V the
    sampling error of the power measurement, both from the frozen
    population ``pop``; for martingale-difference noise both conditional
    means vanish.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    P = transition_matrix(family, zeta)
    cum = np.cumsum(P, axis=1)
    d = pop.d
    n_loads = pop.n_loads
    phi = empirical_distribution(pop)
    a_phi = P.T @ phi
    c_phi = float(obs.C[pop.states].mean())

    w_sum = np.zeros(d)
    w_sq = np.zeros(d)
    v_sum = 0.0
    v_sq = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        gen = stream_generator(seed, STREAM_MC, done)
        u = gen.random((m, n_loads))
        nxt = np.empty((m, n_loads), dtype=np.int64)
        for s in np.unique(pop.states):
            mask = pop.states == s
            nxt[:, mask] = np.searchsorted(cum[s], u[:, mask], side="right")
        np.minimum(nxt, d - 1, out=nxt)
        offsets = (np.arange(m)[:, None] * d + nxt).ravel()
        hist = np.bincount(offsets, minlength=m * d).reshape(m, d)
        w = hist / n_loads - a_phi
        w_sum += w.sum(axis=0)
        w_sq += (w ** 2).sum(axis=0)

        if obs.n < n_loads:
            keys = gen.random((m, n_loads))
            idx = np.argpartition(keys, obs.n - 1, axis=1)[:, : obs.n]
            v = obs.C[pop.states[idx]].mean(axis=1) - c_phi
        else:
            v = np.zeros(m)
        v_sum += v.sum()
        v_sq += (v ** 2).sum()
        done += m

    w_mean = w_sum / trials
    w_se = np.sqrt(np.maximum(w_sq / trials - w_mean ** 2, 0.0) / trials)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(w_se > 0, np.abs(w_mean) / w_se,
                          np.where(w_mean == 0, 0.0, np.inf))
    v_mean = v_sum / trials
    v_se = float(np.sqrt(max(v_sq / trials - v_mean ** 2, 0.0) / trials))
    v_sig = abs(v_mean) / v_se if v_se > 0 else (0.0 if v_mean == 0 else np.inf)
    return MartingaleCheck(w_mean_max=float(np.abs(w_mean).max()),
                           w_sigmas=float(ratios.max()),
                           v_mean=abs(float(v_mean)), v_sigmas=float(v_sig),
                           trials=trials)


def snapshot_csv(path, pop: PopulationState, qos_bins: int = 50) -> None:
    """State histogram and QoS histogram of the current population."""
    counts = state_counts(pop)
    hist, edges = np.histogram(pop.qos, bins=qos_bins)
    with open(path, "w") as fh:
        fh.write("section,index,value,count\n")
        for k, c in enumerate(counts):
            fh.write(f"state,{k},,{int(c)}\n")
        for k, c in enumerate(hist):
            mid = 0.5 * (edges[k] + edges[k + 1])
            fh.write(f"qos,{k},{mid!r},{int(c)}\n")
