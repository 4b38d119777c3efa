"""Controlled Markov transition families for randomized on/off loads.

Builds the cycling pool-pump model (lazy chain with exponentially tilted
switch probabilities), empirically identified thermostatic-load models,
convex blends for heterogeneous fleets, invariant distributions and
mean-field linearizations.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12

MODE_OFF = 0
MODE_ON = 1


def _as_matrix(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {P.shape}")
    return P


def check_stochastic(P, tol: float = ROW_SUM_TOL) -> np.ndarray:
    """Validate that P is row-stochastic within ``tol`` and return it."""
    P = _as_matrix(P)
    if np.any(P < -tol):
        raise ValueError("transition matrix has negative entries")
    err = np.abs(P.sum(axis=1) - 1.0).max()
    if err > tol:
        raise ValueError(f"rows do not sum to 1 (max deviation {err:.3e})")
    return P


@dataclass(frozen=True)
class StateSpace:
    """Labeled finite state space with an on/off mode attached to each state.

    ``mode`` is 1 for power-consuming states and 0 otherwise; ``position``
    is the cycle phase (pools) or temperature-bin index (TCLs), 1-based.
    """

    labels: tuple[str, ...]
    mode: np.ndarray
    position: np.ndarray
    kind: str = "generic"
    rated_kw: float = 1.0

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("state labels must be distinct")
        if self.d < 2:
            raise ValueError("state space needs at least 2 states")
        object.__setattr__(self, "mode", np.asarray(self.mode, dtype=np.int8))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.int32))

    @property
    def d(self) -> int:
        return len(self.labels)

    @property
    def power(self) -> np.ndarray:
        """Per-state power consumption in kW (the observation row)."""
        return self.rated_kw * (self.mode == MODE_ON).astype(float)

    def index_of(self, mode: int, position: int) -> int:
        hits = np.flatnonzero((self.mode == mode) & (self.position == position))
        if hits.size != 1:
            raise KeyError(f"no unique state with mode={mode}, position={position}")
        return int(hits[0])

    def forced_target(self, target_mode: int) -> np.ndarray:
        """State index each state jumps to when its mode is forced.

        Pool-style cycles restart at phase 1 of the target mode; bin-style
        spaces keep their position (temperature does not reset).
        """
        idx = np.empty(self.d, dtype=np.int64)
        for s in range(self.d):
            pos = 1 if self.kind == "pool" else int(self.position[s])
            idx[s] = self.index_of(target_mode, pos)
        return idx


def pool_state_space(n_phases: int, rated_kw: float = 1.0) -> StateSpace:
    """State space for the cycling pool model: on states first, then off."""
    labels, mode, pos = [], [], []
    for m, tag in ((MODE_ON, "on"), (MODE_OFF, "off")):
        for k in range(1, n_phases + 1):
            labels.append(f"{tag}:{k:02d}")
            mode.append(m)
            pos.append(k)
    return StateSpace(tuple(labels), np.array(mode), np.array(pos), kind="pool",
                      rated_kw=rated_kw)


class TransitionFamily:
    """A map from the scalar broadcast signal to a d x d stochastic matrix."""

    state_space: StateSpace

    def matrix(self, zeta: float) -> np.ndarray:
        raise NotImplementedError

    @property
    def d(self) -> int:
        return self.state_space.d

    def _check_zeta(self, zeta: float) -> float:
        zeta = float(zeta)
        if not np.isfinite(zeta):
            raise ValueError(f"signal value must be finite, got {zeta}")
        return zeta


class ConstantFamily(TransitionFamily):
    """Signal-independent family (identified TCL models, test fixtures)."""

    def __init__(self, P, state_space: StateSpace):
        P = check_stochastic(P)
        if P.shape[0] != state_space.d:
            raise ValueError("matrix dimension does not match state space")
        self._P = P
        self.state_space = state_space

    def matrix(self, zeta: float) -> np.ndarray:
        self._check_zeta(zeta)
        return self._P.copy()


class PoolFamily(TransitionFamily):
    """Lazy cycling chain with exponentially tilted mode switching.

    The underlying active chain advances the phase within the current mode
    with probability ``1 - hazard[k]`` and otherwise switches mode,
    restarting at phase 1 of the other mode; the final phase always
    switches.  The realized chain takes an active transition only with
    probability ``laziness`` and self-loops otherwise.  A positive signal
    multiplies the off-to-on switch odds by ``exp(tilt_gain * zeta)`` and
    the on-to-off odds by its inverse, so aggregate power rises with the
    signal.
    """

    def __init__(self, state_space: StateSpace, laziness: float,
                 hazard_on: np.ndarray, hazard_off: np.ndarray, tilt_gain: float,
                 on_fraction: float):
        if not 0.0 < laziness <= 1.0:
            raise ValueError(f"laziness must lie in (0, 1], got {laziness}")
        if tilt_gain <= 0:
            raise ValueError(f"tilt_gain must be positive, got {tilt_gain}")
        self.state_space = state_space
        self.laziness = float(laziness)
        self.n_phases = state_space.d // 2
        self.tilt_gain = float(tilt_gain)
        self.on_fraction = float(on_fraction)
        self.hazard_on = np.asarray(hazard_on, dtype=float)
        self.hazard_off = np.asarray(hazard_off, dtype=float)
        for h in (self.hazard_on, self.hazard_off):
            if h.shape != (self.n_phases,) or np.any(h < 0) or np.any(h > 1):
                raise ValueError("switch hazards must be probabilities, one per phase")
            if abs(h[-1] - 1.0) > 1e-12:
                raise ValueError("final phase must switch with probability 1")

    def active_matrix(self, zeta: float) -> np.ndarray:
        """The no-self-loop chain with the tilt applied at signal ``zeta``."""
        zeta = self._check_zeta(zeta)
        I = self.n_phases
        d = 2 * I
        P = np.zeros((d, d))
        for mode, hazard, sign, base in (
            (MODE_ON, self.hazard_on, -1.0, 0),
            (MODE_OFF, self.hazard_off, +1.0, I),
        ):
            other = I - base  # first phase of the opposite mode
            w = np.exp(sign * self.tilt_gain * zeta)
            for k in range(I):
                switch = hazard[k] * w
                stay = 1.0 - hazard[k]
                total = switch + stay
                P[base + k, other] = switch / total
                if k + 1 < I:
                    P[base + k, base + k + 1] = stay / total
        return P

    def matrix(self, zeta: float) -> np.ndarray:
        delta = self.laziness
        P = delta * self.active_matrix(zeta)
        P[np.diag_indices_from(P)] += 1.0 - delta
        return P


class BlendFamily(TransitionFamily):
    """Convex combination of transition families sharing a state-space shape."""

    def __init__(self, families: list[TransitionFamily], weights):
        if not families:
            raise ValueError("need at least one family to blend")
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(families),):
            raise ValueError("one weight per family required")
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        d = families[0].d
        for fam in families[1:]:
            if fam.d != d:
                raise ValueError("blended families must share the state dimension")
        self.families = list(families)
        self.weights = np.clip(w, 0.0, None)
        self.state_space = families[0].state_space

    def matrix(self, zeta: float) -> np.ndarray:
        out = np.zeros((self.d, self.d))
        for a, fam in zip(self.weights, self.families):
            if a > 0.0:
                out += a * fam.matrix(zeta)
        return out


def _sojourn_mean(hazard: np.ndarray) -> float:
    # mean number of phases visited before switching; last phase always exits
    survival = np.cumprod(1.0 - hazard[:-1])
    return 1.0 + survival.sum()


def _calibrate_hazard(n_phases: int, target_mean: float, width: float) -> np.ndarray:
    """Logistic switch-hazard profile whose mean sojourn equals ``target_mean``."""
    k = np.arange(1, n_phases)

    def profile(center):
        h = np.empty(n_phases)
        h[:-1] = 1.0 / (1.0 + np.exp(-(k - center) / width))
        h[-1] = 1.0
        return h

    lo, hi = -20.0 * width, n_phases + 20.0 * width
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sojourn_mean(profile(mid)) < target_mean:
            lo = mid
        else:
            hi = mid
    return profile(0.5 * (lo + hi))


def build_pool_model(n_phases: int, laziness: float, nominal_on_fraction: float = 0.5,
                     tilt_gain: float = 2.5, hazard_width: float | None = None,
                     rated_kw: float = 1.0) -> PoolFamily:
    """Construct the controlled pool-pump family.

    Parameters
    ----------
    n_phases : int
        Phases per mode; the state space has ``2 * n_phases`` states.
    laziness : float
        Probability in (0, 1] that a load takes an active transition at a
        given step (1 removes the self-loops entirely).
    nominal_on_fraction : float
        Stationary fraction of time spent on at zero signal.  The default
        0.5 gives the symmetric 12 h/day cycle; other values set the duty
        for heterogeneous fleet classes.
    tilt_gain : float
        Scale of the exponential tilt of the switch odds per unit signal.
    hazard_width : float, optional
        Steepness of the logistic switch-hazard profile in phases
        (default ``n_phases / 16``).
    rated_kw : float
        Power drawn by a load while on.

    Returns
    -------
    PoolFamily
        Family with a full day of phases per cycle: mean on-sojourn
        ``nominal_on_fraction * n_phases`` phases and the complement off.
    """
    if n_phases < 2:
        raise ValueError(f"need at least 2 phases per mode, got {n_phases}")
    if not 0.0 < laziness <= 1.0:
        raise ValueError(f"laziness must lie in (0, 1], got {laziness}")
    if tilt_gain <= 0:
        raise ValueError(f"tilt_gain must be positive, got {tilt_gain}")
    lo = 1.0 / n_phases
    if not lo < nominal_on_fraction < 1.0 - lo:
        raise ValueError(
            f"nominal_on_fraction must lie in ({lo:.4f}, {1 - lo:.4f}) "
            f"for {n_phases} phases")
    if hazard_width is None:
        hazard_width = n_phases / 16.0
    space = pool_state_space(n_phases, rated_kw=rated_kw)
    t_on = nominal_on_fraction * n_phases
    t_off = (1.0 - nominal_on_fraction) * n_phases
    hazard_on = _calibrate_hazard(n_phases, t_on, hazard_width)
    hazard_off = _calibrate_hazard(n_phases, t_off, hazard_width)
    return PoolFamily(space, laziness, hazard_on, hazard_off, tilt_gain,
                      nominal_on_fraction)


def transition_matrix(family: TransitionFamily, zeta: float) -> np.ndarray:
    """Evaluate and validate the family at signal value ``zeta``."""
    return check_stochastic(family.matrix(zeta))


def invariant_pmf(P, unique_tol: float = 1e-8) -> np.ndarray:
    """Invariant probability vector of a stochastic matrix.

    Raises ``ValueError`` when the eigenvalue 1 is not simple within
    ``unique_tol`` (no unique invariant pmf).  The returned vector
    satisfies ``pi @ P == pi`` to 1e-10 or better.
    """
    P = check_stochastic(P, tol=1e-9)
    d = P.shape[0]
    eigvals = np.linalg.eigvals(P)
    n_unit = int(np.sum(np.abs(eigvals - 1.0) < unique_tol))
    if n_unit != 1:
        raise ValueError(
            f"invariant pmf is not unique: eigenvalue 1 has multiplicity {n_unit} "
            f"at tolerance {unique_tol:g}")
    # stack the stationarity equations with the normalization constraint
    M = np.vstack([P.T - np.eye(d), np.ones((1, d))])
    b = np.zeros(d + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    resid = np.abs(pi @ P - pi).max()
    if resid > 1e-10:
        raise ValueError(f"invariant pmf residual {resid:.3e} exceeds 1e-10")
    return pi


def recurrent_classes(P) -> list[np.ndarray]:
    """Closed communicating classes of the support graph of ``P``."""
    P = _as_matrix(P)
    adj = (P > 0.0).astype(np.int8)
    n, labels = csgraph.connected_components(adj, directed=True, connection="strong")
    classes = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(P.shape[0]), members)
        if outside.size == 0 or P[np.ix_(members, outside)].sum() == 0.0:
            classes.append(members)
    return classes


@dataclass(frozen=True)
class LinearizedModel:
    """Mean-field linearization about zero signal: A = P0^T, input column B.

    B pushes probability mass along the signal direction and is tangent to
    the simplex (its entries sum to zero); the output row C is per-state
    power, so the model maps signal deviations to average-power deviations.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    pi0: np.ndarray

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def dc_gain(self) -> float:
        """Steady-state output change per unit of constant signal."""
        d = self.d
        # deflate the conserved total-mass direction before inverting
        q, _ = np.linalg.qr(np.eye(d)[:, : d - 1] - np.ones((d, d - 1)) / d)
        core = q.T @ (np.eye(d) - self.A) @ q
        z = np.linalg.solve(core, q.T @ self.B)
        return float(self.C @ (q @ z))


def linearize_mean_field(family: TransitionFamily, h: float = 1e-4) -> LinearizedModel:
    """Finite-difference linearization of the mean-field recursion at zero signal."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    P0 = transition_matrix(family, 0.0)
    pi0 = invariant_pmf(P0)
    Pp = transition_matrix(family, +h)
    Pm = transition_matrix(family, -h)
    B = ((Pp - Pm).T / (2.0 * h)) @ pi0
    return LinearizedModel(A=P0.T.copy(), B=B, C=family.state_space.power, pi0=pi0)


def blend_families(families, weights) -> BlendFamily:
    """Convex combination of transition families (heterogeneous-fleet filter model)."""
    return BlendFamily(list(families), weights)


@dataclass(frozen=True)
class TclParams:
    """Physical parameters of a thermostatic cooling load.

    ``tau_s`` is the control period in seconds while ``c_thermal`` is in
    kWh/degC, so the pole is ``a = exp(-tau_h / (C R))`` with the period
    converted to hours.
    """

    tau_s: float = 2.0
    theta_min: float = 20.0
    theta_max: float = 21.0
    theta_ambient: float = 32.0
    r_thermal: float = 2.0       # degC per kW
    c_thermal: float = 2.0       # kWh per degC
    transfer_kw: float = 14.0
    noise_var: float = 2.5e-7    # degC^2 per step

    def __post_init__(self):
        if self.theta_min >= self.theta_max:
            raise ValueError("dead-band must satisfy theta_min < theta_max")
        if not 0.0 < self.pole < 1.0:
            raise ValueError(f"pole a={self.pole} outside (0, 1)")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")

    @property
    def pole(self) -> float:
        return float(np.exp(-(self.tau_s / 3600.0) / (self.c_thermal * self.r_thermal)))


def tcl_state_space(bins: int, params: TclParams, c_scaling: float = 1.0) -> StateSpace:
    labels, mode, pos = [], [], []
    for m, tag in ((MODE_ON, "on"), (MODE_OFF, "off")):
        for b in range(1, bins + 1):
            labels.append(f"{tag}:{b:02d}")
            mode.append(m)
            pos.append(b)
    return StateSpace(tuple(labels), np.array(mode), np.array(pos), kind="tcl",
                      rated_kw=params.transfer_kw * c_scaling)


@dataclass
class TclIdentification:
    """Result of the Monte-Carlo identification of a TCL transition matrix."""

    family: ConstantFamily
    joint_counts: np.ndarray
    patched_states: list[int] = field(default_factory=list)

    @property
    def visit_counts(self) -> np.ndarray:
        return self.joint_counts.sum(axis=1)


def _tcl_uniforms(seed: int, stream: int, step: int, n: int, normal: bool = False):
    # step/stream in the high counter words so per-step blocks never overlap
    bits = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0x7C1],
                            counter=[0, step, stream, 0])
    gen = np.random.Generator(bits)
    return gen.standard_normal(n) if normal else gen.random(n)


def simulate_tcl_ensemble(params: TclParams, n_loads: int, n_steps: int, seed: int,
                          bins: int, burn_in: int = 0):
    """Simulate the hybrid dead-band dynamics; yields per-step state indices.

    Noise is drawn from a counter-based stream keyed by (seed, step), one
    slot per load, so results do not depend on how loads are partitioned
    across workers.  The first ``burn_in`` transitions are not yielded.
    """
    lo, hi = params.theta_min, params.theta_max
    width = (hi - lo) / bins
    a = params.pole
    sig = float(np.sqrt(params.noise_var))
    theta = lo + (hi - lo) * _tcl_uniforms(seed, 1, 0, n_loads)
    m = (_tcl_uniforms(seed, 2, 0, n_loads) < 0.5).astype(np.int8)

    def encode(mode, temp):
        b = np.clip(((temp - lo) / width).astype(np.int64), 0, bins - 1)
        return (1 - mode).astype(np.int64) * bins + b  # on states first

    for t in range(burn_in + n_steps):
        s_prev = encode(m, theta)
        drive = params.theta_ambient - m * params.r_thermal * params.transfer_kw
        theta = a * theta + (1.0 - a) * drive
        if sig > 0.0:
            theta = theta + sig * _tcl_uniforms(seed, 3, t + 1, n_loads, normal=True)
        m = np.where(theta < lo, 0, np.where(theta > hi, 1, m)).astype(np.int8)
        if t >= burn_in:
            yield s_prev, encode(m, theta)


def build_tcl_model(params: TclParams, bins: int = 40, mc_loads: int = 10_000,
                    mc_steps: int = 3600, seed: int = 0,
                    c_scaling: float = 1.0, burn_in: int = 0) -> TclIdentification:
    """Identify a signal-independent TCL transition matrix by Monte-Carlo.

    Counts joint one-step occurrences over ``mc_loads`` simulated loads and
    ``mc_steps`` transitions, then conditions on the current state to get
    the matrix.  States never visited become self-loops and are reported in
    ``patched_states`` (they are excluded from any recurrent-class
    analysis downstream).
    """
    if bins < 2:
        raise ValueError(f"need at least 2 temperature bins, got {bins}")
    if mc_loads < 1 or mc_steps < 1:
        raise ValueError("mc_loads and mc_steps must be at least 1")
    space = tcl_state_space(bins, params, c_scaling=c_scaling)
    d = space.d
    counts = np.zeros(d * d, dtype=np.int64)
    for s_prev, s_next in simulate_tcl_ensemble(params, mc_loads, mc_steps, seed, bins,
                                                burn_in=burn_in):
        counts += np.bincount(s_prev * d + s_next, minlength=d * d)
    joint = counts.reshape(d, d)
    row_sums = joint.sum(axis=1)
    P = np.zeros((d, d))
    patched = []
    for j in range(d):
        if row_sums[j] == 0:
            patched.append(j)
            P[j, j] = 1.0
        else:
            P[j] = joint[j] / row_sums[j]
    if patched:
        logger.warning("TCL identification: %d states never visited, "
                       "patched with self-loops: %s", len(patched), patched)
    P /= P.sum(axis=1, keepdims=True)
    return TclIdentification(ConstantFamily(P, space), joint, patched)


def tcl_state_transform(theta, m, theta_min: float, theta_max: float):
    """Fold the cooling half-cycle so both modes sweep the dead-band upward."""
    theta = np.asarray(theta, dtype=float)
    m = np.asarray(m)
    out = np.where(m == 0, theta, theta_min + theta_max - theta)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# serialization

def family_to_config(family: TransitionFamily) -> dict:
    """Recipe dict sufficient to rebuild the family bit-for-bit."""
    if isinstance(family, PoolFamily):
        return {
            "kind": "pool",
            "n_phases": family.n_phases,
            "laziness": family.laziness,
            "duty_cycle_hours": 24.0 * family.on_fraction,
            "tilt_gain": family.tilt_gain,
            "rated_kw": family.state_space.rated_kw,
        }
    if isinstance(family, BlendFamily):
        return {
            "kind": "blend",
            "weights": family.weights.tolist(),
            "components": [family_to_config(f) for f in family.families],
        }
    raise TypeError(f"cannot serialize family of type {type(family).__name__}")


def family_from_config(cfg: dict) -> TransitionFamily:
    kind = cfg.get("kind")
    if kind == "pool":
        return build_pool_model(
            int(cfg["n_phases"]), float(cfg["laziness"]),
            nominal_on_fraction=float(cfg.get("duty_cycle_hours", 12.0)) / 24.0,
            tilt_gain=float(cfg.get("tilt_gain", 2.5)),
            rated_kw=float(cfg.get("rated_kw", 1.0)))
    if kind == "tcl":
        params = TclParams(**cfg.get("params", {}))
        ident = build_tcl_model(params, bins=int(cfg.get("bins", 40)),
                                mc_loads=int(cfg.get("mc_loads", 10_000)),
                                mc_steps=int(cfg.get("mc_steps", 3600)),
                                seed=int(cfg.get("seed", 0)),
                                c_scaling=float(cfg.get("c_scaling", 1.0)))
        return ident.family
    if kind == "blend":
        parts = [family_from_config(c) for c in cfg["components"]]
        return blend_families(parts, cfg["weights"])
    raise ValueError(f"unknown model kind: {kind!r}")


def save_model_config(path, cfg: dict) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def matrix_to_csv(path, M, labels) -> None:
    """Row-major CSV export with state labels as the header."""
    M = np.asarray(M)
    with open(path, "w") as fh:
        fh.write(",".join(labels) + "\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
