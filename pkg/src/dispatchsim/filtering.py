"""Kalman filters with conditional covariances for load populations.

The population state (the empirical state histogram) and the joint state
(individual one-hot, population, per-load QoS) evolve as linear systems
whose noise covariances are known in closed form as functions of the
current estimate.  The filters here use those conditional covariances to
form the gain, which is what makes a single scalar power sample per step
informative.  A steady-state covariance, an inflation schedule for
un-modeled dynamics, and an eigenvector-truncated reduced-order observer
round out the toolbox.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .population import ObservationModel, QosSpec

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-8


def _check_simplex(v: np.ndarray, name: str, tol: float = SIMPLEX_TOL) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if abs(v.sum() - 1.0) > tol or np.any(v < -tol):
        raise ValueError(f"{name} is not on the probability simplex "
                         f"(sum {v.sum():.9f}, min {v.min():.2e})")
    return v


def _check_transpose_stochastic(A: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    err = np.abs(A.sum(axis=0) - 1.0).max()
    if err > tol:
        raise ValueError(f"columns of A must sum to 1 (max deviation {err:.3e})")
    return A


def simplex_projection(v: np.ndarray) -> np.ndarray:
    """Clip negative entries and renormalize to sum 1."""
    w = np.clip(v, 0.0, None)
    s = w.sum()
    if s <= 0.0:
        return np.full_like(w, 1.0 / w.size)
    return w / s


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


# ---------------------------------------------------------------------------
# conditional covariance formulas

def _state_noise_cov_individual(A: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    return symmetrize(np.diag(A @ phi_hat) - A @ np.diag(phi_hat) @ A.T)


def conditional_state_noise_cov(A: np.ndarray, phi_hat: np.ndarray,
                                n_loads: int) -> tuple[np.ndarray, np.ndarray]:
    """Conditional state-noise covariances given the current estimate.

    Returns ``(sigma_w, sigma_wi)`` for the population and for one
    individual; the individual covariance is exactly ``n_loads`` times the
    population one.  Both annihilate the all-ones vector, keeping the
    filtered state on the simplex hyperplane.
    """
    A = _check_transpose_stochastic(A)
    phi_hat = _check_simplex(phi_hat, "phi_hat")
    if n_loads < 1:
        raise ValueError("population size must be positive")
    sigma_wi = _state_noise_cov_individual(A, phi_hat)
    return sigma_wi / n_loads, sigma_wi


def individual_covariances(phi_hat: np.ndarray,
                           phi_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Filtered and predicted covariance of one load's one-hot state.

    A one-hot vector with mean p has covariance diag(p) - p p^T; the
    conditional law of any single load given the observations equals the
    population estimate, so that formula applies verbatim.
    """
    phi_hat = _check_simplex(phi_hat, "phi_hat")
    phi_pred = _check_simplex(phi_pred, "phi_pred")
    sig = symmetrize(np.diag(phi_hat) - np.outer(phi_hat, phi_hat))
    sig_pred = symmetrize(np.diag(phi_pred) - np.outer(phi_pred, phi_pred))
    return sig, sig_pred


def conditional_obs_variance(C: np.ndarray, sigma_i_pred: np.ndarray,
                             sigma_pred: np.ndarray, n: int, n_loads: int) -> float:
    """Variance of the n-of-N sampled power average given the observations.

    The without-replacement correction (N - n)/(N - 1) makes this vanish
    at a full census.  Estimated covariances can push the raw value
    slightly negative; it is then floored at a tiny multiple of the
    individual output variance to keep the filter update well posed.
    """
    if n_loads < 2:
        raise ValueError("population size must be at least 2")
    if not 1 <= n <= n_loads:
        raise ValueError(f"sample size {n} not in [1, {n_loads}]")
    C = np.asarray(C, dtype=float)
    raw = float(C @ (sigma_i_pred - sigma_pred) @ C) * (n_loads - n) / (n * (n_loads - 1))
    if raw >= 0.0:
        return raw
    return 1e-12 * abs(float(C @ sigma_i_pred @ C))


def steady_state_cov(P0: np.ndarray, pi0: np.ndarray, n_loads: int) -> np.ndarray:
    """Population state-noise covariance in steady state at zero signal."""
    P0 = np.asarray(P0, dtype=float)
    pi0 = _check_simplex(pi0, "pi0")
    resid = np.abs(pi0 @ P0 - pi0).max()
    if resid > 1e-6:
        raise ValueError(f"pi0 is not invariant for P0 (residual {resid:.3e})")
    return _state_noise_cov_individual(P0.T, pi0) / n_loads


def inflate_cov(sigma_star: np.ndarray, sigma_ss: np.ndarray, k_t: float) -> np.ndarray:
    """Add ``k_t`` copies of the steady-state covariance to absorb model error."""
    if k_t < 0:
        raise ValueError(f"inflation factor must be nonnegative, got {k_t}")
    for name, M in (("sigma_star", sigma_star), ("sigma_ss", sigma_ss)):
        rs = np.abs(np.asarray(M).sum(axis=1)).max()
        if rs > 1e-8:
            raise ValueError(f"{name} must have zero row sums (got {rs:.3e})")
    return np.asarray(sigma_star) + k_t * np.asarray(sigma_ss)


@dataclass(frozen=True)
class InflationSchedule:
    """Covariance inflation k_t = k + b * |qos estimate|."""

    sigma_ss: np.ndarray
    k: float
    b: float = 0.0

    def factor(self, qos_estimate: float = 0.0) -> float:
        return self.k + self.b * abs(qos_estimate)


# ---------------------------------------------------------------------------
# population filter

@dataclass
class PopulationFilterState:
    """Estimate/covariance pair with the one-step predictions kept alongside."""

    phi: np.ndarray
    cov: np.ndarray
    phi_pred: np.ndarray
    cov_pred: np.ndarray
    skipped: int = 0            # updates skipped on degenerate innovation


@dataclass(frozen=True)
class StepDetails:
    """Per-step internals exposed for traces and cross-checks."""

    innovation: float
    innovation_var: float
    sigma_v: float
    sigma_w: np.ndarray | None
    gain: np.ndarray


def init_population_filter(pi0: np.ndarray, n_loads: int) -> PopulationFilterState:
    """Stationary prior: the invariant pmf with its finite-N histogram spread."""
    pi0 = _check_simplex(pi0, "pi0")
    sig, _ = individual_covariances(pi0, pi0)
    cov = sig / n_loads
    return PopulationFilterState(phi=pi0.copy(), cov=cov, phi_pred=pi0.copy(),
                                 cov_pred=cov.copy())


def _scalar_update(x, P, C, y, sigma_v, project):
    """Joseph-form measurement update for a scalar observation row."""
    y_pred = float(C @ x)
    innovation = y - y_pred
    s = float(C @ P @ C) + sigma_v
    if s <= 0.0:
        return x, P, StepDetails(innovation, s, sigma_v, None, np.zeros_like(x)), True
    gain = (P @ C) / s
    x_new = x + gain * innovation
    IKC = np.eye(x.size) - np.outer(gain, C)
    P_new = symmetrize(IKC @ P @ IKC.T + sigma_v * np.outer(gain, gain))
    if project:
        x_new = simplex_projection(x_new)
    return x_new, P_new, StepDetails(innovation, s, sigma_v, None, gain), False


def kf_population_step(fs: PopulationFilterState, A: np.ndarray,
                       obs: ObservationModel, y_next: float, n_loads: int, *,
                       sigma_w: np.ndarray | None = None,
                       inflation: InflationSchedule | None = None,
                       sigma_v: float | None = None,
                       project: bool = True,
                       return_details: bool = False):
    """One predict/update cycle of the population filter.

    Predicts through ``A`` with the conditional state-noise covariance
    evaluated at the current estimate (or ``sigma_w`` when supplied, plus
    optional inflation), then assimilates the sampled power measurement
    ``y_next`` with the conditional observation variance.  A non-positive
    innovation variance skips the update and propagates the prediction.
    """
    A = _check_transpose_stochastic(A)
    if sigma_w is None:
        sigma_w = _state_noise_cov_individual(A, simplex_projection(fs.phi)) / n_loads
    if inflation is not None:
        sigma_w = inflate_cov(sigma_w, inflation.sigma_ss, inflation.factor())

    phi_pred = A @ fs.phi
    cov_pred = symmetrize(A @ fs.cov @ A.T + sigma_w)

    if sigma_v is None:
        proj_pred = simplex_projection(phi_pred)
        _, sigma_i_pred = individual_covariances(proj_pred, proj_pred)
        sigma_v = conditional_obs_variance(obs.C, sigma_i_pred, cov_pred,
                                           obs.n, n_loads)

    phi, cov, details, degenerate = _scalar_update(phi_pred, cov_pred, obs.C,
                                                   y_next, sigma_v, project)
    if degenerate:
        logger.warning("population filter: innovation variance %.3e <= 0, "
                       "update skipped", details.innovation_var)
        phi, cov = phi_pred.copy(), cov_pred.copy()
        if project:
            phi = simplex_projection(phi)
    out = PopulationFilterState(phi=phi, cov=cov, phi_pred=phi_pred,
                                cov_pred=cov_pred,
                                skipped=fs.skipped + int(degenerate))
    if return_details:
        return out, replace(details, sigma_w=sigma_w)
    return out


# ---------------------------------------------------------------------------
# joint individual/population/QoS filter

@dataclass
class JointFilterState:
    """Filter state for (individual one-hot; population; QoS), length 2d+1."""

    psi: np.ndarray
    cov: np.ndarray
    psi_pred: np.ndarray
    cov_pred: np.ndarray
    skipped: int = 0

    @property
    def d(self) -> int:
        return (self.psi.size - 1) // 2

    @property
    def phi_individual(self) -> np.ndarray:
        return self.psi[: self.d]

    @property
    def phi(self) -> np.ndarray:
        return self.psi[self.d: 2 * self.d]

    @property
    def qos_mean(self) -> float:
        return float(self.psi[-1])

    @property
    def qos_var(self) -> float:
        return float(self.cov[-1, -1])


def init_joint_filter(pi0: np.ndarray, n_loads: int) -> JointFilterState:
    """Prior with exchangeability-consistent blocks.

    The individual block carries the full one-hot covariance, the
    population block its 1/N multiple, and the cross block equals the
    population covariance (knowing the histogram pins down exactly that
    much of one load's state).  The QoS accumulator starts at zero with
    zero variance.
    """
    pi0 = _check_simplex(pi0, "pi0")
    d = pi0.size
    sig_i, _ = individual_covariances(pi0, pi0)
    sig = sig_i / n_loads
    psi = np.concatenate([pi0, pi0, [0.0]])
    cov = np.zeros((2 * d + 1, 2 * d + 1))
    cov[:d, :d] = sig_i
    cov[d: 2 * d, d: 2 * d] = sig
    cov[:d, d: 2 * d] = sig
    cov[d: 2 * d, :d] = sig
    return JointFilterState(psi=psi, cov=cov, psi_pred=psi.copy(),
                            cov_pred=cov.copy())


def joint_system_matrices(A: np.ndarray, qos: QosSpec, C: np.ndarray,
                          sigma_w: np.ndarray, n_loads: int):
    """Block state matrix, observation row and noise covariance of the joint model."""
    d = A.shape[0]
    m = 2 * d + 1
    A_j = np.zeros((m, m))
    A_j[:d, :d] = A
    A_j[d: 2 * d, d: 2 * d] = A
    A_j[-1, :d] = qos.ell
    A_j[-1, -1] = qos.beta
    C_j = np.zeros(m)
    C_j[d: 2 * d] = C
    Q = np.zeros((m, m))
    Q[:d, :d] = n_loads * sigma_w
    Q[d: 2 * d, d: 2 * d] = sigma_w
    Q[:d, d: 2 * d] = sigma_w
    Q[d: 2 * d, :d] = sigma_w
    return A_j, C_j, Q


def kf_joint_step(js: JointFilterState, A: np.ndarray, qos: QosSpec,
                  obs: ObservationModel, y_next: float, n_loads: int, *,
                  sigma_w: np.ndarray | None = None,
                  inflation: InflationSchedule | None = None,
                  project: bool = True,
                  return_details: bool = False):
    """One predict/update cycle of the joint individual/population/QoS filter.

    The QoS row integrates the individual block with discount ``qos.beta``
    and carries no process noise of its own.  Inflation scales with the
    current absolute QoS estimate when the schedule has ``b > 0``.
    """
    A = _check_transpose_stochastic(A)
    d = js.d
    if sigma_w is None:
        sigma_w = _state_noise_cov_individual(A, simplex_projection(js.phi)) / n_loads
    if inflation is not None:
        sigma_w = inflate_cov(sigma_w, inflation.sigma_ss,
                              inflation.factor(js.qos_mean))
    A_j, C_j, Q = joint_system_matrices(A, qos, obs.C, sigma_w, n_loads)

    psi_pred = A_j @ js.psi
    cov_pred = symmetrize(A_j @ js.cov @ A_j.T + Q)

    proj_pred = simplex_projection(psi_pred[d: 2 * d])
    _, sigma_i_pred = individual_covariances(proj_pred, proj_pred)
    sigma_v = conditional_obs_variance(obs.C, sigma_i_pred,
                                       cov_pred[d: 2 * d, d: 2 * d], obs.n, n_loads)

    psi, cov, details, degenerate = _scalar_update(psi_pred, cov_pred, C_j,
                                                   y_next, sigma_v, project=False)
    if degenerate:
        logger.warning("joint filter: innovation variance %.3e <= 0, update skipped",
                       details.innovation_var)
        psi, cov = psi_pred.copy(), cov_pred.copy()
    if project:
        psi = psi.copy()
        psi[:d] = simplex_projection(psi[:d])
        psi[d: 2 * d] = simplex_projection(psi[d: 2 * d])
    out = JointFilterState(psi=psi, cov=cov, psi_pred=psi_pred, cov_pred=cov_pred,
                           skipped=js.skipped + int(degenerate))
    if return_details:
        return out, replace(details, sigma_w=sigma_w)
    return out


# ---------------------------------------------------------------------------
# reduced-order observer

class ReducedOrderObserver:
    """Kalman observer run in the dominant eigencoordinates of A.

    The retained modes are the eigenvectors of largest eigenvalue
    magnitude, with complex pairs kept together and realified; the
    effective order grows by one when the cut would split a pair.  The
    reduced estimate maps back through the retained basis and is projected
    to the simplex for reporting.
    """

    def __init__(self, A: np.ndarray, C: np.ndarray, order: int,
                 cluster_tol: float = 1e-8):
        from .analysis import eigen_modes

        A = _check_transpose_stochastic(A)
        d = A.shape[0]
        if not 1 <= order <= d:
            raise ValueError(f"order must lie in [1, {d}], got {order}")
        modes = eigen_modes(A, order)
        V = modes.vectors
        sv = np.linalg.svd(V / np.linalg.norm(V, axis=0), compute_uv=False)
        if sv[-1] < cluster_tol:
            raise ValueError(
                "retained eigenspace is numerically defective near eigenvalues "
                f"{np.round(modes.values, 6)} (min basis singular value {sv[-1]:.2e})")
        self.A = A
        self.C = np.asarray(C, dtype=float)
        self.order = V.shape[1]
        self.V = V
        self.W = np.linalg.pinv(V)          # oblique projection onto the modes
        self.A_r = self.W @ A @ V
        self.C_r = self.C @ V
        self.z = None
        self.P = None
        self.sigma_w = None
        self.n_loads = None

    def init(self, pi0: np.ndarray, n_loads: int) -> None:
        pi0 = _check_simplex(pi0, "pi0")
        sig, _ = individual_covariances(pi0, pi0)
        self.sigma_w = self.W @ (sig / n_loads) @ self.W.T
        self.z = self.W @ pi0
        self.P = self.W @ (sig / n_loads) @ self.W.T
        self.n_loads = n_loads

    def phi_hat(self, project: bool = True) -> np.ndarray:
        phi = self.V @ self.z
        return simplex_projection(phi) if project else phi

    def step(self, obs: ObservationModel, y_next: float) -> float:
        """Predict/update in reduced coordinates; returns the innovation."""
        if self.z is None:
            raise RuntimeError("observer must be initialized before stepping")
        z_pred = self.A_r @ self.z
        P_pred = symmetrize(self.A_r @ self.P @ self.A_r.T + self.sigma_w)
        phi_pred = simplex_projection(self.V @ z_pred)
        _, sigma_i = individual_covariances(phi_pred, phi_pred)
        cov_pred_full = self.V @ P_pred @ self.V.T
        sigma_v = conditional_obs_variance(obs.C, sigma_i, cov_pred_full,
                                           obs.n, self.n_loads)
        s = float(self.C_r @ P_pred @ self.C_r) + sigma_v
        innovation = y_next - float(self.C_r @ z_pred)
        if s <= 0.0:
            self.z, self.P = z_pred, P_pred
            return innovation
        gain = (P_pred @ self.C_r) / s
        self.z = z_pred + gain * innovation
        IKC = np.eye(self.order) - np.outer(gain, self.C_r)
        self.P = symmetrize(IKC @ P_pred @ IKC.T + sigma_v * np.outer(gain, gain))
        return innovation


def reduced_order_observer(A: np.ndarray, C: np.ndarray,
                           order: int) -> ReducedOrderObserver:
    """Build the eigenvector-truncated observer of the given order."""
    return ReducedOrderObserver(A, C, order)
