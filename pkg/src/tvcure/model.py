"""Baseline density, hazards, Poisson likelihood and closed-form derivatives.

The baseline event-time density over months ``1..T`` is a softmax of a
B-spline expansion, so it is strictly positive and sums to one.  The
survivor sequence therefore hits zero exactly at the horizon; a small floor
keeps logarithms and reciprocals finite there, and derivative terms treat
floored entries as constants.

All computations are pure: identical inputs give bit-identical outputs.
Row sums are plain associative reductions and may be sharded externally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .data import DesignViews, ModelSpec, PersonPeriodTable
from .splines import SplineBasis, build_penalty

EPS_S0 = 1e-12
JITTER_SCALE = 1e-8
JITTER_TRIES = 3


class NumericalError(RuntimeError):
    """Raised when a precision matrix stays indefinite after jittering."""


def chol_psd(matrix: np.ndarray):
    """Cholesky factor with a jitter fallback.

    On failure, ``JITTER_SCALE * mean(diag)`` times the identity is added and
    the factorization retried, up to ``JITTER_TRIES`` times.
    """
    if matrix.size == 0:
        return (np.zeros((0, 0)), True)
    base = float(np.mean(np.diag(matrix)))
    jitter = JITTER_SCALE * (base if base > 0 else 1.0)
    for attempt in range(JITTER_TRIES + 1):
        try:
            bumped = matrix if attempt == 0 else matrix + (attempt * jitter) * np.eye(
                matrix.shape[0]
            )
            return cho_factor(bumped, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"matrix of size {matrix.shape[0]} not positive definite after "
        f"{JITTER_TRIES} jitter attempts"
    )


def solve_psd(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if matrix.size == 0:
        return np.zeros_like(rhs)
    return cho_solve(chol_psd(matrix), rhs)


def inv_psd(matrix: np.ndarray) -> np.ndarray:
    if matrix.size == 0:
        return matrix.copy()
    return cho_solve(chol_psd(matrix), np.eye(matrix.shape[0]))


@dataclass(frozen=True)
class BaselineState:
    """Discrete baseline distribution over months ``1..T`` derived from
    spline coefficients ``phi`` (softmax-normalized)."""

    phi: np.ndarray
    basis: SplineBasis
    T: int
    dt: float
    times: np.ndarray  # calendar evaluation points dt * (1..T)
    B: np.ndarray  # (T, K) basis values at times
    log_pi: np.ndarray
    pi: np.ndarray
    F0: np.ndarray
    S0: np.ndarray  # exact tail sums, S0[T-1] == 0
    S0_floored: np.ndarray
    log_S0: np.ndarray  # log of the floored survivor
    at_floor: np.ndarray  # bool mask where the floor is active

    @property
    def f0(self) -> np.ndarray:
        return self.pi / self.dt


def baseline(
    phi: np.ndarray,
    basis: SplineBasis,
    T: int,
    dt: float = 1.0,
    B: np.ndarray | None = None,
) -> BaselineState:
    """Baseline state for given spline coefficients.

    ``pi[t-1] = exp(B[t] @ phi) / sum_s exp(B[s] @ phi)`` with log-sum-exp
    stabilization; the survivor sequence is computed by exact tail summation
    so that positivity is preserved and ``S0(T) == 0`` exactly.  ``B`` may
    carry precomputed basis values at the month grid to avoid re-evaluation.
    """
    phi = np.asarray(phi, dtype=float)
    times = dt * np.arange(1, T + 1, dtype=float)
    if B is None:
        B = basis.eval(times)
    logits = B @ phi
    log_pi = logits - logsumexp(logits)
    pi = np.exp(log_pi)
    F0 = np.cumsum(pi)
    tail = np.cumsum(pi[::-1])[::-1]  # tail[t] = sum_{s >= t} pi_s
    S0 = np.concatenate([tail[1:], [0.0]])
    at_floor = S0 <= EPS_S0
    S0_floored = np.where(at_floor, EPS_S0, S0)
    return BaselineState(
        phi=phi,
        basis=basis,
        T=int(T),
        dt=float(dt),
        times=times,
        B=B,
        log_pi=log_pi,
        pi=pi,
        F0=F0,
        S0=S0,
        S0_floored=S0_floored,
        log_S0=np.log(S0_floored),
        at_floor=at_floor,
    )


@dataclass(frozen=True)
class LikelihoodData:
    """Design matrices and outcomes aligned on person-period rows.

    When every unit keeps the same design row over its whole follow-up (no
    time-varying covariates in the data at hand), the unique rows and the
    row-to-unit map are stored as well; row reductions then regroup by unit,
    which changes nothing but the summation order.
    """

    X: np.ndarray
    X_tilde: np.ndarray
    d: np.ndarray
    tidx: np.ndarray  # 0-based month index per row
    dt: float
    unit_index: np.ndarray | None = None
    X_unit: np.ndarray | None = None
    Xt_unit: np.ndarray | None = None

    @classmethod
    def from_table(cls, table: PersonPeriodTable, design: DesignViews) -> "LikelihoodData":
        unit_index = X_unit = Xt_unit = None
        counts = np.bincount(table.unit_index, minlength=table.n_units)
        first_rows = np.concatenate([[0], np.cumsum(counts)[:-1]])
        candidate_X = design.X[first_rows]
        candidate_Xt = design.X_tilde[first_rows]
        if np.array_equal(design.X, candidate_X[table.unit_index]) and np.array_equal(
            design.X_tilde, candidate_Xt[table.unit_index]
        ):
            unit_index = table.unit_index.astype(np.intp)
            X_unit = candidate_X
            Xt_unit = candidate_Xt
        return cls(
            X=design.X,
            X_tilde=design.X_tilde,
            d=table.event.astype(float),
            tidx=(table.month - 1).astype(np.intp),
            dt=table.dt,
            unit_index=unit_index,
            X_unit=X_unit,
            Xt_unit=Xt_unit,
        )

    @property
    def n_rows(self) -> int:
        return self.d.size

    @property
    def grouped(self) -> bool:
        return self.unit_index is not None


@dataclass(frozen=True)
class RegressionState:
    """Stacked regression coefficients for the two submodels."""

    psi: np.ndarray
    psi_tilde: np.ndarray

    @property
    def zeta(self) -> np.ndarray:
        return np.concatenate([self.psi, self.psi_tilde])

    @classmethod
    def from_zeta(cls, zeta: np.ndarray, q: int) -> "RegressionState":
        return cls(psi=zeta[:q].copy(), psi_tilde=zeta[q:].copy())


@dataclass(frozen=True)
class PenaltyState:
    """Positive penalty parameters: baseline roughness plus one multiplier
    per additive term in each submodel."""

    tau0: float
    lam: np.ndarray
    lam_tilde: np.ndarray

    gamma_prior_shape: float = 1.0
    gamma_prior_rate: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "lam", np.atleast_1d(np.asarray(self.lam, dtype=float)))
        object.__setattr__(
            self, "lam_tilde", np.atleast_1d(np.asarray(self.lam_tilde, dtype=float))
        )
        if self.tau0 <= 0 or np.any(self.lam <= 0) or np.any(self.lam_tilde <= 0):
            raise ValueError("penalty parameters must be strictly positive")

    @property
    def tau(self) -> np.ndarray:
        return np.concatenate([self.lam, self.lam_tilde])


@dataclass(frozen=True)
class PenaltyModel:
    """Prior precision structure: Gaussian pieces for the linear
    coefficients, difference penalties for every spline block."""

    b: np.ndarray  # prior mean for psi (spline part zero)
    g: np.ndarray  # prior mean for psi_tilde
    Q: np.ndarray  # (1+p, 1+p) prior precision of the quantum linear part
    Qt: np.ndarray  # (pt, pt) prior precision of the timing linear part
    P: np.ndarray  # (L, L) quantum-term roughness penalty
    P_rank: int
    Pt: np.ndarray
    Pt_rank: int
    P0: np.ndarray  # (K, K) baseline roughness penalty
    P0_rank: int
    pin_index: int  # baseline coefficient pinned to zero
    quantum_slices: tuple[slice, ...]  # per-term slices into psi
    timing_slices: tuple[slice, ...]  # per-term slices into psi_tilde
    q: int
    q_tilde: int

    @property
    def n_linear_quantum(self) -> int:
        return self.Q.shape[0]

    @property
    def n_linear_timing(self) -> int:
        return self.Qt.shape[0]

    def zeta_slice(self, submodel: str, index: int) -> slice:
        """Slice of an additive term's coefficients within the stacked zeta."""
        if submodel == "quantum":
            return self.quantum_slices[index]
        sl = self.timing_slices[index]
        return slice(self.q + sl.start, self.q + sl.stop)

    def K_lambda(self, lam: np.ndarray) -> np.ndarray:
        K = np.zeros((self.q, self.q))
        m = self.n_linear_quantum
        K[:m, :m] = self.Q
        for j, sl in enumerate(self.quantum_slices):
            K[sl, sl] = lam[j] * self.P
        return K

    def Kt_lambda(self, lam_tilde: np.ndarray) -> np.ndarray:
        K = np.zeros((self.q_tilde, self.q_tilde))
        m = self.n_linear_timing
        K[:m, :m] = self.Qt
        for j, sl in enumerate(self.timing_slices):
            K[sl, sl] = lam_tilde[j] * self.Pt
        return K


def build_penalty_model(spec: ModelSpec, design: DesignViews) -> PenaltyModel:
    L = spec.additive_basis_size
    K = spec.baseline_basis_size
    P = build_penalty(L, spec.penalty_order)
    P0 = build_penalty(K, spec.penalty_order)
    m_q = 1 + spec.p
    m_t = spec.p_tilde
    b = np.zeros(design.q)
    if spec.quantum_prior_mean is not None:
        mean = np.asarray(spec.quantum_prior_mean, dtype=float)
        if mean.size != m_q:
            raise ValueError(
                f"quantum prior mean must have length {m_q}, got {mean.size}"
            )
        b[:m_q] = mean
    g = np.zeros(design.q_tilde)
    if spec.timing_prior_mean is not None:
        mean = np.asarray(spec.timing_prior_mean, dtype=float)
        if mean.size != m_t:
            raise ValueError(f"timing prior mean must have length {m_t}, got {mean.size}")
        g[:m_t] = mean
    quantum_slices = tuple(design.quantum_slices[name] for name in spec.quantum_additive)
    timing_slices = tuple(design.timing_slices[name] for name in spec.timing_additive)
    return PenaltyModel(
        b=b,
        g=g,
        Q=spec.quantum_prior_precision * np.eye(m_q),
        Qt=spec.timing_prior_precision * np.eye(m_t),
        P=P.matrix,
        P_rank=P.rank,
        Pt=P.matrix.copy(),
        Pt_rank=P.rank,
        P0=P0.matrix,
        P0_rank=P0.rank,
        pin_index=K // 2,
        quantum_slices=quantum_slices,
        timing_slices=timing_slices,
        q=design.q,
        q_tilde=design.q_tilde,
    )


def linear_predictors(data: LikelihoodData, state: RegressionState):
    if data.grouped:
        eta_q = (data.X_unit @ state.psi)[data.unit_index]
        eta_t = (
            (data.Xt_unit @ state.psi_tilde)[data.unit_index]
            if data.X_tilde.shape[1]
            else np.zeros(data.n_rows)
        )
        return eta_q, eta_t
    eta_q = data.X @ state.psi
    eta_t = data.X_tilde @ state.psi_tilde if data.X_tilde.shape[1] else np.zeros(data.n_rows)
    return eta_q, eta_t


def poisson_means(data: LikelihoodData, base: BaselineState, state: RegressionState):
    """Per-row Poisson mean ``mu``, timing multiplier ``kappa = exp(eta_F)``
    and the timing score weight ``1 + kappa * log S0``.

    Everything is computed on the log scale and exponentiated once.
    """
    eta_q, eta_t = linear_predictors(data, state)
    log_s0 = base.log_S0[data.tidx]
    with np.errstate(over="ignore"):
        kappa = np.exp(eta_t)
        log_mu = eta_q + eta_t + base.log_pi[data.tidx] + (kappa - 1.0) * log_s0
        mu = np.exp(log_mu)
    weight = 1.0 + kappa * log_s0
    return mu, kappa, weight


def hazard(data: LikelihoodData, base: BaselineState, state: RegressionState) -> np.ndarray:
    """Population hazard per person-period row (Poisson mean over ``dt``)."""
    mu, _, _ = poisson_means(data, base, state)
    return mu / data.dt


def poisson_loglik(d: np.ndarray, mu: np.ndarray) -> float:
    """Poisson log-likelihood ``sum(-mu) + sum(d * log mu)`` for 0/1 counts."""
    events = d > 0
    with np.errstate(divide="ignore"):
        return float(-np.sum(mu) + np.sum(np.log(mu[events])))


def poisson_deviance(d: np.ndarray, mu: np.ndarray) -> float:
    """Poisson deviance ``2 sum(d log(d/mu) - (d - mu))`` with 0 log 0 = 0."""
    events = d > 0
    with np.errstate(divide="ignore"):
        saturated = float(np.sum(np.log(d[events] / mu[events]) * d[events]))
    return 2.0 * (saturated - float(np.sum(d - mu)))


def loglik(data: LikelihoodData, base: BaselineState, state: RegressionState) -> float:
    mu, _, _ = poisson_means(data, base, state)
    return poisson_loglik(data.d, mu)


def penalty_quadratic(
    state: RegressionState, penalties: PenaltyState, pm: PenaltyModel
) -> float:
    """The two Gaussian-prior quadratic forms of the regression blocks."""
    dev_q = state.psi - pm.b
    dev_t = state.psi_tilde - pm.g
    total = float(dev_q @ pm.K_lambda(penalties.lam) @ dev_q)
    if dev_t.size:
        total += float(dev_t @ pm.Kt_lambda(penalties.lam_tilde) @ dev_t)
    return total


def penalized_loglik(
    data: LikelihoodData,
    base: BaselineState,
    state: RegressionState,
    penalties: PenaltyState,
    pm: PenaltyModel,
) -> float:
    phi_term = penalties.tau0 * float(base.phi @ pm.P0 @ base.phi)
    return loglik(data, base, state) - 0.5 * (
        phi_term + penalty_quadratic(state, penalties, pm)
    )


def _baseline_basis_parts(base: BaselineState):
    """Month-level pieces of the ``log h`` derivative w.r.t. the baseline
    coefficients: the mean-centered basis and the survivor-derivative.

    The latter is formed from tail sums so it stays bounded near the
    horizon; months where the survivor floor is active are treated as
    constants (zero derivative).
    """
    b_centered = base.B - base.pi @ base.B  # (T, K)
    weighted = base.pi[:, None] * b_centered
    rev = np.cumsum(weighted[::-1], axis=0)[::-1]  # rev[t] = sum_{s >= t}
    tails = np.vstack([rev[1:], np.zeros((1, base.B.shape[1]))])
    dlog_s0 = tails / base.S0_floored[:, None]
    dlog_s0[base.at_floor] = 0.0
    return b_centered, dlog_s0


def derivatives_phi(
    data: LikelihoodData,
    base: BaselineState,
    state: RegressionState,
    tau0: float,
    pm: PenaltyModel,
):
    """Score and expected-information precision for the baseline coefficients
    (full coordinates; the pinned one is reduced away by the optimizer).

    The per-row derivative of ``log h`` is ``bc[t] + (kappa - 1) ds[t]`` with
    month-level matrices ``bc`` and ``ds``, so the row sums regroup by month
    into a handful of T-vector reductions.
    """
    mu, kappa, _ = poisson_means(data, base, state)
    bc, ds = _baseline_basis_parts(base)
    resid = data.d - mu
    a = kappa - 1.0
    T = base.T
    r0 = np.bincount(data.tidx, weights=resid, minlength=T)
    r1 = np.bincount(data.tidx, weights=resid * a, minlength=T)
    m0 = np.bincount(data.tidx, weights=mu, minlength=T)
    m1 = np.bincount(data.tidx, weights=mu * a, minlength=T)
    m2 = np.bincount(data.tidx, weights=mu * a * a, minlength=T)
    U = bc.T @ r0 + ds.T @ r1 - tau0 * (pm.P0 @ base.phi)
    mixed = (bc * m1[:, None]).T @ ds
    negH = (
        (bc * m0[:, None]).T @ bc
        + mixed
        + mixed.T
        + (ds * m2[:, None]).T @ ds
        + tau0 * pm.P0
    )
    return U, 0.5 * (negH + negH.T)


@dataclass
class DerivativeBundle:
    """Scores and precision blocks of the stacked regression parameters."""

    U_psi: np.ndarray
    U_psi_tilde: np.ndarray
    negH_psi: np.ndarray
    negH_psi_tilde: np.ndarray
    negH_cross: np.ndarray  # -H^{psi, psi_tilde}
    _sigma: np.ndarray | None = field(default=None, repr=False)

    @property
    def U(self) -> np.ndarray:
        return np.concatenate([self.U_psi, self.U_psi_tilde])

    @property
    def negH(self) -> np.ndarray:
        top = np.hstack([self.negH_psi, self.negH_cross])
        bottom = np.hstack([self.negH_cross.T, self.negH_psi_tilde])
        return np.vstack([top, bottom])

    def sigma(self) -> np.ndarray:
        """Laplace covariance: inverse of the assembled precision."""
        if self._sigma is None:
            self._sigma = inv_psd(self.negH)
        return self._sigma


def _zeta_parts(data: LikelihoodData, base: BaselineState, state: RegressionState):
    mu, _, weight = poisson_means(data, base, state)
    resid = data.d - mu
    if data.grouped:
        # design rows are constant within unit: collapse the row sums to one
        # weighted gram over the unique rows
        n_units = data.X_unit.shape[0]
        sums = {
            "r": np.bincount(data.unit_index, weights=resid, minlength=n_units),
            "rw": np.bincount(data.unit_index, weights=resid * weight, minlength=n_units),
            "m": np.bincount(data.unit_index, weights=mu, minlength=n_units),
            "mw": np.bincount(data.unit_index, weights=mu * weight, minlength=n_units),
            "mww": np.bincount(
                data.unit_index, weights=mu * weight * weight, minlength=n_units
            ),
        }
        U_psi = data.X_unit.T @ sums["r"]
        U_psi_tilde = data.Xt_unit.T @ sums["rw"]
        negH_psi = (data.X_unit * sums["m"][:, None]).T @ data.X_unit
        negH_psi_tilde = (data.Xt_unit * sums["mww"][:, None]).T @ data.Xt_unit
        negH_cross = (data.X_unit * sums["mw"][:, None]).T @ data.Xt_unit
        return U_psi, U_psi_tilde, negH_psi, negH_psi_tilde, negH_cross
    Xmu = data.X * mu[:, None]
    Xt_w = data.X_tilde * weight[:, None]
    negH_psi = data.X.T @ Xmu
    negH_psi_tilde = (Xt_w * mu[:, None]).T @ Xt_w
    negH_cross = Xmu.T @ Xt_w
    U_psi = data.X.T @ resid
    U_psi_tilde = Xt_w.T @ resid
    return U_psi, U_psi_tilde, negH_psi, negH_psi_tilde, negH_cross


def derivatives_zeta(
    data: LikelihoodData,
    base: BaselineState,
    state: RegressionState,
    penalties: PenaltyState,
    pm: PenaltyModel,
) -> DerivativeBundle:
    """Penalized score and precision blocks for the regression parameters."""
    U_psi, U_psi_tilde, negH_psi, negH_psi_tilde, negH_cross = _zeta_parts(
        data, base, state
    )
    K = pm.K_lambda(penalties.lam)
    Kt = pm.Kt_lambda(penalties.lam_tilde)
    U_psi = U_psi - K @ (state.psi - pm.b)
    if state.psi_tilde.size:
        U_psi_tilde = U_psi_tilde - Kt @ (state.psi_tilde - pm.g)
    negH_psi = negH_psi + K
    negH_psi_tilde = negH_psi_tilde + Kt
    return DerivativeBundle(
        U_psi=U_psi,
        U_psi_tilde=U_psi_tilde,
        negH_psi=0.5 * (negH_psi + negH_psi.T),
        negH_psi_tilde=0.5 * (negH_psi_tilde + negH_psi_tilde.T),
        negH_cross=negH_cross,
    )


def data_precision_zeta(
    data: LikelihoodData, base: BaselineState, state: RegressionState
) -> np.ndarray:
    """Expected information of zeta with every penalty and prior removed."""
    _, _, negH_psi, negH_psi_tilde, negH_cross = _zeta_parts(data, base, state)
    top = np.hstack([negH_psi, negH_cross])
    bottom = np.hstack([negH_cross.T, negH_psi_tilde])
    full = np.vstack([top, bottom])
    return 0.5 * (full + full.T)


def survival_path(base: BaselineState, eta_quantum: np.ndarray, eta_timing: np.ndarray):
    """Population curves for one covariate path over months ``1..T_pred``.

    The month-``t`` hazard mass is the exact increment of the conditional
    event-time distribution under that month's covariate values,
    ``exp(eta_quantum) * (S0(t-1)^kappa - S0(t)^kappa)``, so for constant
    covariates the accumulated hazard telescopes to the closed form
    ``exp(eta_quantum) * (1 - S0(t)^kappa)``.

    Returns ``(hazard, cumulative_hazard, survival, event_probability)``.
    """
    eta_quantum = np.asarray(eta_quantum, dtype=float)
    eta_timing = np.asarray(eta_timing, dtype=float)
    horizon = eta_quantum.size
    if eta_timing.size != horizon:
        raise ValueError("predictor sequences must have equal length")
    if horizon > base.T:
        raise ValueError(
            f"path horizon {horizon} exceeds the fitted baseline horizon {base.T}"
        )
    kappa = np.exp(eta_timing)
    s_prev = np.concatenate([[1.0], base.S0[: horizon - 1]])
    s_curr = base.S0[:horizon]
    increments = np.exp(eta_quantum) * (s_prev**kappa - s_curr**kappa)
    cumulative = np.cumsum(increments)
    survival = np.exp(-cumulative)
    return increments / base.dt, cumulative, survival, 1.0 - survival
