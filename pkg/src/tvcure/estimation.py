"""Model fitting: conditional Newton-Raphson blocks, fixed-point penalty
selection and the global alternation, plus fit statistics and credible bands.

The regression block and the baseline block are each maximized by Newton
steps built on the expected-information precision, with step-halving so the
penalized log-likelihood never decreases along accepted steps.  Penalty
parameters are refreshed between Newton solves by the fixed-point
substitution derived from the Laplace approximation to their marginal
posterior; the two blocks alternate until the penalized log-likelihood
stabilizes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import DataError, ModelSpec, PersonPeriodTable, build_bases, build_design
from .model import (
    BaselineState,
    DerivativeBundle,
    LikelihoodData,
    PenaltyModel,
    PenaltyState,
    RegressionState,
    baseline,
    build_penalty_model,
    data_precision_zeta,
    derivatives_phi,
    derivatives_zeta,
    inv_psd,
    loglik,
    penalized_loglik,
    penalty_quadratic,
    poisson_deviance,
    poisson_means,
    solve_psd,
)
from .splines import CenteredBasis, SplineBasis, build_basis, build_penalty

BAND_Z = 1.959963984540054  # two-sided 95% normal quantile


@dataclass(frozen=True)
class FitConfig:
    """Tolerances, iteration caps and switches for the fitting loops."""

    score_tol: float = 1e-4  # sup-norm of the penalized score
    penalty_rel_tol: float = 1e-3  # relative change of penalty parameters
    outer_rel_tol: float = 1e-4  # relative change of the penalized loglik
    max_newton_iter: int = 50
    max_fixed_point_iter: int = 50
    max_cycle_iter: int = 25  # Newton/fixed-point alternations per block
    max_outer_iter: int = 25  # block alternations
    step_halving_max: int = 10
    initial_penalty: float = 100.0
    select_penalties: bool = True  # fixed penalties when False
    penalty_gamma_prior: bool = False  # add the Gamma(1, 1e-4) prior terms
    penalty_floor: float = 1e-10
    penalty_ceiling: float = 1e10
    band_grid_size: int = 101

    def __post_init__(self):
        if min(self.score_tol, self.penalty_rel_tol, self.outer_rel_tol) <= 0:
            raise ValueError("tolerances must be positive")
        caps = (
            self.max_newton_iter,
            self.max_fixed_point_iter,
            self.max_cycle_iter,
            self.max_outer_iter,
            self.step_halving_max,
        )
        if min(caps) < 1:
            raise ValueError("iteration caps must be >= 1")


class ConvergenceError(RuntimeError):
    """Raised when an estimation loop exhausts its budget; carries the last
    iterate for post-mortem reporting."""

    def __init__(self, message: str, stage: str, score_norm: float, iterations: int,
                 diagnostics: dict | None = None):
        super().__init__(message)
        self.stage = stage
        self.score_norm = score_norm
        self.iterations = iterations
        self.diagnostics = diagnostics or {}


def _sup_norm(values: np.ndarray) -> float:
    return float(np.max(np.abs(values))) if values.size else 0.0


def _aitken_candidate(previous_step, step):
    """Extrapolation increment for a linearly contracting step sequence.

    The expected-information iteration approaches the optimum geometrically;
    when two consecutive steps are roughly parallel, jumping by the implied
    remaining sum ``rho / (1 - rho) * step`` collapses the creep phase.
    Returns None when the contraction estimate is unusable.
    """
    if previous_step is None or step is None:
        return None
    denominator = float(previous_step @ previous_step)
    if denominator <= 0.0:
        return None
    rho = float(previous_step @ step) / denominator
    # negative ratios arise from oscillating convergence and extrapolate
    # just as well (the increment then points backwards)
    if not 0.2 < abs(rho) < 0.995:
        return None
    return (rho / (1.0 - rho)) * step


def _step_halving(objective, score_of, current_value, current_score, direction_apply, limit):
    """Backtrack along the scoring direction.

    A step is accepted when the objective clearly improves, or, within the
    numerical resolution band of the objective, when the score norm shrinks;
    the latter keeps the expected-information iteration contracting where it
    would otherwise orbit the optimum.  Returns the accepted point, its
    objective value and its score payload, or Nones when every trial fails.
    """
    step = 1.0
    noise_band = 1e-10 * (abs(current_value) + 1.0)
    for _ in range(limit + 1):
        candidate = direction_apply(step)
        value = objective(candidate)
        if math.isfinite(value) and value >= current_value - noise_band:
            if value > current_value + noise_band:
                return candidate, value, None
            payload, norm = score_of(candidate)
            if norm < current_score:
                return candidate, value, payload
        step *= 0.5
    return None, None, None


def nr_zeta(
    data: LikelihoodData,
    base: BaselineState,
    state0: RegressionState,
    penalties: PenaltyState,
    pm: PenaltyModel,
    config: FitConfig,
) -> tuple[RegressionState, dict]:
    """Newton-Raphson for the stacked regression parameters, at fixed
    baseline and penalties.  Converges when the sup-norm of the penalized
    score falls below ``config.score_tol``; returns immediately when the
    start is already converged."""
    q = state0.psi.size
    state = state0

    def lp(s: RegressionState) -> float:
        return loglik(data, base, s) - 0.5 * penalty_quadratic(s, penalties, pm)

    def score_of(s: RegressionState):
        bundle = derivatives_zeta(data, base, s, penalties, pm)
        return bundle, float(np.linalg.norm(bundle.U))

    current = lp(state)
    bundle = derivatives_zeta(data, base, state, penalties, pm)
    previous_step = None
    for iteration in range(config.max_newton_iter + 1):
        score_norm = _sup_norm(bundle.U)
        if score_norm < config.score_tol:
            return state, {"iterations": iteration, "score_norm": score_norm}, bundle
        if iteration == config.max_newton_iter:
            break
        direction = solve_psd(bundle.negH, bundle.U)
        zeta = state.zeta
        accepted, value, payload = _step_halving(
            lp,
            score_of,
            current,
            float(np.linalg.norm(bundle.U)),
            lambda s: RegressionState.from_zeta(zeta + s * direction, q),
            config.step_halving_max,
        )
        if accepted is None:
            raise ConvergenceError(
                "step-halving stalled in the regression block",
                stage="zeta",
                score_norm=score_norm,
                iterations=iteration,
            )
        state, current = accepted, value
        bundle = payload if payload is not None else derivatives_zeta(
            data, base, state, penalties, pm
        )
        step_vec = state.zeta - zeta
        extrapolated = _aitken_candidate(previous_step, step_vec)
        if extrapolated is not None:
            candidate = RegressionState.from_zeta(state.zeta + extrapolated, q)
            value = lp(candidate)
            if math.isfinite(value) and value >= current - 1e-10 * (abs(current) + 1.0):
                trial = derivatives_zeta(data, base, candidate, penalties, pm)
                if np.linalg.norm(trial.U) < np.linalg.norm(bundle.U):
                    state, current, bundle = candidate, value, trial
                    step_vec = None
        previous_step = step_vec
    raise ConvergenceError(
        f"regression block did not converge in {config.max_newton_iter} iterations",
        stage="zeta",
        score_norm=score_norm,
        iterations=config.max_newton_iter,
    )


def nr_phi(
    data: LikelihoodData,
    state: RegressionState,
    base0: BaselineState,
    tau0: float,
    pm: PenaltyModel,
    config: FitConfig,
) -> tuple[BaselineState, dict]:
    """Newton-Raphson for the baseline coefficients at fixed regression
    parameters, on the reduced system with the pinned coefficient removed."""
    free = np.arange(base0.phi.size) != pm.pin_index
    base = base0

    def lp(b: BaselineState) -> float:
        return loglik(data, b, state) - 0.5 * tau0 * float(b.phi @ pm.P0 @ b.phi)

    def rebuild(phi: np.ndarray) -> BaselineState:
        return baseline(phi, base0.basis, base0.T, base0.dt, B=base0.B)

    def score_of(b: BaselineState):
        parts = derivatives_phi(data, b, state, tau0, pm)
        return parts, float(np.linalg.norm(parts[0][free]))

    current = lp(base)
    U, negH = derivatives_phi(data, base, state, tau0, pm)
    previous_step = None
    for iteration in range(config.max_newton_iter + 1):
        score_norm = _sup_norm(U[free])
        if score_norm < config.score_tol:
            return base, {"iterations": iteration, "score_norm": score_norm}, (U, negH)
        if iteration == config.max_newton_iter:
            break
        direction = solve_psd(negH[np.ix_(free, free)], U[free])
        phi = base.phi

        def apply(step, phi=phi, direction=direction):
            trial = phi.copy()
            trial[free] += step * direction
            return rebuild(trial)

        accepted, value, payload = _step_halving(
            lp,
            score_of,
            current,
            float(np.linalg.norm(U[free])),
            apply,
            config.step_halving_max,
        )
        if accepted is None:
            raise ConvergenceError(
                "step-halving stalled in the baseline block",
                stage="phi",
                score_norm=score_norm,
                iterations=iteration,
            )
        step_vec = accepted.phi[free] - phi[free]
        base, current = accepted, value
        U, negH = payload if payload is not None else derivatives_phi(
            data, base, state, tau0, pm
        )
        extrapolated = _aitken_candidate(previous_step, step_vec)
        if extrapolated is not None:
            trial_phi = base.phi.copy()
            trial_phi[free] += extrapolated
            candidate = rebuild(trial_phi)
            value = lp(candidate)
            if math.isfinite(value) and value >= current - 1e-10 * (abs(current) + 1.0):
                trial_parts = derivatives_phi(data, candidate, state, tau0, pm)
                if np.linalg.norm(trial_parts[0][free]) < np.linalg.norm(U[free]):
                    base, current = candidate, value
                    U, negH = trial_parts
                    step_vec = None
        previous_step = step_vec
    raise ConvergenceError(
        f"baseline block did not converge in {config.max_newton_iter} iterations",
        stage="phi",
        score_norm=score_norm,
        iterations=config.max_newton_iter,
    )


def _fixed_point_value(quadratic: float, trace_term: float, rank: int, config: FitConfig) -> float:
    """One penalty substitution; optionally with the Gamma-prior adjustment."""
    if config.penalty_gamma_prior:
        shape, rate = 1.0, 1e-4
        value = (shape - 1.0 + 0.5 * rank) / (rate + 0.5 * (quadratic + trace_term))
    else:
        value = rank / (quadratic + trace_term)
    return float(min(max(value, config.penalty_floor), config.penalty_ceiling))


def update_penalties(
    state: RegressionState,
    sigma: np.ndarray,
    penalties: PenaltyState,
    pm: PenaltyModel,
    config: FitConfig | None = None,
) -> PenaltyState:
    """One fixed-point substitution for every additive-term penalty, using
    the current Laplace covariance of the regression parameters."""
    config = config or FitConfig()
    lam = penalties.lam.copy()
    for j in range(lam.size):
        theta = state.psi[pm.quantum_slices[j]]
        block = sigma[pm.zeta_slice("quantum", j), pm.zeta_slice("quantum", j)]
        lam[j] = _fixed_point_value(
            float(theta @ pm.P @ theta), float(np.trace(block @ pm.P)), pm.P_rank, config
        )
    lam_tilde = penalties.lam_tilde.copy()
    for j in range(lam_tilde.size):
        theta = state.psi_tilde[pm.timing_slices[j]]
        block = sigma[pm.zeta_slice("timing", j), pm.zeta_slice("timing", j)]
        lam_tilde[j] = _fixed_point_value(
            float(theta @ pm.Pt @ theta), float(np.trace(block @ pm.Pt)), pm.Pt_rank, config
        )
    return PenaltyState(tau0=penalties.tau0, lam=lam, lam_tilde=lam_tilde)


def update_tau0(
    phi: np.ndarray,
    negH_phi: np.ndarray,
    pm: PenaltyModel,
    config: FitConfig | None = None,
) -> float:
    """One fixed-point substitution for the baseline penalty, on the
    pinned-coordinate-reduced system."""
    config = config or FitConfig()
    free = np.arange(phi.size) != pm.pin_index
    P0_red = pm.P0[np.ix_(free, free)]
    negH_red = negH_phi[np.ix_(free, free)]
    quadratic = float(phi @ pm.P0 @ phi)
    trace_term = float(np.trace(solve_psd(negH_red, P0_red)))
    return _fixed_point_value(quadratic, trace_term, pm.P0_rank, config)


def _dof_scale(penalties: PenaltyState, pm: PenaltyModel) -> np.ndarray:
    return np.concatenate([pm.P_rank / penalties.lam, pm.Pt_rank / penalties.lam_tilde])


def _dof_settled(new: np.ndarray, old: np.ndarray, tol: float) -> bool:
    """Convergence of penalty iterates on the released-degrees-of-freedom
    scale ``rank / lambda``: equivalent to a relative-change test for
    moderate penalties, and properly lenient for a penalty drifting towards
    infinity, whose fitted term no longer changes."""
    if new.size == 0:
        return True
    return bool(np.all(np.abs(new - old) <= tol * (1.0 + old)))


def _tau0_fixed_point(phi, data_part, tau0, pm, config) -> float:
    """Iterate the baseline-penalty substitution at fixed coefficients."""
    for _ in range(config.max_fixed_point_iter):
        tau0_new = update_tau0(phi, data_part + tau0 * pm.P0, pm, config)
        settled = _dof_settled(
            np.array([pm.P0_rank / tau0_new]),
            np.array([pm.P0_rank / tau0]),
            config.penalty_rel_tol,
        )
        tau0 = tau0_new
        if settled:
            break
    return tau0


def _lambda_fixed_point(data_part, state, penalties, pm, config) -> PenaltyState:
    """Iterate the term-penalty substitutions at fixed coefficients,
    refreshing the Laplace covariance after every pass."""
    q = state.psi.size
    for _ in range(config.max_fixed_point_iter):
        penalized = data_part.copy()
        penalized[:q, :q] += pm.K_lambda(penalties.lam)
        penalized[q:, q:] += pm.Kt_lambda(penalties.lam_tilde)
        sigma = inv_psd(penalized)
        updated = update_penalties(state, sigma, penalties, pm, config)
        settled = _dof_settled(
            _dof_scale(updated, pm), _dof_scale(penalties, pm), config.penalty_rel_tol
        )
        penalties = updated
        if settled:
            break
    return penalties


def _zeta_data_precision(bundle, penalties, pm, q):
    data_part = bundle.negH.copy()
    data_part[:q, :q] -= pm.K_lambda(penalties.lam)
    data_part[q:, q:] -= pm.Kt_lambda(penalties.lam_tilde)
    return data_part


def _baseline_cycle(data, state, base, tau0, pm, config):
    """Alternate Newton steps for the baseline with fixed-point updates of
    its penalty until the penalty stabilizes."""
    stats = {"newton_iterations": 0, "cycles": 0}
    if not config.select_penalties:
        base, info, _ = nr_phi(data, state, base, tau0, pm, config)
        stats["newton_iterations"] += info["iterations"]
        stats["cycles"] = 1
        return base, tau0, stats
    for cycle in range(config.max_cycle_iter):
        stats["cycles"] = cycle + 1
        base, info, (_, negH) = nr_phi(data, state, base, tau0, pm, config)
        stats["newton_iterations"] += info["iterations"]
        tau0_entry = tau0
        tau0 = _tau0_fixed_point(base.phi, negH - tau0 * pm.P0, tau0, pm, config)
        if _dof_settled(
            np.array([pm.P0_rank / tau0]),
            np.array([pm.P0_rank / tau0_entry]),
            config.penalty_rel_tol,
        ):
            break
    return base, tau0, stats


def _regression_cycle(data, base, state, penalties, pm, config):
    """Alternate Newton steps for the regression block with fixed-point
    updates of the additive-term penalties until they stabilize."""
    stats = {"newton_iterations": 0, "cycles": 0}
    if not config.select_penalties or penalties.tau.size == 0:
        state, info, _ = nr_zeta(data, base, state, penalties, pm, config)
        stats["newton_iterations"] += info["iterations"]
        stats["cycles"] = 1
        return state, penalties, stats
    for cycle in range(config.max_cycle_iter):
        stats["cycles"] = cycle + 1
        state, info, bundle = nr_zeta(data, base, state, penalties, pm, config)
        stats["newton_iterations"] += info["iterations"]
        entry_dof = _dof_scale(penalties, pm)
        data_part = _zeta_data_precision(bundle, penalties, pm, state.psi.size)
        penalties = _lambda_fixed_point(data_part, state, penalties, pm, config)
        if _dof_settled(_dof_scale(penalties, pm), entry_dof, config.penalty_rel_tol):
            break
    return state, penalties, stats


@dataclass(frozen=True)
class TermFit:
    """Fitted additive term: evaluation grid, point estimate and 95% band."""

    name: str
    submodel: str
    zeta_start: int
    zeta_stop: int
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def key(self) -> str:
        return f"{self.submodel}:{self.name}"


@dataclass(frozen=True)
class FitResult:
    """Converged parameters, Laplace covariance, baseline curves, fit
    statistics, fitted additive terms and convergence diagnostics."""

    spec: ModelSpec
    config: FitConfig
    T: int
    dt: float
    n_units: int
    n_rows: int
    quantum_names: tuple[str, ...]
    timing_names: tuple[str, ...]
    phi: np.ndarray
    psi: np.ndarray
    psi_tilde: np.ndarray
    tau0: float
    lam: np.ndarray
    lam_tilde: np.ndarray
    sigma: np.ndarray
    phi_cov_reduced: np.ndarray
    pin_index: int
    bases: dict[str, CenteredBasis]
    baseline_times: np.ndarray
    baseline_density: np.ndarray
    baseline_cumulative: np.ndarray
    baseline_survivor: np.ndarray
    terms: tuple[TermFit, ...]
    deviance: float
    edf: float
    aic: float
    diagnostics: dict

    @property
    def q(self) -> int:
        return self.psi.size

    @property
    def zeta(self) -> np.ndarray:
        return np.concatenate([self.psi, self.psi_tilde])

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    def baseline_basis(self) -> SplineBasis:
        return build_basis(0.0, self.T * self.dt, self.spec.baseline_basis_size)

    def rebuild_baseline(self) -> BaselineState:
        return baseline(self.phi, self.baseline_basis(), self.T, self.dt)

    def term(self, key: str) -> TermFit:
        for term in self.terms:
            if term.key == key:
                return term
        raise KeyError(f"no additive term {key!r} in this fit")

    def coefficients(self) -> dict[str, float]:
        names = [f"quantum:{n}" for n in self.quantum_names] + [
            f"timing:{n}" for n in self.timing_names
        ]
        return dict(zip(names, self.zeta))

    def to_dict(self) -> dict:
        """JSON-serializable snapshot that rebuilds the fit exactly."""
        return {
            "schema_version": 1,
            "kind": "tvcure-fit",
            "spec": self.spec.to_dict(),
            "config": asdict(self.config),
            "T": self.T,
            "dt": self.dt,
            "n_units": self.n_units,
            "n_rows": self.n_rows,
            "quantum_names": list(self.quantum_names),
            "timing_names": list(self.timing_names),
            "phi": self.phi.tolist(),
            "psi": self.psi.tolist(),
            "psi_tilde": self.psi_tilde.tolist(),
            "tau0": self.tau0,
            "lam": self.lam.tolist(),
            "lam_tilde": self.lam_tilde.tolist(),
            "sigma": self.sigma.tolist(),
            "phi_cov_reduced": self.phi_cov_reduced.tolist(),
            "pin_index": self.pin_index,
            "bases": {
                name: {
                    "domain_lo": basis.base.domain_lo,
                    "domain_hi": basis.base.domain_hi,
                    "n_basis": basis.base.n_basis,
                    "degree": basis.base.degree,
                    "quadrature_points": basis.quadrature_points,
                    "column_means": basis.column_means.tolist(),
                }
                for name, basis in self.bases.items()
            },
            "baseline": {
                "t": self.baseline_times.tolist(),
                "f0": self.baseline_density.tolist(),
                "F0": self.baseline_cumulative.tolist(),
                "S0": self.baseline_survivor.tolist(),
            },
            "terms": [
                {
                    "name": term.name,
                    "submodel": term.submodel,
                    "zeta_start": term.zeta_start,
                    "zeta_stop": term.zeta_stop,
                    "grid": term.grid.tolist(),
                    "estimate": term.estimate.tolist(),
                    "lower": term.lower.tolist(),
                    "upper": term.upper.tolist(),
                }
                for term in self.terms
            ],
            "deviance": self.deviance,
            "edf": self.edf,
            "aic": self.aic,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitResult":
        if doc.get("kind") != "tvcure-fit" or doc.get("schema_version") != 1:
            raise ValueError("not a recognized fit artifact")
        bases = {}
        for name, payload in doc["bases"].items():
            raw = build_basis(
                payload["domain_lo"],
                payload["domain_hi"],
                payload["n_basis"],
                payload["degree"],
            )
            bases[name] = CenteredBasis(
                base=raw,
                column_means=np.asarray(payload["column_means"], dtype=float),
                quadrature_points=payload["quadrature_points"],
            )
        terms = tuple(
            TermFit(
                name=t["name"],
                submodel=t["submodel"],
                zeta_start=t["zeta_start"],
                zeta_stop=t["zeta_stop"],
                grid=np.asarray(t["grid"], dtype=float),
                estimate=np.asarray(t["estimate"], dtype=float),
                lower=np.asarray(t["lower"], dtype=float),
                upper=np.asarray(t["upper"], dtype=float),
            )
            for t in doc["terms"]
        )
        return cls(
            spec=ModelSpec.from_dict(doc["spec"]),
            config=FitConfig(**doc["config"]),
            T=doc["T"],
            dt=doc["dt"],
            n_units=doc["n_units"],
            n_rows=doc["n_rows"],
            quantum_names=tuple(doc["quantum_names"]),
            timing_names=tuple(doc["timing_names"]),
            phi=np.asarray(doc["phi"], dtype=float),
            psi=np.asarray(doc["psi"], dtype=float),
            psi_tilde=np.asarray(doc["psi_tilde"], dtype=float),
            tau0=doc["tau0"],
            lam=np.asarray(doc["lam"], dtype=float),
            lam_tilde=np.asarray(doc["lam_tilde"], dtype=float),
            sigma=np.asarray(doc["sigma"], dtype=float),
            phi_cov_reduced=np.asarray(doc["phi_cov_reduced"], dtype=float),
            pin_index=doc["pin_index"],
            bases=bases,
            baseline_times=np.asarray(doc["baseline"]["t"], dtype=float),
            baseline_density=np.asarray(doc["baseline"]["f0"], dtype=float),
            baseline_cumulative=np.asarray(doc["baseline"]["F0"], dtype=float),
            baseline_survivor=np.asarray(doc["baseline"]["S0"], dtype=float),
            terms=terms,
            deviance=doc["deviance"],
            edf=doc["edf"],
            aic=doc["aic"],
            diagnostics=doc["diagnostics"],
        )


def fit_statistics(
    data: LikelihoodData,
    base: BaselineState,
    state: RegressionState,
    penalties: PenaltyState,
    pm: PenaltyModel,
) -> tuple[float, float, float]:
    """Deviance, effective degrees of freedom and AIC of a converged fit.

    The EDF trace runs over the regression block only, comparing the
    penalized precision against the same block with every penalty and
    Gaussian prior removed.
    """
    mu, _, _ = poisson_means(data, base, state)
    deviance = poisson_deviance(data.d, mu)
    bundle = derivatives_zeta(data, base, state, penalties, pm)
    unpenalized = data_precision_zeta(data, base, state)
    edf = float(np.trace(solve_psd(bundle.negH, unpenalized)))
    return float(deviance), edf, float(deviance + 2.0 * edf)


def credible_bands(result: FitResult, key: str, grid: np.ndarray | None = None):
    """Pointwise 95% band of one fitted additive term on a grid.

    Returns ``(grid, estimate, lower, upper)``.
    """
    term = result.term(key)
    basis = result.bases[term.name]
    if grid is None:
        grid = term.grid
    grid = np.asarray(grid, dtype=float)
    design = basis.eval(grid)
    theta = result.zeta[term.zeta_start : term.zeta_stop]
    block = result.sigma[term.zeta_start : term.zeta_stop, term.zeta_start : term.zeta_stop]
    estimate = design @ theta
    half_width = BAND_Z * np.sqrt(np.einsum("ij,jk,ik->i", design, block, design))
    return grid, estimate, estimate - half_width, estimate + half_width


def stationarity_residuals(result: FitResult) -> dict[str, float]:
    """Derivative of the approximate log marginal posterior of each penalty
    parameter, evaluated at the fit; near zero at a joint optimum."""
    spec = result.spec
    P = build_penalty(spec.additive_basis_size, spec.penalty_order)
    P0 = build_penalty(spec.baseline_basis_size, spec.penalty_order)
    residuals: dict[str, float] = {}
    for term in result.terms:
        theta = result.zeta[term.zeta_start : term.zeta_stop]
        block = result.sigma[
            term.zeta_start : term.zeta_stop, term.zeta_start : term.zeta_stop
        ]
        lam = (
            result.lam[list(result.spec.quantum_additive).index(term.name)]
            if term.submodel == "quantum"
            else result.lam_tilde[list(result.spec.timing_additive).index(term.name)]
        )
        residuals[term.key] = 0.5 * (
            P.rank / lam - float(theta @ P.matrix @ theta) - float(np.trace(block @ P.matrix))
        )
    free = np.arange(result.phi.size) != result.pin_index
    P0_red = P0.matrix[np.ix_(free, free)]
    quadratic = float(result.phi @ P0.matrix @ result.phi)
    trace_term = float(np.trace(result.phi_cov_reduced @ P0_red))
    residuals["baseline"] = 0.5 * (P0.rank / result.tau0 - quadratic - trace_term)
    return residuals


def _fit_terms(spec, design, bases, zeta, sigma, q, grid_size):
    terms = []
    for submodel, names, slices, offset in (
        ("quantum", spec.quantum_additive, design.quantum_slices, 0),
        ("timing", spec.timing_additive, design.timing_slices, q),
    ):
        for name in names:
            sl = slices[name]
            start, stop = sl.start + offset, sl.stop + offset
            basis = bases[name]
            grid = np.linspace(basis.base.domain_lo, basis.base.domain_hi, grid_size)
            dm = basis.eval(grid)
            theta = zeta[start:stop]
            block = sigma[start:stop, start:stop]
            estimate = dm @ theta
            half = BAND_Z * np.sqrt(np.einsum("ij,jk,ik->i", dm, block, dm))
            terms.append(
                TermFit(
                    name=name,
                    submodel=submodel,
                    zeta_start=start,
                    zeta_stop=stop,
                    grid=grid,
                    estimate=estimate,
                    lower=estimate - half,
                    upper=estimate + half,
                )
            )
    return tuple(terms)


def fit(
    table: PersonPeriodTable,
    spec: ModelSpec,
    config: FitConfig | None = None,
    penalties0: PenaltyState | None = None,
) -> FitResult:
    """Fit the cure model to a person-period table.

    Alternates baseline-block estimation (with its penalty selected by the
    fixed-point rule) and regression-block estimation (with the additive-term
    penalties selected likewise) until the penalized log-likelihood is
    stable, then polishes both blocks so the final scores meet the tolerance
    simultaneously.

    Raises ``ConvergenceError`` when an inner loop exhausts its budget; the
    error carries the stage and last score norm.
    """
    config = config or FitConfig()
    spec.validate_against(table)
    bases = build_bases(table, spec)
    design = build_design(table, spec, bases)
    data = LikelihoodData.from_table(table, design)
    pm = build_penalty_model(spec, design)
    basis0 = build_basis(0.0, table.T * table.dt, spec.baseline_basis_size)

    state = RegressionState(psi=np.zeros(design.q), psi_tilde=np.zeros(design.q_tilde))
    if penalties0 is None:
        penalties = PenaltyState(
            tau0=config.initial_penalty,
            lam=np.full(spec.n_quantum_terms, config.initial_penalty),
            lam_tilde=np.full(spec.n_timing_terms, config.initial_penalty),
        )
    else:
        penalties = penalties0
    base = baseline(np.zeros(spec.baseline_basis_size), basis0, table.T, table.dt)

    diagnostics = {
        "outer_iterations": 0,
        "newton_iterations_phi": 0,
        "newton_iterations_zeta": 0,
        "converged": False,
        "polish_cycles": 0,
    }
    lp_prev = None
    for outer in range(config.max_outer_iter):
        diagnostics["outer_iterations"] = outer + 1
        base, tau0, stats_phi = _baseline_cycle(
            data, state, base, penalties.tau0, pm, config
        )
        penalties = replace(penalties, tau0=tau0)
        state, penalties, stats_zeta = _regression_cycle(
            data, base, state, penalties, pm, config
        )
        diagnostics["newton_iterations_phi"] += stats_phi["newton_iterations"]
        diagnostics["newton_iterations_zeta"] += stats_zeta["newton_iterations"]
        lp = penalized_loglik(data, base, state, penalties, pm)
        if lp_prev is not None and abs(lp - lp_prev) <= config.outer_rel_tol * (
            abs(lp_prev) + config.outer_rel_tol
        ):
            diagnostics["converged"] = True
            lp_prev = lp
            break
        lp_prev = lp
    if not diagnostics["converged"]:
        raise ConvergenceError(
            f"alternation did not stabilize in {config.max_outer_iter} sweeps",
            stage="outer",
            score_norm=float("nan"),
            iterations=config.max_outer_iter,
            diagnostics=diagnostics,
        )

    # tail consistency: polish both block scores below tolerance at one
    # final state, then verify the penalty substitutions would not move at
    # that state; re-balance and re-polish otherwise (rare)
    free = np.arange(base.phi.size) != pm.pin_index
    for tail in range(config.max_cycle_iter):
        for polish in range(200):
            U_phi, negH_phi = derivatives_phi(data, base, state, penalties.tau0, pm)
            bundle = derivatives_zeta(data, base, state, penalties, pm)
            phi_norm = _sup_norm(U_phi[free])
            zeta_norm = _sup_norm(bundle.U)
            if phi_norm < config.score_tol and zeta_norm < config.score_tol:
                break
            diagnostics["polish_cycles"] += 1
            base, _, _ = nr_phi(data, state, base, penalties.tau0, pm, config)
            state, _, _ = nr_zeta(data, base, state, penalties, pm, config)
        else:
            raise ConvergenceError(
                "blocks did not reach the joint score tolerance",
                stage="polish",
                score_norm=max(phi_norm, zeta_norm),
                iterations=200,
                diagnostics=diagnostics,
            )
        if not config.select_penalties:
            break
        tau0_new = _tau0_fixed_point(
            base.phi, negH_phi - penalties.tau0 * pm.P0, penalties.tau0, pm, config
        )
        data_part = _zeta_data_precision(bundle, penalties, pm, state.psi.size)
        rebalanced = _lambda_fixed_point(
            data_part, state, replace(penalties, tau0=tau0_new), pm, config
        )
        settled = _dof_settled(
            np.concatenate([[pm.P0_rank / rebalanced.tau0], _dof_scale(rebalanced, pm)]),
            np.concatenate([[pm.P0_rank / penalties.tau0], _dof_scale(penalties, pm)]),
            config.penalty_rel_tol,
        )
        if settled:
            break
        penalties = rebalanced
        diagnostics["tail_rebalances"] = tail + 1
    else:
        raise ConvergenceError(
            "penalty re-balance at the final state did not settle",
            stage="tail",
            score_norm=max(phi_norm, zeta_norm),
            iterations=config.max_cycle_iter,
            diagnostics=diagnostics,
        )
    diagnostics["score_norm_phi"] = phi_norm
    diagnostics["score_norm_zeta"] = zeta_norm
    diagnostics["penalized_loglik"] = penalized_loglik(data, base, state, penalties, pm)

    sigma = bundle.sigma()
    _, negH_phi = derivatives_phi(data, base, state, penalties.tau0, pm)
    phi_cov_reduced = inv_psd(negH_phi[np.ix_(free, free)])
    deviance, edf, aic = fit_statistics(data, base, state, penalties, pm)
    terms = _fit_terms(
        spec, design, bases, state.zeta, sigma, design.q, config.band_grid_size
    )
    return FitResult(
        spec=spec,
        config=config,
        T=table.T,
        dt=table.dt,
        n_units=table.n_units,
        n_rows=table.n_rows,
        quantum_names=design.quantum_names,
        timing_names=design.timing_names,
        phi=base.phi,
        psi=state.psi,
        psi_tilde=state.psi_tilde,
        tau0=penalties.tau0,
        lam=penalties.lam,
        lam_tilde=penalties.lam_tilde,
        sigma=sigma,
        phi_cov_reduced=phi_cov_reduced,
        pin_index=pm.pin_index,
        bases=bases,
        baseline_times=base.times,
        baseline_density=base.f0,
        baseline_cumulative=base.F0,
        baseline_survivor=base.S0,
        terms=terms,
        deviance=deviance,
        edf=edf,
        aic=aic,
        diagnostics=diagnostics,
    )
