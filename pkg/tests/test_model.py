import numpy as np
import pytest

from tvcure.data import ModelSpec, SurvivalRecord, build_bases, build_design, expand
from tvcure.model import (
    EPS_S0,
    LikelihoodData,
    NumericalError,
    PenaltyState,
    RegressionState,
    baseline,
    build_penalty_model,
    chol_psd,
    data_precision_zeta,
    derivatives_phi,
    derivatives_zeta,
    hazard,
    inv_psd,
    loglik,
    penalized_loglik,
    poisson_loglik,
    poisson_means,
    survival_path,
)
from tvcure.splines import build_basis


def random_fixture(seed, n=20, T=30, with_linear=True):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        followup = int(rng.integers(1, T + 1))
        covs = {
            "x1": rng.uniform(0.0, 1.5, size=followup),
            "x2": rng.uniform(0.0, 1.0, size=followup),
        }
        if with_linear:
            covs["z"] = rng.normal(size=followup)
            covs["zt"] = rng.normal(size=followup)
        records.append(
            SurvivalRecord(str(i), followup, int(rng.integers(0, 2)), covs)
        )
    # anchor the additive domains so every fixture spans the full range
    anchor = {
        "x1": np.array([0.0, 1.5]),
        "x2": np.array([0.0, 1.0]),
    }
    if with_linear:
        anchor["z"] = np.zeros(2)
        anchor["zt"] = np.zeros(2)
    records.append(SurvivalRecord("anchor", 2, 0, anchor))
    table = expand(records)
    spec = ModelSpec(
        quantum_linear=("z",) if with_linear else (),
        quantum_additive=("x1",),
        timing_linear=("zt",) if with_linear else (),
        timing_additive=("x2",),
        additive_basis_size=6,
        baseline_basis_size=10,
    )
    bases = build_bases(table, spec)
    design = build_design(table, spec, bases)
    data = LikelihoodData.from_table(table, design)
    pm = build_penalty_model(spec, design)
    basis0 = build_basis(0.0, float(table.T), spec.baseline_basis_size)

    phi = rng.normal(scale=0.4, size=spec.baseline_basis_size)
    phi[pm.pin_index] = 0.0
    state = RegressionState(
        psi=rng.normal(scale=0.3, size=design.q),
        psi_tilde=rng.normal(scale=0.2, size=design.q_tilde),
    )
    penalties = PenaltyState(tau0=3.0, lam=np.array([2.0]), lam_tilde=np.array([1.5]))
    base = baseline(phi, basis0, table.T, table.dt)
    return data, base, state, penalties, pm, basis0, table


def fd_gradient(fun, x, step=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        bump = np.zeros_like(x)
        bump[i] = step
        grad[i] = (fun(x + bump) - fun(x - bump)) / (2.0 * step)
    return grad


def max_rel_err(analytic, numeric, floor=1e-3):
    return np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor))


# ---------------------------------------------------------------- baseline


def test_baseline_uniform_for_zero_coefficients():
    basis0 = build_basis(0.0, 40.0, 10)
    base = baseline(np.zeros(10), basis0, 40)
    assert np.allclose(base.pi, 1.0 / 40.0, atol=1e-15)


def test_baseline_total_mass_is_one():
    rng = np.random.default_rng(10)
    basis0 = build_basis(0.0, 50.0, 12)
    for _ in range(5):
        base = baseline(rng.normal(size=12), basis0, 50)
        assert abs(base.F0[-1] - 1.0) < 1e-12
        assert abs(base.pi.sum() - 1.0) < 1e-12
        assert base.S0[-1] == 0.0
        assert np.all(base.pi > 0)
        assert np.all((base.S0[:-1] > 0) & (base.S0[:-1] < 1))


def test_baseline_matches_naive_softmax_oracle():
    rng = np.random.default_rng(11)
    basis0 = build_basis(0.0, 50.0, 10)
    phi = rng.normal(size=10)
    base = baseline(phi, basis0, 50)
    logits = basis0.eval(np.arange(1.0, 51.0)) @ phi
    raw = np.exp(logits)
    assert np.max(np.abs(base.pi - raw / raw.sum())) < 1e-12


# ---------------------------------------------------------------- hazard


def test_reference_hazard_is_scaled_baseline_density():
    data, base, state, penalties, pm, _, _ = random_fixture(12, with_linear=False)
    beta0 = 0.37
    psi = np.zeros_like(state.psi)
    psi[0] = beta0
    ref = RegressionState(psi=psi, psi_tilde=np.zeros_like(state.psi_tilde))
    h = hazard(data, base, ref)
    expected = np.exp(beta0) * base.pi[data.tidx] / data.dt
    assert np.max(np.abs(h - expected)) < 1e-14


def test_hazard_matches_scalar_reevaluation_oracle():
    data, base, state, penalties, pm, basis0, table = random_fixture(13)
    h = hazard(data, base, state)

    # independent scalar path: naive softmax, partial sums, plain formula
    logits = [
        float(basis0.eval(float(t)) @ base.phi) for t in range(1, table.T + 1)
    ]
    weights = [np.exp(v) for v in logits]
    total = sum(weights)
    pi = [w / total for w in weights]
    for row in np.random.default_rng(14).choice(data.n_rows, size=25, replace=False):
        t = int(data.tidx[row]) + 1
        eta_q = float(data.X[row] @ state.psi)
        eta_t = float(data.X_tilde[row] @ state.psi_tilde)
        s0 = max(1.0 - sum(pi[:t]), EPS_S0)
        expected = (
            np.exp(eta_q + eta_t) * pi[t - 1] * s0 ** (np.exp(eta_t) - 1.0) / data.dt
        )
        assert abs(h[row] - expected) <= 1e-12 * max(1.0, abs(expected))


def test_proportional_hazards_ratio_is_constant_over_time():
    _, base, _, _, _, _, _ = random_fixture(15, with_linear=False)
    T = base.T
    tidx = np.arange(T, dtype=np.intp)
    X = np.ones((T, 1))
    Xt = np.full((T, 1), 0.4)
    d = np.zeros(T)
    data = LikelihoodData(X=X, X_tilde=Xt, d=d, tidx=tidx, dt=1.0)
    state1 = RegressionState(psi=np.array([0.2]), psi_tilde=np.array([0.7]))
    state2 = RegressionState(psi=np.array([1.1]), psi_tilde=np.array([0.7]))
    ratio = hazard(data, base, state2) / hazard(data, base, state1)
    assert np.max(np.abs(ratio - np.exp(1.1 - 0.2))) < 1e-12


# ---------------------------------------------------------------- likelihood


def test_single_row_loglik():
    assert poisson_loglik(np.array([1.0]), np.array([1.0])) == pytest.approx(-1.0, abs=1e-15)


def test_loglik_matches_row_sum_oracle():
    data, base, state, *_ = random_fixture(16, n=3, T=5)
    mu, _, _ = poisson_means(data, base, state)
    by_hand = 0.0
    for row in range(data.n_rows):
        by_hand -= mu[row]
        if data.d[row] > 0:
            by_hand += np.log(mu[row])
    assert abs(loglik(data, base, state) - by_hand) < 1e-12


def test_loglik_poisson_mean_scaling():
    rng = np.random.default_rng(17)
    d = (rng.uniform(size=50) < 0.3).astype(float)
    mu = rng.uniform(0.05, 2.0, size=50)
    shift = poisson_loglik(d, 2.0 * mu) - poisson_loglik(d, mu)
    assert shift == pytest.approx(np.sum(d) * np.log(2.0) - np.sum(mu), abs=1e-10)


def test_penalized_loglik_reduces_to_loglik_at_prior_mean():
    data, base, state, penalties, pm, basis0, table = random_fixture(18)
    zero_phi = baseline(np.zeros_like(base.phi), basis0, table.T, table.dt)
    at_mean = RegressionState(psi=pm.b.copy(), psi_tilde=pm.g.copy())
    lp = penalized_loglik(data, zero_phi, at_mean, penalties, pm)
    assert lp == pytest.approx(loglik(data, zero_phi, at_mean), abs=1e-12)


def test_penalty_quadratic_matches_kronecker_oracle():
    rng = np.random.default_rng(19)
    records = [
        SurvivalRecord(
            str(i),
            3,
            0,
            {
                "x1": rng.uniform(0, 1, size=3),
                "x2": rng.uniform(0, 1, size=3),
                "z": rng.normal(size=3),
            },
        )
        for i in range(6)
    ]
    table = expand(records)
    spec = ModelSpec(
        quantum_linear=("z",),
        quantum_additive=("x1", "x2"),
        timing_additive=("x1", "x2"),
        additive_basis_size=5,
    )
    bases = build_bases(table, spec)
    design = build_design(table, spec, bases)
    pm = build_penalty_model(spec, design)
    lam = np.array([0.7, 3.1])
    lam_tilde = np.array([1.9, 0.2])

    K = pm.K_lambda(lam)
    expected_K = np.zeros_like(K)
    expected_K[:2, :2] = pm.Q
    expected_K[2:, 2:] = np.kron(np.diag(lam), pm.P)
    assert np.max(np.abs(K - expected_K)) < 1e-10

    Kt = pm.Kt_lambda(lam_tilde)
    assert np.max(np.abs(Kt - np.kron(np.diag(lam_tilde), pm.Pt))) < 1e-10


def test_increasing_lambda_strictly_decreases_penalized_loglik():
    data, base, state, penalties, pm, *_ = random_fixture(20)
    lp = penalized_loglik(data, base, state, penalties, pm)
    stiffer = PenaltyState(
        tau0=penalties.tau0, lam=penalties.lam * 10, lam_tilde=penalties.lam_tilde
    )
    assert penalized_loglik(data, base, state, stiffer, pm) < lp


# ---------------------------------------------------------------- derivatives


def test_phi_score_is_zero_without_data_or_coefficients():
    data, base, state, penalties, pm, basis0, table = random_fixture(21)
    empty = LikelihoodData(
        X=np.zeros((0, data.X.shape[1])),
        X_tilde=np.zeros((0, data.X_tilde.shape[1])),
        d=np.zeros(0),
        tidx=np.zeros(0, dtype=np.intp),
        dt=1.0,
    )
    zero = baseline(np.zeros_like(base.phi), basis0, table.T, table.dt)
    U, _ = derivatives_phi(empty, zero, state, penalties.tau0, pm)
    assert np.max(np.abs(U)) == 0.0


@pytest.mark.parametrize("seed", [22, 23])
def test_phi_score_matches_finite_differences(seed):
    data, base, state, penalties, pm, basis0, table = random_fixture(seed)

    def lp_of_phi(phi):
        return penalized_loglik(
            data, baseline(phi, basis0, table.T, table.dt), state, penalties, pm
        )

    U, _ = derivatives_phi(data, base, state, penalties.tau0, pm)
    numeric = fd_gradient(lp_of_phi, base.phi.copy())
    assert max_rel_err(U, numeric) < 1e-5


def test_phi_precision_is_symmetric_psd_before_penalty():
    data, base, state, penalties, pm, *_ = random_fixture(24)
    _, negH = derivatives_phi(data, base, state, penalties.tau0, pm)
    data_part = negH - penalties.tau0 * pm.P0
    assert np.max(np.abs(data_part - data_part.T)) < 1e-12
    assert np.min(np.linalg.eigvalsh(data_part)) > -1e-8


@pytest.mark.parametrize("seed", [25, 26])
def test_zeta_score_matches_finite_differences(seed):
    data, base, state, penalties, pm, *_ = random_fixture(seed)
    q = state.psi.size

    def lp_of_zeta(zeta):
        return penalized_loglik(
            data, base, RegressionState.from_zeta(zeta, q), penalties, pm
        )

    bundle = derivatives_zeta(data, base, state, penalties, pm)
    numeric = fd_gradient(lp_of_zeta, state.zeta)
    assert max_rel_err(bundle.U, numeric) < 1e-5


def test_cross_block_transpose_is_exact():
    data, base, state, penalties, pm, *_ = random_fixture(27)
    bundle = derivatives_zeta(data, base, state, penalties, pm)
    full = bundle.negH
    q = state.psi.size
    assert np.array_equal(full[:q, q:], full[q:, :q].T)


def test_timing_score_vanishes_when_weight_is_zero():
    _, base, _, _, _, _, _ = random_fixture(28, with_linear=False)
    rng = np.random.default_rng(29)
    tidx = rng.integers(0, base.T - 1, size=40).astype(np.intp)
    # pick the timing design value that makes 1 + exp(eta_F) log S0 vanish
    xt = np.log(-1.0 / base.log_S0[tidx])[:, None]
    data = LikelihoodData(
        X=np.ones((40, 1)),
        X_tilde=xt,
        d=(rng.uniform(size=40) < 0.4).astype(float),
        tidx=tidx,
        dt=1.0,
    )
    state = RegressionState(psi=np.array([0.3]), psi_tilde=np.array([1.0]))
    mu, kappa, weight = poisson_means(data, base, state)
    assert np.max(np.abs(weight)) < 1e-12
    data_score = data.X_tilde.T @ ((data.d - mu) * weight)
    assert np.max(np.abs(data_score)) < 1e-10


def test_data_precision_equals_penalized_precision_minus_penalties():
    data, base, state, penalties, pm, *_ = random_fixture(30)
    bundle = derivatives_zeta(data, base, state, penalties, pm)
    negH0 = data_precision_zeta(data, base, state)
    q = state.psi.size
    penalty_block = np.zeros_like(bundle.negH)
    penalty_block[:q, :q] = pm.K_lambda(penalties.lam)
    penalty_block[q:, q:] = pm.Kt_lambda(penalties.lam_tilde)
    assert np.max(np.abs(bundle.negH - negH0 - penalty_block)) < 1e-10


# ---------------------------------------------------------------- accumulation


def test_constant_covariate_accumulation_matches_closed_form():
    rng = np.random.default_rng(31)
    basis0 = build_basis(0.0, 60.0, 10)
    for _ in range(100):
        phi = rng.normal(scale=0.8, size=10)
        base = baseline(phi, basis0, 60)
        eta_q = float(rng.normal(scale=0.7))
        eta_t = float(rng.normal(scale=0.7))
        _, cumulative, survival, _ = survival_path(
            base, np.full(60, eta_q), np.full(60, eta_t)
        )
        closed = np.exp(eta_q) * (1.0 - base.S0 ** np.exp(eta_t))
        assert np.max(np.abs(cumulative - closed)) < 1e-10
        assert np.max(np.abs(survival - np.exp(-closed))) < 1e-12


def test_survival_path_rejects_overlong_horizon():
    basis0 = build_basis(0.0, 10.0, 6)
    base = baseline(np.zeros(6), basis0, 10)
    with pytest.raises(ValueError):
        survival_path(base, np.zeros(11), np.zeros(11))


# ---------------------------------------------------------------- purity, linalg


def test_operations_are_bit_deterministic():
    first = random_fixture(32)
    second = random_fixture(32)
    lp1 = penalized_loglik(first[0], first[1], first[2], first[3], first[4])
    lp2 = penalized_loglik(second[0], second[1], second[2], second[3], second[4])
    assert lp1 == lp2
    U1, H1 = derivatives_phi(first[0], first[1], first[2], first[3].tau0, first[4])
    U2, H2 = derivatives_phi(second[0], second[1], second[2], second[3].tau0, second[4])
    assert np.array_equal(U1, U2)
    assert np.array_equal(H1, H2)


def test_chol_jitter_recovers_singular_matrix():
    singular = np.diag([1.0, 0.0])
    factor = chol_psd(singular)
    assert factor is not None
    with pytest.raises(NumericalError):
        chol_psd(-np.eye(3))


def test_inv_psd_matches_numpy_inverse():
    rng = np.random.default_rng(33)
    A = rng.normal(size=(6, 6))
    spd = A @ A.T + 6 * np.eye(6)
    assert np.max(np.abs(inv_psd(spd) - np.linalg.inv(spd))) < 1e-10
