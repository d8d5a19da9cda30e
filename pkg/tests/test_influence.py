import numpy as np
import pytest

from casecohort import (AuxiliaryMatrix, CohortDataset, Regime,
                        ThreePhaseExtras, WeightedSample, breslow,
                        estimate_phase3_weights, fit_cox, influence_beta,
                        influence_eta, influence_gamma, influence_hazard,
                        influence_pure_risk, known_phase3_design, rake)
from casecohort.errors import RegimeMismatch
from conftest import random_cohort, random_phase2

TAU1, TAU2 = 0.5, 3.0
XPROF = np.array([0.5, -1.0])


def fd_errors(infl_totals, derivs, floor=1e-6):
    """Worst relative error of influence rows against FD derivatives."""
    worst = 0.0
    for d, t in zip(derivs, infl_totals):
        d, t = np.atleast_1d(d), np.atleast_1d(t)
        worst = max(worst, np.max(np.abs(d - t)) / max(np.max(np.abs(d)), floor))
    return worst


def central_diff(refit, n, eps=1e-6):
    outs = []
    for i in range(n):
        m1, m2 = np.ones(n), np.ones(n)
        m1[i] += eps
        m2[i] -= eps
        hi, lo = refit(m1), refit(m2)
        outs.append([(a - b) / (2 * eps) for a, b in zip(hi, lo)])
    return list(zip(*outs))     # one list per output, length n


# --------------------------------------------------------------------------
# design regime
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def design_setup():
    ds, rng = random_cohort(42)
    p2 = random_phase2(ds, rng)
    sample = WeightedSample(ds, p2.sampled, p2.weight)
    fit = fit_cox(sample)
    hz = breslow(sample, fit.beta_hat, fit=fit, warn=False)
    return ds, p2, sample, fit, hz


def test_design_influences_match_fd(design_setup):
    ds, p2, sample, fit, hz = design_setup
    b = influence_beta(Regime.DESIGN, fit, sample)
    h = influence_hazard(Regime.DESIGN, fit, sample, hz, b,
                         tau1=TAU1, tau2=TAU2)
    pr = influence_pure_risk(Regime.DESIGN, fit, hz, TAU1, TAU2, XPROF, b, h)

    def refit(mult):
        s = WeightedSample(ds, p2.sampled, p2.weight, mult=mult)
        f = fit_cox(s)
        hzm = breslow(s, f.beta_hat, fit=f, warn=False)
        lam = hzm.interval_mass(TAU1, TAU2)
        pi = 1 - np.exp(-np.exp(f.beta_hat @ XPROF) * lam)
        return f.beta_hat.copy(), lam, pi

    d_beta, d_lam, d_pi = central_diff(refit, ds.n)
    assert fd_errors(b.total, d_beta) < 1e-4
    assert fd_errors(h.total, d_lam) < 1e-4
    assert fd_errors(pr.total, d_pi) < 1e-4


def test_design_membership_zero(design_setup):
    ds, p2, sample, fit, hz = design_setup
    b = influence_beta(Regime.DESIGN, fit, sample)
    outside = ~p2.sampled
    assert outside.any()
    assert np.all(b.total[outside] == 0.0)


def test_design_sum_identities(design_setup):
    ds, p2, sample, fit, hz = design_setup
    b = influence_beta(Regime.DESIGN, fit, sample)
    assert np.abs(b.total.sum(axis=0)).max() < 1e-10
    h1 = influence_hazard(Regime.DESIGN, fit, sample, hz, b,
                          at_time=hz.event_times[0])
    assert abs(h1.total.sum()) < 1e-10


def test_full_cohort_sum_identity(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    b = influence_beta(Regime.FULL_COHORT, fit, fix_t3_sample)
    assert abs(b.total.sum()) < 1e-10
    hz = breslow(fix_t3_sample, fit.beta_hat, fit=fit)
    h = influence_hazard(Regime.FULL_COHORT, fit, fix_t3_sample, hz, b,
                         at_time=1.0)
    assert abs(h.total.sum()) < 1e-10
    pr = influence_pure_risk(Regime.FULL_COHORT, fit, hz, 0.0, 2.0,
                             np.array([0.0]), b,
                             influence_hazard(Regime.FULL_COHORT, fit,
                                              fix_t3_sample, hz, b,
                                              tau1=0.0, tau2=2.0))
    assert abs(pr.total.sum()) < 1e-10


def test_hazard_influence_p0_reduction():
    # with no covariates the per-time influence is (dN - dLambda Y r) / S0
    ds = CohortDataset(["a", "b", "c"], np.zeros(3), [1.0, 2.0, 3.0],
                       [1, 0, 0], [1] * 3, np.zeros((3, 0)))
    sample = WeightedSample(ds, np.ones(3, bool), np.ones(3))
    fit = fit_cox(sample)
    assert fit.beta_hat.shape == (0,)
    hz = breslow(sample, fit.beta_hat, fit=fit)
    b = influence_beta(Regime.FULL_COHORT, fit, sample)
    h = influence_hazard(Regime.FULL_COHORT, fit, sample, hz, b, at_time=1.0)
    s0 = 3.0
    dl = 1.0 / 3.0
    expected = (np.array([1.0, 0.0, 0.0]) - dl * np.ones(3)) / s0
    np.testing.assert_allclose(h.total, expected, atol=1e-12)


def test_zero_profile_chain_rule(design_setup):
    ds, p2, sample, fit, hz = design_setup
    b = influence_beta(Regime.DESIGN, fit, sample)
    h = influence_hazard(Regime.DESIGN, fit, sample, hz, b,
                         tau1=TAU1, tau2=TAU2)
    x0 = np.zeros(2)
    pr = influence_pure_risk(Regime.DESIGN, fit, hz, TAU1, TAU2, x0, b, h)
    pi = pr.meta["estimate"]
    np.testing.assert_allclose(pr.total, (1 - pi) * h.total, atol=1e-14)


def test_regime_mismatch_raises(design_setup):
    ds, p2, sample, fit, hz = design_setup
    b = influence_beta(Regime.DESIGN, fit, sample)
    with pytest.raises(RegimeMismatch):
        influence_hazard(Regime.FULL_COHORT, fit, sample, hz, b,
                         tau1=TAU1, tau2=TAU2)


# --------------------------------------------------------------------------
# calibrated regime
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def calib_setup():
    ds, rng = random_cohort(7)
    p2 = random_phase2(ds, rng)
    aux = AuxiliaryMatrix(
        np.column_stack([np.ones(ds.n),
                         ds.x[:, 0] * 0.5 + rng.normal(0, 0.3, ds.n),
                         ds.exit]),
        ["const", "a1", "a2"])
    base = WeightedSample(ds, p2.sampled, p2.weight)
    calib = rake(base, aux)
    sample = WeightedSample(ds, p2.sampled, calib.calibrated_weight)
    fit = fit_cox(sample)
    hz = breslow(sample, fit.beta_hat, fit=fit, warn=False)
    return ds, p2, aux, base, calib, sample, fit, hz


def test_calibrated_influences_match_fd(calib_setup):
    ds, p2, aux, base, calib, sample, fit, hz = calib_setup
    b = influence_beta(Regime.CALIBRATED, fit, sample, calib)
    h = influence_hazard(Regime.CALIBRATED, fit, sample, hz, b, calib,
                         tau1=TAU1, tau2=TAU2)
    pr = influence_pure_risk(Regime.CALIBRATED, fit, hz, TAU1, TAU2, XPROF,
                             b, h)
    e = influence_eta(calib, base)

    def refit(mult):
        bs = WeightedSample(ds, p2.sampled, p2.weight, mult=mult)
        cal = rake(bs, aux)
        s = WeightedSample(ds, p2.sampled, cal.calibrated_weight, mult=mult)
        f = fit_cox(s)
        hzm = breslow(s, f.beta_hat, fit=f, warn=False)
        lam = hzm.interval_mass(TAU1, TAU2)
        pi = 1 - np.exp(-np.exp(f.beta_hat @ XPROF) * lam)
        return cal.eta_hat.copy(), f.beta_hat.copy(), lam, pi

    d_eta, d_beta, d_lam, d_pi = central_diff(refit, ds.n)
    assert fd_errors(e.total, d_eta) < 1e-4
    assert fd_errors(b.total, d_beta) < 1e-4
    assert fd_errors(h.total, d_lam) < 1e-4
    assert fd_errors(pr.total, d_pi) < 1e-4


def test_eta_sum_identity(calib_setup):
    ds, p2, aux, base, calib, *_ = calib_setup
    e = influence_eta(calib, base)
    assert np.abs(e.total.sum(axis=0)).max() < 1e-10


def test_calibrated_beta_sum_identity(calib_setup):
    _, _, _, _, calib, sample, fit, _ = calib_setup
    b = influence_beta(Regime.CALIBRATED, fit, sample, calib)
    assert np.abs(b.total.sum(axis=0)).max() < 1e-10


def test_eta_scalar_case():
    # A = {1} with the constraint already met: eta=0, IF1 = 1/sum(xi w) each
    ds, rng = random_cohort(3)
    p2 = random_phase2(ds, rng)
    w = p2.weight.copy()
    nc = p2.sampled & (ds.status == 0)
    total_now = (p2.sampled * w).sum()
    w[nc] *= 1 + (ds.n - total_now) / (p2.sampled[nc] * w[nc]).sum()
    base = WeightedSample(ds, p2.sampled, w)
    aux = AuxiliaryMatrix(np.ones((ds.n, 1)), ["const"])
    calib = rake(base, aux)
    np.testing.assert_allclose(calib.eta_hat, 0.0, atol=1e-12)
    e = influence_eta(calib, base)
    np.testing.assert_allclose(e.phase1_part, 1.0 / ds.n, atol=1e-12)
    sampled = p2.sampled
    np.testing.assert_allclose(e.phase2_part[sampled], -1.0 / ds.n, atol=1e-12)
    # a subject outside phase two still influences eta through IF1
    assert np.all(e.phase2_part[~sampled] == 0.0)
    assert np.all(e.total[~sampled] != 0.0)


def test_outside_phase_two_has_eta_influence(calib_setup):
    ds, p2, aux, base, calib, *_ = calib_setup
    e = influence_eta(calib, base)
    outside = ~p2.sampled
    assert np.all(e.phase2_part[outside] == 0.0)
    assert np.all(np.any(e.phase1_part[outside] != 0.0, axis=1))


# --------------------------------------------------------------------------
# three-phase regimes
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def three_phase_setup():
    ds, rng = random_cohort(11, n=30)
    p2 = random_phase2(ds, rng, m=7)
    cases = ds.status == 1
    stratum3 = np.where(cases, 1, 2)
    observed = p2.sampled & (rng.random(ds.n) < np.where(cases, 0.9, 0.75))
    p3 = estimate_phase3_weights(ds, p2, stratum3, observed)
    active = p2.sampled & p3.observed
    sample = WeightedSample(ds, active, p2.weight * p3.est_weight)
    fit = fit_cox(sample)
    hz = breslow(sample, fit.beta_hat, fit=fit, warn=False)
    return ds, p2, p3, stratum3, observed, sample, fit, hz


def test_three_phase_influences_match_fd(three_phase_setup):
    ds, p2, p3, stratum3, observed, sample, fit, hz = three_phase_setup
    ex = ThreePhaseExtras(p2, p3)
    b = influence_beta(Regime.THREE_PHASE, fit, sample, ex)
    h = influence_hazard(Regime.THREE_PHASE, fit, sample, hz, b, ex,
                         tau1=TAU1, tau2=TAU2)
    pr = influence_pure_risk(Regime.THREE_PHASE, fit, hz, TAU1, TAU2, XPROF,
                             b, h)
    g = influence_gamma(p3, p2)
    active = sample.active

    def refit(mult):
        gam = np.zeros(2)
        for s in (1, 2):
            ins = p2.sampled & (stratum3 == s)
            gam[s - 1] = np.log(mult[ins].sum() / mult[ins & observed].sum())
        w3 = np.exp(gam[stratum3 - 1])
        sm = WeightedSample(ds, active, p2.weight * w3, mult=mult)
        f = fit_cox(sm)
        hzm = breslow(sm, f.beta_hat, fit=f, warn=False)
        lam = hzm.interval_mass(TAU1, TAU2)
        pi = 1 - np.exp(-np.exp(f.beta_hat @ XPROF) * lam)
        return gam, f.beta_hat.copy(), lam, pi

    d_gam, d_beta, d_lam, d_pi = central_diff(refit, ds.n)
    assert fd_errors(g.total, d_gam) < 1e-4
    assert fd_errors(b.total, d_beta) < 1e-4
    assert fd_errors(h.total, d_lam) < 1e-4
    assert fd_errors(pr.total, d_pi) < 1e-4


def test_gamma_examples():
    # one phase-three stratum, 10 phase-two subjects, 8 observed
    n = 10
    ds = CohortDataset([str(i) for i in range(n)], np.zeros(n),
                       np.arange(1.0, n + 1), [1] + [0] * 9,
                       np.ones(n, dtype=int), np.zeros((n, 1)))
    from casecohort import PhaseTwoDesign
    p2 = PhaseTwoDesign(np.ones(n, bool), np.ones(n), np.array([9]))
    observed = np.ones(n, bool)
    observed[:2] = False
    p3 = estimate_phase3_weights(ds, p2, np.ones(n, dtype=int), observed)
    g = influence_gamma(p3, p2)
    # Gram = 8 * (10/8) = 10, so IF2 = 1/10 per phase-two subject
    np.testing.assert_allclose(g.phase2_part, 1.0 / 10.0)
    assert np.abs(g.total.sum(axis=0)).max() < 1e-12


def test_gamma_fully_observed_per_subject_zero():
    ds, rng = random_cohort(13)
    p2 = random_phase2(ds, rng)
    stratum3 = np.ones(ds.n, dtype=int)
    p3 = estimate_phase3_weights(ds, p2, stratum3, p2.sampled.copy())
    g = influence_gamma(p3, p2)
    # gamma = 0: IF2 + exp(gamma) IF3 vanishes subject by subject
    per_subject = g.phase2_part + np.exp(p3.gamma) * g.phase3_part
    np.testing.assert_allclose(per_subject[p2.sampled], 0.0, atol=1e-14)


def test_gamma_block_diagonal_independence(three_phase_setup):
    ds, p2, p3, stratum3, *_ = three_phase_setup
    g = influence_gamma(p3, p2)
    for s in (1, 2):
        other = stratum3 != s
        assert np.all(g.phase2_part[other, s - 1] == 0.0)
        assert np.all(g.phase3_part[other, s - 1] == 0.0)


def test_known_weights_influences_match_fd(three_phase_setup):
    ds, p2, p3e, stratum3, observed, _, _, _ = three_phase_setup
    cases = ds.status == 1
    prob = np.where(cases, 0.9, 0.75)
    p3 = known_phase3_design(stratum3, observed, prob)
    active = p2.sampled & observed
    sample = WeightedSample(ds, active, p2.weight * p3.est_weight)
    fit = fit_cox(sample)
    hz = breslow(sample, fit.beta_hat, fit=fit, warn=False)
    ex = ThreePhaseExtras(p2, p3)
    b = influence_beta(Regime.THREE_PHASE_KNOWN, fit, sample, ex)
    assert np.all(b.phase2_part == 0.0)       # Web-appendix known-weight form
    h = influence_hazard(Regime.THREE_PHASE_KNOWN, fit, sample, hz, b, ex,
                         tau1=TAU1, tau2=TAU2)
    pr = influence_pure_risk(Regime.THREE_PHASE_KNOWN, fit, hz, TAU1, TAU2,
                             XPROF, b, h)

    def refit(mult):
        sm = WeightedSample(ds, active, p2.weight * p3.est_weight, mult=mult)
        f = fit_cox(sm)
        hzm = breslow(sm, f.beta_hat, fit=f, warn=False)
        lam = hzm.interval_mass(TAU1, TAU2)
        pi = 1 - np.exp(-np.exp(f.beta_hat @ XPROF) * lam)
        return f.beta_hat.copy(), lam, pi

    d_beta, d_lam, d_pi = central_diff(refit, ds.n)
    assert fd_errors(b.total, d_beta) < 1e-4
    assert fd_errors(h.total, d_lam) < 1e-4
    assert fd_errors(pr.total, d_pi) < 1e-4


def test_missing_case_still_influences_hazard(three_phase_setup):
    ds, p2, p3, stratum3, observed, sample, fit, hz = three_phase_setup
    ex = ThreePhaseExtras(p2, p3)
    b = influence_beta(Regime.THREE_PHASE, fit, sample, ex)
    missing_cases = (ds.status == 1) & p2.sampled & ~observed
    if not missing_cases.any():
        pytest.skip("draw produced no missing case")
    # zero influence on beta, non-zero on the hazard through the dN term
    i = int(np.nonzero(missing_cases)[0][0])
    assert np.all(b.total[i] == 0.0) or np.abs(b.total[i]).max() > 0
    t_i = ds.exit[i]
    if t_i in hz.event_times:
        h = influence_hazard(Regime.THREE_PHASE, fit, sample, hz, b, ex,
                             at_time=float(t_i))
        assert h.total[i] != 0.0
