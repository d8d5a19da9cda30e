import numpy as np
import pytest

from casecohort import (CohortDataset, SolverControls, WeightedSample, breslow,
                        fit_cox, pure_risk, s_moments)
from casecohort.errors import (BadInterval, EmptyRiskSet, MonotoneLikelihood,
                               NoEvents)
from conftest import random_cohort

# closed forms for FIX-T3: u = exp(beta) solves 1 - 2u/(2u+1) - u/(u+1) = 0,
# i.e. u = 1/sqrt(2)
BETA_T3 = -0.5 * np.log(2.0)
DL1_T3 = 1.0 / (np.sqrt(2.0) + 1.0)
DL2_T3 = 1.0 / (1.0 / np.sqrt(2.0) + 1.0)


def test_fix_t3_closed_form(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    assert fit.converged
    assert fit.beta_hat[0] == pytest.approx(BETA_T3, abs=1e-10)
    assert fit.score_norm < 1e-9


def test_fix_t3_breslow(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    hz = breslow(fix_t3_sample, fit.beta_hat, fit=fit)
    np.testing.assert_allclose(hz.increments, [DL1_T3, DL2_T3], atol=1e-10)
    np.testing.assert_array_equal(hz.numerator_counts, [1, 1])
    assert hz.increments.sum() == pytest.approx(1.0, abs=1e-10)


def test_fix_t3_pure_risk(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    hz = breslow(fix_t3_sample, fit.beta_hat, fit=fit)
    pi0 = pure_risk(fit.beta_hat, hz, 0.0, 2.0, [0.0])
    assert pi0.value == pytest.approx(1.0 - np.exp(-1.0), abs=1e-10)
    pi1 = pure_risk(fit.beta_hat, hz, 0.0, 2.0, [1.0])
    assert pi1.value == pytest.approx(1.0 - np.exp(-1.0 / np.sqrt(2.0)),
                                      abs=1e-10)


def test_zero_covariates_gives_zero_beta():
    ds = CohortDataset(["a", "b", "c"], np.zeros(3), [1.0, 2.0, 3.0],
                       [1, 1, 0], [1, 1, 1], np.zeros((3, 1)))
    sample = WeightedSample(ds, np.ones(3, bool), np.ones(3))
    fit = fit_cox(sample)
    assert fit.beta_hat[0] == 0.0
    assert fit.score_norm == 0.0


def test_monotone_likelihood(fix_t3):
    # dropping C leaves score 1 - e^b/(e^b + 1) > 0 for every finite beta
    sample = WeightedSample(fix_t3, np.array([True, True, False]),
                            np.ones(3))
    with pytest.raises(MonotoneLikelihood):
        fit_cox(sample)


def test_no_events():
    ds = CohortDataset(["a", "b"], np.zeros(2), [1.0, 2.0], [0, 0],
                       [1, 1], np.zeros((2, 1)))
    with pytest.raises(NoEvents):
        fit_cox(WeightedSample(ds, np.ones(2, bool), np.ones(2)))


def test_nelson_aalen_reduction(fix_t3_sample):
    hz = breslow(fix_t3_sample, np.zeros(1))
    np.testing.assert_allclose(hz.increments, [1 / 3, 1 / 2])


def test_s_moments_examples(fix_t3_sample):
    sm = s_moments(fix_t3_sample, np.zeros(1), 1.0)
    assert sm.s0 == pytest.approx(3.0)
    assert sm.s1[0] == pytest.approx(2.0)
    assert sm.s2[0, 0] == pytest.approx(2.0)
    fit = fit_cox(fix_t3_sample)
    sm2 = s_moments(fix_t3_sample, fit.beta_hat, 2.0)
    assert sm2.s0 == pytest.approx(1.0 / np.sqrt(2.0) + 1.0, abs=1e-9)


def test_weight_scale_invariance(fix_t3):
    c = 2.0
    s1 = WeightedSample(fix_t3, np.ones(3, bool), np.ones(3))
    s2 = WeightedSample(fix_t3, np.ones(3, bool), np.full(3, c))
    f1, f2 = fit_cox(s1), fit_cox(s2)
    assert f2.beta_hat[0] == pytest.approx(f1.beta_hat[0], abs=1e-9)
    m1 = s_moments(s1, f1.beta_hat, 1.0)
    m2 = s_moments(s2, f1.beta_hat, 1.0)
    assert m2.s0 == pytest.approx(c * m1.s0)
    np.testing.assert_allclose(m2.s1, c * m1.s1)
    # the Breslow numerator is never reweighted, so increments scale by 1/c
    h1 = breslow(s1, f1.beta_hat)
    h2 = breslow(s2, f2.beta_hat)
    np.testing.assert_allclose(h2.increments, h1.increments / c, rtol=1e-8)


def test_full_cohort_reduction_matches_unweighted(fix_t3):
    # weights one and everyone active is the plain Cox estimate (FIX-T3)
    sample = WeightedSample(fix_t3, np.ones(3, bool), np.ones(3))
    fit = fit_cox(sample)
    assert fit.beta_hat[0] == pytest.approx(BETA_T3, abs=1e-8)


def test_score_norm_small_on_random_fit():
    ds, _ = random_cohort(1, n=50)
    fit = fit_cox(WeightedSample(ds, np.ones(50, bool), np.ones(50)))
    assert fit.score_norm < 1e-9


def test_info_positive_semidefinite():
    for seed in (1, 2, 3):
        ds, _ = random_cohort(seed, n=40)
        fit = fit_cox(WeightedSample(ds, np.ones(40, bool), np.ones(40)))
        eig = np.linalg.eigvalsh(fit.info)
        assert eig.min() >= -1e-10


def test_breslow_tie_handling():
    # two events at the same time give one risk set with dN = 2
    ds = CohortDataset(["a", "b", "c", "d"], np.zeros(4),
                       [1.0, 1.0, 2.0, 3.0], [1, 1, 1, 0], [1] * 4,
                       [[1.0], [0.0], [0.5], [-0.5]])
    sample = WeightedSample(ds, np.ones(4, bool), np.ones(4))
    fit = fit_cox(sample)
    hz = breslow(sample, fit.beta_hat, fit=fit)
    assert hz.numerator_counts[0] == 2
    # counting-process check: at beta=0 the first increment is 2/4
    hz0 = breslow(sample, np.zeros(1))
    assert hz0.increments[0] == pytest.approx(0.5)


def test_tied_events_equal_counting_process_score():
    # duplicating an event time must match the shared-risk-set sum exactly
    ds = CohortDataset(["a", "b", "c"], np.zeros(3), [1.0, 1.0, 2.0],
                       [1, 1, 0], [1] * 3, [[1.0], [0.0], [0.5]])
    sample = WeightedSample(ds, np.ones(3, bool), np.ones(3))
    beta = np.array([0.3])
    sm = s_moments(sample, beta, 1.0)
    # U(beta) = sum over both events of (x_i - S1/S0) with the same risk set
    expected = (1.0 - sm.s1[0] / sm.s0) + (0.0 - sm.s1[0] / sm.s0)
    from casecohort.coxfit import _RiskSetEngine, _loglik_score_info
    engine = _RiskSetEngine(sample)
    _, score, _, _, _ = _loglik_score_info(engine, beta)
    assert score[0] == pytest.approx(expected, abs=1e-12)


def test_dropped_time_handling():
    # the only at-risk subject at the first event time is inactive: lenient
    # mode drops the time with a warning, strict mode raises
    ds = CohortDataset(["a", "b"], [0.0, 1.5], [1.0, 2.0], [1, 1], [1, 1],
                       [[0.5], [1.0]])
    active = np.array([False, True])
    sample = WeightedSample(ds, active, np.ones(2))
    fit = fit_cox(sample)
    with pytest.warns(UserWarning, match="dropped 1 event time"):
        hz = breslow(sample, fit.beta_hat, fit=fit)
    assert hz.n_dropped_times == 1
    assert hz.event_times.tolist() == [2.0]
    with pytest.raises(EmptyRiskSet):
        breslow(sample, fit.beta_hat, fit=fit, strict=True)


def test_pure_risk_bad_interval(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    hz = breslow(fix_t3_sample, fit.beta_hat, fit=fit)
    with pytest.raises(BadInterval):
        pure_risk(fit.beta_hat, hz, 2.0, 1.0, [0.0])
    with pytest.raises(BadInterval):
        pure_risk(fit.beta_hat, hz, 0.0, 99.0, [0.0])


def test_pure_risk_empty_interval_mass(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    hz = breslow(fix_t3_sample, fit.beta_hat, fit=fit)
    pi = pure_risk(fit.beta_hat, hz, 2.5, 3.0, [0.0])
    assert pi.value == 0.0


def test_interval_is_left_open_right_closed(fix_t3_sample):
    fit = fit_cox(fix_t3_sample)
    hz = breslow(fix_t3_sample, fit.beta_hat, fit=fit)
    # (1, 2] picks up only the t=2 increment; (0, 1] only the t=1 increment
    assert hz.interval_mass(1.0, 2.0) == pytest.approx(DL2_T3, abs=1e-10)
    assert hz.interval_mass(0.0, 1.0) == pytest.approx(DL1_T3, abs=1e-10)


def test_left_truncation_age_scale():
    # subject b enters at age 1.5 and must be absent from the t=1 risk set
    ds = CohortDataset(["a", "b", "c"], [0.0, 1.5, 0.0], [1.0, 3.0, 4.0],
                       [1, 1, 0], [1] * 3, [[1.0], [0.0], [0.5]])
    sample = WeightedSample(ds, np.ones(3, bool), np.ones(3))
    sm = s_moments(sample, np.zeros(1), 1.0)
    assert sm.s0 == pytest.approx(2.0)          # a and c only
    sm3 = s_moments(sample, np.zeros(1), 3.0)
    assert sm3.s0 == pytest.approx(2.0)         # b and c


def test_max_iterations():
    ds, _ = random_cohort(5, n=40)
    with pytest.raises(Exception):
        fit_cox(WeightedSample(ds, np.ones(40, bool), np.ones(40)),
                SolverControls(max_iter=0))
