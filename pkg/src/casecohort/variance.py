"""Variance estimation from influence sets and sampling-design covariances.

Two estimators per regime: the "robust" sum of squared total influences,
and the phase-decomposed estimator that replaces the squared-influence
phase-two block with the exact design covariances of the sampling
indicators.  Pair sums exploit that the joint inclusion moments are
constant across non-case pairs within a stratum, giving the rank-one
identity

    sum_{i != k} u_i u_k' = (sum u)(sum u)' - sum u_i u_i'

per stratum, so no O(n^2) double loop is ever formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .coxfit import WeightedSample
from .design import JointInclusion, PhaseThreeDesign
from .errors import (BadInterval, NegativeVariance, NonPositiveEstimate,
                     RegimeMismatch)
from .influence import InfluenceSet, Regime

__all__ = ["VarianceReport", "ConfidenceInterval", "variance_design",
           "variance_calibrated", "variance_three_phase",
           "confidence_interval", "normal_quantile"]


@dataclass
class VarianceReport:
    target: str
    regime: Regime
    v_robust: np.ndarray
    v_decomposed: np.ndarray
    components: dict = field(default_factory=dict)
    negative_diagonal: bool = False
    dropped_time_warnings: int = 0

    def scalar(self, which: str = "decomposed") -> float:
        v = self.v_decomposed if which == "decomposed" else self.v_robust
        return float(v[0, 0])


@dataclass(frozen=True)
class ConfidenceInterval:
    estimate: float
    se: float
    lower: float
    upper: float
    transform: str = "identity"
    level: float = 0.95


def _as2d(arr: np.ndarray) -> np.ndarray:
    return arr[:, None] if arr.ndim == 1 else arr


def _sym(m: np.ndarray) -> np.ndarray:
    return m + m.T


def _noncase_weight_by_stratum(joint: JointInclusion,
                               sample: WeightedSample) -> np.ndarray:
    """Design weight of sampled non-cases per stratum (0 when none)."""
    w = joint.design.weight
    out = np.zeros(joint.n_strata + 1)
    for j in range(1, joint.n_strata + 1):
        m = (joint.strata == j) & joint.design.sampled & ~joint.is_case
        if m.any():
            out[j] = w[m][0]
    return out


def _offdiag_pair_sum(u: np.ndarray, stratum: np.ndarray, mask: np.ndarray,
                      coef_by_stratum: np.ndarray) -> np.ndarray:
    """sum over strata of coef_j * sum_{i != k in j, both in mask} u_i u_k'."""
    d = u.shape[1]
    out = np.zeros((d, d))
    for j in np.unique(stratum[mask]):
        c = coef_by_stratum[j]
        if c == 0.0:
            continue
        uj = u[mask & (stratum == j)]
        s = uj.sum(axis=0)
        out += c * (np.outer(s, s) - uj.T @ uj)
    return out


def _pair_coefs(joint: JointInclusion, sample: WeightedSample,
                include_marginal_weights: bool) -> np.ndarray:
    """Per-stratum coefficient w_pair * sigma_pair (* w_j^2 when requested)."""
    coef = joint.pair_sigma_by_stratum() * joint.pair_weight_by_stratum()
    if include_marginal_weights:
        coef = coef * _noncase_weight_by_stratum(joint, sample) ** 2
    if joint.design.with_replacement:
        coef[:] = 0.0
    return coef


def _finish(report: VarianceReport) -> VarianceReport:
    if np.any(np.diag(report.v_decomposed) < 0.0):
        report.negative_diagonal = True
        warnings.warn("phase-decomposed variance has a negative diagonal entry",
                      stacklevel=3)
    return report


def variance_design(infl: InfluenceSet, joint: JointInclusion,
                    sample: WeightedSample) -> VarianceReport:
    """Superpopulation + phase-two variance for the design-weight regime.

    v_decomposed = n/(n-1) sum_i xi w IF2 IF2'
                 + sum_{i,k} w_pair sigma_pair w_i w_k xi_i xi_k IF2_i IF2_k'
    with the pair sum including i = k; v_robust is the sum of squared
    total influences.  Only sampled non-cases enter the phase-two block.
    """
    if infl.regime not in (Regime.DESIGN, Regime.FULL_COHORT):
        raise RegimeMismatch(Regime.DESIGN, infl.regime)
    ds = sample.dataset
    n = ds.n
    if2 = _as2d(infl.phase2_part)
    total = _as2d(infl.total)
    xi = sample.active.astype(float)
    w = sample.fit_weight
    v_robust = total.T @ total

    phase1 = (n / (n - 1.0)) * ((xi * w)[:, None] * if2).T @ if2
    diag_coef = xi * joint.marginal_sigma() * w ** 3
    phase2 = (diag_coef[:, None] * if2).T @ if2
    mask = sample.active & ~joint.is_case
    phase2 = phase2 + _offdiag_pair_sum(
        if2, joint.strata, mask, _pair_coefs(joint, sample, True))
    report = VarianceReport(infl.target, infl.regime, v_robust,
                            phase1 + phase2,
                            components={"phase1": phase1, "phase2": phase2})
    return _finish(report)


def variance_calibrated(infl: InfluenceSet, joint: JointInclusion,
                        sample: WeightedSample) -> VarianceReport:
    """Variance for the calibrated regime, including the IF1/IF2 cross terms."""
    if infl.regime is not Regime.CALIBRATED:
        raise RegimeMismatch(Regime.CALIBRATED, infl.regime)
    ds = sample.dataset
    n = ds.n
    if1 = _as2d(infl.phase1_part)
    if2 = _as2d(infl.phase2_part)
    total = _as2d(infl.total)
    xi = sample.active.astype(float)
    w = joint.design.weight                      # raw design weights
    v_robust = total.T @ total

    xw = xi * w
    bracket = if1.T @ if1 + _sym((xw[:, None] * if1).T @ if2) \
        + (xw[:, None] * if2).T @ if2
    phase1 = (n / (n - 1.0)) * bracket
    phase2 = ((xi * joint.marginal_sigma() * w ** 3)[:, None] * if2).T @ if2
    mask = sample.active & ~joint.is_case
    phase2 = phase2 + _offdiag_pair_sum(
        if2, joint.strata, mask, _pair_coefs(joint, sample, True))
    report = VarianceReport(infl.target, infl.regime, v_robust,
                            phase1 + phase2,
                            components={"phase1": phase1, "phase2": phase2})
    return _finish(report)


def variance_three_phase(infl: InfluenceSet, joint: JointInclusion,
                         p3: PhaseThreeDesign,
                         sample: WeightedSample) -> VarianceReport:
    """Variance when phase-two data can be missing (phase three).

    Estimated phase-three weights: four blocks -- the leading n/(n-1)
    bracket, the within-subject phase-two variance bracket, the non-case
    pair block on the combined influence, and the Bernoulli phase-three
    block.  Known weights: the collapsed two-phase form with overall
    weight w = w2 * w3.
    """
    if infl.regime not in (Regime.THREE_PHASE, Regime.THREE_PHASE_KNOWN):
        raise RegimeMismatch(Regime.THREE_PHASE, infl.regime)
    ds = sample.dataset
    n = ds.n
    if2 = _as2d(infl.phase2_part)
    if3 = _as2d(infl.phase3_part)
    total = _as2d(infl.total)
    v_robust = total.T @ total
    p2 = joint.design
    xi = p2.sampled.astype(float)
    v_obs = p3.observed.astype(float)
    w2 = p2.weight
    pair_coef = _pair_coefs(joint, sample, False)
    noncase = ~joint.is_case

    if infl.regime is Regime.THREE_PHASE:
        w3t = p3.est_weight
        c3 = xi * v_obs * w3t

        def brack(c):
            b = ((c * xi)[:, None] * if2).T @ if2
            b += _sym(((c * c3)[:, None] * if2).T @ if3)
            b += ((c * c3)[:, None] * if3).T @ if3
            return b

        t1 = (n / (n - 1.0)) * brack(1.0 / w2)
        t2 = brack(joint.marginal_sigma() * w2)
        u = xi[:, None] * if2 + c3[:, None] * if3
        mask = p2.sampled & noncase
        t3 = _offdiag_pair_sum(u, joint.strata, mask, pair_coef)
        t4 = ((p3.est_var * w3t ** 3 * xi * v_obs)[:, None] * if3).T @ if3
        report = VarianceReport(
            infl.target, infl.regime, v_robust, t1 + t2 + t3 + t4,
            components={"phase1": t1, "phase2_diag": t2, "phase2_pairs": t3,
                        "phase3": t4})
        return _finish(report)

    # known phase-three weights: collapsed two-phase estimator
    w = w2 * p3.est_weight
    c3 = xi * v_obs * w
    t1 = ((xi / w2)[:, None] * if2).T @ if2
    t1 += _sym(((c3 / w2)[:, None] * if2).T @ if3)
    t1 += (c3[:, None] * if3).T @ if3
    t1 *= n / (n - 1.0)
    diag = (((1.0 - 1.0 / w) * c3 * w)[:, None] * if3).T @ if3
    u = c3[:, None] * if3
    mask = p2.sampled & p3.observed & noncase
    pairs = _offdiag_pair_sum(u, joint.strata, mask, pair_coef)
    report = VarianceReport(
        infl.target, infl.regime, v_robust, t1 + diag + pairs,
        components={"phase1": t1, "pair_diag": diag, "pair_offdiag": pairs})
    return _finish(report)


def eq16_difference(infl: InfluenceSet, joint: JointInclusion,
                    sample: WeightedSample) -> np.ndarray:
    """Independent evaluation of v_decomposed - v_robust (design regime):
    -(1/(n-1)) sum xi w IF2 IF2' minus the off-diagonal pair block, i.e.
    the negative of the printed difference formula."""
    ds = sample.dataset
    n = ds.n
    if2 = _as2d(infl.phase2_part)
    xi = sample.active.astype(float)
    w = sample.fit_weight
    lead = (1.0 / (n - 1.0)) * ((xi * w)[:, None] * if2).T @ if2
    mask = sample.active & ~joint.is_case
    off = _offdiag_pair_sum(if2, joint.strata, mask,
                            _pair_coefs(joint, sample, True))
    return lead + off


def eq20_difference(infl: InfluenceSet, joint: JointInclusion,
                    sample: WeightedSample) -> np.ndarray:
    """Independent evaluation of v_decomposed - v_robust (calibrated regime)."""
    ds = sample.dataset
    n = ds.n
    if1 = _as2d(infl.phase1_part)
    if2 = _as2d(infl.phase2_part)
    xi = sample.active.astype(float)
    w = joint.design.weight
    xw = xi * w
    lead = (1.0 / (n - 1.0)) * (
        if1.T @ if1 + _sym((xw[:, None] * if1).T @ if2)
        + (xw[:, None] * if2).T @ if2)
    mask = sample.active & ~joint.is_case
    off = _offdiag_pair_sum(if2, joint.strata, mask,
                            _pair_coefs(joint, sample, True))
    return lead + off


# --------------------------------------------------------------------------
# confidence intervals
# --------------------------------------------------------------------------

# Wichura's algorithm AS 241 (PPND16): rational approximations to the
# standard normal quantile with absolute error well below 1e-9.
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
      2.8729085735721942674e4, 5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0,
      5.76949722146069140550e0, 3.64784832476320460504e0,
      1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
      6.89767334985100004550e-1, 1.48103976427480074590e-1,
      1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0,
      1.78482653991729133580e0, 2.96560571828504891230e-1,
      2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4,
      1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coeffs, x):
    out = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        out = out * x + c
    return out


def normal_quantile(p: float) -> float:
    """Standard normal quantile via AS 241 (no statistical library needed)."""
    if not 0.0 < p < 1.0:
        raise BadInterval(f"quantile argument must lie in (0,1), got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return float(q * _poly(_A, r) / _poly(_B, r))
    r = p if q < 0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return float(-val if q < 0 else val)


def confidence_interval(estimate: float, variance: float, level: float = 0.95,
                        transform: str = "identity") -> ConfidenceInterval:
    """Wald interval, optionally on the log scale (delta method)."""
    if variance < 0.0:
        raise NegativeVariance(f"variance {variance} < 0")
    if not 0.0 < level < 1.0:
        raise BadInterval(f"level must lie in (0,1), got {level}")
    z = normal_quantile(0.5 + level / 2.0)
    se = float(np.sqrt(variance))
    if transform == "identity":
        return ConfidenceInterval(estimate, se, estimate - z * se,
                                  estimate + z * se, "identity", level)
    if transform == "log":
        if estimate <= 0.0:
            raise NonPositiveEstimate("log transform needs a positive estimate")
        se_log = se / estimate
        return ConfidenceInterval(
            estimate, se, float(estimate * np.exp(-z * se_log)),
            float(estimate * np.exp(z * se_log)), "log", level)
    raise BadInterval(f"unknown transform {transform!r}")
