"""Per-subject influence contributions for every target and weighting regime.

Influences are split by sampling phase: IF(1) uses only cohort-wide data,
IF(2) needs phase-two data, IF(3) needs phase-three data.  The assembled
total influence is

    design:            D_i = xi_i w_i IF2_i
    calibrated:        D_i = IF1_i + xi_i w_i IF2_i          (w = design weight)
    three-phase (est): D_i = xi_i IF2_i + xi_i V_i exp(g'B_i) IF3_i
    three-phase (known w3): D_i = xi_i IF2_i + xi_i V_i w_i IF3_i
    full cohort:       D_i = IF2_i

Computation is a two-pass pipeline: the per-event-time shared factors
(S-moments, hazard increments, weighted event counts) come first, then a
single vectorised per-subject assembly using prefix sums over the grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .coxfit import BaselineHazard, FitResult, WeightedSample, _engine_for
from .design import PhaseThreeDesign, PhaseTwoDesign
from .errors import (BadInterval, EmptyPhase3Stratum, RegimeMismatch,
                     SingularCalibrationGram, SingularInformation)

__all__ = ["Regime", "InfluenceSet", "ThreePhaseExtras", "influence_beta",
           "influence_hazard", "influence_pure_risk", "influence_eta",
           "influence_gamma", "dump_influences"]


class Regime(str, Enum):
    FULL_COHORT = "full_cohort"
    DESIGN = "design"
    CALIBRATED = "calibrated"
    THREE_PHASE = "three_phase"
    THREE_PHASE_KNOWN = "three_phase_known"


@dataclass(frozen=True)
class ThreePhaseExtras:
    """Phase-two and phase-three designs needed by three-phase influences."""

    p2: PhaseTwoDesign
    p3: PhaseThreeDesign


@dataclass
class InfluenceSet:
    """Phase-decomposed per-subject influences on one target parameter."""

    target: str
    regime: Regime
    phase1_part: np.ndarray
    phase2_part: np.ndarray
    phase3_part: np.ndarray
    total: np.ndarray
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return 1 if self.total.ndim == 1 else self.total.shape[1]


# --------------------------------------------------------------------------
# shared low-level pieces
# --------------------------------------------------------------------------

def _solve_rows(matrix: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """rows @ matrix^{-T}, i.e. matrix^{-1} applied to each row vector."""
    if matrix.shape[0] == 0:
        return np.zeros_like(rows)
    try:
        return np.linalg.solve(matrix, rows.T).T
    except np.linalg.LinAlgError:
        raise SingularInformation("information matrix is singular") from None


def _direct_score(engine, sample, beta, s0, xbar, dstar):
    """Per-subject integrand of the beta influence before the inverse.

    Row i is  dN_i {X_i - xbar(T_i)} - r_i [X_i A1_i - A2_i]  with
    A1_i = sum of dstar/s0 over i's at-risk times, A2_i likewise with xbar,
    and r_i the (unweighted) relative hazard of active subjects.
    """
    ds = sample.dataset
    h = dstar / s0
    hx = h[:, None] * xbar
    H = np.concatenate([[0.0], np.cumsum(h)])
    HX = np.vstack([np.zeros(engine.p), np.cumsum(hx, axis=0)])
    lo, hi = engine.risk_window(ds.entry, ds.exit)
    a1 = H[hi] - H[lo]
    a2 = HX[hi] - HX[lo]
    r = np.where(sample.active, np.exp(engine.x @ beta), 0.0)
    direct = -r[:, None] * (engine.x * a1[:, None] - a2)
    direct[engine.score_idx] += engine.x[engine.score_idx] - xbar[engine.score_slot]
    return direct, r


def _window(engine, tau1, tau2, at_time):
    if at_time is not None:
        slot = np.searchsorted(engine.times, at_time)
        if slot >= engine.times.size or not np.isclose(engine.times[slot], at_time):
            raise BadInterval(f"{at_time} is not a retained event time")
        return slot, slot + 1
    if tau1 is None or tau2 is None or not 0.0 <= tau1 < tau2:
        raise BadInterval(f"need 0 <= tau1 < tau2, got ({tau1}, {tau2})")
    wlo = np.searchsorted(engine.times, tau1, side="right")
    whi = np.searchsorted(engine.times, tau2, side="right")
    return wlo, whi


def _window_risk_sums(engine, sample, g, wlo, whi):
    """Per-subject sum of g_e over the subject's at-risk times inside the window."""
    ds = sample.dataset
    G = np.concatenate([[0.0], np.cumsum(g)])
    lo, hi = engine.risk_window(ds.entry, ds.exit)
    return G[np.clip(hi, wlo, whi)] - G[np.clip(lo, wlo, whi)]


def _dn_window_term(engine, inv_s0, wlo, whi, n):
    """dN_i / S0(T_i) for cases with a retained event time inside the window."""
    out = np.zeros(n)
    inside = (engine.case_slot >= wlo) & (engine.case_slot < whi)
    out[engine.case_idx[inside]] = inv_s0[engine.case_slot[inside]]
    return out


def _b_matrix(stratum3: np.ndarray, n_strata3: int) -> np.ndarray:
    b = np.zeros((stratum3.shape[0], n_strata3))
    b[np.arange(stratum3.shape[0]), np.clip(stratum3, 1, n_strata3) - 1] = 1.0
    return b


def _gamma_pieces(p2: PhaseTwoDesign, p3: PhaseThreeDesign):
    """Indicator matrix, diagonal Gram and Gram-inverse rows for gamma."""
    B = _b_matrix(p3.stratum3, p3.n_strata3)
    a3 = np.where(p2.sampled & p3.observed, p3.est_weight, 0.0)
    gram_diag = a3 @ B
    if np.any((gram_diag <= 0.0) & (B[p2.sampled].sum(axis=0) > 0)):
        raise EmptyPhase3Stratum(int(np.argmax(gram_diag <= 0.0)) + 1)
    ginv_b = B / np.where(gram_diag > 0.0, gram_diag, 1.0)
    return B, a3, gram_diag, ginv_b


# --------------------------------------------------------------------------
# beta
# --------------------------------------------------------------------------

def influence_beta(regime: Regime, fit: FitResult, sample: WeightedSample,
                   extras=None) -> InfluenceSet:
    """Influences on the log relative hazard under the given regime."""
    regime = Regime(regime)
    engine = _engine_for(sample, fit)
    ds = sample.dataset
    n, p = ds.n, engine.p
    beta = fit.beta_hat
    s0, s1, _ = engine.moments(beta)
    xbar = s1 / s0[:, None]
    dstar = engine.event_weight_sums(engine.score_w)
    direct, _ = _direct_score(engine, sample, beta, s0, xbar, dstar)
    base = _solve_rows(fit.info, direct)
    zeros = np.zeros((n, p))
    xi_w = np.where(sample.active, sample.fit_weight, 0.0)

    if regime is Regime.FULL_COHORT:
        return InfluenceSet("beta", regime, zeros, base, zeros.copy(), base.copy())

    if regime is Regime.DESIGN:
        return InfluenceSet("beta", regime, zeros, base, zeros.copy(),
                            xi_w[:, None] * base)

    if regime is Regime.CALIBRATED:
        calib = extras
        if calib is None:
            raise RegimeMismatch("CalibrationResult extras", "None")
        A = calib.auxiliaries
        xi = sample.active.astype(float)
        wstar = xi * calib.calibrated_weight
        exp_a = np.exp(A @ calib.eta_hat)
        gram = (wstar[:, None] * A).T @ A
        try:
            ginv_a = np.linalg.solve(gram, A.T).T
        except np.linalg.LinAlgError:
            raise SingularCalibrationGram("calibration Gram matrix singular") from None
        c_za = (wstar[:, None] * base).T @ A          # (p, q)
        if1 = ginv_a @ c_za.T
        if2 = exp_a[:, None] * (base - if1)
        total = if1 + (xi * calib.base_weight)[:, None] * if2
        return InfluenceSet("beta", regime, if1, if2, zeros, total,
                            meta={"Z": base, "ginv_a": ginv_a, "exp_a": exp_a,
                                  "wstar": wstar})

    if regime in (Regime.THREE_PHASE, Regime.THREE_PHASE_KNOWN):
        if not isinstance(extras, ThreePhaseExtras):
            raise RegimeMismatch("ThreePhaseExtras", type(extras).__name__)
        p2, p3 = extras.p2, extras.p3
        xi = p2.sampled.astype(float)
        if regime is Regime.THREE_PHASE_KNOWN:
            total = (xi * np.where(sample.active, sample.fit_weight, 0.0))[:, None] * base
            return InfluenceSet("beta", regime, zeros, zeros.copy(), base, total)
        B, a3, _, ginv_b = _gamma_pieces(p2, p3)
        ztilde = p2.weight[:, None] * base
        c_zb = (a3[:, None] * ztilde).T @ B           # (p, J3)
        if2 = xi[:, None] * (ginv_b @ c_zb.T)
        if3 = ztilde - ginv_b @ c_zb.T
        total = if2 + a3[:, None] * if3               # xi already folded into if2
        return InfluenceSet("beta", regime, zeros, if2, if3, total,
                            meta={"Z": ztilde, "B": B, "a3": a3, "ginv_b": ginv_b})

    raise RegimeMismatch("a known regime", regime)


# --------------------------------------------------------------------------
# baseline-hazard mass on (tau1, tau2], or a single increment
# --------------------------------------------------------------------------

def influence_hazard(regime: Regime, fit: FitResult, sample: WeightedSample,
                     hazard: BaselineHazard, beta_infl: InfluenceSet,
                     extras=None, tau1: float | None = None,
                     tau2: float | None = None,
                     at_time: float | None = None) -> InfluenceSet:
    """Influences on the baseline-hazard mass over (tau1, tau2].

    Pass ``at_time`` instead of an interval to target a single increment
    dLambda0(t).  Consumes the beta influences computed under the same
    regime (the hazard influence is linear in them).
    """
    regime = Regime(regime)
    if beta_infl.regime is not Regime(regime):
        raise RegimeMismatch(regime, beta_infl.regime)
    engine = _engine_for(sample, fit)
    ds = sample.dataset
    n = ds.n
    beta = fit.beta_hat
    s0, s1, _ = engine.moments(beta)
    xbar = s1 / s0[:, None]
    h = hazard.increments
    if h.shape[0] != engine.times.size:
        raise BadInterval("hazard grid does not match the sample's event times")
    wlo, whi = _window(engine, tau1, tau2, at_time)
    wmask = np.zeros(engine.times.size, dtype=bool)
    wmask[wlo:whi] = True
    bvec = (h[wmask, None] * xbar[wmask]).sum(axis=0)
    wsum = _window_risk_sums(engine, sample, h / s0, wlo, whi)
    r = np.where(sample.active, np.exp(engine.x @ beta), 0.0)
    dn_term = _dn_window_term(engine, 1.0 / s0, wlo, whi, n)
    zeros = np.zeros(n)
    label = f"hazard({tau1},{tau2}]" if at_time is None else f"dLambda0@{at_time}"

    if regime in (Regime.FULL_COHORT, Regime.DESIGN):
        if2 = dn_term - beta_infl.phase2_part @ bvec - r * wsum
        if regime is Regime.FULL_COHORT:
            return InfluenceSet(label, regime, zeros, if2, zeros.copy(), if2.copy())
        xi_w = np.where(sample.active, sample.fit_weight, 0.0)
        # the dN term belongs to every phase-two case even when it carries
        # weight 1; total keeps Delta = 0 off the phase-two sample
        return InfluenceSet(label, regime, zeros, if2, zeros.copy(), xi_w * if2)

    if regime is Regime.CALIBRATED:
        calib = extras
        z = beta_infl.meta["Z"]
        exp_a = beta_infl.meta["exp_a"]
        ginv_a = beta_infl.meta["ginv_a"]
        wstar = beta_infl.meta["wstar"]
        sh = -(z @ bvec) - r * wsum
        ch = (wstar * sh) @ calib.auxiliaries          # (q,)
        if1 = ginv_a @ ch
        if2 = dn_term + exp_a * (sh - if1)
        xi = sample.active.astype(float)
        total = if1 + xi * calib.base_weight * if2
        return InfluenceSet(label, regime, if1, if2, zeros, total)

    if regime is Regime.THREE_PHASE:
        p2, p3 = extras.p2, extras.p3
        z = beta_infl.meta["Z"]
        B, a3, ginv_b = beta_infl.meta["B"], beta_infl.meta["a3"], beta_infl.meta["ginv_b"]
        xi = p2.sampled.astype(float)
        sh = -(z @ bvec) - p2.weight * r * wsum        # K has the w2 factor
        ch = (a3 * sh) @ B                             # (J3,)
        if2 = xi * (dn_term + ginv_b @ ch)
        if3 = sh - ginv_b @ ch
        total = if2 + a3 * if3
        return InfluenceSet(label, regime, zeros, if2, if3, total)

    if regime is Regime.THREE_PHASE_KNOWN:
        p2 = extras.p2
        xi = p2.sampled.astype(float)
        if3 = -(beta_infl.phase3_part @ bvec) - r * wsum
        if2 = xi * dn_term
        total = if2 + np.where(sample.active, sample.fit_weight, 0.0) * if3
        return InfluenceSet(label, regime, zeros, if2, if3, total)

    raise RegimeMismatch("a known regime", regime)


# --------------------------------------------------------------------------
# pure risk
# --------------------------------------------------------------------------

def influence_pure_risk(regime: Regime, fit: FitResult, hazard: BaselineHazard,
                        tau1: float, tau2: float, x: np.ndarray,
                        beta_infl: InfluenceSet,
                        hazard_infl: InfluenceSet) -> InfluenceSet:
    """Chain-rule influences on pi(tau1, tau2; x) from the upstream sets."""
    regime = Regime(regime)
    if beta_infl.regime is not regime or hazard_infl.regime is not regime:
        raise RegimeMismatch(regime, (beta_infl.regime, hazard_infl.regime))
    if not 0.0 <= tau1 < tau2:
        raise BadInterval(f"need 0 <= tau1 < tau2, got ({tau1}, {tau2})")
    x = np.asarray(x, dtype=float)
    mass = hazard.interval_mass(tau1, tau2)
    rel = np.exp(float(fit.beta_hat @ x))
    pi = -np.expm1(-rel * mass)
    d_beta = mass * rel * (1.0 - pi) * x               # (p,)
    d_lambda = rel * (1.0 - pi)

    def chain(bpart, hpart):
        return bpart @ d_beta + d_lambda * hpart

    out = InfluenceSet(
        f"pure_risk({tau1},{tau2};x)", regime,
        chain(beta_infl.phase1_part, hazard_infl.phase1_part),
        chain(beta_infl.phase2_part, hazard_infl.phase2_part),
        chain(beta_infl.phase3_part, hazard_infl.phase3_part),
        chain(beta_infl.total, hazard_infl.total),
        meta={"estimate": float(pi), "mass": mass})
    return out


# --------------------------------------------------------------------------
# calibration and phase-three weight parameters
# --------------------------------------------------------------------------

def influence_eta(calib, sample: WeightedSample) -> InfluenceSet:
    """Influences on the raking parameter eta (calibrated regime)."""
    A = calib.auxiliaries
    xi = sample.active.astype(float)
    wstar = xi * calib.calibrated_weight
    gram = (wstar[:, None] * A).T @ A
    try:
        ginv_a = np.linalg.solve(gram, A.T).T
    except np.linalg.LinAlgError:
        raise SingularCalibrationGram("calibration Gram matrix singular") from None
    exp_a = np.exp(A @ calib.eta_hat)
    if1 = ginv_a
    if2 = -exp_a[:, None] * ginv_a
    total = if1 + (xi * calib.base_weight)[:, None] * if2
    zeros = np.zeros_like(if1)
    return InfluenceSet("eta", Regime.CALIBRATED, if1, xi[:, None] * if2, zeros,
                        total)


def influence_gamma(p3: PhaseThreeDesign, p2: PhaseTwoDesign) -> InfluenceSet:
    """Influences on the log phase-three weights gamma (estimated weights)."""
    B, a3, _, ginv_b = _gamma_pieces(p2, p3)
    xi = p2.sampled.astype(float)
    if2 = xi[:, None] * ginv_b
    if3 = -ginv_b
    total = if2 + a3[:, None] * if3
    zeros = np.zeros_like(if2)
    return InfluenceSet("gamma", Regime.THREE_PHASE, zeros, if2, if3, total)


# --------------------------------------------------------------------------
# audit dump
# --------------------------------------------------------------------------

def dump_influences(path, ids, influence_sets):
    """Write per-subject influence components to delimited text."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "target", "phase", "component", "value"])
        for infl in influence_sets:
            for phase, arr in (("1", infl.phase1_part), ("2", infl.phase2_part),
                               ("3", infl.phase3_part), ("total", infl.total)):
                mat = arr if arr.ndim == 2 else arr[:, None]
                for i, sid in enumerate(ids):
                    for c in range(mat.shape[1]):
                        writer.writerow([sid, infl.target, phase, c,
                                         "%.17g" % mat[i, c]])
