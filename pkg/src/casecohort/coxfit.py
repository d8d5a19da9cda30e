"""Weighted Cox partial-likelihood solver, Breslow hazard and pure risk.

One engine serves every weighting regime: the caller supplies per-subject
activity indicators (phase-two membership, or its intersection with the
phase-three sample) and fit weights (design, calibrated, or products with
phase-three weights).  The event-time grid is always built from the full
cohort's events; the Breslow numerator is never reweighted.

The counting-process sums

    S_l(t; b) = sum_k active_k w_k Y_k(t) exp(b'X_k) X_k^{(l)},  l = 0,1,2

are evaluated at all event times in one vectorised pass using the identity
Y_k(t) = 1{exit_k >= t} - 1{entry_k >= t} and suffix sums over subjects
sorted by exit and entry times.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import CohortDataset
from .errors import (BadInterval, EmptyRiskSet, InvariantViolation,
                     MaxIterations, MonotoneLikelihood, NoEvents,
                     SingularInformation)

__all__ = ["WeightedSample", "SolverControls", "FitResult", "BaselineHazard",
           "PureRisk", "SMoments", "fit_cox", "breslow", "pure_risk",
           "s_moments"]


@dataclass
class WeightedSample:
    """A cohort plus the activity mask and fit weights of one regime.

    ``mult`` holds optional per-subject replication multiplicities; they
    exist only so derivative checks can perturb a single subject's
    contribution to every estimating equation and default to ones.
    """

    dataset: CohortDataset
    active: np.ndarray
    fit_weight: np.ndarray
    mult: np.ndarray | None = None

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        self.fit_weight = np.asarray(self.fit_weight, dtype=float)
        n = self.dataset.n
        if self.active.shape != (n,) or self.fit_weight.shape != (n,):
            raise InvariantViolation("weighted sample", "mask/weight length mismatch")
        measured = self.dataset.phase2_measured()
        if np.any(self.active & ~measured):
            raise InvariantViolation("weighted sample",
                                     "active subject lacks phase-two covariates")
        if self.mult is not None:
            self.mult = np.asarray(self.mult, dtype=float)

    def multiplicity(self) -> np.ndarray:
        return np.ones(self.dataset.n) if self.mult is None else self.mult

    def covariates_zeroed(self) -> np.ndarray:
        """Covariate matrix with inactive subjects' rows zeroed (NaN-safe)."""
        x = np.where(self.active[:, None], self.dataset.x, 0.0)
        return np.nan_to_num(x, nan=0.0)


@dataclass(frozen=True)
class SolverControls:
    tol: float = 1e-9            # score max-norm at convergence
    ll_tol: float = 1e-12        # partial log-likelihood change at convergence
    max_iter: int = 50
    max_halvings: int = 10
    beta_bound: float = 50.0     # divergence guard during iteration
    monotone_bound: float = 25.0  # a "converged" estimate beyond this has no root
    strict_zero_risk: bool = False


@dataclass
class FitResult:
    beta_hat: np.ndarray
    info: np.ndarray
    score_norm: float
    iterations: int
    converged: bool
    n_dropped_times: int = 0
    _engine: object = field(default=None, repr=False, compare=False)


@dataclass
class BaselineHazard:
    """Step-function baseline hazard: increments at retained event times."""

    event_times: np.ndarray
    increments: np.ndarray
    numerator_counts: np.ndarray
    n_dropped_times: int = 0
    tau: float | None = None

    def cumulative(self, t: float) -> float:
        return float(self.increments[self.event_times <= t].sum())

    def interval_mass(self, tau1: float, tau2: float) -> float:
        """Hazard mass on the left-open, right-closed interval (tau1, tau2]."""
        inside = (self.event_times > tau1) & (self.event_times <= tau2)
        return float(self.increments[inside].sum())


@dataclass(frozen=True)
class PureRisk:
    tau1: float
    tau2: float
    x_profile: np.ndarray
    value: float


@dataclass(frozen=True)
class SMoments:
    s0: float
    s1: np.ndarray
    s2: np.ndarray


class _RiskSetEngine:
    """Shared vectorised machinery over the retained event-time grid."""

    def __init__(self, sample: WeightedSample):
        ds = sample.dataset
        self.sample = sample
        self.n, self.p = ds.n, ds.p
        self.x = sample.covariates_zeroed()
        mult = sample.multiplicity()
        self.aw = np.where(sample.active, sample.fit_weight * mult, 0.0)

        self._exit_order = np.argsort(ds.exit, kind="stable")
        self._sorted_exit = ds.exit[self._exit_order]
        self._entry_order = np.argsort(ds.entry, kind="stable")
        self._sorted_entry = ds.entry[self._entry_order]

        event_mask = ds.status == 1
        all_times = np.unique(ds.exit[event_mask])
        if all_times.size == 0:
            raise NoEvents("no events in the cohort")
        # a time is retained iff some active subject is at risk there
        at_risk = self._risk_sums(sample.active.astype(float), all_times)
        keep = at_risk[:, 0] > 0.0
        self.times = all_times[keep]
        self.n_dropped_times = int((~keep).sum())
        if self.times.size == 0:
            raise NoEvents("every event time lost its risk set")

        case_idx = np.nonzero(event_mask)[0]
        slot = np.searchsorted(self.times, ds.exit[case_idx])
        retained = (slot < self.times.size) & np.isclose(
            self.times[np.minimum(slot, self.times.size - 1)], ds.exit[case_idx])
        self.case_idx = case_idx[retained]          # cases at retained times
        self.case_slot = slot[retained]
        self.d = np.bincount(self.case_slot, weights=mult[self.case_idx],
                             minlength=self.times.size)
        sc = sample.active[self.case_idx]
        self.score_idx = self.case_idx[sc]          # active cases drive the score
        self.score_slot = self.case_slot[sc]
        self.score_w = self.aw[self.score_idx]

    # -- at-risk sums --------------------------------------------------------

    def _risk_sums(self, vals: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Sum `vals` over subjects at risk at each time; vals is (n,) or (n,c)."""
        v = vals if vals.ndim == 2 else vals[:, None]
        sfx_exit = np.vstack([np.cumsum(v[self._exit_order][::-1], axis=0)[::-1],
                              np.zeros((1, v.shape[1]))])
        sfx_entry = np.vstack([np.cumsum(v[self._entry_order][::-1], axis=0)[::-1],
                               np.zeros((1, v.shape[1]))])
        ie = np.searchsorted(self._sorted_exit, times, side="left")
        ia = np.searchsorted(self._sorted_entry, times, side="left")
        return sfx_exit[ie] - sfx_entry[ia]

    def moments(self, beta: np.ndarray):
        """(S0, S1, S2) at every retained event time for the sample weights."""
        p = self.p
        r = self.aw * np.exp(self.x @ beta)
        iu, ju = np.triu_indices(p)
        cols = np.concatenate([r[:, None], r[:, None] * self.x,
                               r[:, None] * self.x[:, iu] * self.x[:, ju]], axis=1)
        sums = self._risk_sums(cols, self.times)
        s0 = sums[:, 0]
        s1 = sums[:, 1:1 + p]
        s2 = np.zeros((self.times.size, p, p))
        s2[:, iu, ju] = sums[:, 1 + p:]
        s2[:, ju, iu] = sums[:, 1 + p:]
        return s0, s1, s2

    def risk_window(self, entry: np.ndarray, exit_t: np.ndarray):
        """Per-subject index range [lo, hi) of grid times where Y_i(t)=1."""
        lo = np.searchsorted(self.times, entry, side="right")
        hi = np.searchsorted(self.times, exit_t, side="right")
        return lo, hi

    def event_weight_sums(self, per_case_weight: np.ndarray) -> np.ndarray:
        """Sum of the given per-active-case weights at each grid time."""
        return np.bincount(self.score_slot, weights=per_case_weight,
                           minlength=self.times.size)


def _loglik_score_info(engine: _RiskSetEngine, beta: np.ndarray):
    s0, s1, s2 = engine.moments(beta)
    if np.any(s0[engine.d > 0] <= 0.0):
        # cannot happen for retained times with positive weights, but guard
        raise EmptyRiskSet(float(engine.times[np.argmax(s0 <= 0.0)]))
    xbar = s1 / s0[:, None]
    xc = engine.x[engine.score_idx]
    w = engine.score_w
    ll = float(np.sum(w * (xc @ beta - np.log(s0[engine.score_slot]))))
    score = (w[:, None] * (xc - xbar[engine.score_slot])).sum(axis=0)
    bracket = s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :]
    info = np.einsum("e,epq->pq", np.bincount(
        engine.score_slot, weights=w, minlength=engine.times.size), bracket)
    return ll, score, info, s0, s1


def fit_cox(sample: WeightedSample, controls: SolverControls | None = None) -> FitResult:
    """Newton-Raphson solution of the weighted partial-likelihood score.

    With unit weights and a fully active cohort this reproduces the
    standard unweighted Cox estimate.  Raises MonotoneLikelihood when the
    iterates diverge (no finite root), SingularInformation when the
    observed information is not invertible at an iterate.
    """
    controls = controls or SolverControls()
    engine = _RiskSetEngine(sample)
    if engine.score_idx.size == 0:
        raise NoEvents("no active subject has an event")
    p = engine.p
    beta = np.zeros(p)
    ll, score, info, s0, _ = _loglik_score_info(engine, beta)
    it = 0
    converged = p == 0 or np.max(np.abs(score)) < controls.tol
    while not converged:
        if it >= controls.max_iter:
            raise MaxIterations(f"no convergence in {controls.max_iter} iterations")
        it += 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularInformation("observed information is singular") from None
        new_beta, new = None, None
        for half in range(controls.max_halvings + 1):
            cand = beta + step / (2.0 ** half)
            cand_ll, cand_score, cand_info, s0, _ = _loglik_score_info(engine, cand)
            if cand_ll >= ll - 1e-14 or half == controls.max_halvings:
                new_beta, new = cand, (cand_ll, cand_score, cand_info)
                break
        d_ll = new[0] - ll
        beta, (ll, score, info) = new_beta, new
        if np.max(np.abs(beta)) > controls.beta_bound:
            raise MonotoneLikelihood(
                "estimates diverged; the score has no finite root")
        if np.max(np.abs(score)) < controls.tol and abs(d_ll) < controls.ll_tol:
            converged = True
    if p and np.max(np.abs(beta)) > controls.monotone_bound:
        # the score vanished only because the likelihood plateaus at the
        # boundary; there is no finite root
        raise MonotoneLikelihood(
            "score vanishes only as the estimate diverges; no finite root")
    score_norm = float(np.max(np.abs(score))) if p else 0.0
    return FitResult(beta_hat=beta, info=info, score_norm=score_norm,
                     iterations=it, converged=converged,
                     n_dropped_times=engine.n_dropped_times, _engine=engine)


def _engine_for(sample: WeightedSample, fit: FitResult | None) -> _RiskSetEngine:
    if fit is not None and fit._engine is not None and fit._engine.sample is sample:
        return fit._engine
    return _RiskSetEngine(sample)


def breslow(sample: WeightedSample, beta: np.ndarray,
            fit: FitResult | None = None, strict: bool = False,
            warn: bool = True) -> BaselineHazard:
    """Breslow baseline-hazard increments dN(t) / S0(t; beta).

    The numerator counts all cohort events at t, regardless of phase-two
    or phase-three membership.  Event times at which no active subject is
    at risk are dropped with a warning (or raise in strict mode).
    """
    engine = _engine_for(sample, fit)
    if strict and engine.n_dropped_times:
        raise EmptyRiskSet("event time with empty active risk set")
    if warn and engine.n_dropped_times:
        warnings.warn(f"dropped {engine.n_dropped_times} event time(s) with "
                      "no active subject at risk", stacklevel=2)
    s0, _, _ = engine.moments(np.asarray(beta, dtype=float))
    return BaselineHazard(event_times=engine.times.copy(),
                          increments=engine.d / s0,
                          numerator_counts=engine.d.copy(),
                          n_dropped_times=engine.n_dropped_times,
                          tau=sample.dataset.tau)


def pure_risk(beta: np.ndarray, hazard: BaselineHazard, tau1: float,
              tau2: float, x: np.ndarray) -> PureRisk:
    """Covariate-specific risk of the event in (tau1, tau2]."""
    if not (0.0 <= tau1 < tau2):
        raise BadInterval(f"need 0 <= tau1 < tau2, got ({tau1}, {tau2})")
    if hazard.tau is not None and tau2 > hazard.tau + 1e-9:
        raise BadInterval(f"tau2 = {tau2} exceeds maximum follow-up {hazard.tau}")
    x = np.asarray(x, dtype=float)
    mass = hazard.interval_mass(tau1, tau2)
    value = -np.expm1(-np.exp(float(np.dot(beta, x))) * mass)
    return PureRisk(tau1=tau1, tau2=tau2, x_profile=x, value=float(value))


def s_moments(sample: WeightedSample, beta: np.ndarray, t: float) -> SMoments:
    """Weighted at-risk sums S0, S1, S2 at a single time."""
    ds = sample.dataset
    beta = np.asarray(beta, dtype=float)
    x = sample.covariates_zeroed()
    y = (ds.exit >= t) & (t > ds.entry)
    a = np.where(sample.active & y, sample.fit_weight * sample.multiplicity(), 0.0)
    r = a * np.exp(x @ beta)
    s0 = float(r.sum())
    s1 = r @ x
    s2 = (r[:, None] * x).T @ x
    return SMoments(s0=s0, s1=s1, s2=s2)
