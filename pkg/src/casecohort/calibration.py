"""Raking calibration of design weights and auxiliary-variable construction.

Calibrated weights w* = w exp(eta'A) solve

    sum_i { xi_i w_i exp(eta'A_i) A_i - A_i } = 0,

i.e. the weighted auxiliary totals over the phase-two sample match the
cohort totals.  Auxiliary variables follow the two-stage recipe: a constant
column, full-cohort Cox influences computed on imputed covariates, and the
product of follow-up time in the risk interval with the estimated relative
hazard.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coxfit import SolverControls, WeightedSample, fit_cox
from .dataset import CohortDataset
from .design import PhaseTwoDesign
from .errors import (InvariantViolation, MissingCategory, NonConvergence,
                     RankDeficient, RankDeficientAuxiliaries, Separation)
from .influence import Regime, influence_beta

__all__ = ["AuxiliaryMatrix", "CalibrationResult", "ImputationModel",
           "ImputationSpec", "rake", "fit_wls", "fit_wmultinomial",
           "build_auxiliaries"]


@dataclass
class AuxiliaryMatrix:
    """Cohort-wide auxiliary variables; includes exactly one constant column."""

    values: np.ndarray
    column_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvariantViolation("auxiliaries", "matrix must be 2-D")
        const = [k for k in range(self.values.shape[1])
                 if np.allclose(self.values[:, k], self.values[0, k])
                 and not np.isclose(self.values[0, k], 0.0)]
        if len(const) != 1:
            raise InvariantViolation(
                "auxiliaries", f"expected exactly one constant column, found {len(const)}")

    @property
    def q(self) -> int:
        return self.values.shape[1]


@dataclass
class CalibrationResult:
    eta_hat: np.ndarray
    calibrated_weight: np.ndarray
    constraint_residual: np.ndarray
    iterations: int
    converged: bool
    base_weight: np.ndarray
    auxiliaries: np.ndarray
    column_names: list[str] = field(default_factory=list)


@dataclass
class ImputationModel:
    kind: str                      # "weighted_least_squares" | "weighted_multinomial_logistic"
    coefficients: np.ndarray
    predictor_names: list[str]
    response_name: str
    categories: np.ndarray | None = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Expected response value given predictors (with intercept prepended)."""
        xd = np.column_stack([np.ones(x.shape[0]), x])
        if self.kind == "weighted_least_squares":
            return xd @ self.coefficients
        # multinomial: expectation of the category value
        probs = self.predict_proba(x)
        return probs @ self.categories

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        xd = np.column_stack([np.ones(x.shape[0]), x])
        scores = np.column_stack([np.zeros(x.shape[0]), xd @ self.coefficients.T])
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ImputationSpec:
    """Declares how one phase-two covariate is imputed from phase-one data.

    ``predictors`` name proxy columns, phase-one covariates, or "stratum"
    (expanded to stratum indicator dummies, first stratum as reference).
    """

    response: str
    predictors: tuple[str, ...]
    kind: str = "weighted_least_squares"


# --------------------------------------------------------------------------
# raking
# --------------------------------------------------------------------------

def rake(sample: WeightedSample, aux: AuxiliaryMatrix,
         max_iter: int = 100, tol: float = 1e-10) -> CalibrationResult:
    """Calibrate design weights to auxiliary totals by raking.

    Newton iterations on eta with Jacobian sum(xi w exp(eta'A) A A'),
    step-halving when the residual norm increases.
    """
    A = aux.values
    ds_n = sample.dataset.n
    if A.shape[0] != ds_n:
        raise InvariantViolation("auxiliaries", "row count != cohort size")
    xi = sample.active.astype(float)
    w = np.where(sample.active, sample.fit_weight, 0.0) * sample.multiplicity()
    target = (sample.multiplicity()[:, None] * A).sum(axis=0)
    Asub = A[sample.active]
    if np.linalg.matrix_rank(Asub) < A.shape[1]:
        raise RankDeficientAuxiliaries(
            "auxiliary matrix is rank deficient over the phase-two sample")

    scale = 1.0 + np.max(np.abs(target))
    eta = np.zeros(A.shape[1])

    def residual(e):
        lin = A @ e
        we = w * np.exp(lin)
        return (we[:, None] * A).sum(axis=0) - target, we

    res, we = residual(eta)
    it = 0
    while np.max(np.abs(res)) >= tol * scale:
        if it >= max_iter:
            raise NonConvergence(
                f"raking did not converge in {max_iter} iterations "
                f"(residual max-norm {np.max(np.abs(res)):.3e})",
                residual=res)
        it += 1
        jac = (we[:, None] * A).T @ A
        try:
            step = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError:
            raise RankDeficientAuxiliaries("raking Jacobian singular") from None
        norm0 = np.max(np.abs(res))
        for half in range(11):
            cand = eta - step / (2.0 ** half)
            cand_res, cand_we = residual(cand)
            if np.max(np.abs(cand_res)) < norm0 or half == 10:
                eta, res, we = cand, cand_res, cand_we
                break
    wstar = sample.fit_weight * np.exp(A @ eta)
    return CalibrationResult(
        eta_hat=eta, calibrated_weight=wstar, constraint_residual=res,
        iterations=it, converged=True, base_weight=sample.fit_weight.copy(),
        auxiliaries=A, column_names=list(aux.column_names))


# --------------------------------------------------------------------------
# imputation models
# --------------------------------------------------------------------------

def fit_wls(x: np.ndarray, y: np.ndarray, w: np.ndarray,
            predictor_names=None, response_name="y") -> ImputationModel:
    """Weighted least squares with an intercept, via the normal equations."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    xd = np.column_stack([np.ones(x.shape[0]), x])
    wx = w[:, None] * xd
    gram = wx.T @ xd
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise RankDeficient("weighted design matrix is rank deficient")
    coef = np.linalg.solve(gram, wx.T @ y)
    return ImputationModel("weighted_least_squares", coef,
                           list(predictor_names or []), response_name)


def fit_wmultinomial(x: np.ndarray, y: np.ndarray, w: np.ndarray,
                     predictor_names=None, response_name="y",
                     max_iter: int = 100, tol: float = 1e-8) -> ImputationModel:
    """Weighted multinomial logistic regression, baseline category first.

    Newton-Raphson on the weighted log-likelihood; raises Separation when
    the iterates diverge and MissingCategory when a category has no
    observations.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cats = np.unique(y)
    if cats.size < 2:
        raise MissingCategory("need at least two observed categories")
    codes = np.searchsorted(cats, y)
    n, d = x.shape
    xd = np.column_stack([np.ones(n), x])
    dd = d + 1
    C = cats.size
    K = C - 1
    onehot = np.zeros((n, K))
    for k in range(K):
        onehot[:, k] = codes == k + 1
    coef = np.zeros((K, dd))

    def state(c):
        scores = np.column_stack([np.zeros(n), xd @ c.T])
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=1, keepdims=True)
        ll = float(np.sum(w * np.log(np.maximum(probs[np.arange(n), codes],
                                                1e-300))))
        grad = ((w[:, None] * (onehot - probs[:, 1:])).T @ xd).ravel()
        return ll, grad, probs

    ll, grad, probs = state(coef)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            return ImputationModel("weighted_multinomial_logistic", coef,
                                   list(predictor_names or []), response_name,
                                   categories=cats.astype(float))
        hess = np.zeros((K * dd, K * dd))
        for a in range(K):
            for b in range(K):
                pa, pb = probs[:, a + 1], probs[:, b + 1]
                wab = w * (pa * (float(a == b) - pb))
                hess[a * dd:(a + 1) * dd, b * dd:(b + 1) * dd] = \
                    (wab[:, None] * xd).T @ xd
        try:
            step = np.linalg.solve(hess, grad).reshape(K, dd)
        except np.linalg.LinAlgError:
            raise Separation("singular Hessian; data may be separated") from None
        for half in range(11):
            cand = coef + step / (2.0 ** half)
            cand_ll, cand_grad, cand_probs = state(cand)
            if cand_ll >= ll - 1e-12 or half == 10:
                coef, ll, grad, probs = cand, cand_ll, cand_grad, cand_probs
                break
        # deterministic cells push coefficients out slowly (quasi-separation);
        # only unbounded growth with no converging score is an error
        if not np.all(np.isfinite(coef)) or np.max(np.abs(coef)) > 500.0:
            raise Separation("coefficients diverged; perfect separation")
    raise NonConvergence(f"multinomial solver did not converge in {max_iter} iterations")


# --------------------------------------------------------------------------
# two-stage auxiliary construction
# --------------------------------------------------------------------------

def _predictor_matrix(dataset: CohortDataset, names) -> np.ndarray:
    cols = []
    for name in names:
        if name == "stratum":
            # numeric stratum score; indicator dummies can separate the
            # multinomial when a stratum pins a covariate level
            cols.append(dataset.stratum.astype(float))
            continue
        if name in dataset.proxy_names:
            cols.append(dataset.proxies[:, dataset.proxy_names.index(name)])
        elif name in dataset.covariate_names[:dataset.n_phase1_cov]:
            cols.append(dataset.x[:, dataset.covariate_names.index(name)])
        else:
            raise InvariantViolation("imputation spec",
                                     f"unknown predictor {name!r}")
    return np.column_stack(cols) if cols else np.empty((dataset.n, 0))


def impute_cohort(dataset: CohortDataset, p2: PhaseTwoDesign,
                  specs) -> tuple[np.ndarray, list[ImputationModel]]:
    """Impute phase-two covariates for every cohort member.

    Models are fit on the phase-two sample with design weights; predictions
    replace the phase-two columns for all subjects, including those with
    measured values.
    """
    x_imp = np.array(dataset.x, copy=True)
    models = []
    sampled = p2.sampled
    w = p2.weight[sampled]
    by_name = {s.response: s for s in specs}
    for col, name in enumerate(dataset.covariate_names):
        if col < dataset.n_phase1_cov:
            continue
        if name not in by_name:
            raise InvariantViolation("imputation spec",
                                     f"no model declared for {name!r}")
        spec = by_name[name]
        pred = _predictor_matrix(dataset, spec.predictors)
        y = dataset.x[sampled, col]
        if spec.kind == "weighted_multinomial_logistic":
            model = fit_wmultinomial(pred[sampled], y, w,
                                     predictor_names=list(spec.predictors),
                                     response_name=name)
        else:
            model = fit_wls(pred[sampled], y, w,
                            predictor_names=list(spec.predictors),
                            response_name=name)
        x_imp[:, col] = model.predict(pred)
        models.append(model)
    return x_imp, models


def followup_time(dataset: CohortDataset, tau1: float, tau2: float) -> np.ndarray:
    """Per-subject follow-up time inside (tau1, tau2]."""
    return np.maximum(
        0.0, np.minimum(dataset.exit, tau2) - np.maximum(dataset.entry, tau1))


def build_auxiliaries(dataset: CohortDataset, p2: PhaseTwoDesign, specs,
                      tau1: float, tau2: float,
                      controls: SolverControls | None = None):
    """Run the two-stage auxiliary pipeline.

    Returns (stage-1 AuxiliaryMatrix, stage-2 AuxiliaryMatrix, intermediates)
    where the intermediates expose the imputation models, the imputed-cohort
    fit and the stage-1 calibration for diagnostics.
    """
    x_imp, models = impute_cohort(dataset, p2, specs)
    imputed = CohortDataset(
        dataset.ids, dataset.entry, dataset.exit, dataset.status,
        dataset.stratum, x_imp, proxies=dataset.proxies,
        covariate_names=dataset.covariate_names, n_phase1_cov=dataset.p,
        proxy_names=dataset.proxy_names, tau=dataset.tau)
    full = WeightedSample(imputed, np.ones(dataset.n, dtype=bool),
                          np.ones(dataset.n))
    fit_imp = fit_cox(full, controls)
    infl_imp = influence_beta(Regime.FULL_COHORT, fit_imp, full)
    names1 = ["const"] + [f"imputed_beta_infl_{c}" for c in dataset.covariate_names]
    stage1 = AuxiliaryMatrix(
        np.column_stack([np.ones(dataset.n), infl_imp.total]), names1)

    cc_sample = WeightedSample(dataset, p2.sampled, p2.weight)
    calib1 = rake(cc_sample, stage1)
    refit = fit_cox(WeightedSample(dataset, p2.sampled,
                                   calib1.calibrated_weight), controls)
    rel_hazard = np.exp(x_imp @ refit.beta_hat)
    extra = followup_time(dataset, tau1, tau2) * rel_hazard
    stage2 = AuxiliaryMatrix(
        np.column_stack([stage1.values, extra]),
        names1 + ["followup_x_relhazard"])
    intermediates = {"models": models, "imputed_fit": fit_imp,
                     "stage1_calibration": calib1, "stage1_refit": refit,
                     "imputed_x": x_imp}
    return stage1, stage2, intermediates
