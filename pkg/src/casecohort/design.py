"""Multi-phase sampling designs: membership, weights and inclusion moments.

Phase two is the (stratified) case-cohort sample: all cases plus a
fixed-size subcohort drawn without replacement per stratum (or a Bernoulli
sample in with-replacement mode).  Phase three is the subset of phase two
with complete covariate data, sampled by independent Bernoulli indicators.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import CohortDataset
from .errors import DegenerateStratum, EmptyPhase3Stratum, InvariantViolation

__all__ = ["PhaseTwoDesign", "PhaseThreeDesign", "JointInclusion",
           "joint_inclusion", "estimate_phase3_weights"]


@dataclass(frozen=True)
class PhaseTwoDesign:
    """Phase-two membership indicators and marginal design weights.

    ``weight`` holds n(j)/m(j) for sampled non-cases and 1 for cases; the
    entries of unsampled subjects are ignored by every consumer.  In
    with-replacement (Bernoulli) mode the weights are the user-supplied
    inverse sampling probabilities and ``m_per_stratum`` is unused.
    """

    sampled: np.ndarray
    weight: np.ndarray
    m_per_stratum: np.ndarray
    with_replacement: bool = False
    strata: np.ndarray | None = None   # sampling strata; dataset's when None

    def __post_init__(self):
        object.__setattr__(self, "sampled",
                           np.asarray(self.sampled, dtype=bool))
        object.__setattr__(self, "weight",
                           np.asarray(self.weight, dtype=float))
        object.__setattr__(self, "m_per_stratum",
                           np.asarray(self.m_per_stratum, dtype=np.int64))
        if self.strata is not None:
            object.__setattr__(self, "strata",
                               np.asarray(self.strata, dtype=np.int64))
        if self.weight.shape != self.sampled.shape:
            raise InvariantViolation("phase-two design", "weight/sampled length mismatch")
        if np.any(self.weight[self.sampled] < 1.0 - 1e-12):
            raise InvariantViolation("phase-two design", "sampled weight < 1")

    def sampling_strata(self, dataset: CohortDataset) -> np.ndarray:
        return dataset.stratum if self.strata is None else self.strata

    def validate_against(self, dataset: CohortDataset):
        cases = dataset.status == 1
        if not np.all(self.sampled[cases]):
            raise InvariantViolation("phase-two design", "an unsampled case exists")
        if not np.allclose(self.weight[cases], 1.0):
            raise InvariantViolation("phase-two design", "case weight != 1")
        strata = self.sampling_strata(dataset)
        if not self.with_replacement:
            for j in range(1, int(strata.max()) + 1):
                mask = (strata == j) & self.sampled & ~cases
                if not mask.any():
                    continue
                nj = int((strata == j).sum())
                mj = self.m_per_stratum[j - 1]
                if mj == 0 or not np.allclose(self.weight[mask], nj / mj):
                    raise InvariantViolation(
                        "phase-two design",
                        f"non-case weight in stratum {j} is not n(j)/m(j)")
        measured = dataset.phase2_measured()
        missing = self.sampled & ~measured
        if missing.any():
            raise InvariantViolation(
                f"subject {dataset.ids[int(np.nonzero(missing)[0][0])]}",
                "sampled in phase two but phase-two covariates absent")


@dataclass(frozen=True)
class PhaseThreeDesign:
    """Phase-three (complete-data) membership and design weights.

    ``est_weight`` is the estimated weight exp(gamma' B) or, when the
    sampling probabilities are known, their reciprocal.  ``est_var`` is the
    per-subject Bernoulli variance (1/w)(1 - 1/w).
    """

    observed: np.ndarray
    stratum3: np.ndarray
    est_weight: np.ndarray
    est_var: np.ndarray
    gamma: np.ndarray | None = None
    known_prob: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=bool))
        object.__setattr__(self, "stratum3", np.asarray(self.stratum3, dtype=np.int64))
        object.__setattr__(self, "est_weight", np.asarray(self.est_weight, dtype=float))
        object.__setattr__(self, "est_var", np.asarray(self.est_var, dtype=float))
        if np.any(self.est_weight < 1.0 - 1e-9):
            raise InvariantViolation("phase-three design", "weight < 1")
        if self.known_prob is not None:
            kp = np.asarray(self.known_prob, dtype=float)
            object.__setattr__(self, "known_prob", kp)
            if not np.allclose(self.est_weight, 1.0 / kp):
                raise InvariantViolation("phase-three design",
                                         "est_weight != 1/known_prob")

    @property
    def weights_known(self) -> bool:
        return self.known_prob is not None

    @property
    def n_strata3(self) -> int:
        return int(self.stratum3.max())


class JointInclusion:
    """On-demand joint phase-two inclusion weights and covariances.

    All pair quantities depend only on the stratum and the two case flags,
    so nothing is stored per pair.  For sampled non-cases i, k in stratum j
    (without replacement):

        w_{i,k,j}     = n(n-1) / (m(m-1))
        sigma_{i,k,j} = m(m-1)/(n(n-1)) - (m/n)^2
        sigma_{i,j}   = (m/n)(1 - m/n)

    Cases and cross-stratum pairs have zero covariance; with-replacement
    sampling zeroes every off-diagonal covariance as well.
    """

    def __init__(self, design: PhaseTwoDesign, dataset: CohortDataset):
        self.design = design
        self.dataset = dataset
        self.is_case = dataset.status == 1
        self.strata = design.sampling_strata(dataset)
        J = int(self.strata.max())
        self.n_strata = J
        self._sigma_off = np.zeros(J + 1)
        self._w_pair = np.ones(J + 1)
        if not design.with_replacement:
            m_s = design.m_per_stratum
            for j in range(1, J + 1):
                nj = float((self.strata == j).sum())
                mj = float(m_s[j - 1])
                noncases = np.nonzero((self.strata == j) & ~self.is_case
                                      & design.sampled)[0]
                if noncases.size == 0:
                    if not ((self.strata == j) & ~self.is_case).any():
                        warnings.warn(
                            f"stratum {j} has no non-cases; weights left at 1",
                            stacklevel=3)
                    continue
                if mj < 2:
                    if noncases.size >= 2:
                        raise DegenerateStratum(j)
                    continue
                self._w_pair[j] = nj * (nj - 1.0) / (mj * (mj - 1.0))
                self._sigma_off[j] = (mj / nj) * ((mj - 1.0) / (nj - 1.0)) \
                    - (mj / nj) ** 2

    # -- vectorised views used by the variance module -----------------------

    def marginal_sigma(self) -> np.ndarray:
        """var(xi_i | cohort) per subject: (1/w)(1 - 1/w) for non-cases."""
        w = self.design.weight
        sig = np.where(self.is_case, 0.0, (1.0 / w) * (1.0 - 1.0 / w))
        return sig

    def pair_sigma_by_stratum(self) -> np.ndarray:
        """sigma_{i,k,j} for a distinct non-case pair, indexed by stratum."""
        return self._sigma_off.copy()

    def pair_weight_by_stratum(self) -> np.ndarray:
        """w_{i,k,j} for a distinct non-case pair, indexed by stratum."""
        return self._w_pair.copy()

    # -- scalar accessors ----------------------------------------------------

    def pair(self, i: int, k: int) -> tuple[float, float]:
        """(joint weight, covariance) for subjects i and k."""
        d = self.design
        if i == k:
            w = d.weight[i]
            sig = 0.0 if self.is_case[i] else (1.0 / w) * (1.0 - 1.0 / w)
            return float(w), float(sig)
        same = self.strata[i] == self.strata[k]
        if (not same) or self.is_case[i] or self.is_case[k] or d.with_replacement:
            return float(d.weight[i] * d.weight[k]), 0.0
        j = int(self.strata[i])
        if d.m_per_stratum[j - 1] < 2:
            raise DegenerateStratum(j)
        return float(self._w_pair[j]), float(self._sigma_off[j])


def joint_inclusion(design: PhaseTwoDesign, dataset: CohortDataset) -> JointInclusion:
    """Build the joint-inclusion accessor for a phase-two design."""
    return JointInclusion(design, dataset)


def estimate_phase3_weights(dataset: CohortDataset, p2: PhaseTwoDesign,
                            stratum3: np.ndarray,
                            observed: np.ndarray) -> PhaseThreeDesign:
    """Estimate phase-three weights from stratum-wise observation rates.

    Solves sum(xi B - exp(gamma'B) xi V B) = 0; with indicator B this is
    closed-form per phase-three stratum s:

        exp(gamma_s) = (# phase-two subjects in s) / (# observed in s).
    """
    stratum3 = np.asarray(stratum3, dtype=np.int64)
    observed = np.asarray(observed, dtype=bool)
    if np.any(observed & ~p2.sampled):
        raise InvariantViolation("phase-three design",
                                 "observed subject outside phase two")
    n_s3 = int(stratum3[p2.sampled].max())
    gamma = np.zeros(n_s3)
    for s in range(1, n_s3 + 1):
        in_s = p2.sampled & (stratum3 == s)
        n2 = int(in_s.sum())
        n3 = int((in_s & observed).sum())
        if n2 == 0:
            continue
        if n3 == 0:
            raise EmptyPhase3Stratum(s)
        gamma[s - 1] = np.log(n2 / n3)
    est_weight = np.exp(gamma[np.clip(stratum3, 1, n_s3) - 1])
    est_var = (1.0 / est_weight) * (1.0 - 1.0 / est_weight)
    return PhaseThreeDesign(observed=observed, stratum3=stratum3,
                            est_weight=est_weight, est_var=est_var,
                            gamma=gamma)


def known_phase3_design(stratum3: np.ndarray, observed: np.ndarray,
                        prob: np.ndarray) -> PhaseThreeDesign:
    """Phase-three design with known sampling probabilities."""
    prob = np.asarray(prob, dtype=float)
    w = 1.0 / prob
    return PhaseThreeDesign(observed=observed, stratum3=stratum3,
                            est_weight=w, est_var=(1.0 / w) * (1.0 - 1.0 / w),
                            known_prob=prob)
