import numpy as np
import pytest

from casecohort import (CohortDataset, PhaseTwoDesign, WeightedSample,
                        joint_inclusion)


@pytest.fixture
def fix_t3():
    """Three subjects, one stratum, unit weights; closed-form Cox solution.

    A: x=1 event at t=1; B: x=0 event at t=2; C: x=1 censored at t=3.
    """
    return CohortDataset(ids=["A", "B", "C"], entry=[0.0, 0.0, 0.0],
                         exit_time=[1.0, 2.0, 3.0], status=[1, 1, 0],
                         stratum=[1, 1, 1], x=[[1.0], [0.0], [1.0]],
                         covariate_names=["x"])


@pytest.fixture
def fix_t3_sample(fix_t3):
    return WeightedSample(fix_t3, np.ones(3, dtype=bool), np.ones(3))


@pytest.fixture
def fix_w4():
    """One stratum, n=4: one case plus three non-cases; m=2 subcohort draws."""
    ds = CohortDataset(ids=list("ABCD"), entry=np.zeros(4),
                       exit_time=[1.0, 2.0, 3.0, 4.0], status=[1, 0, 0, 0],
                       stratum=[1, 1, 1, 1],
                       x=[[1.0], [0.5], [-0.5], [0.0]],
                       covariate_names=["x"])
    return ds


def make_w4_design(ds, sampled_noncases=(1, 2)):
    sampled = ds.status == 1
    weight = np.ones(4)
    for i in sampled_noncases:
        sampled[i] = True
        weight[i] = 4 / 2
    return PhaseTwoDesign(sampled=sampled, weight=weight,
                          m_per_stratum=np.array([2]))


def random_cohort(seed, n=30, p=2, n_strata=2, beta=(0.4, -0.3), rate=0.2):
    """Small synthetic cohort with exponential failures and censoring."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    lin = x @ np.asarray(beta)[:p]
    t = rng.exponential(1.0 / (rate * np.exp(lin)))
    c = rng.uniform(0.5, 6.0, n)
    exit_t = np.minimum(t, c)
    status = (t <= c).astype(int)
    stratum = rng.integers(1, n_strata + 1, n)
    # keep every stratum populated
    stratum[:n_strata] = np.arange(1, n_strata + 1)
    ds = CohortDataset([str(i) for i in range(n)], np.zeros(n), exit_t,
                       status, stratum, x, tau=10.0)
    return ds, rng


def random_phase2(ds, rng, m=6):
    """Case-cohort design: all cases plus m subcohort draws per stratum."""
    cases = ds.status == 1
    sampled = cases.copy()
    weight = np.ones(ds.n)
    m_per = np.full(ds.n_strata, m)
    for j in range(1, ds.n_strata + 1):
        members = np.nonzero(ds.stratum == j)[0]
        draw = rng.choice(members, size=m, replace=False)
        sampled[draw] = True
        nc = draw[~cases[draw]]
        weight[nc] = members.size / m
    weight[cases] = 1.0
    return PhaseTwoDesign(sampled=sampled, weight=weight, m_per_stratum=m_per)


@pytest.fixture
def small_case_cohort():
    ds, rng = random_cohort(42)
    p2 = random_phase2(ds, rng)
    p2.validate_against(ds)
    return ds, p2, joint_inclusion(p2, ds)
