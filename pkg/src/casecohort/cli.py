"""Batch command-line front end: fit, calibrate, simulate.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
All emitted numbers are printed with repr-level precision so reports can
be re-parsed without loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .calibration import ImputationSpec, build_auxiliaries, rake
from .coxfit import WeightedSample, breslow, fit_cox, pure_risk
from .dataset import CohortSchema, load_cohort
from .design import (PhaseTwoDesign, estimate_phase3_weights, joint_inclusion,
                     known_phase3_design)
from .errors import CaseCohortError
from .influence import (Regime, ThreePhaseExtras, influence_beta,
                        influence_hazard, influence_pure_risk)
from .simharness import ALL_REGIMES, ScenarioConfig, run_scenario
from .variance import (confidence_interval, variance_calibrated,
                       variance_design, variance_three_phase)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
FIT_REGIMES = ("full-cohort", "design", "calibrated", "three-phase")


class ConfigError(Exception):
    pass


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _parse_schema(arg: str) -> CohortSchema:
    if os.path.exists(arg):
        with open(arg, encoding="utf-8") as fh:
            raw = json.load(fh)
    else:
        try:
            raw = json.loads(arg)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--schema is neither a file nor JSON: {exc}")
    known = {f for f in CohortSchema.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
    return CohortSchema(**raw)


def _parse_profiles(args_profile, p):
    profiles = []
    for spec in args_profile or []:
        vals = [float(v) for v in spec.split(",")]
        if len(vals) != p:
            raise ConfigError(
                f"--risk-profile needs {p} values, got {len(vals)}: {spec!r}")
        profiles.append(np.asarray(vals))
    return profiles


def _phase2_design(dataset, args):
    """Build the phase-two design from the file's subcohort indicator.

    The `phase2` column marks subcohort membership; every case joins the
    phase-two sample automatically.  Non-case subcohort members in stratum
    j get weight n(j)/m(j) with m(j) the subcohort count in that stratum.
    """
    cols = getattr(dataset, "design_columns", {})
    if "phase2" not in cols:
        raise ConfigError("the schema must map a `phase2` subcohort column "
                          "for case-cohort regimes")
    subcohort = cols["phase2"] > 0
    strata = dataset.stratum
    cases = dataset.status == 1
    sampled = subcohort | cases
    weight = np.ones(dataset.n)
    m_per = np.zeros(dataset.n_strata, dtype=int)
    for j in range(1, dataset.n_strata + 1):
        in_j = strata == j
        m_per[j - 1] = int((in_j & subcohort).sum())
        if m_per[j - 1]:
            weight[in_j & ~cases] = int(in_j.sum()) / m_per[j - 1]
    weight[cases] = 1.0
    design = PhaseTwoDesign(sampled=sampled, weight=weight,
                            m_per_stratum=m_per, with_replacement=False)
    design.validate_against(dataset)
    return design


def cmd_fit(args) -> int:
    schema = _parse_schema(args.schema)
    if args.proxies:
        schema.proxies = args.proxies.split(",")
    if args.phase3_col:
        schema.phase3 = args.phase3_col
    dataset = load_cohort(args.input, schema)
    p = dataset.p
    profiles = _parse_profiles(args.risk_profile, p)
    tau1, tau2 = (None, None)
    if args.risk_interval:
        tau1, tau2 = (float(v) for v in args.risk_interval.split(","))
        if not 0.0 <= tau1 < tau2 <= dataset.tau:
            raise ConfigError(f"bad risk interval ({tau1}, {tau2}]")
        dataset.warn_if_interval_uncovered(tau1, tau2)
    if profiles and not args.risk_interval:
        raise ConfigError("--risk-profile requires --risk-interval")
    if args.calibrate:
        if args.regime not in ("design", "calibrated"):
            raise ConfigError("--calibrate conflicts with --regime "
                              f"{args.regime}")
        args.regime = "calibrated"
    if args.regime not in FIT_REGIMES:
        raise ConfigError(f"--regime must be one of {FIT_REGIMES}")
    if args.regime == "calibrated":
        if not schema.proxies and not args.impute_with:
            raise ConfigError("calibration requires proxies (--proxies) or "
                              "--impute-with predictors")
        if not args.risk_interval:
            raise ConfigError("calibration requires --risk-interval for the "
                              "follow-up auxiliary")

    os.makedirs(args.out, exist_ok=True)
    variance_method = args.regime

    if args.regime == "full-cohort":
        sample = WeightedSample(dataset, np.ones(dataset.n, dtype=bool),
                                np.ones(dataset.n))
        regime = Regime.FULL_COHORT
        design = PhaseTwoDesign(np.ones(dataset.n, dtype=bool),
                                np.ones(dataset.n),
                                dataset.n_per_stratum)
        extras = None
    else:
        design = _phase2_design(dataset, args)
        cols = getattr(dataset, "design_columns", {})
        if args.regime == "design":
            sample = WeightedSample(dataset, design.sampled, design.weight)
            regime = Regime.DESIGN
            extras = None
        elif args.regime == "calibrated":
            specs = _imputation_specs(dataset, args)
            _, stage2, _ = build_auxiliaries(dataset, design, specs, tau1, tau2)
            calib = rake(WeightedSample(dataset, design.sampled, design.weight),
                         stage2)
            sample = WeightedSample(dataset, design.sampled,
                                    calib.calibrated_weight)
            regime = Regime.CALIBRATED
            extras = calib
        else:                                          # three-phase
            if "phase3" not in cols:
                raise ConfigError("three-phase regime needs a `phase3` column "
                                  "(schema key or --phase3-col)")
            observed = cols["phase3"] > 0
            stratum3 = cols.get(
                "stratum3", np.where(dataset.status == 1, 1, 2)).astype(int)
            if args.phase3_known_probs:
                if "phase3_prob" not in cols:
                    raise ConfigError("--phase3-known-probs needs a "
                                      "`phase3_prob` column in the schema")
                p3 = known_phase3_design(stratum3, observed, cols["phase3_prob"])
                regime = Regime.THREE_PHASE_KNOWN
                variance_method = "collapsed two-phase"
            else:
                p3 = estimate_phase3_weights(dataset, design, stratum3, observed)
                regime = Regime.THREE_PHASE
                variance_method = "three-phase estimated weights"
            sample = WeightedSample(dataset, design.sampled & p3.observed,
                                    design.weight * p3.est_weight)
            extras = ThreePhaseExtras(design, p3)

    fit = fit_cox(sample)
    hazard = breslow(sample, fit.beta_hat, fit=fit, warn=False)
    joint = joint_inclusion(design, dataset)
    b_infl = influence_beta(regime, fit, sample, extras)
    b_var = _variance_for(regime, b_infl, joint, sample, extras)

    _write_beta_table(args.out, dataset, fit, b_var)
    _write_hazard_table(args.out, hazard)
    if profiles:
        _write_risk_table(args.out, regime, fit, sample, hazard, joint,
                          extras, tau1, tau2, profiles, b_infl)
    summary = {
        "command": "fit", "regime": args.regime,
        "variance_method": variance_method,
        "n": dataset.n, "n_strata": dataset.n_strata,
        "converged": fit.converged, "iterations": fit.iterations,
        "score_norm": fit.score_norm,
        "beta": [float(b) for b in fit.beta_hat],
        "dropped_event_times": hazard.n_dropped_times,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return EXIT_OK


def _imputation_specs(dataset, args):
    predictors = tuple(args.impute_with.split(",")) if args.impute_with \
        else tuple(dataset.proxy_names) + ("stratum",)
    specs = []
    for name in dataset.covariate_names[dataset.n_phase1_cov:]:
        kind = "weighted_least_squares"
        if name in (args.impute_categorical or "").split(","):
            kind = "weighted_multinomial_logistic"
        specs.append(ImputationSpec(name, predictors, kind))
    return specs


def _variance_for(regime, infl, joint, sample, extras):
    if regime in (Regime.DESIGN, Regime.FULL_COHORT):
        return variance_design(infl, joint, sample)
    if regime is Regime.CALIBRATED:
        return variance_calibrated(infl, joint, sample)
    return variance_three_phase(infl, joint, extras.p3, sample)


def _write_beta_table(out, dataset, fit, b_var):
    path = os.path.join(out, "beta.tsv")
    with open(path, "w") as fh:
        fh.write("covariate\testimate\tse\tci_lower\tci_upper"
                 "\tse_robust\tci_lower_robust\tci_upper_robust\n")
        for k, name in enumerate(dataset.covariate_names):
            est = float(fit.beta_hat[k])
            ci = confidence_interval(est, float(b_var.v_decomposed[k, k]))
            ci_r = confidence_interval(est, float(b_var.v_robust[k, k]))
            fh.write("\t".join([name, _fmt(est), _fmt(ci.se), _fmt(ci.lower),
                                _fmt(ci.upper), _fmt(ci_r.se), _fmt(ci_r.lower),
                                _fmt(ci_r.upper)]) + "\n")


def _write_hazard_table(out, hazard):
    with open(os.path.join(out, "baseline_hazard.tsv"), "w") as fh:
        fh.write("time\tincrement\tcumulative\tevents\n")
        cum = 0.0
        for t, inc, d in zip(hazard.event_times, hazard.increments,
                             hazard.numerator_counts):
            cum += inc
            fh.write("\t".join([_fmt(t), _fmt(inc), _fmt(cum), str(int(d))])
                     + "\n")


def _write_risk_table(out, regime, fit, sample, hazard, joint, extras,
                      tau1, tau2, profiles, b_infl):
    h_infl = influence_hazard(regime, fit, sample, hazard, b_infl, extras,
                              tau1=tau1, tau2=tau2)
    with open(os.path.join(out, "pure_risk.tsv"), "w") as fh:
        fh.write("tau1\ttau2\tprofile\testimate\tse\tci_lower\tci_upper"
                 "\tse_robust\tci_lower_robust\tci_upper_robust\n")
        for x in profiles:
            pr = pure_risk(fit.beta_hat, hazard, tau1, tau2, x)
            p_infl = influence_pure_risk(regime, fit, hazard, tau1, tau2, x,
                                         b_infl, h_infl)
            rep = _variance_for(regime, p_infl, joint, sample, extras)
            ci = confidence_interval(pr.value, rep.scalar("decomposed"),
                                     transform="log")
            ci_r = confidence_interval(pr.value, rep.scalar("robust"),
                                       transform="log")
            fh.write("\t".join(
                [_fmt(tau1), _fmt(tau2), ",".join(_fmt(v) for v in x),
                 _fmt(pr.value), _fmt(ci.se), _fmt(ci.lower), _fmt(ci.upper),
                 _fmt(ci_r.se), _fmt(ci_r.lower), _fmt(ci_r.upper)]) + "\n")


def cmd_calibrate(args) -> int:
    schema = _parse_schema(args.schema)
    if args.proxies:
        schema.proxies = args.proxies.split(",")
    dataset = load_cohort(args.input, schema)
    if not args.risk_interval:
        raise ConfigError("calibration requires --risk-interval")
    tau1, tau2 = (float(v) for v in args.risk_interval.split(","))
    design = _phase2_design(dataset, args)
    specs = _imputation_specs(dataset, args)
    stage1, stage2, inter = build_auxiliaries(dataset, design, specs, tau1, tau2)
    calib = rake(WeightedSample(dataset, design.sampled, design.weight), stage2)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "calibrated_weights.tsv"), "w") as fh:
        fh.write("id\tsampled\tdesign_weight\tcalibrated_weight\n")
        for i in range(dataset.n):
            fh.write("\t".join([dataset.ids[i], str(int(design.sampled[i])),
                                _fmt(design.weight[i]),
                                _fmt(calib.calibrated_weight[i])]) + "\n")
    with open(os.path.join(args.out, "auxiliaries.tsv"), "w") as fh:
        fh.write("id\t" + "\t".join(stage2.column_names) + "\n")
        for i in range(dataset.n):
            fh.write(dataset.ids[i] + "\t"
                     + "\t".join(_fmt(v) for v in stage2.values[i]) + "\n")
    with open(os.path.join(args.out, "eta.json"), "w") as fh:
        json.dump({"eta": [float(e) for e in calib.eta_hat],
                   "columns": stage2.column_names,
                   "iterations": calib.iterations,
                   "max_constraint_residual":
                       float(np.max(np.abs(calib.constraint_residual)))},
                  fh, indent=2)
    return EXIT_OK


def cmd_simulate(args) -> int:
    regimes = tuple(args.regimes.split(",")) if args.regimes else ("Cohort", "SCC")
    unknown = set(regimes) - set(ALL_REGIMES)
    if unknown:
        raise ConfigError(f"unknown regime(s) {sorted(unknown)}; "
                          f"valid: {', '.join(ALL_REGIMES)}")
    replicates = 5000 if args.long else args.replicates
    phase3 = None
    if args.phase3_probs:
        vals = [float(v) for v in args.phase3_probs.split(",")]
        if len(vals) != 2:
            raise ConfigError("--phase3-probs needs `case,non-case`")
        phase3 = (vals[0], vals[1])
    try:
        cfg = ScenarioConfig(n=args.n, p_event=args.p_event, K=args.K,
                             seed=args.seed, replicates=replicates,
                             regimes=regimes, phase3_probs=phase3)
    except ValueError as exc:
        raise ConfigError(str(exc))
    summary = run_scenario(cfg, n_jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    cols = ["regime", "parameter", "mean_estimate", "empirical_variance",
            "mean_vhat", "mean_vrobust", "coverage_vhat", "coverage_vrobust",
            "variance_ratio_vs_cohort", "n_used"]
    with open(os.path.join(args.out, "scenario_summary.tsv"), "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in summary.table_rows():
            fh.write("\t".join(
                _fmt(row[c]) if isinstance(row.get(c), float)
                else str(row.get(c, "")) for c in cols) + "\n")
    dump = {
        "config": {"n": cfg.n, "p_event": cfg.p_event, "K": cfg.K,
                   "seed": cfg.seed, "replicates": cfg.replicates,
                   "regimes": list(cfg.regimes),
                   "phase3_probs": list(phase3) if phase3 else None},
        "failures": summary.failures,
        "replicates_used": summary.replicates_used,
        "cells": {f"{r}|{p}": m for (r, p), m in summary.cells.items()},
    }
    with open(os.path.join(args.out, "scenario_summary.json"), "w") as fh:
        json.dump(dump, fh, indent=2, sort_keys=True)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="casecohort",
        description="Cox-model inference from multi-phase case-cohort samples")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a dataset under one regime")
    fit.add_argument("--input", required=True)
    fit.add_argument("--schema", required=True,
                     help="JSON file or inline JSON column map")
    fit.add_argument("--regime", default="design", help=f"one of {FIT_REGIMES}")
    fit.add_argument("--risk-interval", help="tau1,tau2")
    fit.add_argument("--risk-profile", action="append",
                     help="comma-separated covariate profile (repeatable)")
    fit.add_argument("--calibrate", action="store_true")
    fit.add_argument("--proxies", help="comma-separated proxy columns")
    fit.add_argument("--impute-with", help="comma-separated predictors")
    fit.add_argument("--impute-categorical",
                     help="phase-two covariates imputed multinomially")
    fit.add_argument("--phase3-col")
    fit.add_argument("--phase3-known-probs", action="store_true")
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit)

    cal = sub.add_parser("calibrate", help="emit calibrated weights and auxiliaries")
    for flag in ("--input", "--schema", "--out"):
        cal.add_argument(flag, required=True)
    cal.add_argument("--risk-interval", required=True)
    cal.add_argument("--proxies")
    cal.add_argument("--impute-with")
    cal.add_argument("--impute-categorical")
    cal.set_defaults(func=cmd_calibrate)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo scenario")
    sim.add_argument("--n", type=int, default=5000)
    sim.add_argument("--p-event", type=float, default=0.02)
    sim.add_argument("--K", type=int, default=2)
    sim.add_argument("--seed", type=int, default=1)
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--long", action="store_true",
                     help="paper-scale 5000 replicates")
    sim.add_argument("--regimes", help="comma-separated regime list")
    sim.add_argument("--phase3-probs", help="case,non-case probabilities")
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CaseCohortError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
