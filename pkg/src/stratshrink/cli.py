"""Command-line experiment runners.

Each experiment reads a JSON config (``"schema": 1``), writes a results
CSV, a checks CSV and an SVG plot, and exits 0 only if every claim it
checked held.  Exit status 1 means a check failed; 2 means the config was
invalid or the run was refused because a claim's hypotheses do not hold
(``--override-conditions`` runs it anyway and marks the output).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction

import numpy as np

from ._svg import line_plot
from .errors import CapabilityError, DomainError, ShapeError
from .estimators import ENTROPY, SSE, EstimatorRule
from .hierarchy import HierarchySpec, build_param_tree
from .losses import PredictiveWeights, bayes_predictive_kl_check
from .priors import PriorExponents, build_a_family
from .risk import (
    BALANCED,
    HUDSON_SUITE,
    bayes_risk_beta,
    blyth_delta_bound,
    exact_delta1,
    exact_risk_basic,
    exact_risk_diff_basic,
    hudson_check,
    mc_risk_diff,
)

SCHEMA_VERSION = 1
DEFAULT_SEED = 20240601
DEFAULT_LAMBDAS = [0.1, 0.5, 1, 2, 5, 10, 20, 50]
CSV_COLUMNS = [
    "model", "rule_a", "rule_b", "loss", "m", "branching", "Lambda", "theta_desc",
    "mean", "stderr", "reps", "seed", "exact", "trunc_bound",
]
EXPERIMENTS = (
    "dominance", "minimax", "multi_dominance", "entropy_dominance",
    "hierarchy", "blyth", "predictive_check", "hudson",
)
COMMON_KEYS = {"schema", "experiment", "seed"}


class ConfigError(ValueError):
    """The experiment config is malformed."""


class Refused(RuntimeError):
    """A claim's hypotheses fail and no override was given."""


@dataclass
class Check:
    name: str
    detail: str
    passed: bool | None  # None: not evaluated (refused or not applicable)


@dataclass
class ConditionReport:
    """Hypotheses of one claim, each evaluated exactly."""

    claim: str
    items: list = field(default_factory=list)

    def add(self, name: str, passed: bool):
        self.items.append((name, bool(passed)))

    @property
    def ok(self) -> bool:
        return all(p for _, p in self.items)

    def describe(self) -> str:
        return "; ".join(f"{n}: {'ok' if p else 'FAILS'}" for n, p in self.items)


@dataclass
class Result:
    rows: list
    checks: list
    plot: tuple  # (series, title, xlabel, ylabel, logx)


def _q(v) -> Fraction:
    """Exact rational value of a config number."""
    return Fraction(str(v))


# --- hypothesis checks ------------------------------------------------------------------


def multi_shrink_conditions(group_sizes) -> ConditionReport:
    """Shrinkage-over-flat dominance in the multi-set model."""
    n = [int(x) for x in group_sizes]
    m = len(n)
    rep = ConditionReport("multi-set shrinkage dominance")
    rep.add("m >= 2", m >= 2)
    rep.add("min n_i >= 4", min(n) >= 4)
    M = Fraction(m)
    for i, ni in enumerate(n, 1):
        lhs = (M - 1) ** 2 / (2 * M) + (M - 1) / M**2 + Fraction(2 * ni - 3) / M
        rhs = Fraction((ni - 1) * (ni - 3), 2)
        rep.add(f"group {i}: {lhs} <= {rhs}", lhs <= rhs)
    return rep


def entropy_conditions(group_sizes, alpha, a) -> ConditionReport:
    """Stick-breaking over Jeffreys under entropy loss, no total count."""
    n = [int(x) for x in group_sizes]
    al = _q(alpha)
    aq = [_q(x) for x in a]
    rep = ConditionReport("entropy dominance without Z")
    if len(aq) != len(n):
        raise ConfigError("need one a_i per group")
    for i, (ni, ai) in enumerate(zip(n, aq), 1):
        rep.add(f"n_{i}/2 >= a_{i} >= 1", Fraction(ni, 2) >= ai >= 1)
    rep.add("a. >= alpha >= 1", sum(aq) >= al >= 1)
    rep.add("alpha < n./2", al < Fraction(sum(n), 2))
    return rep


def entropy_total_conditions(group_sizes, alpha, a) -> ConditionReport:
    """Stick-breaking over Jeffreys under entropy loss, with the total count."""
    n = [int(x) for x in group_sizes]
    m = len(n)
    al = _q(alpha)
    aq = [_q(x) for x in a]
    if len(aq) != m:
        raise ConfigError("need one a_i per group")
    half = Fraction(sum(n), 2)
    adot = sum(aq)
    rep = ConditionReport("entropy dominance with Z")
    rep.add("equal group sizes > 2", len(set(n)) == 1 and n[0] > 2)
    rep.add("1 < alpha < n./2", 1 < al < half)
    rep.add(
        "(m+1)/m <= a_1 = ... = a_m < n_1/2",
        len(set(aq)) == 1 and Fraction(m + 1, m) <= aq[0] < Fraction(n[0], 2),
    )
    lhs1 = Fraction(2, 3) * (half - al) * (al - 1)
    rhs1 = Fraction(3, 2) * (m - 1) * (half - adot)
    rep.add(f"KL_A1: {lhs1} >= {rhs1}", lhs1 >= rhs1)
    lhs2 = (half - al) * (half - 1) / 3
    rhs2 = Fraction(m - 1) * (half - adot) / 2
    rep.add(f"KL_A2: {lhs2} >= {rhs2}", lhs2 >= rhs2)
    return rep


def finer_design_conditions(branching) -> ConditionReport:
    rep = ConditionReport("finer designs dominate")
    rep.add("n_D >= 2", int(branching[-1]) >= 2)
    return rep


def prior_chain_conditions(branching, top: int) -> ConditionReport:
    """Hypotheses for moving the prior down the exponent family at fixed design."""
    n = [int(x) for x in branching]
    D = len(n)
    rep = ConditionReport(f"prior chain, D0={top}")
    if not 1 <= top <= D:
        raise ConfigError(f"D0 must lie in 1..{D}")
    rep.add("n_d >= 2 for d <= D0", all(x >= 2 for x in n[:top]))
    a = Fraction(math.prod(n[top:]), 2)
    rep.add(f"a_D0 = {a} >= 2", a >= 2)
    for dp in range(2, top + 1):
        lhs = Fraction(2 + D - top, top - 1) * (a - 1) / a
        nm1 = n[dp - 2]
        den = nm1 * a - 2
        ok = den > 0 and lhs >= n[dp - 1] * nm1 * a / den
        rep.add(f"D'={dp} inequality", ok)
    return rep


# --- helpers ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _row(model, rule_a, rule_b, loss, m, branching, lam, theta, mean=None, stderr=None,
         reps=None, seed=None, exact=None, trunc=None) -> dict:
    vals = [model, rule_a, rule_b, loss, m, "x".join(map(str, branching)), lam, theta,
            mean, stderr, reps, seed, exact, trunc]
    return {k: _fmt(v) for k, v in zip(CSV_COLUMNS, vals)}


def _parse(cfg: dict, defaults: dict) -> dict:
    unknown = set(cfg) - set(defaults) - COMMON_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update({k: v for k, v in cfg.items() if k not in COMMON_KEYS})
    return out


def _grid(values, name) -> list:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{name} must be a nonempty list")
    return values


def _reps(v, minimum=1000) -> int:
    if int(v) != v or v < minimum:
        raise ConfigError(f"reps must be an integer >= {minimum}")
    return int(v)


def _theta(m: int, kind: str) -> np.ndarray:
    if kind == "uniform":
        return np.full(m, 1.0 / m)
    if kind == "skewed":
        w = np.arange(1, m + 1, dtype=float)
        return w / w.sum()
    raise ConfigError(f"unknown theta variant {kind!r}")


def _leaf_rates(entry, n_leaves):
    if isinstance(entry, (int, float)):
        return [float(entry)] * n_leaves, f"lambda={entry:g}"
    if isinstance(entry, list) and len(entry) == n_leaves:
        return [float(x) for x in entry], "rates=" + "/".join(f"{float(x):g}" for x in entry)
    raise ConfigError(f"leaf rate entry must be a number or a list of {n_leaves}")


def _run_tasks(tasks, workers: int):
    """Evaluate ``[(key, fn, args)]``; results keep task order whatever ``workers`` is."""
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(fn, *args) for _, fn, args in tasks]
            return [(k, f.result()) for (k, _, _), f in zip(tasks, futs)]
    return [(k, fn(*args)) for k, fn, args in tasks]


def _ci_check(name, est, expect_negative=True) -> Check:
    lo, hi = est.ci95()
    wrong = lo > 0 if expect_negative else hi < 0
    sig = hi < 0 if expect_negative else lo > 0
    return Check(
        name,
        f"mean={est.mean:.6g} 95%CI=[{lo:.6g},{hi:.6g}] "
        f"{'significant' if sig else 'not significant'}",
        not wrong,
    )


def _series_add(series, name, x, y, lo=None, hi=None):
    series.setdefault(name, []).append((float(x), float(y), lo, hi))


# --- experiments -----------------------------------------------------------------------

DOMINANCE_PAIRS = (
    ("delta1", "BasicML", "BasicFlatGB", +1),
    ("delta2", "BasicShrinkGB", "BasicFlatGB", -1),
    ("delta3", "BasicShrinkGB", "XOnlyCZ", -1),
)


def run_dominance(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"m": [2, 3, 5], "Lambda": DEFAULT_LAMBDAS,
                     "theta": ["uniform", "skewed"], "reps": 100000, "tol": 1e-10})
    ms, lams, thetas = _grid(p["m"], "m"), _grid(p["Lambda"], "Lambda"), _grid(p["theta"], "theta")
    reps = _reps(p["reps"]) if p["reps"] else 0
    rows, checks, tasks, series = [], [], [], {}
    for m in ms:
        m = int(m)
        if m < 2:
            print(f"warning: m={m}: the dominance results need m >= 2; "
                  "the flat and shrinkage rules coincide here", file=sys.stderr)
            for lam in lams:
                for tag, a, b, _ in DOMINANCE_PAIRS[:2]:
                    rows.append(_row("basic", a, b, SSE, m, [m], lam, "any", exact=0.0, trunc=0.0))
            checks.append(Check(f"m={m}", "dominance results do not apply (m < 2)", None))
            continue
        for lam in lams:
            ex = {
                "delta1": exact_delta1(m, lam, p["tol"]),
                "delta2": exact_risk_diff_basic("delta2", m, lam, p["tol"]),
                "delta3": exact_risk_diff_basic("delta3", m, lam, p["tol"]),
            }
            for tag, a, b, sign in DOMINANCE_PAIRS:
                v = ex[tag]
                ok = v.value * sign > v.truncation_bound
                checks.append(Check(f"{tag} sign m={m} Lambda={lam:g}",
                                    f"exact={v.value:.10g} bound={v.truncation_bound:.2e}", ok))
                _series_add(series, f"{tag} m={m}", lam, v.value)
                for th in thetas:
                    if reps:
                        tree = build_param_tree(HierarchySpec((m,)), lam * _theta(m, th))
                        tasks.append(((m, lam, th, tag, v), mc_risk_diff,
                                      (tree, EstimatorRule(a), EstimatorRule(b), SSE, reps, seed)))
                    else:
                        rows.append(_row("basic", a, b, SSE, m, [m], lam, th,
                                         exact=v.value, trunc=v.truncation_bound))
    for (m, lam, th, tag, v), est in _run_tasks(tasks, workers):
        _, a, b, sign = next(t for t in DOMINANCE_PAIRS if t[0] == tag)
        rows.append(_row("basic", a, b, SSE, m, [m], lam, th, est.mean, est.stderr,
                         est.reps, est.seed, v.value, v.truncation_bound))
        checks.append(_ci_check(f"{tag} MC m={m} Lambda={lam:g} theta={th}", est,
                                expect_negative=sign < 0))
    return Result(rows, checks, (series, "Exact risk differences", "Lambda", "difference", True))


MINIMAX_RULES = ("BasicFlatGB", "BasicShrinkGB", "BasicML", "XOnlyCZ", "XOnlyML")


def run_minimax(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"m": [1, 2, 3], "Lambda": DEFAULT_LAMBDAS, "large_Lambda": 1000.0,
                     "betas": [1.0, 0.1, 0.01], "tol": 1e-10})
    ms, lams = _grid(p["m"], "m"), _grid(p["Lambda"], "Lambda")
    big = float(p["large_Lambda"])
    rows, checks, series = [], [], {}
    for m in ms:
        m = int(m)
        bench = m - 0.5
        risks = {}
        for tag in MINIMAX_RULES:
            for lam in list(lams) + [big]:
                v = exact_risk_basic(EstimatorRule(tag), m, lam, p["tol"])
                risks[(tag, lam)] = v.value
                rows.append(_row("basic", tag, "", SSE, m, [m], lam, "any",
                                 exact=v.value, trunc=v.truncation_bound))
                if lam != big:
                    _series_add(series, f"{tag} m={m}", lam, v.value)
        flat = [risks[("BasicFlatGB", lam)] for lam in lams]
        if m >= 2:
            checks.append(Check(f"flat risk < m-1/2 on grid, m={m}",
                                f"max={max(flat):.10g} vs {bench}", max(flat) < bench))
            fb = risks[("BasicFlatGB", big)]
            checks.append(Check(f"flat risk near m-1/2 at Lambda={big:g}, m={m}",
                                f"value={fb:.10g}", bench - 0.01 < fb < bench))
            ml = max(risks[("BasicML", lam)] for lam in list(lams) + [big])
            checks.append(Check(f"ML exceeds m-1/2 somewhere, m={m}", f"max={ml:.10g}", ml > bench))
            cz = risks[("XOnlyCZ", big)]
            checks.append(Check(f"CZ exceeds m-1/2 at Lambda={big:g}, m={m}",
                                f"value={cz:.10g}", cz > bench))
        else:
            # the excess over 1/2 is (3L - 1)/4 e^-L, below double precision for large L
            above = [
                risks[("BasicFlatGB", lam)] > 0.5
                or ((3 * lam - 1) / 4 * math.exp(-lam) < 1e-12
                    and risks[("BasicFlatGB", lam)] >= 0.5 - 1e-12)
                for lam in lams if lam > 1 / 3
            ]
            checks.append(Check("m=1 flat risk > 1/2 for Lambda > 1/3", f"{sum(above)}/{len(above)}",
                                all(above)))
            v1 = exact_risk_basic(EstimatorRule("BasicFlatGB"), 1, 1.0, p["tol"]).value
            target = 0.5 + 0.5 * math.exp(-1)
            checks.append(Check("m=1 flat risk at Lambda=1", f"{v1:.12g} vs {target:.12g}",
                                abs(v1 - target) < 1e-9))
        xo = [risks[("XOnlyML", lam)] for lam in lams]
        checks.append(Check(f"X-only ML risk constant m, m={m}", "", all(x == m for x in xo)))
        bayes = []
        for beta in p["betas"]:
            v = bayes_risk_beta(float(beta), m, p["tol"])
            bayes.append((float(beta), v.value))
            rows.append(_row("basic", f"BetaBayes({float(beta):g})", "", SSE, m, [m], "",
                             "bayes_risk", exact=v.value, trunc=v.truncation_bound))
        ordered = [v for _, v in sorted(bayes, reverse=True)]
        if m < 2:
            checks.append(Check("Bayes risk trend, m=1", "claimed for m >= 2 only", None))
            continue
        target = bench
        checks.append(Check(f"Bayes risk increases as beta shrinks, m={m}",
                            ", ".join(f"{b:g}:{v:.6g}" for b, v in bayes),
                            all(x < y for x, y in zip(ordered, ordered[1:]))))
        checks.append(Check(f"Bayes risk at smallest beta within 0.05 of {target}, m={m}",
                            f"{ordered[-1]:.6g}", abs(ordered[-1] - target) < 0.05))
    return Result(rows, checks, (series, "Exact risk curves", "Lambda", "risk", True))


def _group_spec(branching) -> HierarchySpec:
    if not isinstance(branching, list) or len(branching) != 2:
        raise ConfigError("branching must be [m, n] for the multi-set model")
    return HierarchySpec(tuple(int(x) for x in branching))


def _refuse_or_mark(report: ConditionReport, override: bool, checks: list) -> None:
    checks.append(Check(f"hypotheses: {report.claim}", report.describe(), report.ok or None))
    if not report.ok:
        if not override:
            raise Refused(f"hypotheses of '{report.claim}' fail: {report.describe()}")
        checks.append(Check("OVERRIDE", "hypotheses failed; run forced by --override-conditions", None))


def _paired_runs(spec, grid, pairs, loss, reps, seed, workers, model):
    rows, checks, tasks, series = [], [], [], {}
    for entry in grid:
        rates, desc = _leaf_rates(entry, spec.n_leaves)
        tree = build_param_tree(spec, rates)
        for name, ra, rb in pairs:
            tasks.append(((desc, tree.total, name, ra, rb), mc_risk_diff,
                          (tree, ra, rb, loss, reps, seed)))
    for (desc, total, name, ra, rb), est in _run_tasks(tasks, workers):
        lo, hi = est.ci95()
        rows.append(_row(model, ra.label, rb.label, loss, spec.branching[0], spec.branching,
                         total, desc, est.mean, est.stderr, est.reps, est.seed))
        checks.append(_ci_check(f"{name} {desc}", est))
        _series_add(series, name, total, est.mean, lo, hi)
    return rows, checks, series


def run_multi_dominance(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"branching": [2, 5], "leaf_rates": [0.5, 1, 3], "reps": 100000})
    spec = _group_spec(p["branching"])
    reps = _reps(p["reps"])
    checks = []
    rep = ConditionReport("ML dominated by flat")
    rep.add("max n_i >= 2", spec.branching[1] >= 2)
    _refuse_or_mark(rep, override, checks)
    _refuse_or_mark(multi_shrink_conditions([spec.branching[1]] * spec.branching[0]), override, checks)
    pairs = [
        ("flat-ML", EstimatorRule("MultiFlatGB"), EstimatorRule("MultiML")),
        ("shrink-flat", EstimatorRule("MultiShrinkGB"), EstimatorRule("MultiFlatGB")),
    ]
    rows, c, series = _paired_runs(spec, _grid(p["leaf_rates"], "leaf_rates"), pairs, SSE,
                                   reps, seed, workers, "multi")
    return Result(rows, checks + c, (series, "Paired risk differences", "Lambda", "difference", True))


def run_entropy_dominance(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"branching": [2, 4], "with_Z": False, "alpha": 2.0, "a": [1.5, 1.5],
                     "leaf_rates": [0.5, 1, 3], "reps": 100000})
    spec = _group_spec(p["branching"])
    reps = _reps(p["reps"])
    sizes = [spec.branching[1]] * spec.branching[0]
    with_z = bool(p["with_Z"])
    checks = []
    cond = entropy_total_conditions if with_z else entropy_conditions
    _refuse_or_mark(cond(sizes, p["alpha"], p["a"]), override, checks)
    stick = EstimatorRule("EntropyStick", alpha=float(p["alpha"]), a=tuple(p["a"]), with_z=with_z)
    jeff = EstimatorRule("EntropyJeffreys", with_z=with_z)
    rows, c, series = _paired_runs(spec, _grid(p["leaf_rates"], "leaf_rates"),
                                   [("stick-Jeffreys", stick, jeff)], ENTROPY, reps, seed,
                                   workers, "multi")
    return Result(rows, checks + c, (series, "Entropy risk differences", "Lambda", "difference", True))


def run_hierarchy(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"branching": [2, 3], "D0": 2, "prior_chain_D0": None,
                     "leaf_rates": [0.5, 1, 3], "reps": 100000})
    if not isinstance(p["branching"], list) or not p["branching"]:
        raise ConfigError("branching must be a nonempty list")
    spec = HierarchySpec(tuple(int(x) for x in p["branching"]))
    D = spec.depth
    top = int(p["D0"])
    reps = _reps(p["reps"])
    chain_tops = p["prior_chain_D0"] if p["prior_chain_D0"] is not None else [top]
    checks, rows, series = [], [], {}
    rep_design = finer_design_conditions(spec.branching)
    checks.append(Check(f"hypotheses: {rep_design.claim}", rep_design.describe(), rep_design.ok or None))
    if not rep_design.ok and not override:
        raise Refused(f"hypotheses of '{rep_design.claim}' fail: {rep_design.describe()}")
    prior = build_a_family(spec, top, top)
    pairs = [
        (f"design X({d - 1}) vs X({d})",
         EstimatorRule("GeneralGB", prior=prior, start_depth=d - 1),
         EstimatorRule("GeneralGB", prior=prior, start_depth=d))
        for d in range(D, 0, -1)
    ]
    for D0 in chain_tops:
        rep_chain = prior_chain_conditions(spec.branching, int(D0))
        if not rep_chain.ok and not override:
            checks.append(Check(f"hypotheses: {rep_chain.claim}", "refused: " + rep_chain.describe(), None))
            continue
        checks.append(Check(f"hypotheses: {rep_chain.claim}",
                            ("OVERRIDE " if not rep_chain.ok else "") + rep_chain.describe(),
                            rep_chain.ok or None))
        for d in range(int(D0), 0, -1):
            pairs.append((
                f"prior a({D0})({d - 1}) vs a({D0})({d})",
                EstimatorRule("GeneralGB", prior=build_a_family(spec, int(D0), d - 1), start_depth=0),
                EstimatorRule("GeneralGB", prior=build_a_family(spec, int(D0), d), start_depth=0),
            ))
    r, c, series = _paired_runs(spec, _grid(p["leaf_rates"], "leaf_rates"), pairs, BALANCED,
                                reps, seed, workers, "general")
    return Result(rows + r, checks + c, (series, "Balanced entropy risk differences", "Lambda",
                                         "difference", True))


def run_blyth(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"k": [1, 10, 100], "m": 2, "tol": 1e-3, "w_max": None, "form": "m_free"})
    ks = [int(k) for k in _grid(p["k"], "k")]
    m = int(p["m"])
    tasks = [((k,), blyth_delta_bound, (k, m, p["w_max"], float(p["tol"]), p["form"])) for k in ks]
    rows, series, vals = [], {}, []
    for (k,), v in _run_tasks(tasks, workers):
        vals.append(v.value)
        rows.append(_row("basic", f"BlythK({k})", "", SSE, m, [m], "", f"k={k}",
                         exact=v.value, trunc=v.truncation_bound))
        _series_add(series, "bound", k, v.value)
    checks = [
        Check("bound strictly decreasing in k", ", ".join(f"{k}:{v:.6g}" for k, v in zip(ks, vals)),
              all(x > y for x, y in zip(vals, vals[1:]))),
        Check("last bound below half the first", f"{vals[-1]:.6g} vs {vals[0] / 2:.6g}",
              vals[-1] < vals[0] / 2),
    ]
    return Result(rows, checks, (series, "Blyth bound", "k", "bound", True))


def run_hudson(cfg, seed, override, workers) -> Result:
    names = [n for n, _, _ in HUDSON_SUITE]
    p = _parse(cfg, {"lambdas": [0.3, 1.0, 1.7, 3.0, 7.5, 15.0], "functions": names, "tol": 1e-10})
    suite = {n: (f, q) for n, f, q in HUDSON_SUITE}
    rows, worst, series = [], 0.0, {}
    for name in _grid(p["functions"], "functions"):
        if name not in suite:
            raise ConfigError(f"unknown Hudson test function {name!r}")
        f, q = suite[name]
        for lam in _grid(p["lambdas"], "lambdas"):
            for r in hudson_check(f, float(lam), tol=1e-13, degree=q):
                worst = max(worst, r.diff)
                rows.append(_row("hudson", name, r.identity, "", "", [], lam, "",
                                 mean=r.lhs, exact=r.rhs, trunc=r.truncation_bound))
                _series_add(series, r.identity, lam, max(r.diff, 1e-18))
    checks = [Check("max |lhs - rhs|", f"{worst:.3e} < {p['tol']:g}", worst < float(p["tol"]))]
    return Result(rows, checks, (series, "Hudson identity errors", "lambda", "|lhs - rhs|", True))


def run_predictive_check(cfg, seed, override, workers) -> Result:
    p = _parse(cfg, {"lambdas": [0.5, 1.3, 4.0], "a": 1.0, "r": [1.0, 1.0], "s": [1.0, 1.0],
                     "paths": ["linear", "power"], "tau_grid_size": 48, "tol": 1e-6})
    spec = HierarchySpec((1,))
    if len(p["r"]) != 2 or len(p["s"]) != 2:
        raise ConfigError("r and s need one entry per node (root, leaf)")
    prior = PriorExponents(float(p["a"]), (1.0,))
    rows, checks, series = [], [], {}
    for path in _grid(p["paths"], "paths"):
        for lam in _grid(p["lambdas"], "lambdas"):
            tree = build_param_tree(spec, [float(lam)])
            w = PredictiveWeights(tuple(np.array([x]) for x in p["r"]),
                                  tuple(np.array([x]) for x in p["s"]), path)
            direct, via_path = bayes_predictive_kl_check(prior, tree, w, int(p["tau_grid_size"]))
            rows.append(_row("predictive", path, "", "KL", 1, [1], lam, "",
                             mean=direct, exact=via_path))
            checks.append(Check(f"path={path} lambda={lam:g}", f"|diff|={abs(direct - via_path):.3e}",
                                abs(direct - via_path) < float(p["tol"])))
            _series_add(series, path, lam, direct)
    return Result(rows, checks, (series, "Bayesian predictive KL", "lambda", "KL", True))


RUNNERS = {
    "dominance": run_dominance,
    "minimax": run_minimax,
    "multi_dominance": run_multi_dominance,
    "entropy_dominance": run_entropy_dominance,
    "hierarchy": run_hierarchy,
    "blyth": run_blyth,
    "predictive_check": run_predictive_check,
    "hudson": run_hudson,
}


# --- output -----------------------------------------------------------------------------


def _sort_key(row):
    def num(s):
        try:
            return (0, float(s))
        except ValueError:
            return (1, 0.0)

    return (row["model"], row["rule_a"], row["rule_b"], row["loss"], num(row["m"]),
            row["branching"], num(row["Lambda"]), row["theta_desc"])


def _stamp() -> str:
    return f"# generated {datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')}\n"


def render_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in sorted(rows, key=_sort_key):
        w.writerow(r)
    return buf.getvalue()


def render_checks(checks) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "detail", "passed"])
    for c in checks:
        w.writerow([c.name, c.detail, "" if c.passed is None else str(c.passed)])
    return buf.getvalue()


def load_config(path: str | None, experiment: str) -> dict:
    if path is None:
        return {"schema": SCHEMA_VERSION}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"config needs \"schema\": {SCHEMA_VERSION}")
    if cfg.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {cfg['experiment']!r}, not {experiment!r}")
    return cfg


def run_experiment(experiment: str, cfg: dict, seed: int | None = None,
                   override: bool = False, workers: int = 1) -> Result:
    """Run one experiment in-process and return its rows and checks."""
    if experiment not in RUNNERS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    if seed is None:
        seed = int(cfg.get("seed", DEFAULT_SEED))
    return RUNNERS[experiment](cfg, seed, override, workers)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stratshrink", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--override-conditions", action="store_true",
                    help="run even when a claim's hypotheses fail")
    ap.add_argument("--workers", type=int, default=1, help="worker processes for grid points")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment)
        res = run_experiment(args.experiment, cfg, args.seed, args.override_conditions,
                             max(1, args.workers))
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Refused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except (DomainError, ShapeError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, args.experiment)
    with open(base + ".csv", "w") as fh:
        fh.write(_stamp() + render_rows(res.rows))
    with open(base + "_checks.csv", "w") as fh:
        fh.write(_stamp() + render_checks(res.checks))
    series, title, xl, yl, logx = res.plot
    with open(base + ".svg", "w") as fh:
        fh.write(line_plot(series, title, xl, yl, logx))
    failed = [c for c in res.checks if c.passed is False]
    for c in res.checks:
        status = "skip" if c.passed is None else ("PASS" if c.passed else "FAIL")
        print(f"[{status}] {c.name}: {c.detail}")
    print(f"{len(res.rows)} rows written to {base}.csv; {len(failed)} failed checks")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
