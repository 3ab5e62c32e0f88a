"""Risk evaluation: exact truncated Poisson series and paired Monte Carlo.

The exact oracles for the basic model use the fact that every risk there
depends on the rates only through the total ``Lambda``: after the ``Y``
moments are substituted analytically, each risk is a single expectation
over ``X. ~ Po(Lambda)``.  Tails of those series are certified with
Chernoff bounds, so every :class:`ExactValue` carries a rigorous bound on
what was dropped.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats
from scipy.special import gammaln

from .errors import CapabilityError, DomainError, NumericalError, TruncationError
from .estimators import (
    ENTROPY,
    SSE,
    EstimatorRule,
    design_depth,
    estimate,
    gamma_expectation,
    h_k,
    h_k_prime,
)
from .hierarchy import ObservationSet, ParamTree, iter_blocks, sample_block
from .losses import balanced_entropy_loss, entropy_loss, sse_loss

BALANCED = "Balanced"
LOSSES = (SSE, ENTROPY, BALANCED)


@dataclass(frozen=True)
class RiskEstimate:
    """Monte Carlo risk (or paired risk difference) with its standard error."""

    mean: float
    stderr: float
    reps: int
    seed: int

    def ci95(self) -> tuple[float, float]:
        h = 1.959963984540054 * self.stderr
        return self.mean - h, self.mean + h


@dataclass(frozen=True)
class ExactValue:
    """A series value and a rigorous bound on the discarded tail."""

    value: float
    truncation_bound: float


# --- truncated Poisson series ----------------------------------------------------


def _log_chernoff(lam: float, k: np.ndarray) -> np.ndarray:
    """``log`` of ``e^-lam (e lam / k)^k``, bounding ``P(X >= k)`` (k > lam) or ``P(X <= k)`` (k < lam)."""
    k = np.asarray(k, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -lam + k * (1.0 + np.log(lam) - np.log(k))
    return np.where(k == 0, -lam, out)


def poisson_series(
    g: Callable[[np.ndarray], np.ndarray], lam: float, tol: float, A: float, B: float = 0.0
) -> ExactValue:
    """``E[g(X)]`` for ``X ~ Po(lam)`` given an envelope ``|g(x)| <= A + B x``.

    Both tails are cut where their Chernoff bounds fall below ``tol / 2``.
    """
    if not lam > 0:
        raise DomainError("the Poisson mean must be positive")
    half = tol / 2
    span = int(60 * math.sqrt(lam) + 200 + 10 * abs(math.log(tol)))
    # upper tail: sum_{x > hi} p(x)(A + Bx) <= (A + B lam) P(X >= hi)
    ks = np.arange(math.floor(lam) + 1, math.floor(lam) + 1 + span)
    ub = np.log(A + B * lam + 1e-300) + _log_chernoff(lam, ks)
    ok = np.nonzero(ub <= math.log(half))[0]
    if ok.size == 0:
        raise TruncationError(f"upper tail of Po({lam:g}) not certified", float(np.exp(ub[-1])))
    hi = int(ks[ok[0]])
    upper = float(np.exp(ub[ok[0]]))
    # lower tail: sum_{x <= lo} p(x)|g(x)| <= (A + B lo) P(X <= lo)
    lo, lower = -1, 0.0
    if lam > 1:
        kl = np.arange(0, math.ceil(lam) - 1)
        lb = np.log(A + B * kl + 1e-300) + _log_chernoff(lam, kl)
        good = np.nonzero(lb <= math.log(half))[0]
        if good.size:
            lo = int(kl[good[-1]])
            lower = float(np.exp(lb[good[-1]]))
    x = np.arange(lo + 1, hi + 1)
    logp = x * math.log(lam) - lam - gammaln(x + 1)
    vals = np.exp(logp) * g(x)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("series term is not finite")
    return ExactValue(math.fsum(vals), upper + lower)


def _frac(x: np.ndarray, shift: int) -> np.ndarray:
    """``x / (x + shift)`` with the value 0 at ``x = 0`` (covers ``shift = 0``)."""
    x = np.asarray(x, dtype=float)
    den = x + shift
    return np.divide(x, den, out=np.zeros_like(x), where=den != 0)


def _series_betabayes(m: int, lam: float, beta: float, tol: float) -> ExactValue:
    c = 2.0 + beta

    def g(x):
        return (
            (3 * lam + m + lam / (x + m)) / c**2
            - (2 / c - 1 / c**2) * lam * _frac(x, m - 1)
            + beta / c * lam
        )

    return poisson_series(g, lam, tol, A=6 * lam + m)


def _series_ml(m: int, lam: float, tol: float) -> ExactValue:
    def g(x):
        x = np.asarray(x, dtype=float)
        quad = 1 + 2 * lam / (x + 1) + (lam + lam**2) / (x + 1) ** 2
        return (x + m) / 4 * quad - (x + lam) * (x >= 1) + lam

    A = m / 4 + m * lam / 2 + m * (lam + lam**2) / 4 + 2 * lam
    return poisson_series(g, lam, tol, A=A, B=1.25)


def _series_cz(m: int, lam: float, tol: float) -> ExactValue:
    if m == 1:
        return ExactValue(1.0, 0.0)

    def g(x):
        return m + (m - 1) ** 2 / (x + m) - 2 * (m - 1) ** 2 / (x + m - 1)

    return poisson_series(g, lam, tol, A=m + 3 * (m - 1) ** 2)


def _series_delta2(m: int, lam: float, tol: float) -> ExactValue:
    def g(x):
        return (m - 1) * ((m - 1) / 4 / (x + m) - 0.5 + 0.5 * _frac(x, m - 1))

    return poisson_series(g, lam, tol, A=(m - 1) * (m / 4 + 1))


def _series_delta3(m: int, lam: float, tol: float) -> ExactValue:
    def g(x):
        x = np.asarray(x, dtype=float)
        last = np.where(x >= 1, x * (x - 1) / np.maximum(x + m - 2, 1), 0.0)
        return (
            0.25 * x / (x + m - 1)
            + 1.5 * x**2 / (x + m - 1)
            - 0.75 * (x + 1) ** 2 / (x + m)
            - 0.75 * last
        )

    return poisson_series(g, lam, tol, A=1.0, B=3.0)


def _check_args(m: int, lam: float, tol: float):
    if m < 1 or int(m) != m:
        raise DomainError("m must be a positive integer")
    if not lam > 0:
        raise DomainError("Lambda must be positive")
    if not 0 < tol <= 1e-8:
        raise DomainError("tol must lie in (0, 1e-8]")


def exact_risk_basic(rule: EstimatorRule, m: int, lam: float, tol: float = 1e-10) -> ExactValue:
    """Exact standardized squared-error risk of a basic-model rule.

    Parameters
    ----------
    rule : EstimatorRule
        ``BasicML``, ``BasicFlatGB``, ``BasicShrinkGB``, ``BetaBayes``,
        ``XOnlyML``, ``XOnlyCZ`` or (for ``m = 1``) ``BasicUsual``.
    m : int
        Number of cells.
    lam : float
        Total rate ``Lambda``.
    tol : float
        Bound on the discarded series tail, at most ``1e-8``.
    """
    _check_args(m, lam, tol)
    tag = rule.tag
    if tag == "XOnlyML":
        return ExactValue(float(m), 0.0)
    if tag == "BasicUsual":
        if m != 1:
            raise CapabilityError("the usual rule is defined for m = 1")
        return ExactValue(0.5, 0.0)
    if tag == "BasicFlatGB":
        return _series_betabayes(m, lam, 0.0, tol)
    if tag == "BetaBayes":
        return _series_betabayes(m, lam, rule.beta, tol)
    if tag == "BasicML":
        return _series_ml(m, lam, tol)
    if tag == "XOnlyCZ":
        return _series_cz(m, lam, tol)
    if tag == "BasicShrinkGB":
        flat = _series_betabayes(m, lam, 0.0, tol / 2)
        if m == 1:
            return flat
        d2 = _series_delta2(m, lam, tol / 2)
        return ExactValue(flat.value + d2.value, flat.truncation_bound + d2.truncation_bound)
    raise CapabilityError(f"no exact risk series for {rule.label}")


def exact_risk_diff_basic(pair: str, m: int, lam: float, tol: float = 1e-10) -> ExactValue:
    """Exact risk differences ``"delta2"`` (shrink minus flat) and ``"delta3"`` (shrink minus CZ)."""
    _check_args(m, lam, tol)
    if m < 2:
        raise CapabilityError("risk-difference series need m >= 2")
    if pair == "delta2":
        return _series_delta2(m, lam, tol)
    if pair == "delta3":
        return _series_delta3(m, lam, tol)
    raise CapabilityError(f"unknown risk difference {pair!r}")


def exact_delta1(m: int, lam: float, tol: float = 1e-10) -> ExactValue:
    """``risk(ML) - risk(flat)``, positive when the flat rule dominates ML."""
    ml = exact_risk_basic(EstimatorRule("BasicML"), m, lam, tol / 2)
    flat = exact_risk_basic(EstimatorRule("BasicFlatGB"), m, lam, tol / 2)
    return ExactValue(ml.value - flat.value, ml.truncation_bound + flat.truncation_bound)


# --- Hudson identity ------------------------------------------------------------------


@dataclass(frozen=True)
class HudsonReport:
    identity: str
    lhs: float
    rhs: float
    diff: float
    truncation_bound: float


def _growth_constant(phi, q: int, cap: int) -> float:
    x = np.arange(cap + 1)
    v = np.abs(np.asarray(phi(x), dtype=float))
    if not np.all(np.isfinite(v)):
        raise DomainError("phi must be finite on the tested support")
    return float(np.max(v / (1.0 + x) ** q))


def hudson_check(
    phi: Callable[[np.ndarray], np.ndarray], lam: float, tol: float = 1e-12, degree: int = 2
) -> tuple[HudsonReport, HudsonReport]:
    """Evaluate both sides of the two Hudson identities for ``X ~ Po(lam)``.

    ``lam E[phi(X)] = E[X phi(X - 1)]`` and ``E[phi(X)] / lam = E[phi(X + 1) / (X + 1)]``.
    The second identity needs ``phi(0) = 0``, so it is checked on ``phi``
    with its value at zero replaced by 0.

    ``phi`` is vectorised over nonnegative integers and assumed to obey
    ``|phi(x)| <= C (1 + x)^degree``; ``C`` is measured on a large support.
    Every series is cut where a Cauchy-Schwarz / Chernoff bound on its
    tail drops below ``tol``.
    """
    if not lam > 0:
        raise DomainError("lam must be positive")
    q = int(degree) + 1
    cap = int(lam + 60 * math.sqrt(lam) + 400)
    C = _growth_constant(phi, degree, 4 * cap) * max(1.0, lam, 2.0**degree)
    # E[(1 + X)^(2q)] <= (2q / e)^(2q) e^(1 + lam (e - 1))
    log_mom = 2 * q * (math.log(2 * q) - 1) + 1 + lam * (math.e - 1)
    ks = np.arange(math.floor(lam) + 1, cap)
    logb = math.log(C) + 0.5 * log_mom + 0.5 * _log_chernoff(lam, ks)
    ok = np.nonzero(logb <= math.log(tol))[0]
    if ok.size == 0:
        raise TruncationError("Hudson series cap exceeded", float(np.exp(logb[-1])))
    K = int(ks[ok[0]])
    bound = float(np.exp(logb[ok[0]]))
    x = np.arange(K + 1)
    p = np.exp(x * math.log(lam) - lam - gammaln(x + 1))
    f = np.asarray(phi(x), dtype=float)
    f_prev = np.zeros_like(f)
    f_prev[1:] = f[:-1]
    f_next = np.asarray(phi(x + 1), dtype=float)
    l1, r1 = lam * math.fsum(p * f), math.fsum(p * x * f_prev)
    f0 = f.copy()
    f0[0] = 0.0
    l2, r2 = math.fsum(p * f0) / lam, math.fsum(p * f_next / (x + 1))
    return (
        HudsonReport("multiply", l1, r1, abs(l1 - r1), 2 * bound),
        HudsonReport("reciprocal", l2, r2, abs(l2 - r2), bound * (1 + 1 / lam)),
    )


# --- Bayes risk under the product-exponential prior --------------------------------


def bayes_risk_beta(beta: float, m: int, tol: float = 1e-10) -> ExactValue:
    """Bayes risk of the ``BetaBayes(beta)`` rule under its own prior.

    The risk depends on the rates only through ``Lambda ~ Gamma(m, beta)``,
    so this is a one-dimensional quadrature of :func:`exact_risk_basic`.
    """
    if not beta > 0:
        raise DomainError("beta must be positive")
    rule = EstimatorRule("BetaBayes", beta=beta)
    bounds = []

    def f(lam):
        if lam <= 0:
            return m / (2.0 + beta) ** 2  # limit of the integrand at Lambda = 0
        ev = exact_risk_basic(rule, m, lam, tol)
        bounds.append(ev.truncation_bound)
        return ev.value

    val = gamma_expectation(f, float(m), beta)
    return ExactValue(val, max(bounds, default=0.0))


# --- Blyth diagnostic ------------------------------------------------------------------


def _blyth_term(w: int, k: int, m: int, form: str) -> float:
    hh = lambda x: h_k(x, k) * h_k_prime(x, k)  # noqa: E731
    h2 = lambda x: h_k(x, k) ** 2  # noqa: E731
    # ratio_w = {int h h' L^w e^-2L}^2 / int h^2 L^(w-1) e^-2L = w w! / 2^(w+2) * EN^2 / ED
    EN = gamma_expectation(hh, w + 1.0, 2.0)
    ED = gamma_expectation(h2, float(w), 2.0)
    if form == "m_free":
        # 2 * 2^w / w! * ratio_w
        return 0.5 * w * EN**2 / ED
    # sum_x x(x+1) / ((x+m-1)^2 x! (w-x)!) * ratio_w, a Binomial(w, 1/2) average
    x = np.arange(w + 1)
    pb = stats.binom.pmf(x, w, 0.5)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(x >= 1, x * (x + 1.0) / (x + m - 1.0) ** 2, 0.0)
    return 0.25 * w * EN**2 / ED * float(np.sum(pb * weight))


def blyth_tail(k: int, w_max: int) -> float:
    """Bound on the Blyth sum beyond ``w_max``.

    Cauchy-Schwarz bounds each ratio by ``int h'^2 L^(w+1) e^(-2L)``;
    summing ``2 * 2^w / w!`` times that over ``w > w_max`` gives
    ``2 int h'(L)^2 L P(Po(2L) > w_max) dL``.
    """
    f = lambda lam: 2.0 * h_k_prime(lam, k) ** 2 * lam * stats.poisson.sf(w_max, 2 * lam)  # noqa: E731
    mid = w_max / 2.0
    a, ea = integrate.quad(f, 0, mid, limit=400, epsabs=1e-14, epsrel=1e-10)
    b, eb = integrate.quad(f, mid, np.inf, limit=400, epsabs=1e-14, epsrel=1e-10)
    return float(a + b + ea + eb)


def blyth_delta_bound(
    k: int, m: int, w_max: int | None = None, tol: float = 1e-3, form: str = "m_free"
) -> ExactValue:
    """Upper bound on the Blyth risk gap ``Delta_k`` between the shrinkage rule and its proper-prior approximant.

    ``form="m_free"`` sums ``2 * 2^w / w! * ratio_w`` over ``w >= 1``, a bound
    that holds for every ``m``.  ``form="refined"`` keeps the ``m``-dependent
    weight from the step before the ``m``-free simplification, which is
    smaller term by term.

    The value is the partial sum over ``w <= w_max`` plus the certified
    tail; ``truncation_bound`` is the tail alone.  With ``w_max=None`` the
    cut-off is doubled from 64 until the tail is below ``tol``.
    """
    if form not in ("m_free", "refined"):
        raise ValueError(f"unknown form {form!r}")
    if int(k) != k or k < 1:
        raise DomainError("k must be a positive integer")
    if int(m) != m or m < 1:
        raise DomainError("m must be a positive integer")
    if w_max is None:
        w_max = 64
        while blyth_tail(k, w_max) >= tol:
            w_max *= 2
            if w_max > 1 << 16:
                raise TruncationError("Blyth tail did not reach tol", blyth_tail(k, w_max))
    tail = blyth_tail(k, w_max)
    if tail >= tol:
        raise TruncationError(f"Blyth tail beyond w={w_max} too large", tail)
    partial = math.fsum(_blyth_term(w, int(k), int(m), form) for w in range(1, w_max + 1))
    return ExactValue(partial + tail, tail)


# --- Monte Carlo -----------------------------------------------------------------------


def _loss_values(loss: str, est: np.ndarray, tree: ParamTree) -> np.ndarray:
    if loss == SSE:
        return sse_loss(est, tree.leaves)
    if loss == ENTROPY:
        return entropy_loss(est, tree.leaves)
    if loss == BALANCED:
        return balanced_entropy_loss(est, tree)
    raise ValueError(f"unknown loss {loss!r}")


def _rule_depth(rule) -> int:
    if isinstance(rule, EstimatorRule):
        return design_depth(rule)
    depth = getattr(rule, "start_depth", None)
    if depth is None:
        raise ValueError("callable rules need a start_depth attribute")
    return int(depth)


def _apply(rule, obs: ObservationSet) -> np.ndarray:
    if isinstance(rule, EstimatorRule):
        return estimate(rule, obs)
    return np.asarray(rule(obs.restrict(_rule_depth(rule))), dtype=float)


def _check_loss(rule, loss: str):
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if loss != SSE and isinstance(rule, EstimatorRule) and not rule.always_positive:
        raise DomainError(
            f"{rule.label} is zero with positive probability; its entropy risk is not defined"
        )


def _block_losses(rule, loss, tree, est, offset):
    if loss != SSE:
        bad = np.nonzero(~np.all(est > 0, axis=-1))[0]
        if bad.size:
            raise DomainError(
                f"{getattr(rule, 'label', 'rule')} gave a non-positive estimate at "
                f"replication {offset + int(bad[0])}"
            )
    return _loss_values(loss, est, tree)


def _block_stats(args):
    tree, rules, loss, seed, block, size, start, offset = args
    obs = sample_block(tree, start, seed, block, size)
    vals = [_block_losses(r, loss, tree, _apply(r, obs), offset) for r in rules]
    v = vals[0] if len(vals) == 1 else vals[0] - vals[1]
    mean = float(np.mean(v))
    return size, mean, float(np.sum((v - mean) ** 2))


def _merge(stats_iter) -> tuple[int, float, float]:
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in stats_iter:
        tot = n + nb
        delta = mb - mean
        mean += delta * nb / tot
        m2 += m2b + delta**2 * n * nb / tot
        n = tot
    return n, mean, m2


def _run(tree, rules, loss, reps, seed, workers) -> RiskEstimate:
    if reps < 2:
        raise DomainError("need at least two replications")
    start = min(_rule_depth(r) for r in rules)
    jobs = []
    offset = 0
    for b, size in iter_blocks(reps):
        jobs.append((tree, rules, loss, seed, b, size, start, offset))
        offset += size
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_block_stats, jobs))
    else:
        parts = [_block_stats(j) for j in jobs]
    n, mean, m2 = _merge(parts)
    sd = math.sqrt(m2 / (n - 1))
    return RiskEstimate(mean, sd / math.sqrt(n), n, int(seed))


def mc_risk(tree: ParamTree, rule, loss: str, reps: int, seed: int, workers: int = 1) -> RiskEstimate:
    """Monte Carlo risk of ``rule`` at ``tree``.

    ``rule`` is an :class:`EstimatorRule` or a callable mapping an
    :class:`ObservationSet` to leaf estimates (with a ``start_depth``
    attribute).  Replications come in fixed blocks with one random stream
    per block, so the result does not depend on ``workers``.
    """
    _check_loss(rule, loss)
    return _run(tree, (rule,), loss, reps, seed, workers)


def mc_risk_diff(
    tree: ParamTree, rule_a, rule_b, loss: str, reps: int, seed: int, workers: int = 1
) -> RiskEstimate:
    """Paired Monte Carlo estimate of ``risk(rule_a) - risk(rule_b)``.

    Both rules see the same draw.  When their designs differ the wider one
    is sampled and the other rule ignores the extra, independent counts.
    """
    _check_loss(rule_a, loss)
    _check_loss(rule_b, loss)
    return _run(tree, (rule_a, rule_b), loss, reps, seed, workers)


#: Test functions for the Hudson identities as ``(name, phi, growth degree)``.
HUDSON_SUITE = (
    ("one", lambda x: np.ones_like(x, dtype=float), 0),
    ("identity", lambda x: np.asarray(x, dtype=float), 1),
    ("square", lambda x: np.asarray(x, dtype=float) ** 2, 2),
    ("falling2", lambda x: x * (x - 1.0), 2),
    ("ratio", lambda x: x / (x + 1.0), 0),
    ("reciprocal", lambda x: 1.0 / (x + 1.0), 0),
    ("sqrt", lambda x: np.sqrt(x), 1),
    ("log1p", lambda x: np.log1p(x), 1),
    ("alternating", lambda x: np.where(np.asarray(x) % 2 == 0, 1.0, -1.0), 0),
    ("step2", lambda x: (np.asarray(x) >= 2).astype(float), 0),
)
