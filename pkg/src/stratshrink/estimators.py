"""Closed-form shrinkage estimators and a conjugate posterior engine.

Every estimator maps counts to estimated leaf rates.  All functions are
vectorised over leading batch axes: the node (or group-element) axis is
always last, so one call can evaluate a whole block of Monte Carlo
replications.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .errors import CapabilityError, DomainError, NumericalError, ShapeError
from .hierarchy import HierarchySpec, ObservationSet
from .priors import (
    PriorExponents,
    flat_chart_exponents,
    flat_lambda_exponents,
    jeffreys_exponents,
    stick_exponents,
)

BASIC_TAGS = frozenset(
    {"BasicML", "BasicFlatGB", "BasicShrinkGB", "BasicUsual", "BetaBayes", "BlythK"}
)
XONLY_TAGS = frozenset({"XOnlyML", "XOnlyCZ"})
MULTI_TAGS = frozenset({"MultiML", "MultiFlatGB", "MultiShrinkGB"})
ENTROPY_TAGS = frozenset({"EntropyStick", "EntropyJeffreys"})
ALL_TAGS = BASIC_TAGS | XONLY_TAGS | MULTI_TAGS | ENTROPY_TAGS | {"GeneralGB"}

SSE = "SSE"
ENTROPY = "Entropy"


@dataclass(frozen=True, eq=False)
class EstimatorRule:
    """A rule tag plus whatever hyperparameters that tag needs.

    ``BasicUsual`` is the ``m = 1`` rule ``(X_1 + Y) / 2``; it is the
    common value of the flat and shrinkage rules at ``m = 1`` except that
    it does not zero out when ``X_1 = 0``.
    """

    tag: str
    beta: float | None = None
    k: int | None = None
    alpha: float | None = None
    a: tuple | None = None
    with_z: bool = False
    prior: PriorExponents | None = None
    start_depth: int | None = None
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.tag not in ALL_TAGS:
            raise ValueError(f"unknown estimator tag {self.tag!r}")
        if self.tag == "BetaBayes" and not (self.beta is not None and self.beta > 0):
            raise DomainError("BetaBayes needs beta > 0")
        if self.tag == "BlythK":
            if self.k is None or int(self.k) != self.k or self.k < 1:
                raise DomainError("BlythK needs an integer k >= 1")
        if self.tag == "EntropyStick":
            if self.alpha is None or self.alpha <= 0:
                raise DomainError("EntropyStick needs alpha > 0")
            if self.a is None or any(ai <= 0 for ai in self.a):
                raise DomainError("EntropyStick needs positive a_i")
            object.__setattr__(self, "a", tuple(float(ai) for ai in self.a))
        if self.tag == "GeneralGB":
            if self.prior is None or self.start_depth is None:
                raise DomainError("GeneralGB needs a prior and a start depth")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.tag == "BetaBayes":
            return f"BetaBayes({self.beta:g})"
        if self.tag == "BlythK":
            return f"BlythK({self.k})"
        if self.tag == "EntropyStick":
            return f"EntropyStick({self.alpha:g};{','.join(f'{x:g}' for x in self.a)}" + (
                ";Z)" if self.with_z else ")"
            )
        if self.tag == "EntropyJeffreys":
            return "EntropyJeffreys(Z)" if self.with_z else "EntropyJeffreys"
        if self.tag == "GeneralGB":
            return f"GeneralGB(D'={self.start_depth})"
        return self.tag

    @property
    def always_positive(self) -> bool:
        """Whether every output coordinate is strictly positive for any counts."""
        return self.tag in ENTROPY_TAGS or self.tag == "GeneralGB"


def design_depth(rule: EstimatorRule) -> int:
    """Start depth of the observation design a rule consumes."""
    if rule.tag in BASIC_TAGS:
        return 0
    if rule.tag in XONLY_TAGS or rule.tag in MULTI_TAGS:
        return 1
    if rule.tag in ENTROPY_TAGS:
        return 0 if rule.with_z else 1
    return int(rule.start_depth)


# --- observation views --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BasicObs:
    """Basic model: ``Y`` counts the total, ``X`` has one count per cell."""

    X: np.ndarray
    Y: np.ndarray

    @classmethod
    def from_observations(cls, obs: ObservationSet) -> "BasicObs":
        if obs.spec.depth != 1:
            raise ShapeError("the basic model is a one-level hierarchy")
        return cls(np.asarray(obs.counts[1]), np.asarray(obs.counts[0][..., 0]))

    @property
    def m(self) -> int:
        return self.X.shape[-1]


@dataclass(frozen=True, eq=False)
class MultiObs:
    """Multi-set model with possibly unequal group sizes.

    ``X`` is the concatenation of the groups along the last axis, ``Y`` has
    one count per group, ``Z`` (optional) counts the overall total.
    """

    X: np.ndarray
    Y: np.ndarray
    group_sizes: tuple
    Z: np.ndarray | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        if any(s < 1 for s in sizes):
            raise ShapeError("group sizes must be positive")
        object.__setattr__(self, "group_sizes", sizes)
        X, Y = np.asarray(self.X), np.asarray(self.Y)
        if X.shape[-1] != sum(sizes) or Y.shape[-1] != len(sizes):
            raise ShapeError("X and Y do not match the group sizes")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if self.Z is not None:
            object.__setattr__(self, "Z", np.asarray(self.Z))

    @classmethod
    def from_observations(cls, obs: ObservationSet) -> "MultiObs":
        spec = obs.spec
        if spec.depth != 2:
            raise ShapeError("the multi-set model is a two-level hierarchy")
        sizes = (spec.branching[1],) * spec.branching[0]
        Z = obs.counts[0][..., 0] if obs.start_depth == 0 else None
        return cls(obs.counts[2], obs.counts[1], sizes, Z)

    @property
    def m(self) -> int:
        return len(self.group_sizes)

    @property
    def sizes(self) -> np.ndarray:
        return np.asarray(self.group_sizes)

    def group_sum(self, v: np.ndarray) -> np.ndarray:
        starts = np.concatenate([[0], np.cumsum(self.group_sizes)[:-1]])
        return np.add.reduceat(v, starts, axis=-1)

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        return np.repeat(per_group, self.group_sizes, axis=-1)


def split_groups(values: np.ndarray, group_sizes: Sequence[int]) -> list[np.ndarray]:
    """Split a concatenated multi-set estimate back into its groups."""
    return np.split(np.asarray(values), np.cumsum(group_sizes)[:-1], axis=-1)


def _safe_div(num, den):
    """``num / den`` with the convention ``0 / 0 = 0`` (numerators vanish there)."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    np.divide(num, den, out=out, where=den != 0)
    return out


# --- basic model ---------------------------------------------------------------


def _log_h(lam, k):
    return np.log(np.log1p(k / (1.0 + lam))) - np.log(np.log1p(k + lam))


def h_k(lam, k: int):
    """Blyth sequence ``1 - log(1 + L) / log(1 + k + L)``, cancellation-free."""
    lam = np.asarray(lam, dtype=float)
    return np.log1p(k / (1.0 + lam)) / np.log1p(k + lam)


def h_k_prime(lam, k: int):
    """Derivative of :func:`h_k` in ``L``."""
    lam = np.asarray(lam, dtype=float)
    h = h_k(lam, k)
    return -(k / (1.0 + lam) + h) / ((1.0 + k + lam) * np.log1p(k + lam))


def gamma_expectation(f: Callable, shape: float, rate: float, width: float = 40.0) -> float:
    """``E[f(G)]`` for ``G ~ Gamma(shape, rate)`` by adaptive quadrature.

    The integral is restricted to ``mean +- width * sd``; outside that
    window the gamma density is negligible for every shape used here.
    """
    mean = shape / rate
    sd = np.sqrt(shape) / rate
    lo = max(0.0, mean - width * sd)
    hi = mean + width * sd
    logc = -gammaln(shape) + shape * np.log(rate)

    def integrand(x):
        if x <= 0.0:
            return f(0.0) * rate if shape == 1 else 0.0
        return f(x) * np.exp(logc + (shape - 1) * np.log(x) - rate * x)

    pts = [p for p in (mean - 3 * sd, mean, mean + 3 * sd) if lo < p < hi]
    val, err = integrate.quad(
        integrand, lo, hi, points=pts or None, epsabs=1e-14, epsrel=1e-12, limit=400
    )
    if not np.isfinite(val) or err > 1e-9 * max(1.0, abs(val)):
        raise NumericalError(f"gamma expectation did not converge (err {err:.2e})")
    return val


@lru_cache(maxsize=65536)
def blyth_ratio(w: int, k: int) -> float:
    """``I_k(w) / I_k(w - 1)`` with ``I_k(w) = int h_k^2 L^w e^{-2L} dL``, ``w >= 1``.

    Writing ``I_k(w)`` as a gamma moment gives
    ``(w / 2) * E[h^2(G_{w+1})] / E[h^2(G_w)]`` with ``G_s ~ Gamma(s, 2)``.
    """
    if w < 1:
        raise DomainError("the ratio needs w >= 1")
    h2 = lambda x: h_k(x, k) ** 2  # noqa: E731
    return 0.5 * w * gamma_expectation(h2, w + 1, 2.0) / gamma_expectation(h2, w, 2.0)


def estimate_basic(obs: BasicObs, rule: EstimatorRule) -> np.ndarray:
    """Basic-model estimators of the ``m`` cell rates.

    Zero denominators follow the all-zero convention: the estimate is 0
    wherever the closed form would read ``0 / 0``.

    Parameters
    ----------
    obs : BasicObs
        Cell counts ``X`` (last axis) and total count ``Y``.
    rule : EstimatorRule
        One of the basic or X-only tags.

    Returns
    -------
    ndarray
        Estimates with the shape of ``obs.X``.
    """
    X = np.asarray(obs.X, dtype=float)
    Y = np.asarray(obs.Y, dtype=float)[..., None]
    m = obs.m
    Xs = X.sum(axis=-1, keepdims=True)
    tag = rule.tag
    if tag == "BasicML":
        return (Xs + Y) / 2 * _safe_div(X, Xs)
    if tag == "BasicFlatGB":
        return (Xs + Y + m - 1) / 2 * _safe_div(X, Xs + m - 1)
    if tag == "BasicShrinkGB":
        return (Xs + Y) / 2 * _safe_div(X, Xs + m - 1)
    if tag == "BasicUsual":
        if m != 1:
            raise CapabilityError("the usual rule (X_1 + Y) / 2 is defined for m = 1")
        return (X + Y) / 2
    if tag == "XOnlyML":
        return X.copy()
    if tag == "XOnlyCZ":
        return Xs * _safe_div(X, Xs + m - 1)
    if tag == "BetaBayes":
        return (Xs + Y + m - 1) / (2 + rule.beta) * _safe_div(X, Xs + m - 1)
    if tag == "BlythK":
        w = (Xs + Y).astype(np.int64)
        ratio = np.zeros(w.shape)
        for val in np.unique(w):
            if val > 0:
                ratio[w == val] = blyth_ratio(int(val), int(rule.k))
        return _safe_div(X, Xs + m - 1) * ratio
    raise CapabilityError(f"{tag} is not a basic-model rule")


# --- multi-set model -------------------------------------------------------------


def estimate_multi(obs: MultiObs, rule: EstimatorRule) -> np.ndarray:
    """Multi-set ML, flat and shrinkage rules (squared-error family).

    Returns the concatenated group estimates; see :func:`split_groups`.
    """
    X = np.asarray(obs.X, dtype=float)
    Y = np.asarray(obs.Y, dtype=float)
    n = obs.sizes
    Xg = obs.group_sum(X)
    Xg_e, Y_e, n_e = obs.expand(Xg), obs.expand(Y), obs.expand(np.broadcast_to(n, Y.shape))
    tag = rule.tag
    if tag == "MultiML":
        return (Xg_e + Y_e) / 2 * _safe_div(X, Xg_e)
    if tag == "MultiFlatGB":
        return (Xg_e + Y_e + n_e - 1) / 2 * _safe_div(X, Xg_e + n_e - 1)
    if tag == "MultiShrinkGB":
        tot = (Xg + Y).sum(axis=-1, keepdims=True)
        share = _safe_div(Xg + Y, tot + obs.m - 1)
        return tot / 2 * obs.expand(share) * _safe_div(X, Xg_e + n_e - 1)
    raise CapabilityError(f"{tag} is not a multi-set rule")


def estimate_entropy(
    obs: MultiObs, alpha: float, a: Sequence[float], with_z: bool
) -> np.ndarray:
    """Stick-breaking generalized Bayes rule under entropy loss.

    With ``Z`` the total factor divides by 3 (three observed levels),
    without it by 2.  Always strictly positive.
    """
    a = np.asarray(a, dtype=float)
    if alpha <= 0 or a.shape != (obs.m,) or np.any(a <= 0):
        raise DomainError("need alpha > 0 and one positive a_i per group")
    if with_z and obs.Z is None:
        raise ShapeError("with_z requires the total count Z")
    X = np.asarray(obs.X, dtype=float)
    Y = np.asarray(obs.Y, dtype=float)
    Xg = obs.group_sum(X)
    tot = (Xg + Y).sum(axis=-1, keepdims=True)
    if with_z:
        top = (tot + np.asarray(obs.Z, dtype=float)[..., None] + alpha) / 3
    else:
        top = (tot + alpha) / 2
    share = (Xg + Y + a) / (tot + a.sum())
    n_e = obs.expand(obs.sizes.astype(float))
    return top * obs.expand(share) * (X + 0.5) / (obs.expand(Xg) + n_e / 2)


def entropy_jeffreys(obs: MultiObs, with_z: bool) -> np.ndarray:
    """:func:`estimate_entropy` at the Jeffreys exponents ``alpha = n/2``, ``a_i = n_i/2``."""
    n = obs.sizes.astype(float)
    return estimate_entropy(obs, n.sum() / 2, n / 2, with_z)


# --- general hierarchy -------------------------------------------------------------


def _path_product(spec: HierarchySpec, top: np.ndarray, factors: list) -> np.ndarray:
    v = top
    for d in range(1, spec.depth + 1):
        v = np.repeat(v, spec.branching[d - 1], axis=-1) * factors[d - 1]
    return v


def estimate_general(obs: ObservationSet, a: PriorExponents) -> np.ndarray:
    """Generalized Bayes rule for the design ``X(D')`` under balanced entropy loss.

    Each leaf estimate is the total factor
    ``(T_root + a_0) / (1 + D - D')`` times, for every depth on the leaf's
    path, ``(T_node + a_d) / sum over siblings of (T + a_d)`` where ``T``
    are the subtree totals of observed counts.
    """
    spec = obs.spec
    a.check(spec)
    if not a.is_positive(spec):
        raise DomainError("generalized Bayes exponents must be positive")
    T = obs.totals
    denom = 1 + spec.depth - obs.start_depth + a.rate
    top = (T[0] + a.root) / denom
    factors = []
    for d in range(1, spec.depth + 1):
        num = T[d] + a.level(spec, d)
        factors.append(num / spec.sibling_sums(num, d))
    return _path_product(spec, top, factors)


# --- conjugate engine ---------------------------------------------------------------


def conjugate_engine(
    obs: ObservationSet, prior: PriorExponents, loss: str, strict: bool = True
) -> np.ndarray:
    """Bayes rule from the Gamma x Dirichlet-chain posterior.

    The posterior of the total is ``Gamma(T_root + a_0, 1 + D - D' + rate)``
    and each sibling block of shares is ``Dirichlet(T + a_d)``, all
    independent.  Entropy loss gives the posterior mean of every leaf;
    standardized squared error gives ``1 / E[1 / lambda]``.

    Under squared error the reciprocal moment is infinite when a posterior
    shape or Dirichlet parameter is ``<= 1``.  With ``strict`` this raises
    :class:`DomainError`; otherwise the estimate is the limiting value 0.
    """
    spec = obs.spec
    prior.check(spec)
    T = [np.asarray(t, dtype=float) for t in obs.totals]
    rate = 1 + spec.depth - obs.start_depth + prior.rate
    shape = T[0] + prior.root
    if loss == ENTROPY:
        if not prior.is_positive(spec):
            raise DomainError("entropy posterior mean needs positive exponents")
        top = shape / rate
        factors = []
        for d in range(1, spec.depth + 1):
            alpha = T[d] + prior.level(spec, d)
            factors.append(alpha / spec.sibling_sums(alpha, d))
        return _path_product(spec, top, factors)
    if loss != SSE:
        raise ValueError(f"unknown loss {loss!r}")
    ok = shape > 1
    if strict and not np.all(ok):
        raise DomainError("posterior shape of the total is <= 1 at the root node")
    top = np.where(ok, shape - 1, 0.0) / rate
    factors = []
    for d in range(1, spec.depth + 1):
        if spec.branching[d - 1] == 1:
            factors.append(np.ones_like(T[d]))
            continue
        alpha = T[d] + prior.level(spec, d)
        alpha0 = spec.sibling_sums(alpha, d)
        bad = (alpha <= 1) | (alpha0 <= 1)
        if strict and np.any(bad):
            k = int(np.argwhere(bad)[0][-1])
            raise DomainError(
                f"posterior Dirichlet parameter <= 1 at depth {d}, node "
                f"{'.'.join(map(str, spec.address(d, k)))}"
            )
        factors.append(np.where(bad, 0.0, (alpha - 1) / np.where(bad, 1.0, alpha0 - 1)))
    return _path_product(spec, top, factors)


def engine_prior(rule: EstimatorRule, spec: HierarchySpec) -> tuple[PriorExponents, str]:
    """The conjugate prior and loss whose Bayes rule is ``rule``.

    ``BasicML``, ``MultiML``, ``BasicUsual`` and ``BlythK`` are not
    conjugate Bayes rules and raise :class:`CapabilityError`.
    """
    tag = rule.tag
    if tag in ("BasicFlatGB", "MultiFlatGB", "XOnlyML"):
        return flat_lambda_exponents(spec), SSE
    if tag in ("BasicShrinkGB", "MultiShrinkGB", "XOnlyCZ"):
        return flat_chart_exponents(spec), SSE
    if tag == "BetaBayes":
        e = flat_lambda_exponents(spec)
        return PriorExponents(e.root, e.levels, rate=rule.beta), SSE
    if tag == "EntropyStick":
        sizes = [spec.branching[1]] * spec.branching[0]
        return stick_exponents(sizes, rule.alpha, rule.a), ENTROPY
    if tag == "EntropyJeffreys":
        return jeffreys_exponents(spec), ENTROPY
    if tag == "GeneralGB":
        return rule.prior, ENTROPY
    raise CapabilityError(f"{tag} is not a conjugate Bayes rule")


# --- dispatch -------------------------------------------------------------------------


def estimate(rule: EstimatorRule, obs: ObservationSet) -> np.ndarray:
    """Apply ``rule`` to observations on a uniform hierarchy; returns leaf estimates.

    Observations from a wider design than the rule needs are restricted
    first, so one draw can feed rules with different designs.
    """
    start = design_depth(rule)
    if obs.start_depth > start:
        raise DomainError(
            f"{rule.label} needs counts from depth {start}, observations start at "
            f"{obs.start_depth}"
        )
    if obs.start_depth != start:
        obs = obs.restrict(start)
    tag = rule.tag
    if tag in BASIC_TAGS or tag in XONLY_TAGS:
        return estimate_basic(BasicObs.from_observations(obs), rule)
    if tag in MULTI_TAGS:
        return estimate_multi(MultiObs.from_observations(obs), rule)
    if tag == "EntropyStick":
        return estimate_entropy(MultiObs.from_observations(obs), rule.alpha, rule.a, rule.with_z)
    if tag == "EntropyJeffreys":
        return entropy_jeffreys(MultiObs.from_observations(obs), rule.with_z)
    return estimate_general(obs, rule.prior)


def rule_from_json(config: dict, spec: HierarchySpec) -> EstimatorRule:
    """Build a rule from the CLI config schema ``{"tag": ..., hyperparameters}``."""
    from .priors import prior_from_json

    allowed = {"tag", "beta", "k", "alpha", "a", "with_Z", "prior", "Dprime", "name"}
    unknown = set(config) - allowed
    if unknown:
        raise ValueError(f"unknown rule keys: {sorted(unknown)}")
    prior = None
    if "prior" in config:
        prior = prior_from_json(config["prior"], spec)
    return EstimatorRule(
        tag=config["tag"],
        beta=config.get("beta"),
        k=config.get("k"),
        alpha=config.get("alpha"),
        a=tuple(config["a"]) if "a" in config else None,
        with_z=bool(config.get("with_Z", False)),
        prior=prior,
        start_depth=config.get("Dprime"),
        name=config.get("name"),
    )
