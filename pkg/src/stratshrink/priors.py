"""Prior families on the (total, shares) chart and a numeric Fisher-information oracle.

A prior on a hierarchy is written in the chart ``(Lambda, theta)`` where
``Lambda`` is the total rate and ``theta`` are the per-depth shares.  Every
family used here has density proportional to

    Lambda**(a_0 - 1) * exp(-rate * Lambda) * prod_d prod_nodes theta**(a_d - 1)

so it is fully described by the exponents.  Densities are improper in
general and only ever handled in log space up to an additive constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import CapabilityError, DomainError, ShapeError, TruncationError
from .hierarchy import HierarchySpec, ParamTree


@dataclass(frozen=True, eq=False)
class PriorExponents:
    """Exponents of a conjugate (Gamma x Dirichlet-chain) prior.

    ``levels[d - 1]`` holds the exponents on depth-``d`` shares, either a
    scalar shared by the whole depth or one value per node.  ``rate`` adds
    an ``exp(-rate * Lambda)`` factor (zero for the improper families).
    """

    root: float
    levels: tuple
    rate: float = 0.0

    def __post_init__(self):
        levels = tuple(
            float(a) if np.ndim(a) == 0 else np.asarray(a, dtype=float) for a in self.levels
        )
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "root", float(self.root))
        if self.rate < 0:
            raise DomainError("prior rate must be nonnegative")

    def level(self, spec: HierarchySpec, d: int) -> np.ndarray:
        """Per-node exponents at depth ``d >= 1`` broadcast to full width."""
        a = self.levels[d - 1]
        w = spec.width(d)
        if np.ndim(a) == 0:
            return np.full(w, a)
        if a.shape != (w,):
            raise ShapeError(f"depth {d} exponents need {w} entries, got {a.shape}")
        return a

    def check(self, spec: HierarchySpec) -> None:
        if len(self.levels) != spec.depth:
            raise ShapeError(
                f"prior has {len(self.levels)} levels, hierarchy has {spec.depth}"
            )
        for d in range(1, spec.depth + 1):
            self.level(spec, d)

    def is_positive(self, spec: HierarchySpec) -> bool:
        return self.root > 0 and all(
            np.all(self.level(spec, d) > 0) for d in range(1, spec.depth + 1)
        )

    def as_tuple(self) -> tuple:
        """Exponents as plain floats/tuples, convenient for equality checks."""
        return (self.root,) + tuple(
            a if isinstance(a, float) else tuple(a.tolist()) for a in self.levels
        )


@dataclass(frozen=True)
class BetaPrior:
    """Proper prior with i.i.d. exponential(``beta``) rates on every leaf."""

    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError("beta must be positive")

    def as_exponents(self, spec: HierarchySpec) -> PriorExponents:
        """Same prior in the exponent form, up to its normalising constant."""
        e = flat_lambda_exponents(spec)
        return PriorExponents(e.root, e.levels, rate=self.beta)

    def total_density(self, total: np.ndarray, m: int) -> np.ndarray:
        """Density of the total rate, a Gamma(m, beta) law."""
        total = np.asarray(total, dtype=float)
        b = self.beta
        return np.exp(m * np.log(b) + (m - 1) * np.log(total) - b * total - gammaln(m))


def jeffreys_exponents(spec: HierarchySpec) -> PriorExponents:
    """Jeffreys prior for any design ``X(D')``: ``a_d = n_{d+1} ... n_D / 2``."""
    return PriorExponents(
        spec.leaves_below(0) / 2,
        tuple(spec.leaves_below(d) / 2 for d in range(1, spec.depth + 1)),
    )


def build_a_family(spec: HierarchySpec, top: int, start: int) -> PriorExponents:
    """Exponents interpolating between Jeffreys and heavier root shrinkage.

    For depths ``d < top`` the factor ``n_{d'}`` only enters the product
    when ``d' <= start`` or ``d' > top``; depths ``d >= top`` keep their
    Jeffreys value.  ``start == top`` reproduces :func:`jeffreys_exponents`.
    """
    D = spec.depth
    if not 1 <= top <= D:
        raise DomainError(f"top level must lie in 1..{D}, got {top}")
    if not 0 <= start <= top:
        raise DomainError(f"start depth must lie in 0..{top}, got {start}")
    n = spec.branching
    exps = []
    for d in range(D + 1):
        prod = 1
        for dp in range(d + 1, D + 1):
            if d >= top or dp <= start or dp >= top + 1:
                prod *= n[dp - 1]
        exps.append(prod / 2)
    return PriorExponents(exps[0], tuple(exps[1:]))


def flat_lambda_exponents(spec: HierarchySpec) -> PriorExponents:
    """Flat prior on the leaf rates, pulled back to the (total, shares) chart."""
    return PriorExponents(
        float(spec.leaves_below(0)),
        tuple(float(spec.leaves_below(d)) for d in range(1, spec.depth + 1)),
    )


def flat_chart_exponents(spec: HierarchySpec) -> PriorExponents:
    """Flat prior on the total and all shares."""
    return PriorExponents(1.0, (1.0,) * spec.depth)


def stick_exponents(
    group_sizes: Sequence[int], alpha: float, a: Sequence[float]
) -> PriorExponents:
    """Two-level stick-breaking prior: ``alpha`` on the total, ``a_i`` on group shares.

    Within-group shares always carry exponent 1/2.  Groups must be equal in
    size to fit a uniform hierarchy.
    """
    sizes = set(group_sizes)
    if len(sizes) != 1:
        raise CapabilityError("exponent form needs equal group sizes")
    a = np.asarray(a, dtype=float)
    if a.shape != (len(group_sizes),):
        raise ShapeError("one exponent per group is required")
    if alpha <= 0 or np.any(a <= 0):
        raise DomainError("stick-breaking exponents must be positive")
    return PriorExponents(alpha, (a, 0.5))


def log_prior_density(prior: PriorExponents | BetaPrior, point: ParamTree) -> float:
    """Log density at ``point`` up to an additive constant.

    For :class:`BetaPrior` this is the normalised log density
    ``m log(beta) - beta * Lambda``.
    """
    for r in point.rates:
        if np.any(r <= 0):
            raise DomainError("prior density needs strictly positive coordinates")
    spec = point.spec
    if isinstance(prior, BetaPrior):
        return spec.n_leaves * np.log(prior.beta) - prior.beta * point.total
    prior.check(spec)
    out = (prior.root - 1) * np.log(point.total) - prior.rate * point.total
    for d in range(1, spec.depth + 1):
        out += float(np.sum((prior.level(spec, d) - 1) * np.log(point.ratios[d])))
    return float(out)


def prior_from_json(config: dict, spec: HierarchySpec) -> PriorExponents | BetaPrior:
    """Build a prior from the CLI config schema."""
    allowed = {"family", "alpha", "a", "beta", "D0", "Dprime"}
    unknown = set(config) - allowed
    if unknown:
        raise ValueError(f"unknown prior keys: {sorted(unknown)}")
    family = config["family"]
    if family == "jeffreys":
        return jeffreys_exponents(spec)
    if family == "a_family":
        return build_a_family(spec, int(config["D0"]), int(config["Dprime"]))
    if family == "stick":
        if spec.depth != 2:
            raise CapabilityError("stick-breaking priors are two-level")
        sizes = [spec.branching[1]] * spec.branching[0]
        return stick_exponents(sizes, float(config["alpha"]), config["a"])
    if family == "beta":
        return BetaPrior(float(config["beta"]))
    if family == "flat_lambda":
        return flat_lambda_exponents(spec)
    if family == "flat_theta_Lambda":
        return flat_chart_exponents(spec)
    raise ValueError(f"unknown prior family {family!r}")


# --- Fisher information oracle ------------------------------------------------


def _poisson_cap(mean: float) -> int:
    return int(np.ceil(mean + 40 * np.sqrt(mean) + 200))


def _truncated_moments(mean: float, tail_tol: float) -> tuple[float, float]:
    """``(P(X <= K), E[X; X <= K])`` for ``X ~ Po(mean)`` with tail mass < tol."""
    cap = _poisson_cap(mean)
    x = np.arange(cap + 1)
    logp = x * np.log(mean) - mean - gammaln(x + 1)
    p = np.exp(logp)
    cdf = np.cumsum(p)
    tail = 1.0 - cdf
    # 1 - cdf loses precision near 1e-16; also require the last pmf term tiny.
    ok = np.nonzero((tail < tail_tol) & (p < tail_tol) & (x > mean))[0]
    if ok.size == 0:
        raise TruncationError(
            f"Poisson({mean:g}) tail did not fall below {tail_tol:g} by {cap}",
            float(max(tail[-1], p[-1])),
        )
    K = ok[0]
    return float(cdf[K]), float(np.sum(x[: K + 1] * p[: K + 1]))


def chart_coordinates(tree: ParamTree) -> np.ndarray:
    """Coordinates ``(Lambda, free shares...)``; the last share of every block is dropped."""
    spec = tree.spec
    coords = [tree.total]
    for d in range(1, spec.depth + 1):
        n = spec.branching[d - 1]
        coords.extend(tree.ratios[d].reshape(-1, n)[:, : n - 1].ravel())
    return np.asarray(coords)


def _path_structure(spec: HierarchySpec):
    """For every node, the coordinate gradients of the log-shares on its root path.

    Returns a list over depths of lists over nodes of ``(coord_vector, share_index)``
    pairs, where ``share_index`` is ``(d', k')`` of the ancestor share.
    """
    dim = 1
    offsets = {}
    for d in range(1, spec.depth + 1):
        n = spec.branching[d - 1]
        offsets[d] = dim
        dim += spec.width(d - 1) * (n - 1)
    grads = {}
    for d in range(1, spec.depth + 1):
        n = spec.branching[d - 1]
        for k in range(spec.width(d)):
            g = np.zeros(dim)
            if n > 1:
                parent, j = divmod(k, n)
                base = offsets[d] + parent * (n - 1)
                if j < n - 1:
                    g[base + j] = 1.0
                else:
                    g[base : base + n - 1] = -1.0
            grads[(d, k)] = g
    return dim, grads


def fisher_information_numeric(
    tree: ParamTree, start_depth: int, tail_tol: float = 1e-12
) -> np.ndarray:
    """Expected negative Hessian of the log-likelihood of ``X(start_depth)``.

    The Hessian of every count's log-likelihood is assembled by the chain
    rule in the chart of :func:`chart_coordinates`, and its expectation is
    taken by truncated summation over that count's Poisson law.
    """
    if not 0 < tail_tol <= 1e-6:
        raise DomainError("tail_tol must lie in (0, 1e-6]")
    spec = tree.spec
    if not 0 <= start_depth <= spec.depth:
        raise DomainError(f"start depth must lie in 0..{spec.depth}")
    dim, grads = _path_structure(spec)
    e0 = np.zeros(dim)
    e0[0] = 1.0
    info = np.zeros((dim, dim))
    for d in range(start_depth, spec.depth + 1):
        for k in range(spec.width(d)):
            mu = float(tree.rates[d][k])
            glog = e0 / tree.total
            hlog = -np.outer(e0, e0) / tree.total**2
            kk = k
            for dd in range(d, 0, -1):
                g = grads[(dd, kk)]
                if g.any():
                    th = float(tree.ratios[dd][kk])
                    glog = glog + g / th
                    hlog = hlog - np.outer(g, g) / th**2
                kk //= spec.branching[dd - 1]
            gmu = mu * glog
            hmu = mu * (hlog + np.outer(glog, glog))
            p0, ex = _truncated_moments(mu, tail_tol)
            # -E[(x/mu - 1) hmu - (x/mu^2) gmu gmu^T]
            info += (ex / mu**2) * np.outer(gmu, gmu) - (ex / mu - p0) * hmu
    return 0.5 * (info + info.T)
