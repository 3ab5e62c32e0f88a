"""Loss functions and the plug-in / Bayesian predictive KL identities.

Losses reduce over the last (leaf) axis, so batched estimates give one
loss per replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, stats

from .errors import CapabilityError, DomainError, ShapeError
from .hierarchy import ParamTree
from .priors import BetaPrior, PriorExponents


def sse_loss(d, lam) -> np.ndarray:
    """Standardized squared error ``sum (d - lam)^2 / lam``."""
    d = np.asarray(d, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise DomainError("true rates must be positive")
    return np.sum((d - lam) ** 2 / lam, axis=-1)


def _entropy_terms(delta, lam):
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(delta <= 0):
        bad = np.argwhere(~(delta > 0))[0]
        raise DomainError(
            f"entropy loss needs strictly positive estimates; got {delta[tuple(bad)]} "
            f"at index {tuple(int(i) for i in bad)} (risk not well defined)"
        )
    if np.any(lam <= 0):
        raise DomainError("true rates must be positive")
    return delta - lam - lam * (np.log(delta) - np.log(lam))


def entropy_loss(delta, lam) -> np.ndarray:
    """Entropy loss ``sum delta - lam - lam * log(delta / lam)`` over leaves."""
    return np.sum(_entropy_terms(delta, lam), axis=-1)


def balanced_entropy_loss(delta, tree: ParamTree) -> np.ndarray:
    """Entropy loss summed over every depth of the hierarchy.

    Estimates of internal nodes are the sums of the leaf estimates below
    them, recomputed here.
    """
    spec = tree.spec
    agg = spec.aggregate_leaves(delta)
    return sum(entropy_loss(agg[d], tree.rates[d]) for d in range(spec.depth + 1))


@dataclass(frozen=True, eq=False)
class PredictiveWeights:
    """Training exposures ``r``, prediction exposures ``s`` and a path between them.

    ``r`` and ``s`` hold one array per depth.  The path ``t(tau)`` runs
    from ``r`` at ``tau = 0`` to ``r + s`` at ``tau = 1``: ``"linear"`` is
    ``r + s * tau`` and ``"power"`` is ``r + s * tau**2``.
    """

    r: tuple
    s: tuple
    path: str = "linear"

    def __post_init__(self):
        r = tuple(np.asarray(x, dtype=float) for x in self.r)
        s = tuple(np.asarray(x, dtype=float) for x in self.s)
        if len(r) != len(s) or any(a.shape != b.shape for a, b in zip(r, s)):
            raise ShapeError("r and s must have matching per-depth shapes")
        if any(np.any(a < 0) for a in r + s):
            raise DomainError("exposures must be nonnegative")
        if self.path not in ("linear", "power"):
            raise ValueError(f"unknown path {self.path!r}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "s", s)

    @classmethod
    def uniform(cls, tree: ParamTree, r: float = 1.0, s: float = 1.0, path="linear"):
        shapes = [x.shape for x in tree.rates]
        return cls(
            tuple(np.full(sh, r) for sh in shapes),
            tuple(np.full(sh, s) for sh in shapes),
            path,
        )

    def t(self, tau: float) -> tuple:
        g = tau if self.path == "linear" else tau**2
        return tuple(r + s * g for r, s in zip(self.r, self.s))

    def dt(self, tau: float) -> tuple:
        g = 1.0 if self.path == "linear" else 2.0 * tau
        return tuple(s * g for s in self.s)

    def check(self, tree: ParamTree, grid: int = 101) -> None:
        if len(self.r) != tree.spec.depth + 1 or any(
            a.shape != b.shape for a, b in zip(self.r, tree.rates)
        ):
            raise ShapeError("weights do not match the tree")
        taus = np.linspace(0.0, 1.0, grid)
        prev = None
        for tau in taus:
            cur = np.concatenate(self.t(tau))
            if prev is not None and np.any(cur < prev):
                raise DomainError("path t is not nondecreasing")
            prev = cur
        if not np.allclose(np.concatenate(self.t(1.0)), np.concatenate(self.r) + np.concatenate(self.s)):
            raise DomainError("path does not end at r + s")


def plugin_predictive_kl(delta, tree: ParamTree, w: PredictiveWeights) -> np.ndarray:
    """Expected KL of the plug-in predictive ``Po(s * delta)`` for ``Y ~ Po(s * lambda)``."""
    w.check(tree)
    spec = tree.spec
    agg = spec.aggregate_leaves(delta)
    total = 0.0
    for d in range(spec.depth + 1):
        total = total + np.sum(w.s[d] * _entropy_terms(agg[d], tree.rates[d]), axis=-1)
    return total


def _poisson_support(mean: float, tail: float) -> np.ndarray:
    """Support ``0..K`` of ``Po(mean)`` carrying all but ``tail`` of the mass."""
    if mean == 0:
        return np.zeros(1, dtype=np.int64)
    K = int(stats.poisson.isf(tail, mean)) + 1
    return np.arange(K + 1)


def enumerated_predictive_kl(
    delta, tree: ParamTree, w: PredictiveWeights, tail: float = 1e-14
) -> float:
    """``E[log p(Y | lambda) / p(Y | delta)]`` by enumerating every ``Y`` count.

    The counts are independent, so the expectation splits into one
    truncated sum per node.
    """
    w.check(tree)
    spec = tree.spec
    agg = spec.aggregate_leaves(delta)
    out = 0.0
    for d in range(spec.depth + 1):
        for lam, dl, s in zip(tree.rates[d], agg[d], w.s[d]):
            if s == 0:
                continue
            y = _poisson_support(s * lam, tail)
            p = stats.poisson.pmf(y, s * lam)
            out += float(np.sum(p * (stats.poisson.logpmf(y, s * lam) - stats.poisson.logpmf(y, s * dl))))
    return out


# --- Bayesian predictive check on single-rate chains ------------------------------


def _log_gamma_integral_quad(c: float, b: float) -> float:
    """``log int_0^inf x^(c-1) e^(-b x) dx`` by quadrature in ``u = log x``."""
    mode = np.log(c / b)
    shift = c * mode - b * np.exp(mode)

    def f(u):
        return np.exp(c * u - b * np.exp(u) - shift)

    width = 60.0 / np.sqrt(c)
    lo, hi = mode - max(width, 40.0 / c), mode + width
    left, _ = integrate.quad(f, lo, mode, epsabs=0, epsrel=1e-13, limit=200)
    right, _ = integrate.quad(f, mode, hi, epsabs=0, epsrel=1e-13, limit=200)
    return float(np.log(left + right) + shift)


def _chain_prior(prior, tree: ParamTree) -> tuple[float, float]:
    if isinstance(prior, BetaPrior):
        prior = prior.as_exponents(tree.spec)
    if not isinstance(prior, PriorExponents):
        raise TypeError("prior must be PriorExponents or BetaPrior")
    if prior.root <= 0:
        raise DomainError("the prior exponent on the total must be positive")
    return prior.root, prior.rate


def bayes_predictive_kl_check(
    prior: PriorExponents | BetaPrior,
    tree: ParamTree,
    w: PredictiveWeights,
    tau_grid_size: int = 48,
    tail: float = 1e-14,
) -> tuple[float, float]:
    """Both sides of the Bayesian predictive KL identity on a single-rate chain.

    Only hierarchies in which every level has one child (so every node
    carries the same rate) and with at most three nodes are supported.

    Returns
    -------
    direct : float
        ``E[log p(Y | lambda) / p_hat(Y; X)]`` by enumerating ``X`` and ``Y``
        with the posterior normalisers computed by quadrature.
    path : float
        ``int_0^1 sum t'(tau) E[entropy loss of the posterior mean given Z(tau)] dtau``
        by Gauss-Legendre in ``tau`` and enumeration of ``Z(tau)``.
    """
    spec = tree.spec
    if any(n != 1 for n in spec.branching) or spec.n_nodes > 3:
        raise CapabilityError("the predictive check runs on single-rate chains of <= 3 nodes")
    w.check(tree)
    a, beta = _chain_prior(prior, tree)
    lam = tree.total
    r = float(sum(x.sum() for x in w.r))
    s = float(sum(x.sum() for x in w.s))
    if r <= 0:
        raise DomainError("the training exposure must be positive")

    if s == 0:
        direct = 0.0
    else:
        logI = lru_cache(maxsize=None)(_log_gamma_integral_quad)
        xs = _poisson_support(r * lam, tail)
        ys = _poisson_support(s * lam, tail)
        px = stats.poisson.pmf(xs, r * lam)
        py = stats.poisson.pmf(ys, s * lam)
        direct = 0.0
        for x, p in zip(xs, px):
            base = logI(float(x + a), r + beta)
            inner = np.array([logI(float(x + y + a), r + s + beta) for y in ys])
            direct += p * float(np.sum(py * (ys * np.log(lam) - s * lam - inner + base)))

    nodes, weights = np.polynomial.legendre.leggauss(tau_grid_size)
    taus = 0.5 * (nodes + 1.0)
    path = 0.0
    for tau, wt in zip(taus, weights):
        tt = float(sum(x.sum() for x in w.t(tau)))
        dt = float(sum(x.sum() for x in w.dt(tau)))
        if dt == 0:
            continue
        z = _poisson_support(tt * lam, tail)
        pz = stats.poisson.pmf(z, tt * lam)
        est = (z + a) / (tt + beta)
        loss = est - lam - lam * (np.log(est) - np.log(lam))
        path += 0.5 * wt * dt * float(np.sum(pz * loss))
    return float(direct), float(path)
