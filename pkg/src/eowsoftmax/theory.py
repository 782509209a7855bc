"""Exact checks of the gradient identities behind the EOW objective.

On a finite domain every expectation is a weighted sum, so the partition
functions

    Z  = sum_x h(x)[K+1]          (uncertainty EBM p)
    Z' = sum_x sum_{i<=K} h(x)[i]  (closed-world EBM q)

and all gradients can be computed without sampling. Weights of a "frozen"
expectation are evaluated numerically and enter the tape as constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import diffcore as dc
from .data import grid, mixture_density, mixture_means
from .model import EowClassifier, log_softmax

PROP1_RTOL = 1e-6
PROP1_COSINE_TOL = 1e-10
LEMMA1_RTOL = 1e-4
FD_STEP = 1e-5


@dataclass
class DiscreteDomain:
    points: np.ndarray
    density: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.density.shape != (len(self.points),):
            raise ValueError("need one density value per point")
        if np.any(self.density < 0) or not np.all(np.isfinite(self.density)):
            raise ValueError("density must be finite and non-negative")
        if abs(self.density.sum() - 1.0) > 1e-12:
            raise ValueError("density must sum to 1")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise ValueError("domain points must be distinct")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.points)


def mixture_domain(size: int = 21, k: int = 3, lo: float = -3.0, hi: float = 3.0) -> DiscreteDomain:
    """Square grid with the k-component mixture density renormalised over it.

    Each point is labelled with its nearest mixture mean.
    """
    pts = grid(lo, hi, size)
    dens = mixture_density(pts, k)
    dens = dens / dens.sum()
    dist = ((pts[:, None, :] - mixture_means(k)[None]) ** 2).sum(axis=-1)
    return DiscreteDomain(pts, dens, np.argmin(dist, axis=1))


def random_model(seed: int, widths=(2, 16, 16), k: int = 3, bias_scale: float = 0.5) -> EowClassifier:
    """He-initialised model with random (non-zero) biases, for generic-position checks."""
    rng = np.random.default_rng(seed)
    model = EowClassifier(list(widths), k, rng=rng)
    for b in model.biases:
        b[:] = rng.normal(0.0, bias_scale, size=b.shape)
    return model


@dataclass
class Densities:
    p_model: np.ndarray
    q_model: np.ndarray
    Z: float
    Z_prime: float


def exact_densities(model: EowClassifier, domain) -> Densities:
    points = domain.points if isinstance(domain, DiscreteDomain) else np.atleast_2d(domain)
    h = np.exp(log_softmax(model.logits(points)))
    unc = h[:, model.num_classes]
    closed = h[:, : model.num_classes].sum(axis=1)
    Z = float(unc.sum())
    Zp = float(closed.sum())
    return Densities(unc / Z, closed / Zp, Z, Zp)


@dataclass
class TheoryReport:
    name: str
    passed: bool
    Z: float = math.nan
    Z_prime: float = math.nan
    mu: float = math.nan
    max_rel_dev: float = math.nan
    cosine: float = math.nan
    grad_lhs: np.ndarray | None = None
    grad_rhs: np.ndarray | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self, with_grads: bool = False) -> dict:
        d = asdict(self)
        for key in ("grad_lhs", "grad_rhs"):
            v = d.pop(key)
            if with_grads and v is not None:
                d[key] = np.asarray(v).tolist()
        return d


def _taped_log_terms(model: EowClassifier, points):
    tape = dc.Tape()
    params = model.bind(tape)
    logits = model.trace(params, points, 0)
    log_h = dc.log_softmax(logits)
    log_unc = dc.column(log_h, model.num_classes)
    log_closed = dc.sub(dc.logsumexp(dc.slice_cols(logits, 0, model.num_classes)), dc.logsumexp(logits))
    return tape, params, log_unc, log_closed


def _weighted_grad(model, points, weights, which: str, scale: float) -> np.ndarray:
    tape, params, log_unc, log_closed = _taped_log_terms(model, points)
    term = log_unc if which == "unc" else log_closed
    root = dc.mul(dc.sum(dc.mul(term, weights)), scale)
    return model.flat_grad(dc.grad(tape, root, params))


def relative_deviation(a, b, floor: float = 0.0) -> float:
    """``max_i |a_i - b_i| / (|b_i| + floor)``, counting exact agreement (including 0 vs 0) as 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.abs(b) + floor
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff == 0, 0.0, diff / denom)
    return float(np.max(rel, initial=0.0))


def norm_relative_error(a, b) -> float:
    """``|a - b| / |b|`` in the Euclidean norm (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.linalg.norm(a - b)
    if diff == 0:
        return 0.0
    nb = np.linalg.norm(b)
    return float(diff / nb) if nb > 0 else math.inf


def cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.nan
    return float(np.dot(a, b) / (na * nb))


def check_prop1(model: EowClassifier, domain: DiscreteDomain, rtol: float = PROP1_RTOL,
                floor: float = 0.0) -> TheoryReport:
    """Gradient of the frozen-weight closed-world term equals ``mu`` times that of the uncertainty term.

    ``g1 = d/dtheta sum_x q_frozen(x) log S_K(x)`` and
    ``g2 = d/dtheta sum_x p_frozen(x) (-log h(x)[K+1])`` with ``mu = Z / Z'``.
    ``floor`` is added to each elementwise denominator; the default 0 makes
    the comparison a plain relative error.
    """
    dens = exact_densities(model, domain)
    mu = dens.Z / dens.Z_prime
    g1 = _weighted_grad(model, domain.points, dens.q_model, "closed", 1.0)
    g2 = _weighted_grad(model, domain.points, dens.p_model, "unc", -1.0)
    rhs = mu * g2
    dev = relative_deviation(g1, rhs, floor)
    cos = cosine(g1, rhs)
    passed = bool(dev < rtol and cos >= 1 - PROP1_COSINE_TOL and mu > 0)
    return TheoryReport("proposition1", passed, dens.Z, dens.Z_prime, mu, dev, cos, g1, rhs,
                        {"floor": floor, "rtol": rtol, "n_params": int(model.size)})


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def kl_to_model(model: EowClassifier, domain: DiscreteDomain, theta=None) -> float:
    if theta is not None:
        model = EowClassifier(model.widths, model.num_classes, theta=theta)
    return kl_divergence(domain.density, exact_densities(model, domain).q_model)


def contrastive_gradient(model: EowClassifier, domain: DiscreteDomain) -> np.ndarray:
    """``E_p[dE'/dtheta] - E_q_frozen[dE'/dtheta]`` with ``E' = -log sum_{i<=K} h``."""
    q = exact_densities(model, domain).q_model
    return _weighted_grad(model, domain.points, domain.density - q, "closed", -1.0)


def check_lemma1(model: EowClassifier, domain: DiscreteDomain, rtol: float = LEMMA1_RTOL,
                 h: float = FD_STEP) -> TheoryReport:
    """Central-difference gradient of exact ``KL(p || q_theta)`` against the contrastive gradient.

    The pass test uses the norm-wise relative error ``|a - n| / |n|``.
    Components many orders below the gradient norm sit at the
    finite-difference rounding floor (about ``eps * KL / h``), so the
    elementwise ratio is reported in ``details`` but not gated.
    """
    if domain.density.sum() <= 0:
        raise ValueError("data density has no mass; KL is undefined")
    analytic = contrastive_gradient(model, domain)
    theta = model.theta.copy()
    numeric = dc.central_differences(lambda t: kl_to_model(model, domain, t), theta, h)
    dev = norm_relative_error(analytic, numeric)
    kl = kl_to_model(model, domain)
    return TheoryReport("lemma1", bool(dev < rtol), max_rel_dev=dev, cosine=cosine(analytic, numeric),
                        grad_lhs=analytic, grad_rhs=numeric,
                        details={"kl": kl, "fd_step": h, "rtol": rtol,
                                 "elementwise_rel_dev": relative_deviation(analytic, numeric, 1e-12)})


def bound_margins(logits, labels) -> np.ndarray:
    """``-log h[y] - (-log sum_{i<=K} h)`` per row; non-negative by construction."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1] - 1
    head = logits[:, :k]
    m = head.max(axis=1)
    lse_k = m + np.log(np.exp(head - m[:, None]).sum(axis=1))
    return lse_k - head[np.arange(len(labels)), labels]


def check_theorem1_bound(model: EowClassifier, domain: DiscreteDomain, labels=None) -> TheoryReport:
    """Pointwise ``-log h[y] >= -log sum_{i<=K} h`` and the aggregate objective bound."""
    labels = domain.labels if labels is None else np.asarray(labels, dtype=np.int64)
    if labels is None:
        raise ValueError("the bound needs labels")
    logits = model.logits(domain.points)
    margins = bound_margins(logits, labels)
    logp = log_softmax(logits)
    log_closed = np.log(np.exp(logp[:, : model.num_classes]).sum(axis=1))
    q = exact_densities(model, domain).q_model
    p = domain.density
    upper = float(np.dot(p, -logp[np.arange(len(labels)), labels]) + np.dot(q, log_closed))
    lower = float(np.dot(p, -log_closed) + np.dot(q, log_closed))
    passed = bool(np.all(margins >= 0) and upper >= lower)
    return TheoryReport("theorem1", passed, details={
        "min_margin": float(margins.min()),
        "max_margin": float(margins.max()),
        "objective": upper,
        "energy_difference": lower,
        "aggregate_margin": upper - lower,
    })


def random_bound_margins(n: int = 10_000, seed: int = 0, k: int = 3, n_models: int = 100) -> np.ndarray:
    """Margins of the pointwise bound over ``n`` random (theta, x, y) triples."""
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    chunks = np.array_split(np.arange(n), n_models)
    for i, idx in enumerate(chunks):
        model = random_model(int(rng.integers(2**31)), k=k, bias_scale=float(rng.uniform(0.1, 3.0)))
        x = rng.normal(scale=float(rng.uniform(0.5, 5.0)), size=(len(idx), 2))
        y = rng.integers(0, k, len(idx))
        out[idx] = bound_margins(model.logits(x), y)
    return out


@dataclass
class CorrelationReport:
    rho_closed: float | None
    rho_uncertainty: float | None
    n_points: int

    @property
    def defined(self) -> bool:
        return self.rho_closed is not None


def _spearman(a, b):
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b).statistic)


def check_density_proportionality(model: EowClassifier, points, density) -> CorrelationReport:
    """Spearman correlation of ``sum_{i<=K} h`` and of ``h[K+1]`` with the data density.

    A constant score makes the correlation undefined (reported as None).
    """
    points = np.atleast_2d(points)
    logits = model.logits(points)
    logp = log_softmax(logits)
    closed = np.exp(logp[:, : model.num_classes]).sum(axis=1)
    unc = np.exp(logp[:, model.num_classes])
    return CorrelationReport(_spearman(closed, density), _spearman(unc, density), len(points))


def run_all(seed: int = 0, grid_size: int = 21, k: int = 3, n_prop1: int = 20, n_lemma1: int = 10,
            lemma_points: int = 5) -> dict:
    """Run every check with default settings; returns a JSON-ready report."""
    domain = mixture_domain(grid_size, k)
    prop1 = [check_prop1(random_model(seed + i, k=k), domain) for i in range(n_prop1)]

    lemma = []
    for i in range(n_lemma1):
        rng = np.random.default_rng(10_000 + seed + i)
        pts = rng.uniform(-3, 3, size=(lemma_points, 2))
        w = rng.random(lemma_points) + 0.1
        lemma.append(check_lemma1(random_model(seed + i, k=k), DiscreteDomain(pts, w / w.sum())))

    thm = check_theorem1_bound(random_model(seed, k=k), domain)
    margins = random_bound_margins(10_000, seed, k)
    thm.details["random_triples"] = len(margins)
    thm.details["random_min_margin"] = float(margins.min())
    thm.passed = bool(thm.passed and np.all(margins >= 0))
    # h[K+1] + S_K = 1 pointwise, so Z + Z' counts the domain for any theta
    sums = np.array([[r.Z, r.Z_prime] for r in prop1])
    identity_err = float(np.max(np.abs(sums.sum(axis=1) - len(domain))))
    identity_ok = identity_err <= 1e-9 * len(domain)

    checks = {
        "proposition1": {
            "passed": all(r.passed for r in prop1),
            "max_rel_dev": max(r.max_rel_dev for r in prop1),
            "min_cosine": min(r.cosine for r in prop1),
            "mu_range": [min(r.mu for r in prop1), max(r.mu for r in prop1)],
            "runs": [r.to_dict() for r in prop1],
        },
        "lemma1": {
            "passed": all(r.passed for r in lemma),
            "max_rel_dev": max(r.max_rel_dev for r in lemma),
            "runs": [r.to_dict() for r in lemma],
        },
        "theorem1": thm.to_dict(),
        "partition_identity": {
            "passed": bool(identity_ok),
            "max_abs_error": identity_err,
            "domain_size": len(domain),
        },
    }
    return {
        "settings": {"seed": seed, "grid": grid_size, "k": k, "n_prop1": n_prop1, "n_lemma1": n_lemma1},
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()),
    }
