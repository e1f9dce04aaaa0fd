"""von Mises-Fisher machinery: density, Bessel ratio, concentration estimation,
maximum-likelihood fitting, sampling, and the Tukey power transform.

All Bessel arithmetic is done in log space via the ascending power series of
I_nu, summed with logsumexp.  The series has only positive terms, so it is
immune to cancellation and stays finite far beyond the range where
scipy.special.iv overflows (roughly d=120, kappa=700).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DegenerateResultantError, DimensionMismatchError, ValidationError

KAPPA_MAX_DEFAULT = 1e6
_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class VmfParams:
    """Mean direction (unit vector) and concentration of a vMF distribution."""

    theta: np.ndarray
    kappa: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1 or theta.size < 2:
            raise ValidationError("theta must be a vector with d >= 2")
        if abs(np.linalg.norm(theta) - 1.0) > 1e-10:
            raise ValidationError("theta must be unit-norm within 1e-10")
        if not (self.kappa >= 0.0 and math.isfinite(self.kappa)):
            raise ValidationError("kappa must be finite and nonnegative")

    @property
    def d(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class KappaRule:
    """How to turn a mean resultant length into a concentration estimate.

    kind is one of "constant", "order0", "order1", "order2", "order3",
    "orderinf", "exact"; value is only meaningful for "constant".
    """

    kind: str
    value: float = 0.0

    _KINDS = ("constant", "order0", "order1", "order2", "order3", "orderinf", "exact")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValidationError(f"unknown kappa rule {self.kind!r}")
        if self.kind == "constant" and self.value < 0:
            raise ValidationError("constant kappa must be >= 0")

    @classmethod
    def constant(cls, value: float) -> "KappaRule":
        return cls("constant", float(value))


ORDER0 = KappaRule("order0")
ORDER1 = KappaRule("order1")
ORDER2 = KappaRule("order2")
ORDER3 = KappaRule("order3")
ORDER_INF = KappaRule("orderinf")
EXACT = KappaRule("exact")


@dataclass(frozen=True)
class ResultantSummary:
    """Weighted resultant vector, mean resultant length, and total weight."""

    resultant: np.ndarray
    rbar: float
    count: float

    def __post_init__(self):
        if not (-1e-12 <= self.rbar <= 1.0 + 1e-12):
            raise ValidationError(f"rbar {self.rbar} outside [0, 1]")


def log_bessel_i(nu: float, kappa: float) -> float:
    """log I_nu(kappa) for nu >= 0, kappa >= 0, via the ascending series."""
    if nu < 0:
        raise ValidationError("nu must be >= 0")
    if kappa < 0:
        raise ValidationError("kappa must be >= 0")
    if kappa / 2.0 == 0.0:  # includes subnormals whose half underflows to zero
        return 0.0 if nu == 0.0 else -math.inf
    # Series peak is at m* = (sqrt(nu^2 + kappa^2) - nu) / 2; terms decay
    # super-exponentially past it.
    m_peak = 0.5 * (math.hypot(nu, kappa) - nu)
    n_terms = int(m_peak + 12.0 * math.sqrt(m_peak + 1.0) + 24.0)
    m = np.arange(n_terms, dtype=np.float64)
    log_half_k = math.log(kappa / 2.0)
    log_terms = 2.0 * m * log_half_k - gammaln(m + 1.0) - gammaln(nu + m + 1.0)
    return nu * log_half_k + float(logsumexp(log_terms))


def log_sphere_area(d: int) -> float:
    """log of the surface area of the unit sphere S^{d-1}."""
    return math.log(2.0) + (d / 2.0) * math.log(math.pi) - gammaln(d / 2.0)


def _check_dim(d: int) -> None:
    if not (isinstance(d, (int, np.integer)) and d >= 2):
        raise ValidationError(f"dimension must be an integer >= 2, got {d!r}")


def log_normalizer(d: int, kappa: float) -> float:
    """log Z(kappa) with Z = (2 pi)^{d/2} I_{d/2-1}(kappa) / kappa^{d/2-1}."""
    _check_dim(d)
    if kappa < 0:
        raise ValidationError("kappa must be >= 0")
    nu = d / 2.0 - 1.0
    if kappa < 1e-300:  # indistinguishable from uniform at float precision
        return log_sphere_area(d)
    return (d / 2.0) * math.log(2.0 * math.pi) + log_bessel_i(nu, kappa) - nu * math.log(kappa)


def bessel_ratio(d: int, kappa: float) -> float:
    """A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), in [0, 1)."""
    _check_dim(d)
    if kappa < 0:
        raise ValidationError("kappa must be >= 0")
    if kappa < 1e-300:  # A_d(kappa) ~ kappa/d vanishes at float precision
        return 0.0
    nu = d / 2.0 - 1.0
    # Gautschi continued fraction for I_{nu+1}/I_nu, evaluated with modified
    # Lentz: R = 1/(a_1 + 1/(a_2 + ...)), a_k = 2(nu+k)/kappa.  Converges for
    # all kappa > 0; iteration count scales like sqrt(kappa).
    tiny = 1e-300
    f = tiny
    c = f
    dd = 0.0
    for k in range(1, 1_000_000):
        a = 2.0 * (nu + k) / kappa
        dd = a + dd
        if dd == 0.0:
            dd = tiny
        c = a + 1.0 / c
        if c == 0.0:
            c = tiny
        dd = 1.0 / dd
        delta = c * dd
        f *= delta
        if abs(delta - 1.0) < 1e-15:
            return min(f, 1.0 - 1e-16)
    raise RuntimeError("Bessel ratio continued fraction failed to converge")


def _bessel_ratio_deriv(d: int, kappa: float, a: float) -> float:
    # A'(k) = 1 - A^2 - (d-1) A / k, standard vMF identity.
    return 1.0 - a * a - (d - 1.0) * a / kappa


def invert_bessel_ratio(
    d: int, rbar: float, tol: float = 1e-10, kappa_max: float = KAPPA_MAX_DEFAULT
) -> float:
    """Solve A_d(kappa) = rbar by safeguarded Newton with a bisection fallback."""
    _check_dim(d)
    if rbar <= 0.0:
        return 0.0
    if rbar >= 1.0:
        warnings.warn("rbar >= 1: exact kappa saturates at kappa_max", RuntimeWarning)
        return kappa_max
    if bessel_ratio(d, kappa_max) < rbar:
        warnings.warn("rbar beyond A_d(kappa_max): saturating", RuntimeWarning)
        return kappa_max
    lo, hi = 0.0, min(kappa_max, max(2.0 * d * rbar / (1.0 - rbar * rbar), 1.0))
    while bessel_ratio(d, hi) < rbar:
        lo = hi
        hi = min(2.0 * hi, kappa_max)
    kappa = min(d * rbar / (1.0 - rbar * rbar), hi)
    if kappa <= lo:
        kappa = 0.5 * (lo + hi)
    for _ in range(100):
        a = bessel_ratio(d, kappa)
        err = a - rbar
        if abs(err) <= tol:
            return kappa
        if err > 0:
            hi = kappa
        else:
            lo = kappa
        step = err / _bessel_ratio_deriv(d, kappa, a)
        candidate = kappa - step
        if not (lo < candidate < hi):
            candidate = 0.5 * (lo + hi)
        kappa = candidate
    return kappa


def estimate_kappa(
    summary: ResultantSummary,
    d: int,
    rule: KappaRule,
    kappa_max: float = KAPPA_MAX_DEFAULT,
) -> float:
    """Concentration estimate from a resultant summary under the given rule.

    Closed-form rules are power-series truncations of d*rbar / (1 - rbar^2);
    "exact" numerically inverts the Bessel ratio A_d.
    """
    _check_dim(d)
    if rule.kind == "constant":
        return min(rule.value, kappa_max)
    r = summary.rbar
    if r < 0 or r > 1.0 + 1e-12:
        raise ValidationError(f"rbar {r} outside [0, 1]")
    r = min(r, 1.0)
    r2 = r * r
    if rule.kind == "order0":
        kappa = d * r
    elif rule.kind == "order1":
        kappa = d * r * (1.0 + r2)
    elif rule.kind == "order2":
        kappa = d * r * (1.0 + r2 + r2 * r2)
    elif rule.kind == "order3":
        kappa = d * r * (1.0 + r2 + r2 * r2 + r2 * r2 * r2)
    elif rule.kind == "orderinf":
        if r >= 1.0:
            warnings.warn("rbar >= 1: order-inf estimate saturates", RuntimeWarning)
            return kappa_max
        kappa = d * r / (1.0 - r2)
    else:  # exact
        return invert_bessel_ratio(d, r, tol=1e-10, kappa_max=kappa_max)
    return min(kappa, kappa_max)


def resultant_summary(points: np.ndarray, weights: np.ndarray | None = None) -> ResultantSummary:
    """Weighted resultant of unit vectors (rows of points)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValidationError("points must be a nonempty (n, d) matrix")
    if weights is None:
        r = points.sum(axis=0)
        total = float(points.shape[0])
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (points.shape[0],):
            raise ValidationError("weights must match the number of points")
        if np.any(weights < 0):
            raise ValidationError("weights must be nonnegative")
        total = float(weights.sum())
        if total <= 0:
            raise ValidationError("weights must not all be zero")
        r = weights @ points
    rbar = min(float(np.linalg.norm(r) / total), 1.0)
    return ResultantSummary(resultant=r, rbar=rbar, count=total)


def fit_vmf(
    points: np.ndarray,
    weights: np.ndarray | None = None,
    rule: KappaRule = EXACT,
    kappa_max: float = KAPPA_MAX_DEFAULT,
) -> tuple[VmfParams, ResultantSummary]:
    """Maximum-likelihood vMF fit: mean direction from the resultant, kappa per rule."""
    summary = resultant_summary(points, weights)
    norm = np.linalg.norm(summary.resultant)
    if norm < _DEGENERATE_NORM:
        raise DegenerateResultantError(
            f"resultant norm {norm:.3e} below {_DEGENERATE_NORM}: direction undefined"
        )
    theta = summary.resultant / norm
    kappa = estimate_kappa(summary, theta.size, rule, kappa_max=kappa_max)
    return VmfParams(theta=theta, kappa=kappa), summary


def vmf_log_density(params: VmfParams, x: np.ndarray) -> np.ndarray | float:
    """log p(x) = kappa theta.x - log Z, for a unit vector or (n, d) rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise DimensionMismatchError(f"x has dimension {x.shape[-1]}, expected {params.d}")
    log_z = log_normalizer(params.d, params.kappa)
    val = params.kappa * (x @ params.theta) - log_z
    return float(val) if np.isscalar(val) or val.ndim == 0 else val


def sample_uniform_sphere(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n uniform samples on S^{d-1} via normalized Gaussians."""
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample_vmf(params: VmfParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n unit vectors from vMF(theta, kappa) by Wood's rejection scheme."""
    d, kappa, theta = params.d, params.kappa, params.theta
    if kappa == 0.0:
        return sample_uniform_sphere(d, n, rng)
    # Sample the component along theta by rejection against a beta envelope.
    dim = d - 1
    b = dim / (math.sqrt(4.0 * kappa * kappa + dim * dim) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dim * math.log(1.0 - x0 * x0)
    t = np.empty(n)
    filled = 0
    while filled < n:
        todo = n - filled
        z = rng.beta(dim / 2.0, dim / 2.0, size=todo)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(todo)
        accept = kappa * w + dim * np.log1p(-x0 * w) - c >= np.log(u)
        k = int(accept.sum())
        t[filled : filled + k] = w[accept]
        filled += k
    # Uniform tangent directions orthogonal to theta.
    v = rng.standard_normal((n, d))
    v -= np.outer(v @ theta, theta)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    samples = t[:, None] * theta[None, :] + np.sqrt(np.maximum(1.0 - t * t, 0.0))[:, None] * v
    return samples / np.linalg.norm(samples, axis=1, keepdims=True)


def tukey_transform(raw_features: np.ndarray, beta: float, eps: float = 1e-6) -> np.ndarray:
    """Tukey ladder-of-powers transform, rows renormalized to unit length."""
    x = np.asarray(raw_features, dtype=np.float64)
    if beta == 0.0:
        if np.any(x < 0):
            raise ValidationError("log transform requires nonnegative entries")
        out = np.log(x + eps)
    elif float(beta).is_integer():
        out = np.power(x, beta)
    else:
        if np.any(x < 0):
            raise ValidationError("fractional power requires nonnegative entries")
        out = np.power(x, beta)
    norms = np.linalg.norm(out, axis=-1, keepdims=True)
    if np.any(norms < _DEGENERATE_NORM):
        raise DegenerateResultantError("transformed row has near-zero norm")
    return out / norms
