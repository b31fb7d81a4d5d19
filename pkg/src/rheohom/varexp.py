"""Variable-exponent stress laws, their convex potentials, and Orlicz norms.

Symmetric 2x2 tensors are stored with a trailing axis of length 3 in the
order (t11, t22, t12); the off-diagonal entry appears once in storage but
twice in every contraction, so the inner product is

    x . y = x11*y11 + x22*y22 + 2*x12*y12.

Fields of symmetric tensors are arrays of shape (n, n, 3) on a periodic
grid (cell module) or (n+1, n+1, 3) on a bounded node grid (macro module);
all functions here only assume the trailing component axis.
"""

import math
from dataclasses import dataclass, field

import numpy as np

NCOMP = 2  # spatial dimension of the v1 solvers
NSYM = 3   # independent components of a symmetric 2x2 tensor


class ConfigurationError(ValueError):
    """Raised when exponent bounds violate the admissibility inequalities."""


# ---------------------------------------------------------------------------
# symmetric-tensor algebra
# ---------------------------------------------------------------------------

def sym_dot(x, y):
    """Full double contraction of symmetric tensors (trailing axis 3)."""
    x = np.asarray(x)
    y = np.asarray(y)
    return x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] + 2.0 * x[..., 2] * y[..., 2]


def sym_norm(x):
    """Frobenius norm |x| = sqrt(x . x)."""
    return np.sqrt(sym_dot(x, x))


def sym_trace(x):
    return np.asarray(x)[..., 0] + np.asarray(x)[..., 1]


def tracefree_from_plane(vec):
    """Map isometric plane coordinates (X, S) to a trace-free tensor.

    The plane is chosen so Euclidean lengths and dot products match the
    tensor contraction: xi = (X/sqrt2, -X/sqrt2, S/sqrt2).
    """
    vec = np.asarray(vec, dtype=float)
    x = vec[..., 0] / math.sqrt(2.0)
    s = vec[..., 1] / math.sqrt(2.0)
    return np.stack([x, -x, s], axis=-1)


def plane_from_tracefree(xi):
    """Inverse of :func:`tracefree_from_plane` (ignores any trace part)."""
    xi = np.asarray(xi, dtype=float)
    dev = 0.5 * (xi[..., 0] - xi[..., 1])
    return np.stack([dev * math.sqrt(2.0), xi[..., 2] * math.sqrt(2.0)], axis=-1)


def tracefree_from_polar(r, theta):
    """Trace-free tensor with |xi| = r at angle theta of the isometric plane."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return tracefree_from_plane(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1))


def random_tracefree(rng, size=None, radius=1.0):
    """Uniform-direction trace-free tensors with |xi| = radius."""
    theta = rng.uniform(0.0, 2.0 * np.pi, size=size)
    return tracefree_from_polar(radius, theta)


# ---------------------------------------------------------------------------
# stress law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StressLaw:
    """Power-law viscous stress A(y, xi) = a(y) |xi|^(p(y)-2) xi.

    The only functional form implemented in v1; it derives from the convex
    potential a(y)|xi|^p(y)/p(y), which is what the cell and macro solvers
    minimize.  `a` and `p` are per-cell scalar fields sharing one shape.
    """

    a: np.ndarray
    p: np.ndarray
    form: str = "power"

    def __post_init__(self):
        if self.form != "power":
            raise NotImplementedError(
                "non-potential stress laws need the damped fixed-point path")
        a = np.asarray(self.a, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if a.shape != p.shape:
            raise ValueError("a and p fields must share a shape")
        if np.any(a < 1.0):
            raise ValueError("coefficient field must satisfy a >= 1")
        if np.any(p <= 1.0):
            raise ValueError("exponent field must satisfy p > 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "p", p)

    @property
    def alpha(self):
        return float(self.p.min())

    @property
    def beta(self):
        return float(self.p.max())

    def with_unit_coefficient(self):
        """Same exponent field with a == 1 (the Orlicz-integrand law)."""
        return StressLaw(a=np.ones_like(self.p), p=self.p)


def stress_field(law: StressLaw, xi):
    """Evaluate the stress at every cell of a tensor field.

    xi has shape law.p.shape + (3,).  The p < 2 singularity at xi = 0 is
    removable; the stress there is 0 by odd continuity.
    """
    xi = np.asarray(xi, dtype=float)
    mag = sym_norm(xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = law.a * np.power(mag, law.p - 2.0)
    scale = np.where(mag > 0.0, scale, 0.0)
    return scale[..., None] * xi


def stress_eval(law: StressLaw, y, xi):
    """Stress at one cell index y = (i, j) and a single tensor xi."""
    xi = np.asarray(xi, dtype=float)
    a = float(law.a[y])
    p = float(law.p[y])
    mag = float(sym_norm(xi))
    if mag == 0.0:
        return np.zeros(NSYM)
    return a * mag ** (p - 2.0) * xi


def potential_field(law: StressLaw, xi):
    """Convex potential a(y)|xi|^p(y)/p(y) per cell; its gradient is the stress."""
    xi = np.asarray(xi, dtype=float)
    mag = sym_norm(xi)
    return law.a * np.power(mag, law.p) / law.p


def potential_eval(law: StressLaw, y, xi):
    a = float(law.a[y])
    p = float(law.p[y])
    mag = float(sym_norm(np.asarray(xi, dtype=float)))
    return a * mag ** p / p


def dissipation_field(law: StressLaw, xi):
    """A(y, xi) . xi = a(y)|xi|^p(y), the pointwise viscous dissipation rate."""
    xi = np.asarray(xi, dtype=float)
    return law.a * np.power(sym_norm(xi), law.p)


# ---------------------------------------------------------------------------
# growth-constant certification (h3/h4, sampled)
# ---------------------------------------------------------------------------

@dataclass
class GrowthReport:
    c0: float
    c1: float
    passed: bool
    n_samples: int
    max_h3_margin: float
    max_h4_margin: float

    def to_record(self, alpha, beta):
        return {
            "law": "power",
            "alpha": alpha,
            "beta": beta,
            "c0": self.c0,
            "c1": self.c1,
            "passed": self.passed,
            "n_samples": self.n_samples,
            "max_h3_margin": self.max_h3_margin,
            "max_h4_margin": self.max_h4_margin,
        }


def growth_sample_set(rng, n_mags=40, n_dirs=8, mag_range=(1e-3, 1e3)):
    """Log-uniform magnitudes times random directions, plus the origin."""
    mags = np.geomspace(mag_range[0], mag_range[1], n_mags)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(n_mags, n_dirs))
    phi = rng.uniform(0.0, np.pi, size=(n_mags, n_dirs))
    # generic symmetric tensors, not only trace-free ones: h3/h4 are unrestricted
    raw = np.stack([np.cos(theta) * np.sin(phi),
                    np.sin(theta) * np.sin(phi),
                    np.cos(phi) / math.sqrt(2.0)], axis=-1)
    raw /= sym_norm(raw)[..., None]
    xis = raw * mags[:, None, None]
    xis = xis.reshape(-1, NSYM)
    return np.vstack([np.zeros((1, NSYM)), xis])


def verify_growth(law: StressLaw, xis, c_cap=1e6):
    """Certify the coercivity and growth inequalities on a finite sample.

    For every sampled cell y and tensor xi the report exhibits

        h3:  A(y,xi) . xi >= c0 |xi|^p(y) - 1/c0
        h4:  |A(y,xi)|^p'(y) <= c1 |xi|^p(y) + c1

    returning the best certifiable constants: the largest feasible c0 and
    the smallest feasible c1 on the sample (a finite-range certificate, not
    a proof).  Fails when no c1 below `c_cap` exists or c0 degenerates.
    """
    if law.form != "power":
        raise NotImplementedError("growth certification only supports power laws in v1")
    xis = np.asarray(xis, dtype=float)
    a = law.a.ravel()
    p = law.p.ravel()
    # subsample cells when the medium is large; the bounds are monotone in (a, p)
    if a.size > 4096:
        idx = np.linspace(0, a.size - 1, 4096).astype(int)
        a, p = a[idx], p[idx]
    mag = sym_norm(xis)                                # (K,)
    lhs3 = a[:, None] * np.power(mag[None, :], p[:, None])   # A.xi = a|xi|^p
    pow_p = np.power(mag[None, :], p[:, None])
    pprime = p / (p - 1.0)
    lhs4 = np.power(a[:, None] * np.maximum(mag, 0.0)[None, :] ** (p[:, None] - 1.0),
                    pprime[:, None])

    def h3_holds(c0):
        return np.all(lhs3 >= c0 * pow_p - 1.0 / c0)

    def h4_holds(c1):
        return np.all(lhs4 <= c1 * pow_p + c1)

    # largest feasible c0 by bisection on a log scale
    lo, hi = 1e-6, c_cap
    if not h3_holds(lo):
        return GrowthReport(0.0, math.inf, False, xis.shape[0], math.inf, math.inf)
    if h3_holds(hi):
        c0 = hi
    else:
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if h3_holds(mid):
                lo = mid
            else:
                hi = mid
        c0 = lo

    # smallest feasible c1 the same way
    lo, hi = 1e-6, c_cap
    if not h4_holds(hi):
        return GrowthReport(c0, math.inf, False, xis.shape[0], 0.0, math.inf)
    if h4_holds(lo):
        c1 = lo
    else:
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if h4_holds(mid):
                hi = mid
            else:
                lo = mid
        c1 = hi

    margin3 = float(np.max(c0 * pow_p - 1.0 / c0 - lhs3))
    margin4 = float(np.max(lhs4 - c1 * pow_p - c1))
    return GrowthReport(float(c0), float(c1), True, xis.shape[0], margin3, margin4)


# ---------------------------------------------------------------------------
# Luxemburg norm
# ---------------------------------------------------------------------------

def modular(field, p_field, weights):
    """Weighted variable-exponent modular sum_y w(y) |field(y)|^p(y).

    `field` may be a scalar magnitude field or a symmetric-tensor field
    (trailing axis 3); tensors are reduced with the contraction norm.
    """
    field = np.asarray(field, dtype=float)
    if field.ndim == np.asarray(p_field).ndim + 1:
        field = sym_norm(field)
    return float(np.sum(weights * np.power(np.abs(field), p_field)))


def luxemburg_norm(field, p_field, weights, rtol=1e-10):
    """Luxemburg gauge norm inf{lam > 0 : modular(field/lam) <= 1}.

    Bisection on lam; the modular is continuous and strictly decreasing in
    lam for a nonzero field, so the bracket below always straddles 1.  The
    zero field returns 0.
    """
    field = np.asarray(field, dtype=float)
    p_field = np.asarray(p_field, dtype=float)
    if field.ndim == p_field.ndim + 1:
        field = sym_norm(field)
    field = np.abs(field)
    fmax = float(field.max(initial=0.0))
    if fmax == 0.0:
        return 0.0
    alpha = float(p_field.min())
    m = float(np.sum(weights)) if np.ndim(weights) else float(np.sum(np.ones_like(field) * weights))
    lo = fmax * m ** (-1.0 / alpha)
    hi = fmax * max(1.0, m ** (1.0 / alpha))
    # the analytic bracket holds for the exponent bounds; guard it anyway
    while modular(field / hi, p_field, weights) > 1.0:
        hi *= 2.0
    while modular(field / lo, p_field, weights) < 1.0:
        lo *= 0.5
        if lo < 1e-300:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if modular(field / mid, p_field, weights) > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# admissible-exponent gate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrowthConstants:
    """Exponent bounds plus the derived admissibility thresholds."""

    alpha: float
    beta: float
    dimension: int
    alpha0: float
    alpha_star: float
    c0: float = field(default=math.nan)
    c1: float = field(default=math.nan)


def alpha0_of(d: int) -> float:
    """Existence threshold alpha0(d) = max{(d+sqrt(3d^2+4d))/(d+2), 3d/(d+2)}."""
    return max((d + math.sqrt(3.0 * d * d + 4.0 * d)) / (d + 2), 3.0 * d / (d + 2))


def alpha_star_of(alpha: float, d: int) -> float:
    """Sobolev-type ceiling alpha* = alpha d/(d - alpha) for alpha < d, else +inf."""
    if alpha >= d:
        return math.inf
    return alpha * d / (d - alpha)


def exponent_gate(alpha: float, beta: float, d: int = 2) -> GrowthConstants:
    """Validate 1 < alpha <= beta, alpha >= alpha0(d) and beta < alpha*.

    Raises ConfigurationError naming the violated inequality together with
    the computed thresholds.
    """
    if d not in (2, 3):
        raise ConfigurationError(f"dimension must be 2 or 3, got {d}")
    if not (1.0 < alpha <= beta):
        raise ConfigurationError(
            f"exponent bounds must satisfy 1 < alpha <= beta, got alpha={alpha}, beta={beta}")
    a0 = alpha0_of(d)
    astar = alpha_star_of(alpha, d)
    if alpha < a0:
        raise ConfigurationError(
            f"alpha = {alpha} violates alpha >= alpha0({d}) = {a0:.6f}")
    if beta >= astar:
        raise ConfigurationError(
            f"beta = {beta} violates beta < alpha* = {astar:.6f} (alpha={alpha}, d={d})")
    return GrowthConstants(alpha=alpha, beta=beta, dimension=d, alpha0=a0, alpha_star=astar)
