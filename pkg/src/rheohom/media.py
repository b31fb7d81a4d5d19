"""Generators for periodic realizations of the random media.

Every generator is a pure function of (parameters, seed): identical inputs
reproduce the identical realization bit for bit, and the geometry depends
only on the seed, not on the grid resolution, so one seed can be resampled
at several n for resolution studies.

Fields are cell-centered: a value per cell of an n x n torus grid, indexed
[i, j] with i along the first coordinate axis, and wrap periodically.
"""

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on the torus [0, L)^d, d = 2 in v1."""

    L: float
    n: int
    d: int = 2

    def __post_init__(self):
        if self.d != 2:
            raise NotImplementedError("only d = 2 grids are supported in v1")
        if self.n < 2:
            raise ValueError("grid needs at least 2 cells per side")
        if self.L <= 0:
            raise ValueError("side length must be positive")

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def cell_measure(self) -> float:
        return self.h ** self.d

    def cell_centers(self):
        """1D array of cell-center coordinates along one axis."""
        return (np.arange(self.n) + 0.5) * self.h

    def to_meta(self):
        return {"L": self.L, "n": self.n, "d": self.d}


@dataclass(frozen=True)
class PointSet:
    """Site positions inside the torus, coordinates in [0, L)."""

    positions: np.ndarray
    L: float
    resamples: int = 0

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.size and (pos.min() < 0.0 or pos.max() >= self.L):
            raise ValueError("positions must lie in [0, L)")
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class MediumRealization:
    """One sampled periodic realization: coefficient and exponent fields.

    `params` holds everything needed to regenerate the realization from
    metadata alone (generator kind, its arguments, the seed); stored field
    arrays are a cache of `regenerate(params, grid)`.
    """

    grid: TorusGrid
    a: np.ndarray
    p: np.ndarray
    seed: int
    provenance: str
    params: dict = dc_field(default_factory=dict)
    info: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        p = np.asarray(self.p, dtype=float)
        shape = (self.grid.n, self.grid.n)
        if a.shape != shape or p.shape != shape:
            raise ValueError(f"fields must have shape {shape}")
        if np.any(a < 1.0):
            raise ValueError("coefficient field must satisfy a >= 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "p", p)

    @property
    def alpha(self) -> float:
        return float(self.p.min())

    @property
    def beta(self) -> float:
        return float(self.p.max())


def _rng(seed, purpose: int):
    """One independent, reproducible stream per (seed, purpose)."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose,))))


# ---------------------------------------------------------------------------
# exponent laws (distributions of the per-site exponent marks)
# ---------------------------------------------------------------------------

def exponent_law_bounds(law: dict):
    kind = law["kind"]
    if kind == "point":
        return float(law["value"]), float(law["value"])
    if kind == "uniform":
        return float(law["lo"]), float(law["hi"])
    if kind == "choice":
        vals = [float(v) for v in law["values"]]
        return min(vals), max(vals)
    raise ValueError(f"unknown exponent law kind {kind!r}")


def sample_exponent_law(law: dict, rng, size):
    kind = law["kind"]
    if kind == "point":
        return np.full(size, float(law["value"]))
    if kind == "uniform":
        return rng.uniform(float(law["lo"]), float(law["hi"]), size=size)
    if kind == "choice":
        vals = np.asarray(law["values"], dtype=float)
        probs = law.get("probs")
        return rng.choice(vals, size=size, p=probs)
    raise ValueError(f"unknown exponent law kind {kind!r}")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def sample_poisson_points(grid: TorusGrid, intensity: float, seed: int) -> PointSet:
    """Poisson point process on the torus with the given rate per unit area.

    A draw with zero points is resampled with an incremented sub-seed (a
    Voronoi diagram needs at least one site); the resample count is kept.
    """
    if intensity <= 0:
        raise ValueError("intensity must be positive")
    mean = intensity * grid.L ** grid.d
    resamples = 0
    while True:
        rng = _rng(seed, resamples)
        count = rng.poisson(mean)
        if count > 0:
            positions = rng.uniform(0.0, grid.L, size=(count, grid.d))
            return PointSet(positions=positions, L=grid.L, resamples=resamples)
        resamples += 1


def voronoi_exponent_medium(points: PointSet, grid: TorusGrid, exponent_law: dict,
                            a_value: float = 1.0, seed: int = 0) -> MediumRealization:
    """Voronoi tessellation of the torus with i.i.d. exponent marks per cell.

    Each grid cell center is assigned the mark of its nearest site in the
    torus metric; distance ties go to the lowest site index.  The result is
    grid-sampled: exact polygon geometry is replaced by the cell-center
    scan, and the resolution error is the business of resolution studies.
    """
    if len(points) == 0:
        raise ValueError("Voronoi medium needs at least one site")
    lo, hi = exponent_law_bounds(exponent_law)
    if not (1.0 < lo <= hi):
        raise ValueError("exponent law must be supported in (1, inf)")
    marks = sample_exponent_law(exponent_law, _rng(seed, 1), len(points))
    centers = grid.cell_centers()
    sites = points.positions
    # squared torus distance, chunked over rows to bound memory
    nearest = np.empty((grid.n, grid.n), dtype=int)
    cy = centers[None, :, None]
    dy = np.abs(cy - sites[None, None, :, 1])
    dy = np.minimum(dy, grid.L - dy) ** 2
    for i, cx in enumerate(centers):
        dx = np.abs(cx - sites[:, 0])
        dx = np.minimum(dx, grid.L - dx) ** 2
        nearest[i] = np.argmin(dx[None, None, :] + dy, axis=-1)[0]
    p = marks[nearest]
    a = np.full_like(p, float(a_value))
    return MediumRealization(
        grid=grid, a=a, p=p, seed=seed, provenance="voronoi",
        params={"kind": "voronoi", "intensity": None, "exponent_law": dict(exponent_law),
                "a_value": float(a_value), "seed": int(seed)},
        info={"n_sites": len(points), "resamples": points.resamples})


def poisson_voronoi_medium(grid: TorusGrid, intensity: float, exponent_law: dict,
                           a_value: float = 1.0, seed: int = 0) -> MediumRealization:
    """Sample sites and build the Voronoi exponent medium in one call."""
    pts = sample_poisson_points(grid, intensity, seed)
    med = voronoi_exponent_medium(pts, grid, exponent_law, a_value=a_value, seed=seed)
    med.params["intensity"] = float(intensity)
    return med


def _bump_kernel(grid: TorusGrid, radius: float):
    """Quartic bump (1 - (r/R)^2)^2 on r <= R, normalized to unit mass."""
    centers = np.arange(grid.n) * grid.h
    dist = np.minimum(centers, grid.L - centers)
    rx = dist[:, None]
    ry = dist[None, :]
    r2 = (rx ** 2 + ry ** 2) / radius ** 2
    ker = np.where(r2 <= 1.0, (1.0 - r2) ** 2, 0.0)
    return ker / ker.sum()


def mollify_exponent(medium: MediumRealization, kernel_radius: float) -> MediumRealization:
    """Periodic convolution of the exponent field with a nonnegative bump.

    The kernel has unit discrete mass, so the output is a convex combination
    of input values and stays inside [min p, max p]; a is unchanged.
    """
    if kernel_radius < 0:
        raise ValueError("kernel radius must be nonnegative")
    if kernel_radius >= medium.grid.L / 2:
        raise ValueError("kernel support must fit inside the torus (radius < L/2)")
    if kernel_radius == 0.0 or kernel_radius < medium.grid.h:
        p_new = medium.p.copy()
    else:
        ker = _bump_kernel(medium.grid, kernel_radius)
        p_new = np.real(np.fft.ifft2(np.fft.fft2(medium.p) * np.fft.fft2(ker)))
        # roundoff guard: convexity bounds are exact in exact arithmetic
        p_new = np.clip(p_new, medium.p.min(), medium.p.max())
    params = dict(medium.params)
    params.update({"kind": "mollified", "base": dict(medium.params),
                   "kernel_radius": float(kernel_radius)})
    return MediumRealization(
        grid=medium.grid, a=medium.a.copy(), p=p_new, seed=medium.seed,
        provenance="mollified", params=params, info=dict(medium.info))


class _OffsetUnionFind:
    """Union-find over lattice cells tracking displacement to the root.

    Merging an edge whose endpoints already share a root with inconsistent
    displacements exposes a cycle with nonzero winding: the component wraps
    the torus along every axis where the mismatch is nonzero.
    """

    def __init__(self, count):
        self.parent = list(range(count))
        self.off = [(0, 0)] * count
        self.wrap = {}  # root -> [wrap_x, wrap_y]

    def find(self, i):
        path = []
        while self.parent[i] != i:
            path.append(i)
            i = self.parent[i]
        ox, oy = 0, 0
        for node in reversed(path):
            px, py = self.off[node]
            ox, oy = ox + px, oy + py
            self.off[node] = (ox, oy)
            self.parent[node] = i
        return i

    def union(self, a, b, dx, dy):
        ra = self.find(a)
        rb = self.find(b)
        oax, oay = self.off[a] if a != ra else (0, 0)
        obx, oby = self.off[b] if b != rb else (0, 0)
        # pos(a) = pos(ra) + off[a]; enforcing pos(b) = pos(a) + (dx, dy)
        if ra == rb:
            wx = oax + dx - obx
            wy = oay + dy - oby
            if wx or wy:
                flags = self.wrap.setdefault(ra, [False, False])
                flags[0] |= wx != 0
                flags[1] |= wy != 0
            return
        self.parent[rb] = ra
        self.off[rb] = (oax + dx - obx, oay + dy - oby)
        if rb in self.wrap:
            flags = self.wrap.setdefault(ra, [False, False])
            old = self.wrap.pop(rb)
            flags[0] |= old[0]
            flags[1] |= old[1]


def _wrapping_cluster(occupied):
    """Largest occupied component that wraps the torus in some axis.

    Returns (mask, n_wrapping_components); mask is all-False when nothing
    wraps, a legal outcome recorded by the caller.
    """
    m = occupied.shape[0]
    uf = _OffsetUnionFind(m * m)
    idx = lambda i, j: i * m + j
    occ = occupied.astype(bool)
    for i in range(m):
        for j in range(m):
            if not occ[i, j]:
                continue
            i2 = (i + 1) % m
            j2 = (j + 1) % m
            if occ[i2, j]:
                uf.union(idx(i, j), idx(i2, j), 1, 0)
            if occ[i, j2]:
                uf.union(idx(i, j), idx(i, j2), 0, 1)
    roots = {}
    for i in range(m):
        for j in range(m):
            if occ[i, j]:
                r = uf.find(idx(i, j))
                roots.setdefault(r, []).append((i, j))
    wrapping = [r for r in roots if r in uf.wrap]
    if not wrapping:
        return np.zeros_like(occ), 0
    best = max(wrapping, key=lambda r: len(roots[r]))
    mask = np.zeros_like(occ)
    cells = roots[best]
    mask[tuple(np.array(cells).T)] = True
    return mask, len(wrapping)


def bernoulli_percolation_medium(grid: TorusGrid, q: float, alpha: float, beta: float,
                                 seed: int = 0) -> MediumRealization:
    """Site percolation on the unit checkerboard, exponent raised on the cluster.

    Unit lattice cells carry i.i.d. Bernoulli(q) occupation marks; the
    finite-volume proxy for the infinite cluster is the largest occupied
    component that wraps the torus in at least one axis.  a = 1 + occupation,
    p = alpha + (beta - alpha) on the cluster.  A realization without a
    wrapping cluster is legal and recorded in `info`.
    """
    if not (0.0 <= q <= 1.0):
        raise ValueError("occupation probability must lie in [0, 1]")
    if not (1.0 < alpha <= beta):
        raise ValueError("need 1 < alpha <= beta")
    m = int(round(grid.L))
    if abs(grid.L - m) > 1e-12 or m < 1:
        raise ValueError("percolation needs an integer torus side (unit cells)")
    if grid.n % m != 0:
        raise ValueError("grid cells must align with unit lattice cells (n divisible by L)")
    zeta = (_rng(seed, 2).random((m, m)) < q)
    cluster, n_wrapping = _wrapping_cluster(zeta)
    if n_wrapping > 1 and q >= 0.7:
        log.warning("percolation seed %d: %d wrapping components at q=%.2f; "
                    "using the largest", seed, n_wrapping, q)
    rep = grid.n // m
    a = 1.0 + np.kron(zeta, np.ones((rep, rep)))
    p = alpha + (beta - alpha) * np.kron(cluster, np.ones((rep, rep)))
    return MediumRealization(
        grid=grid, a=a, p=p, seed=seed, provenance="percolation",
        params={"kind": "percolation", "q": float(q), "alpha": float(alpha),
                "beta": float(beta), "seed": int(seed)},
        info={"has_wrapping_cluster": bool(n_wrapping > 0),
              "n_wrapping_components": int(n_wrapping),
              "cluster_fraction": float(cluster.mean()),
              "occupied_fraction": float(zeta.mean())})


def laminate_medium(grid: TorusGrid, axis: int, layer_values_a, layer_values_p,
                    seed: int = 0) -> MediumRealization:
    """Layered medium, piecewise constant in one axis: the analytic test case."""
    la = np.asarray(layer_values_a, dtype=float)
    lp = np.asarray(layer_values_p, dtype=float)
    if la.shape != lp.shape or la.ndim != 1:
        raise ValueError("layer value lists must be 1D and of equal length")
    k = la.size
    if grid.n % k != 0:
        raise ValueError(f"{k} layers do not divide n = {grid.n} evenly")
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    rep = grid.n // k
    prof_a = np.repeat(la, rep)
    prof_p = np.repeat(lp, rep)
    if axis == 0:
        a = np.tile(prof_a[:, None], (1, grid.n))
        p = np.tile(prof_p[:, None], (1, grid.n))
    else:
        a = np.tile(prof_a[None, :], (grid.n, 1))
        p = np.tile(prof_p[None, :], (grid.n, 1))
    return MediumRealization(
        grid=grid, a=a, p=p, seed=seed, provenance="laminate",
        params={"kind": "laminate", "axis": int(axis),
                "layer_values_a": [float(v) for v in la],
                "layer_values_p": [float(v) for v in lp], "seed": int(seed)})


def constant_medium(grid: TorusGrid, a_value: float = 1.0, p_value: float = 2.0,
                    seed: int = 0) -> MediumRealization:
    shape = (grid.n, grid.n)
    return MediumRealization(
        grid=grid, a=np.full(shape, float(a_value)), p=np.full(shape, float(p_value)),
        seed=seed, provenance="constant",
        params={"kind": "constant", "a_value": float(a_value),
                "p_value": float(p_value), "seed": int(seed)})


def checkerboard_medium(grid: TorusGrid, a_values=(1.0, 2.0), p_values=(2.0, 2.0),
                        seed: int = 0) -> MediumRealization:
    """Deterministic two-phase checkerboard on the unit lattice."""
    m = int(round(grid.L))
    if abs(grid.L - m) > 1e-12 or grid.n % m != 0:
        raise ValueError("checkerboard needs integer L with n divisible by L")
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    phase = (ii + jj) % 2
    rep = grid.n // m
    phase = np.kron(phase, np.ones((rep, rep), dtype=int))
    a = np.where(phase == 0, float(a_values[0]), float(a_values[1]))
    p = np.where(phase == 0, float(p_values[0]), float(p_values[1]))
    return MediumRealization(
        grid=grid, a=a, p=p, seed=seed, provenance="checkerboard",
        params={"kind": "checkerboard", "a_values": [float(v) for v in a_values],
                "p_values": [float(v) for v in p_values], "seed": int(seed)})


def regenerate(params: dict, grid: TorusGrid) -> MediumRealization:
    """Rebuild a realization from its metadata (see MediumRealization.params)."""
    kind = params["kind"]
    if kind == "voronoi":
        return poisson_voronoi_medium(grid, params["intensity"], params["exponent_law"],
                                      a_value=params["a_value"], seed=params["seed"])
    if kind == "percolation":
        return bernoulli_percolation_medium(grid, params["q"], params["alpha"],
                                            params["beta"], seed=params["seed"])
    if kind == "laminate":
        return laminate_medium(grid, params["axis"], params["layer_values_a"],
                               params["layer_values_p"], seed=params["seed"])
    if kind == "constant":
        return constant_medium(grid, params["a_value"], params["p_value"],
                               seed=params["seed"])
    if kind == "checkerboard":
        return checkerboard_medium(grid, params["a_values"], params["p_values"],
                                   seed=params["seed"])
    if kind == "mollified":
        base = regenerate(params["base"], grid)
        return mollify_exponent(base, params["kernel_radius"])
    raise ValueError(f"unknown medium kind {kind!r}")


# ---------------------------------------------------------------------------
# ergodic-sampling diagnostic
# ---------------------------------------------------------------------------

@dataclass
class BirkhoffReport:
    """Window-average vs ensemble-average comparison of the p-modular."""

    ensemble_average: float
    window_sizes: list
    window_counts: list
    window_means: list       # mean of window averages per size
    discrepancy_rms: list    # rms of (window average - ensemble average)
    discrepancy_se: list     # standard error of that rms estimate
    mean_se: list            # standard error of the mean window average

    def to_records(self):
        recs = []
        for k, s in enumerate(self.window_sizes):
            recs.append({
                "window_size": s,
                "n_windows": self.window_counts[k],
                "window_mean": self.window_means[k],
                "ensemble_average": self.ensemble_average,
                "discrepancy_rms": self.discrepancy_rms[k],
                "discrepancy_se": self.discrepancy_se[k],
                "mean_se": self.mean_se[k],
            })
        return recs


def birkhoff_identity_check(media, phi=None, window_sizes=None) -> BirkhoffReport:
    """Compare spatial window averages of |phi(p,a)|^p with the ensemble average.

    phi maps the (p, a) fields to a scalar field (default: phi = p).  For
    each window side s dividing L, the torus is split into disjoint square
    windows; the realization-and-cell average over the whole ensemble
    estimates the ensemble side of the identity.
    """
    if len(media) < 2:
        raise ValueError("ensemble needs at least 2 realizations")
    if phi is None:
        phi = lambda p, a: p
    grid = media[0].grid
    if window_sizes is None:
        window_sizes = [grid.L]
    fields = []
    for med in media:
        if med.grid != grid:
            raise ValueError("all realizations must share one grid")
        fields.append(np.power(np.abs(phi(med.p, med.a)), med.p))
    stack = np.stack(fields)
    ens_avg = float(stack.mean())

    sizes, counts, means, rmses, rms_ses, mean_ses = [], [], [], [], [], []
    for s in window_sizes:
        k = s * grid.n / grid.L
        if abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ValueError(f"window size {s} must be a multiple of the cell size")
        k = int(round(k))
        nb = grid.n // k
        trimmed = stack[:, :nb * k, :nb * k]
        blocks = trimmed.reshape(len(media), nb, k, nb, k).mean(axis=(2, 4))
        vals = blocks.reshape(-1)
        dev = vals - ens_avg
        rms = float(np.sqrt(np.mean(dev ** 2)))
        m = vals.size
        sizes.append(float(s))
        counts.append(int(m))
        means.append(float(vals.mean()))
        rmses.append(rms)
        # normal-theory SE of an rms estimate
        rms_ses.append(float(rms / math.sqrt(max(2 * (m - 1), 1))))
        mean_ses.append(float(vals.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0)
    return BirkhoffReport(ensemble_average=ens_avg, window_sizes=sizes,
                          window_counts=counts, window_means=means,
                          discrepancy_rms=rmses, discrepancy_se=rms_ses,
                          mean_se=mean_ses)
