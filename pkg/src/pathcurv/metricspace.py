"""Metric cone over a circle and quantitative parallelism for metric spaces.

The cone with link circumference l carries the metric dr^2 + r^2 dtheta^2
away from the apex r = 0; for l = 2*pi it is isometric to the flat plane.
Away from the apex the space is flat, so geodesics, parallel transport and
exponential displacement are all computed by developing (unrolling) a
neighbourhood of the relevant segment onto the plane.  Transport around the
apex picks up the holonomy deficit 2*pi - l.

The second half of the module is model-agnostic: parallelogram defect
reports for quadruples, parallel variations of piecewise geodesics built by
transporting a seed direction vertex to vertex, the norm-constancy check,
and a direction-scanned slope estimate for cylinder functions along a fixed
curve.  The same code runs on the cone and on the smooth models from the
geometry module, which is what makes the flat-agreement tests meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ManifoldModel, parse_model
from .pathspace import Partition, refine_partition

TWO_PI = 2.0 * math.pi


class ApexTooClose(ValueError):
    """An operation needed more clearance from the cone apex than it had."""


def angle_diff(a, b):
    """Circular difference a - b wrapped into (-pi, pi]."""
    return math.pi - (math.pi - (np.asarray(a) - np.asarray(b))) % TWO_PI


@dataclass(frozen=True)
class ConeSpace:
    """Cone over a circle of circumference ``length``; points are (r, theta).

    theta lives in [0, length); the apex is (0, 0).  Vector data is carried
    in the orthonormal polar frame (radial, angular) of the base point, so
    components are plain Euclidean 2-vectors.
    """

    length: float = TWO_PI

    kind = "cone"
    dim = 2

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("cone circumference must be positive")

    def point(self, r, theta=0.0):
        r = float(r)
        if r < 0:
            raise ValueError("radius must be nonnegative")
        return np.array([r, 0.0 if r == 0.0 else float(theta) % self.length])

    def wrap(self, theta):
        return np.asarray(theta) % self.length

    def separation(self, p, q):
        """Angular separation min(|dtheta|, l - |dtheta|), in [0, l/2]."""
        p, q = np.asarray(p, float), np.asarray(q, float)
        dth = np.abs(p[..., 1] - q[..., 1]) % self.length
        return np.minimum(dth, self.length - dth)

    def signed_delta(self, theta_from, theta_to):
        """Short-way angular displacement, in (-l/2, l/2]."""
        d = (np.asarray(theta_to) - np.asarray(theta_from)) % self.length
        return np.where(d > 0.5 * self.length, d - self.length, d)

    def distance(self, p, q):
        """Geodesic distance.

        Law of cosines in the development with the separation capped at pi;
        at separation >= pi the cap makes this r_p + r_q, the path through
        the apex.  The capped expression is continuous in the separation,
        which the through-apex branch stated as a separate case is not.
        """
        p, q = np.asarray(p, float), np.asarray(q, float)
        ang = np.minimum(self.separation(p, q), math.pi)
        rp, rq = p[..., 0], q[..., 0]
        # (rp-rq)^2 + 4 rp rq sin^2(ang/2) equals the law of cosines but
        # stays exact for tiny separations, where 1 - cos(ang) cancels
        half = np.sin(0.5 * ang)
        d2 = (rp - rq) ** 2 + 4.0 * rp * rq * half * half
        return np.sqrt(np.maximum(d2, 0.0))

    def transport(self, p, q, comps):
        """Parallel transport of polar-frame components along the minimizing
        geodesic from p to q.  The development is isometric along an
        apex-avoiding geodesic and the polar frame at the far end is rotated
        by the developed angle delta, so components rotate by -delta."""
        p, q = np.asarray(p, float), np.asarray(q, float)
        comps = np.asarray(comps, float)
        if np.any(p[..., 0] <= 0) or np.any(q[..., 0] <= 0):
            raise ApexTooClose("transport is undefined at the apex")
        delta = self.signed_delta(p[..., 1], q[..., 1])
        if np.any(np.abs(delta) >= math.pi):
            raise ApexTooClose(
                "transport needs an apex-avoiding geodesic "
                "(angular separation must stay below pi)")
        c, s = np.cos(delta), np.sin(delta)
        a, b = comps[..., 0], comps[..., 1]
        return np.stack([c * a + s * b, -s * a + c * b], axis=-1)

    def displace(self, p, comps):
        """Endpoint of the geodesic from p with initial polar components
        ``comps``: develop p to (r, 0), add, and fold the new plane point
        back onto the cone."""
        p = np.asarray(p, float)
        comps = np.asarray(comps, float)
        r = p[..., 0]
        x = r + comps[..., 0]
        y = comps[..., 1]
        hits_apex = (y == 0.0) & (comps[..., 0] < -r)
        if np.any(hits_apex):
            raise ApexTooClose("displacement would run through the apex")
        r_new = np.hypot(x, y)
        phi = np.arctan2(y, x)
        theta = (p[..., 1] + phi) % self.length
        return np.stack([r_new, np.where(r_new == 0.0, 0.0, theta)], axis=-1)

    def interpolate(self, p, q, frac):
        """Points at fractions ``frac`` along the minimizing geodesic."""
        p, q = np.asarray(p, float), np.asarray(q, float)
        frac = np.asarray(frac, float)
        sep = float(self.separation(p, q))
        if sep >= math.pi and p[0] > 0 and q[0] > 0:
            raise ApexTooClose("no apex-avoiding geodesic between the endpoints")
        delta = float(self.signed_delta(p[1], q[1]))
        a = np.array([p[0], 0.0])
        b = np.array([q[0] * math.cos(delta), q[0] * math.sin(delta)])
        pts = a + frac[..., None] * (b - a)
        r = np.hypot(pts[..., 0], pts[..., 1])
        phi = np.arctan2(pts[..., 1], pts[..., 0])
        theta = (p[1] + phi) % self.length
        return np.stack([r, np.where(r == 0.0, 0.0, theta)], axis=-1)

    def segment_clearance(self, p, q):
        """Distance from the apex to the developed segment p-q."""
        p, q = np.asarray(p, float), np.asarray(q, float)
        delta = float(self.signed_delta(p[1], q[1]))
        a = np.array([p[0], 0.0])
        b = np.array([q[0] * math.cos(delta), q[0] * math.sin(delta)])
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            return float(np.hypot(*a))
        t = min(1.0, max(0.0, float(-(a @ ab)) / denom))
        near = a + t * ab
        return float(np.hypot(*near))

    def embed_flat(self, p):
        """Plane coordinates of a point; isometric only when l = 2*pi."""
        p = np.asarray(p, float)
        return np.stack([p[..., 0] * np.cos(p[..., 1]),
                         p[..., 0] * np.sin(p[..., 1])], axis=-1)

    def spec_string(self):
        return "cone:l=%s" % repr(float(self.length))


def parse_space(spec: str):
    """Parse a model string, accepting cone:l=... alongside the smooth models."""
    text = spec.strip()
    if text.startswith("cone"):
        _, _, rest = text.partition(":")
        params = dict(item.split("=", 1) for item in rest.split(",") if item)
        unknown = set(params) - {"l"}
        if unknown:
            raise ValueError("unknown cone parameters: %s" % ", ".join(sorted(unknown)))
        return ConeSpace(length=float(params.get("l", TWO_PI)))
    return parse_model(text)


class _ConeOps:
    """Chain operations on the cone in polar-frame components."""

    def __init__(self, cone: ConeSpace):
        self.cone = cone
        self.vdim = 2

    def distance(self, p, q):
        return self.cone.distance(p, q)

    def transport(self, p, q, w):
        return self.cone.transport(p, q, w)

    def displace(self, p, w):
        return self.cone.displace(p, w)

    def interpolate(self, p, q, frac):
        return self.cone.interpolate(p, q, frac)

    def direction_set(self, p, count):
        ang = np.linspace(0.0, TWO_PI, count, endpoint=False)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def chain_clearance(self, vertices):
        verts = np.asarray(vertices, float)
        return min(self.cone.segment_clearance(verts[a], verts[a + 1])
                   for a in range(len(verts) - 1))


class _ManifoldOps:
    """Same chain operations on a smooth model, vectors in ambient coords."""

    def __init__(self, model: ManifoldModel):
        self.model = model
        self.vdim = model.dim

    def distance(self, p, q):
        return self.model.distance(p, q)

    def transport(self, p, q, w):
        return self.model.parallel_transport(p, q, w)

    def displace(self, p, w):
        return self.model.exp_map(p, w)

    def interpolate(self, p, q, frac):
        frac = np.asarray(frac, float)
        v = self.model.log_map(p, q)
        return self.displace(np.broadcast_to(p, frac.shape + np.shape(p)).copy(),
                             frac[..., None] * v)

    def direction_set(self, p, count):
        frame = self.model.canonical_frame(p)        # (ambient, dim)
        if self.vdim == 1:
            return frame[:, 0][None, :] * np.array([[1.0], [-1.0]])
        if self.vdim == 2:
            ang = np.linspace(0.0, TWO_PI, count, endpoint=False)
            comps = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        else:
            rng = np.random.Generator(np.random.Philox(20240801))
            comps = rng.standard_normal((count, self.vdim))
            comps /= np.linalg.norm(comps, axis=-1, keepdims=True)
        return np.einsum("ij,cj->ci", frame, comps)

    def chain_clearance(self, vertices):
        return math.inf


def _ops(space):
    if isinstance(space, ConeSpace):
        return _ConeOps(space)
    if isinstance(space, ManifoldModel):
        return _ManifoldOps(space)
    raise TypeError("unsupported space: %r" % (space,))


@dataclass(frozen=True)
class PiecewiseGeodesic:
    """Vertices at partition times, consecutive pairs joined by minimizing
    geodesics.  vertices[0] sits at time zero, vertices[a] at times[a-1]."""

    space: object
    partition: Partition
    vertices: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, float)
        if len(verts) != len(self.partition.times) + 1:
            raise ValueError("need one vertex per grid time including t=0")
        object.__setattr__(self, "vertices", verts)

    def grid(self):
        return self.partition.grid()


def geodesic_between(space, x, y, partition: Partition) -> PiecewiseGeodesic:
    """The partition approximation of the geodesic from x to y."""
    ops = _ops(space)
    grid = np.asarray(partition.grid())
    fracs = grid / grid[-1]
    verts = np.stack([ops.interpolate(x, y, f) for f in fracs])
    return PiecewiseGeodesic(space, partition, verts)


@dataclass(frozen=True)
class VariationSequence:
    """Displacements V_j(t_a) of a base chain along a transported direction
    field, one family per scale s_j (decreasing)."""

    space: object
    times: tuple
    base: np.ndarray        # (K+1, pdim)
    scales: tuple           # (J,)
    points: np.ndarray      # (J, K+1, pdim)
    directions: np.ndarray  # (K+1, vdim) unit field along the base

    @property
    def levels(self) -> int:
        return len(self.scales)


def _transport_chain(ops, vertices, direction):
    dirs = [np.asarray(direction, float)]
    for a in range(len(vertices) - 1):
        dirs.append(ops.transport(vertices[a], vertices[a + 1], dirs[-1]))
    return np.stack(dirs)


def _displaced_chain(ops, vertices, dirs, scale):
    return np.stack([ops.displace(vertices[a], scale * dirs[a])
                     for a in range(len(vertices))])


APEX_CLEARANCE_FACTOR = 10.0


def build_parallel_variation(space, geodesic: PiecewiseGeodesic,
                             initial_direction, scales,
                             enforce_margin: bool = True) -> VariationSequence:
    """Variation V_j(t_a) = displace(gamma(t_a), s_j * d(t_a)) where d is the
    unit direction field transported vertex to vertex from the first vertex.

    On the cone the chain must clear the apex by APEX_CLEARANCE_FACTOR times
    the largest scale; pass enforce_margin=False to probe inside that margin
    (reported, never asserted).
    """
    ops = _ops(space)
    verts = np.asarray(geodesic.vertices, float)
    scales = tuple(sorted((float(s) for s in scales), reverse=True))
    if not scales or scales[-1] <= 0:
        raise ValueError("scales must be positive")
    clearance = ops.chain_clearance(verts)
    needed = APEX_CLEARANCE_FACTOR * scales[0]
    if enforce_margin and clearance <= needed:
        raise ApexTooClose(
            "chain clears the apex by %g but scales up to %g need > %g"
            % (clearance, scales[0], needed))
    u = np.asarray(initial_direction, float)
    norm = float(np.linalg.norm(u))
    if norm == 0:
        raise ValueError("initial direction must be nonzero")
    dirs = _transport_chain(ops, verts, u / norm)
    points = np.stack([_displaced_chain(ops, verts, dirs, s) for s in scales])
    return VariationSequence(space, tuple(geodesic.grid()), verts,
                             scales, points, dirs)


def quadruples(variation: VariationSequence, j: int) -> np.ndarray:
    """Per-segment quadruples (gamma(t_a), gamma(t_{a+1}), V_j(t_{a+1}),
    V_j(t_a)), shaped (segments, 4, pdim)."""
    base, disp = variation.base, variation.points[j]
    return np.stack([base[:-1], base[1:], disp[1:], disp[:-1]], axis=1)


@dataclass(frozen=True)
class DefectReport:
    """Parallelogram-law defects of quadruples.

    e[..., j] = 2 d(x_{j+1},x_j)^2 + 2 d(x_j,x_{j-1})^2
                - d(x3,x1)^2 - d(x4,x2)^2 (indices mod 4), px and pv the
    side/variation perimeters, eps the least epsilon for which all five
    defect inequalities hold (zero when pv vanishes).
    """

    e: np.ndarray
    px: np.ndarray
    pv: np.ndarray
    eps: np.ndarray


def _safe_ratio(num, den):
    num, den = np.asarray(num, float), np.asarray(den, float)
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    pos = num > 0
    out = np.where(pos & (den > 0), num / np.where(den > 0, den, 1.0), out)
    out = np.where(pos & (den == 0), np.inf, out)
    return out


def epsilon_parallelogram_defect(space, quad) -> DefectReport:
    """Defect report for quadruples shaped (..., 4, pdim)."""
    ops = _ops(space)
    q = np.asarray(quad, float)
    x1, x2, x3, x4 = (q[..., 0, :], q[..., 1, :], q[..., 2, :], q[..., 3, :])
    d21 = np.asarray(ops.distance(x2, x1), float)
    d32 = np.asarray(ops.distance(x3, x2), float)
    d43 = np.asarray(ops.distance(x4, x3), float)
    d14 = np.asarray(ops.distance(x1, x4), float)
    diag = np.asarray(ops.distance(x3, x1), float) ** 2 \
        + np.asarray(ops.distance(x4, x2), float) ** 2
    e1 = 2 * d21 ** 2 + 2 * d14 ** 2 - diag
    e2 = 2 * d32 ** 2 + 2 * d21 ** 2 - diag
    e3 = 2 * d43 ** 2 + 2 * d32 ** 2 - diag
    e4 = 2 * d14 ** 2 + 2 * d43 ** 2 - diag
    px = np.maximum(d21, d43)
    pv = np.maximum(d14, d32)
    eps = np.max(np.stack([
        _safe_ratio(np.abs(e1 + e2), px * pv),
        _safe_ratio(np.abs(e3 + e4), px * pv),
        _safe_ratio(np.abs(e2 - e1), pv * pv),
        _safe_ratio(np.abs(e4 - e3), pv * pv),
        _safe_ratio(np.abs(e1 + e3), pv * pv),
    ]), axis=0)
    eps = np.where(pv == 0, 0.0, eps)
    return DefectReport(np.stack([e1, e2, e3, e4], axis=-1), px, pv, eps)


def variation_defects(variation: VariationSequence):
    """Defect reports per scale level, plus the side-normalized worst case
    eps_j / d(gamma(t_a), gamma(t_{a+1})) that must vanish for a parallel
    variation."""
    ops = _ops(variation.space)
    base = variation.base
    side = np.asarray(ops.distance(base[1:], base[:-1]), float)
    reports, normalized = [], []
    for j in range(variation.levels):
        rep = epsilon_parallelogram_defect(variation.space,
                                           quadruples(variation, j))
        reports.append(rep)
        normalized.append(float(np.max(_safe_ratio(rep.eps, side))))
    return reports, np.array(normalized)


def parallel_norm_check(variation: VariationSequence) -> np.ndarray:
    """sup over (s,t) of ||V_j(t)| - |V_j(s)|| / |V_j(s)| per level j, where
    |V_j(t)| = d(V_j(t), gamma(t))."""
    ops = _ops(variation.space)
    out = []
    for j in range(variation.levels):
        norms = np.asarray(ops.distance(variation.points[j], variation.base),
                           float)
        lo, hi = float(norms.min()), float(norms.max())
        out.append((hi - lo) / lo if lo > 0 else math.inf)
    return np.array(out)


def cone_holonomy(cone: ConeSpace, radius: float = 1.0,
                  segments: int | None = None, loops: int = 1) -> float:
    """Rotation angle picked up by transporting a frame around a regular
    polygonal loop about the apex, in (-pi, pi].  Equals 2*pi - l mod 2*pi,
    independent of radius and resolution."""
    if radius <= 0:
        raise ValueError("loop radius must be positive")
    if segments is None:
        segments = max(16, 4 * math.ceil(cone.length / math.pi))
    if cone.length / segments >= math.pi:
        raise ValueError("need more segments: each step must stay below pi")
    basis = np.eye(2)
    step = cone.length / segments
    for k in range(loops * segments):
        p = np.array([radius, (k * step) % cone.length])
        q = np.array([radius, ((k + 1) * step) % cone.length])
        basis = cone.transport(p[None, :], q[None, :], basis)
    return math.atan2(basis[0][1], basis[0][0])


@dataclass(frozen=True)
class SlopeEstimate:
    """Direction-maximized parallel derivative estimates over a partition
    ladder; the tail of ``values`` estimates the slope |d_s F|(gamma)."""

    space: object
    s: float
    meshes: tuple
    values: tuple
    direction: np.ndarray | None

    @property
    def estimate(self) -> float:
        return self.values[-1]


def _model_arg(space):
    return None if isinstance(space, ConeSpace) else space


def parallel_slope_estimate(space, F, gamma, s: float,
                            levels=range(3, 9), scale: float = 1e-3,
                            n_angles: int = 64, angle_tol: float = 1e-3,
                            enforce_margin: bool = True) -> SlopeEstimate:
    """Estimate the parallel slope of a cylinder function at time s along the
    curve ``gamma`` (a callable of time).

    For each dyadic partition (refined by the knots of F) the curve is
    replaced by its vertex chain, a unit direction at the first vertex with
    time >= s is transported forward, the chain tail is displaced at two
    scales, and |F(V) - F(gamma)| / scale is Richardson-extrapolated.  The
    maximum over a direction scan (doubled until stable) is reported per
    partition.
    """
    if s <= 0:
        raise ValueError("slope time must be positive")
    ops = _ops(space)
    T = F.horizon
    meshes, values = [], []
    best_dir = None
    for k in levels:
        part = refine_partition(Partition.uniform(T, 2 ** k), F.times)
        grid = np.asarray(part.grid())
        verts = np.stack([np.asarray(gamma(t), float) for t in grid])
        kidx = [part.index_of(t) for t in F.times]
        base_val = float(F.value(_model_arg(space), verts[kidx]))
        a0 = int(np.searchsorted(grid, s - 1e-12))
        meshes.append(T / 2 ** k)
        if a0 >= len(grid):
            values.append(0.0)
            continue
        a0 = max(a0, 1)
        chain = verts[a0:]
        if enforce_margin and ops.chain_clearance(verts) <= \
                APEX_CLEARANCE_FACTOR * scale:
            raise ApexTooClose("slope chain runs too close to the apex")
        count, prev = n_angles, None
        level_val, level_dir = 0.0, None
        while True:
            dirs = ops.direction_set(chain[0], count)
            cur, cur_dir = 0.0, None
            for u in dirs:
                d = _transport_chain(ops, chain, u)
                quot = []
                for sc in (scale, 0.5 * scale):
                    moved = verts.copy()
                    moved[a0:] = _displaced_chain(ops, chain, d, sc)
                    val = float(F.value(_model_arg(space), moved[kidx]))
                    quot.append(abs(val - base_val) / sc)
                rich = 2.0 * quot[1] - quot[0]
                if rich > cur:
                    cur, cur_dir = rich, u
            if cur > level_val:
                level_val, level_dir = cur, cur_dir
            done = (ops.vdim == 1 or count >= 8 * n_angles
                    or (prev is not None and abs(cur - prev) < angle_tol))
            if done:
                break
            prev, count = cur, 2 * count
        values.append(level_val)
        best_dir = level_dir if level_dir is not None else best_dir
    return SlopeEstimate(space, float(s), tuple(meshes), tuple(values),
                         best_dir)
