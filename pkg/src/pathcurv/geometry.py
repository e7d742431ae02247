"""Model geometries: weighted Euclidean space, the flat circle, the round 2-sphere.

Every operation is vectorized over leading axes. Points are coordinate rows:
length-n vectors for Euclidean space, a single angle in [0, l) for the circle,
and ambient 3-vectors of norm r for the sphere. Tangent vectors always live in
ambient coordinates; canonical frames give an orthonormal basis per point so
that path-space machinery can move between ambient vectors and frame
components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class CutLocusError(ValueError):
    """Log map or transport requested across (or too near) the cut locus."""


class UnsupportedFamilyError(ValueError):
    """No closed-form heat flow for this function family on this model."""


class NonPositiveTimeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar test functions with closed-form heat flow where the kernel is exact


@dataclass(frozen=True)
class ScalarFamily:
    """A scalar function u on the model, closed under heat flow when possible.

    kind:
      linear  coef * x[axis] + offset   (on the sphere: ambient coordinate)
      sin     coef * sin(freq * x[axis] + phase) + offset
      exp     coef * exp(freq * x[axis]) + offset
      quad    coef * x[axis]**2 + offset
    """

    kind: str
    axis: int = 0
    coef: float = 1.0
    freq: float = 1.0
    phase: float = 0.0
    offset: float = 0.0

    def value(self, model, pts):
        x = np.asarray(pts, dtype=float)[..., self.axis]
        if self.kind == "linear":
            return self.coef * x + self.offset
        if self.kind == "sin":
            return self.coef * np.sin(self.freq * x + self.phase) + self.offset
        if self.kind == "exp":
            return self.coef * np.exp(self.freq * x) + self.offset
        if self.kind == "quad":
            return self.coef * x * x + self.offset
        raise UnsupportedFamilyError(self.kind)

    def grad_ambient(self, model, pts):
        """Riemannian gradient as an ambient vector field."""
        pts = np.asarray(pts, dtype=float)
        x = pts[..., self.axis]
        if self.kind == "linear":
            d = np.full_like(x, self.coef)
        elif self.kind == "sin":
            d = self.coef * self.freq * np.cos(self.freq * x + self.phase)
        elif self.kind == "exp":
            d = self.coef * self.freq * np.exp(self.freq * x)
        elif self.kind == "quad":
            d = 2.0 * self.coef * x
        else:
            raise UnsupportedFamilyError(self.kind)
        g = np.zeros_like(pts)
        g[..., self.axis] = d
        if isinstance(model, Sphere2):
            # project the ambient direction onto the tangent plane
            xh = pts / model.radius
            g = g - (np.sum(g * xh, axis=-1, keepdims=True)) * xh
        return g

    def lipschitz(self) -> float:
        if self.kind == "linear":
            return abs(self.coef)
        if self.kind == "sin":
            return abs(self.coef * self.freq)
        raise ValueError("no global Lipschitz bound for kind %r" % self.kind)


def heat_flow_closed_form(model, family: ScalarFamily, t: float) -> ScalarFamily:
    """Analytic H_t applied to a ScalarFamily; raises when no formula exists.

    Exact for the weighted Euclidean models (Gaussian/Mehler kernels) and for
    commensurate sine modes on the circle. The sphere has no shipped family.
    """
    if t < 0:
        raise NonPositiveTimeError("heat flow needs t >= 0, got %r" % t)
    if t == 0:
        return family
    if isinstance(model, EuclideanWeighted):
        kf = model.kappa_f
        if kf == 0.0:
            if family.kind == "linear":
                return family
            if family.kind == "sin":
                return replace(family, coef=family.coef * math.exp(-family.freq ** 2 * t / 2))
            if family.kind == "exp":
                return replace(family, coef=family.coef * math.exp(family.freq ** 2 * t / 2))
            if family.kind == "quad":
                return replace(family, offset=family.offset + family.coef * t)
            raise UnsupportedFamilyError(family.kind)
        a = math.exp(-kf * t / 2)
        s2 = (1.0 - math.exp(-kf * t)) / kf
        if family.kind == "linear":
            return replace(family, coef=family.coef * a)
        if family.kind == "sin":
            return replace(family, coef=family.coef * math.exp(-family.freq ** 2 * s2 / 2),
                           freq=family.freq * a)
        if family.kind == "exp":
            return replace(family, coef=family.coef * math.exp(family.freq ** 2 * s2 / 2),
                           freq=family.freq * a)
        if family.kind == "quad":
            return replace(family, coef=family.coef * a * a,
                           offset=family.offset + family.coef * s2)
        raise UnsupportedFamilyError(family.kind)
    if isinstance(model, Circle):
        if family.kind == "sin":
            k = family.freq * model.length / (2 * math.pi)
            if abs(k - round(k)) > 1e-9:
                raise UnsupportedFamilyError(
                    "circle sine frequency %r is not commensurate" % family.freq)
            return replace(family, coef=family.coef * math.exp(-family.freq ** 2 * t / 2))
        raise UnsupportedFamilyError(family.kind)
    raise UnsupportedFamilyError("no closed-form heat flow on %s" % type(model).__name__)


# ---------------------------------------------------------------------------
# models


class ManifoldModel:
    """Common interface; see subclasses for the concrete spaces."""

    kind = "abstract"
    dim = 0
    ambient = 0
    exact_kernel = False
    be_constant = 0.0   # c with Ric + Hess f = c * g
    kappa_f = 0.0       # weight strength, nonzero only for EuclideanWeighted

    # cut-locus rejection threshold on knot-to-knot distances (None = no cut locus)
    cut_threshold = None

    def distance(self, x, y):
        raise NotImplementedError

    def exp_map(self, x, v):
        raise NotImplementedError

    def log_map(self, x, y):
        raise NotImplementedError

    def parallel_transport(self, x, y, w):
        """Transport tangent w at x to y along the minimizing geodesic."""
        raise NotImplementedError

    def canonical_frame(self, x):
        raise NotImplementedError

    def bakry_emery(self, x, v):
        """(Ric + Hess f)(v, v) at x; all shipped models have tensor c * g."""
        v = np.asarray(v, dtype=float)
        return self.be_constant * np.sum(v * v, axis=-1)

    def grad_f(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def heat_kernel_step(self, x, t, rng):
        """One transition of duration t from (a batch of) points x."""
        raise NotImplementedError

    def heat_kernel_step_frame(self, x, t, rng, frame):
        """One transition that also transports an orthonormal frame.

        frame has shape (..., ambient, dim). The canonical frames of the
        flat models are globally parallel, so the default is the identity;
        curved models must transport along the walk itself, because the
        chord transport between distant skeleton knots misses the holonomy
        of the area swept by the path.
        """
        return self.heat_kernel_step(x, t, rng), frame

    def without_weight(self):
        return self

    def spec_string(self) -> str:
        raise NotImplementedError


class EuclideanWeighted(ManifoldModel):
    """R^n with weight f(x) = kappa_f |x|^2 / 2 (kappa_f = 0: plain flat space).

    The weighted diffusion is the Ornstein-Uhlenbeck process with exact
    transitions mean e^{-kappa_f t/2} x and variance (1 - e^{-kappa_f t}) / kappa_f.
    """

    kind = "euclidean"
    exact_kernel = True

    def __init__(self, n=1, kappa_f=0.0):
        if n < 1:
            raise ValueError("dimension must be >= 1")
        if kappa_f < 0:
            raise ValueError("kappa_f must be >= 0")
        self.dim = n
        self.ambient = n
        self.kappa_f = float(kappa_f)
        self.be_constant = float(kappa_f)

    def distance(self, x, y):
        x, y = np.asarray(x, float), np.asarray(y, float)
        return np.linalg.norm(y - x, axis=-1)

    def exp_map(self, x, v):
        return np.asarray(x, float) + np.asarray(v, float)

    def log_map(self, x, y):
        return np.asarray(y, float) - np.asarray(x, float)

    def parallel_transport(self, x, y, w):
        return np.array(w, dtype=float, copy=True)

    def canonical_frame(self, x):
        x = np.asarray(x, float)
        eye = np.eye(self.dim)
        return np.broadcast_to(eye, x.shape[:-1] + (self.dim, self.dim)).copy()

    def grad_f(self, x):
        return self.kappa_f * np.asarray(x, dtype=float)

    def heat_kernel_step(self, x, t, rng):
        if t <= 0:
            raise NonPositiveTimeError("transition time must be positive")
        x = np.asarray(x, dtype=float)
        z = rng.standard_normal(x.shape)
        if self.kappa_f == 0.0:
            return x + math.sqrt(t) * z
        a = math.exp(-self.kappa_f * t / 2)
        s = math.sqrt((1.0 - math.exp(-self.kappa_f * t)) / self.kappa_f)
        return a * x + s * z

    def without_weight(self):
        return EuclideanWeighted(self.dim, 0.0)

    def spec_string(self):
        name = "ou" if self.kappa_f > 0 else "euclidean"
        return "%s:n=%d,kf=%s" % (name, self.dim, _fmt(self.kappa_f))


class Circle(ManifoldModel):
    """Flat circle of circumference l; points are angles in [0, l)."""

    kind = "circle"
    dim = 1
    ambient = 1
    exact_kernel = True
    be_constant = 0.0

    def __init__(self, length=2 * math.pi):
        if length <= 0:
            raise ValueError("circumference must be positive")
        self.length = float(length)

    def _wrap(self, theta):
        return np.mod(theta, self.length)

    def distance(self, x, y):
        d = np.abs(np.asarray(y, float)[..., 0] - np.asarray(x, float)[..., 0])
        d = np.mod(d, self.length)
        return np.minimum(d, self.length - d)

    def exp_map(self, x, v):
        return self._wrap(np.asarray(x, float) + np.asarray(v, float))

    def log_map(self, x, y):
        d = np.mod(np.asarray(y, float) - np.asarray(x, float), self.length)
        return np.where(d <= self.length / 2, d, d - self.length)

    def parallel_transport(self, x, y, w):
        return np.array(w, dtype=float, copy=True)

    def canonical_frame(self, x):
        x = np.asarray(x, float)
        return np.ones(x.shape[:-1] + (1, 1))

    def heat_kernel_step(self, x, t, rng):
        if t <= 0:
            raise NonPositiveTimeError("transition time must be positive")
        x = np.asarray(x, dtype=float)
        return self._wrap(x + math.sqrt(t) * rng.standard_normal(x.shape))

    def spec_string(self):
        return "circle:l=%s" % _fmt(self.length)


class Sphere2(ManifoldModel):
    """Round 2-sphere of radius r embedded in R^3.

    The kernel is not exact: transitions are geodesic random walks with
    ceil(substeps * t) Gaussian tangent steps, giving O(1/substeps) weak bias.
    """

    kind = "sphere2"
    dim = 2
    ambient = 3
    exact_kernel = False

    def __init__(self, radius=1.0, substeps=64):
        if radius <= 0:
            raise ValueError("radius must be positive")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.radius = float(radius)
        self.substeps = int(substeps)
        self.be_constant = 1.0 / self.radius ** 2   # Ric = (n-1)/r^2 g, n = 2
        self.delta_cut = 1e-6 * math.pi * self.radius
        self.cut_threshold = math.pi * self.radius - self.delta_cut

    def _check_on_sphere(self, x):
        r = np.linalg.norm(x, axis=-1)
        if not np.allclose(r, self.radius, rtol=1e-8, atol=1e-8):
            raise ValueError("point not on the sphere of radius %r" % self.radius)

    def distance(self, x, y):
        x, y = np.asarray(x, float), np.asarray(y, float)
        cross = np.linalg.norm(np.cross(x, y), axis=-1)
        dot = np.sum(x * y, axis=-1)
        return self.radius * np.arctan2(cross / self.radius ** 2, dot / self.radius ** 2)

    def exp_map(self, x, v):
        x, v = np.asarray(x, float), np.asarray(v, float)
        theta = np.linalg.norm(v, axis=-1, keepdims=True) / self.radius
        small = theta < 1e-300
        direction = np.where(small, 0.0, v / np.where(small, 1.0, theta * self.radius))
        y = np.cos(theta) * x + np.sin(theta) * self.radius * direction
        # renormalize against floating-point drift
        return y * (self.radius / np.linalg.norm(y, axis=-1, keepdims=True))

    def log_map(self, x, y):
        x, y = np.asarray(x, float), np.asarray(y, float)
        d = self.distance(x, y)
        if np.any(d >= self.cut_threshold):
            raise CutLocusError("log map within %g of the cut locus" % self.delta_cut)
        u = y - (np.sum(x * y, axis=-1, keepdims=True) / self.radius ** 2) * x
        norm_u = np.linalg.norm(u, axis=-1, keepdims=True)
        scale = np.where(norm_u < 1e-300, 0.0, d[..., None] / np.where(norm_u < 1e-300, 1.0, norm_u))
        return scale * u

    def parallel_transport(self, x, y, w):
        x, y, w = np.asarray(x, float), np.asarray(y, float), np.asarray(w, float)
        if np.any(self.distance(x, y) >= self.cut_threshold):
            raise CutLocusError("transport within %g of the cut locus" % self.delta_cut)
        a = x / self.radius
        b = y / self.radius
        c = np.sum(a * b, axis=-1, keepdims=True)
        ab = a + b
        return w - (np.sum(ab * w, axis=-1, keepdims=True) / (1.0 + c)) * ab \
            + 2.0 * np.sum(a * w, axis=-1, keepdims=True) * b

    def canonical_frame(self, x):
        """Fixed smooth frame away from the poles, deterministic fallback there."""
        x = np.asarray(x, float)
        xh = x / self.radius
        ez = np.zeros_like(xh)
        ez[..., 2] = 1.0
        f1 = np.cross(ez, xh)
        n1 = np.linalg.norm(f1, axis=-1, keepdims=True)
        polar = n1[..., 0] < 1e-12
        f1 = np.where(n1 < 1e-12, 0.0, f1 / np.where(n1 < 1e-12, 1.0, n1))
        if np.any(polar):
            ex = np.zeros_like(xh)
            ex[..., 0] = 1.0
            f1 = np.where(polar[..., None], ex, f1)
        f2 = np.cross(xh, f1)
        return np.stack([f1, f2], axis=-1)

    def heat_kernel_step(self, x, t, rng):
        if t <= 0:
            raise NonPositiveTimeError("transition time must be positive")
        x = np.asarray(x, dtype=float)
        m = max(1, math.ceil(self.substeps * t))
        h = t / m
        cur = x
        for _ in range(m):
            frame = self.canonical_frame(cur)
            z = math.sqrt(h) * rng.standard_normal(cur.shape[:-1] + (2,))
            v = np.einsum("...ij,...j->...i", frame, z)
            cur = self.exp_map(cur, v)
        return cur

    def heat_kernel_step_frame(self, x, t, rng, frame):
        # same walk and draw order as heat_kernel_step, so positions are
        # bit-identical; the carried frame is transported substep by substep
        if t <= 0:
            raise NonPositiveTimeError("transition time must be positive")
        x = np.asarray(x, dtype=float)
        fr = np.array(frame, dtype=float)
        m = max(1, math.ceil(self.substeps * t))
        h = t / m
        cur = x
        for _ in range(m):
            cf = self.canonical_frame(cur)
            z = math.sqrt(h) * rng.standard_normal(cur.shape[:-1] + (2,))
            v = np.einsum("...ij,...j->...i", cf, z)
            nxt = self.exp_map(cur, v)
            w = np.moveaxis(fr, -1, -2)
            moved = self.parallel_transport(cur[..., None, :], nxt[..., None, :], w)
            fr = np.moveaxis(moved, -2, -1)
            cur = nxt
        return cur, fr

    def spec_string(self):
        return "sphere2:r=%s,substeps=%d" % (_fmt(self.radius), self.substeps)


def _fmt(x: float) -> str:
    return repr(float(x))


def parse_model(spec: str) -> ManifoldModel:
    """Parse model strings like 'ou:n=1,kf=1' or 'sphere2:r=1,substeps=64'."""
    name, _, rest = spec.partition(":")
    name = name.strip().lower()
    params = {}
    if rest.strip():
        for chunk in rest.split(","):
            k, eq, v = chunk.partition("=")
            if not eq:
                raise ValueError("malformed model parameter %r in %r" % (chunk, spec))
            params[k.strip()] = v.strip()
    try:
        if name in ("euclidean", "ou"):
            n = int(params.pop("n", "1"))
            kf = float(params.pop("kf", "0"))
            if name == "ou" and kf <= 0:
                raise ValueError("ou model needs kf > 0")
            model = EuclideanWeighted(n, kf)
        elif name == "circle":
            model = Circle(float(params.pop("l")))
        elif name == "sphere2":
            model = Sphere2(float(params.pop("r", "1")),
                            int(params.pop("substeps", "64")))
        else:
            raise ValueError("unknown model %r" % name)
    except KeyError as exc:
        raise ValueError("missing model parameter %s in %r" % (exc, spec)) from exc
    if params:
        raise ValueError("unknown model parameters %s in %r" % (sorted(params), spec))
    return model
