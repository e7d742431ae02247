"""Cylinder functions on path space and their parallel gradients.

A cylinder function reads the path through finitely many knots,
F(gamma) = u(gamma(t_1), ..., gamma(t_k)). The workhorse representation is
the separable sum u = sum_j fam_j(y_j) of scalar families per knot: it has
analytic knot gradients and, on models with exact kernels and closed-form
heat flow, analytic conditional projections.

The s-indexed gradient of F along a path is piecewise constant: for
s in (t_{m-1}, t_m] it equals the suffix sum of the transported knot
gradients. All gradient bookkeeping happens in components of the frame
transported along the path, so comparing gradients at different knots is a
plain vector operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import montecarlo as mc
from . import pathspace as ps
from .geometry import (EuclideanWeighted, ManifoldModel, ScalarFamily, Sphere2,
                       UnsupportedFamilyError, heat_flow_closed_form)


@dataclass
class CylinderFunction:
    times: tuple
    families: tuple | None = None   # len == len(times): separable sum
    fn: object = None               # fallback: (..., k, ambient) -> (...)
    grad_fn: object = None          # fallback: (..., k, ambient) -> (..., k, ambient)
    name: str = ""
    lip: float | None = None        # bound on sup_s |grad_s F| when known
    aligned: bool = False           # transported knot gradients share one direction a.s.
    fd_step: float = 1e-4

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if any(t <= 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("cylinder knot times must be positive and increasing")
        self.times = ts
        if self.families is not None and len(self.families) != len(ts):
            raise ValueError("need one scalar family per knot")

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def value(self, model, knot_points):
        """Evaluate at knot points shaped (..., k, ambient)."""
        pts = np.asarray(knot_points, dtype=float)
        if self.families is not None:
            total = 0.0
            for j, fam in enumerate(self.families):
                total = total + fam.value(model, pts[..., j, :])
            return total
        return self.fn(pts)

    def knot_grads(self, model, knot_points):
        """Riemannian gradients per knot as ambient vectors, (..., k, ambient)."""
        pts = np.asarray(knot_points, dtype=float)
        if self.families is not None:
            return np.stack([fam.grad_ambient(model, pts[..., j, :])
                             for j, fam in enumerate(self.families)], axis=-2)
        if self.grad_fn is not None:
            return self.grad_fn(pts)
        return self._fd_grads(model, pts)

    def _fd_grads(self, model, pts):
        k = len(self.times)
        out = np.zeros_like(pts)
        for j in range(k):
            y = pts[..., j, :]
            frame = model.canonical_frame(y)        # (..., amb, dim)
            eta = self.fd_step * (1.0 + np.linalg.norm(y, axis=-1, keepdims=True))
            comps = []
            for i in range(model.dim):
                d = frame[..., :, i]
                up, dn = pts.copy(), pts.copy()
                up[..., j, :] = model.exp_map(y, eta * d)
                dn[..., j, :] = model.exp_map(y, -eta * d)
                comps.append((self.value(model, up) - self.value(model, dn))
                             / (2.0 * eta[..., 0]))
            comps = np.stack(comps, axis=-1)        # (..., dim)
            out[..., j, :] = np.einsum("...ij,...j->...i", frame, comps)
        return out


def separable(model, times, families, name="", aligned=None, lip=None) -> CylinderFunction:
    fams = tuple(families)
    if aligned is None:
        aligned = (all(f.kind == "linear" for f in fams)
                   and not isinstance(model, Sphere2)
                   and all(f.coef * fams[0].coef > 0 for f in fams))
    if lip is None:
        try:
            lip = sum(f.lipschitz() for f in fams)
        except ValueError:
            lip = None
    return CylinderFunction(tuple(times), families=fams, name=name,
                            aligned=aligned, lip=lip)


def knot_indices(F: CylinderFunction, partition: ps.Partition) -> list:
    return [partition.index_of(t) for t in F.times]


def knot_points(F: CylinderFunction, ens: ps.PathEnsemble) -> np.ndarray:
    idx = knot_indices(F, ens.partition)
    return ens.points[:, idx, :]


def evaluate(F: CylinderFunction, ens: ps.PathEnsemble) -> np.ndarray:
    return F.value(ens.model, knot_points(F, ens))


@dataclass
class GradientProfile:
    """Transported knot gradients of one ensemble, plus suffix sums.

    suffix[:, m] is the s-gradient on the interval (t_{m-1}, t_m]; grads[:, j]
    is the single-knot contribution. Components live in the frame transported
    along each path (the initial frame's coordinates).
    """

    times: tuple
    grads: np.ndarray      # (B, k, dim)
    suffix: np.ndarray     # (B, k, dim)

    @property
    def grad0(self) -> np.ndarray:
        """(B, dim) gradient at s = 0: the full suffix sum."""
        return self.suffix[:, 0]

    def norm_at(self, s: float) -> np.ndarray:
        """|grad_s F| per path; zero beyond the last knot."""
        ts = np.asarray(self.times)
        if s > ts[-1]:
            return np.zeros(self.grads.shape[0])
        m = int(np.searchsorted(ts, s, side="left"))
        return np.linalg.norm(self.suffix[:, m], axis=-1)

    def h1_norm_sq(self) -> np.ndarray:
        """(B,) discrete H^1 energy: sum_m (t_m - t_{m-1}) |suffix_m|^2."""
        ts = np.asarray(self.times)
        dt = np.diff(np.concatenate([[0.0], ts]))
        sq = np.sum(self.suffix * self.suffix, axis=-1)
        return sq @ dt


def gradient_profile(F: CylinderFunction, ens: ps.PathEnsemble) -> GradientProfile:
    idx = knot_indices(F, ens.partition)
    pts = ens.points[:, idx, :]
    ambient = F.knot_grads(ens.model, pts)
    comps = np.stack([ens.frame_components(k, ambient[:, j])
                      for j, k in enumerate(idx)], axis=1)   # (B, k, dim)
    suffix = np.flip(np.cumsum(np.flip(comps, axis=1), axis=1), axis=1)
    return GradientProfile(F.times, comps, suffix)


def h1_norm_sq(F: CylinderFunction, ens: ps.PathEnsemble) -> np.ndarray:
    return gradient_profile(F, ens).h1_norm_sq()


# ---------------------------------------------------------------------------
# transport-curvature flows


def _flow_values(c: float, grid, decaying: bool, substep: float = 0.02) -> np.ndarray:
    """RK4 integration of y' = (+-c/2) y through the grid times, y(0) = 1.

    The shipped models all have curvature tensor c * g commuting with
    transport, so the flow is scalar; RK4 substeps keep the global error
    far below 1e-8 against the exact exponential.
    """
    rate = -0.5 * c if decaying else 0.5 * c
    out = np.empty(len(grid))
    out[0] = 1.0
    y = 1.0
    for k in range(len(grid) - 1):
        dt = grid[k + 1] - grid[k]
        m = max(1, math.ceil(dt / substep))
        h = dt / m
        for _ in range(m):
            k1 = rate * y
            k2 = rate * (y + 0.5 * h * k1)
            k3 = rate * (y + 0.5 * h * k2)
            k4 = rate * (y + h * k3)
            y += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y
    return out


def phi_flow(model: ManifoldModel, partition: ps.Partition) -> np.ndarray:
    """Transport-curvature flow matrices phi on [0] + knot times, (K+1, d, d).

    Solves phi' = (1/2) P (Ric + Hess f) P^{-1} phi with phi(0) = Id; for the
    constant-curvature models this is e^{c t / 2} Id.
    """
    vals = _flow_values(model.be_constant, partition.grid(), decaying=False)
    eye = np.eye(model.dim)
    return vals[:, None, None] * eye


def decay_weights(model: ManifoldModel, times) -> np.ndarray:
    """Inverse-flow weights psi(t_j) used by the gradient representation.

    psi solves the companion decaying equation psi' = -(1/2) P (Ric+Hess f)
    P^{-1} psi; it is the kernel that actually multiplies transported knot
    gradients in grad_x E[F] (the growing flow phi is its inverse for the
    commuting tensors shipped here).
    """
    grid = np.concatenate([[0.0], np.asarray(times, dtype=float)])
    return _flow_values(model.be_constant, grid, decaying=True)[1:]


# ---------------------------------------------------------------------------
# pushforward statistics


def pushforward_mean(model, F: CylinderFunction, x, n_paths, seed, tag,
                     workers=1):
    part = ps.Partition(F.times)
    ens = ps.sample_paths(model, x, part, n_paths, seed, tag, workers)
    vals = evaluate(F, ens)
    return mc.accumulate(vals, seed, tag), vals


def pushforward_gradient_bismut(model, F: CylinderFunction, x, n_paths, seed,
                                tag, workers=1):
    """Stochastic-representation estimate of grad_x E[F] (frame components).

    Per path: sum_j psi(t_j) * (transported knot gradient)_j, averaged over
    the ensemble. Exact decay weights make this zero-variance for linear
    functions on the weightless flat model.
    """
    part = ps.Partition(F.times)
    ens = ps.sample_paths(model, x, part, n_paths, seed, tag, workers)
    prof = gradient_profile(F, ens)
    psi = decay_weights(model, F.times)
    per_path = np.einsum("j,bjd->bd", psi, prof.grads)
    return per_path.mean(axis=0), per_path


def pushforward_gradient_fd(model, F: CylinderFunction, x, n_paths, seed, tag,
                            step=None, workers=1):
    """Central-difference gradient of x -> E[F] with common random numbers.

    Both shifted means reuse the identical draw sequence, so the difference
    variance reflects only the sensitivity of the path law to the start
    point. Returns components in the canonical frame at x.
    """
    x = np.asarray(x, dtype=float)
    eta = step if step is not None else 1e-4 * (1.0 + float(np.linalg.norm(x)))
    frame = model.canonical_frame(x)
    grad = np.zeros(model.dim)
    per_path = np.zeros((n_paths, model.dim))
    for i in range(model.dim):
        d = frame[:, i]
        _, up = pushforward_mean(model, F, model.exp_map(x, eta * d),
                                 n_paths, seed, tag, workers)
        _, dn = pushforward_mean(model, F, model.exp_map(x, -eta * d),
                                 n_paths, seed, tag, workers)
        diffs = (up - dn) / (2.0 * eta)
        per_path[:, i] = diffs
        grad[i] = diffs.mean()
    return grad, per_path


# ---------------------------------------------------------------------------
# test-function registry


def parse_function(model, spec: str) -> CylinderFunction:
    """Build a cylinder function from strings like 'sin:t=2,axis=0,freq=1'."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    params = {}
    if rest.strip():
        for chunk in rest.split(","):
            k, eq, v = chunk.partition("=")
            if not eq:
                raise ValueError("malformed function parameter %r in %r" % (chunk, spec))
            params[k.strip()] = float(v)
    if kind in ("linear", "sin", "quad", "exp"):
        t = params.pop("t")
        fam = ScalarFamily(kind, axis=int(params.pop("axis", 0)),
                           coef=params.pop("coef", 1.0),
                           freq=params.pop("freq", 1.0),
                           phase=params.pop("phase", 0.0))
        if params:
            raise ValueError("unknown function parameters %s" % sorted(params))
        return separable(model, (t,), (fam,), name=spec)
    if kind == "twopoint":
        t1, t2 = params.pop("t1"), params.pop("t2")
        a1, a2 = params.pop("a1", 1.0), params.pop("a2", 1.0)
        axis = int(params.pop("axis", 0))
        if params:
            raise ValueError("unknown function parameters %s" % sorted(params))
        fams = (ScalarFamily("linear", axis=axis, coef=a1),
                ScalarFamily("linear", axis=axis, coef=a2))
        return separable(model, (t1, t2), fams, name=spec)
    raise ValueError("unknown function kind %r in %r" % (kind, spec))


def random_cylinders(model, count, horizon, seed, tag="random-cylinders") -> list:
    """Seeded batch of random separable cylinder functions for cross-checks."""
    rng = mc.derive_stream(mc.StreamKey(seed, tag, 0, 0))
    out = []
    for i in range(count):
        k = int(rng.integers(1, 4))
        times = np.sort(rng.uniform(0.1, horizon, size=k))
        times = np.unique(np.round(times, 6))
        fams = []
        for _ in times:
            coef = float(rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0]))
            if isinstance(model, Sphere2):
                # ambient coordinate restrictions are the natural sphere probes
                axis = int(rng.integers(0, model.ambient))
                fams.append(ScalarFamily("linear", axis=axis, coef=coef))
            elif model.kind == "circle":
                freq = 2 * math.pi * int(rng.integers(1, 4)) / model.length
                phase = float(rng.uniform(0, 2 * math.pi))
                fams.append(ScalarFamily("sin", axis=0, coef=coef, freq=freq,
                                         phase=phase))
            else:
                axis = int(rng.integers(0, model.dim))
                if rng.random() < 0.5:
                    fams.append(ScalarFamily("linear", axis=axis, coef=coef))
                else:
                    freq = float(rng.uniform(0.5, 2.0))
                    fams.append(ScalarFamily("sin", axis=axis, coef=coef, freq=freq))
        out.append(separable(model, tuple(float(t) for t in times), tuple(fams),
                             name="random-%d" % i))
    return out


def analytic_projection(model, F: CylinderFunction, t: float):
    """Closed-form conditional projection F^t when every future knot allows it.

    Returns a callable (head_points, y_t) -> values, where head_points holds
    the knots with t_j <= t (shape (..., k_head, ambient)) and y_t the path
    position at time t. Raises UnsupportedFamilyError when unavailable.
    """
    if F.families is None:
        raise UnsupportedFamilyError("projection fast path needs a separable function")
    flowed = []
    for t_j, fam in zip(F.times, F.families):
        if t_j > t:
            flowed.append(heat_flow_closed_form(model, fam, t_j - t))
    head_fams = [fam for t_j, fam in zip(F.times, F.families) if t_j <= t]

    def project(head_points, y_t):
        total = 0.0
        hp = np.asarray(head_points, dtype=float)
        for j, fam in enumerate(head_fams):
            total = total + fam.value(model, hp[..., j, :])
        for fam in flowed:
            total = total + fam.value(model, y_t)
        return total

    return project
