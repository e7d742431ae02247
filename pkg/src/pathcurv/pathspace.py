"""Path space over a model: sampling, anti-development, stochastic integrals.

A sampled path is its skeleton on a finite partition 0 < t_1 < ... < t_N,
always anchored at the start point at time 0. Ensembles keep every path of a
batch in one array so the whole pipeline stays vectorized; frames transported
along each path (needed only on the sphere, where transport is nontrivial)
ride along in the same structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import montecarlo as mc
from .geometry import ManifoldModel, Sphere2


class ExcessiveRejection(RuntimeError):
    """Cut-locus rejection rate in path sampling exceeded the allowed bound."""


MAX_REJECTION_RATE = 1e-3


@dataclass(frozen=True)
class Partition:
    """Strictly increasing positive knot times; the last knot is the horizon."""

    times: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if len(ts) < 1:
            raise ValueError("partition needs at least one knot")
        if ts[0] <= 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("knot times must be strictly increasing and positive")
        if any(not math.isfinite(t) for t in ts):
            raise ValueError("knot times must be finite")
        object.__setattr__(self, "times", ts)

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def grid(self) -> np.ndarray:
        """Knot times with the implicit start time 0 prepended."""
        return np.concatenate([[0.0], np.asarray(self.times)])

    @staticmethod
    def uniform(T: float, n: int) -> "Partition":
        if n < 1 or T <= 0:
            raise ValueError("need n >= 1 knots and T > 0")
        return Partition(tuple((T * (k + 1)) / n for k in range(n)))

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Index into grid() of a knot equal to t (0 means the start point)."""
        g = self.grid()
        hits = np.nonzero(np.abs(g - t) <= tol)[0]
        if hits.size == 0:
            raise KeyError("time %r is not a knot of this partition" % t)
        return int(hits[0])


def refine_partition(partition: Partition, extra) -> Partition:
    """Union of knot sets; exact duplicates are dropped."""
    ts = sorted(set(partition.times) | {float(t) for t in extra})
    return Partition(tuple(ts))


@dataclass
class PathEnsemble:
    model: ManifoldModel
    x0: np.ndarray
    partition: Partition
    points: np.ndarray          # (B, K+1, ambient), index 0 = start point
    frames: np.ndarray | None   # (B, K+1, ambient, dim) or None when transport is trivial
    rejections: int
    seed: int
    tag: str

    @property
    def n_paths(self) -> int:
        return self.points.shape[0]

    @property
    def rejection_rate(self) -> float:
        segs = self.points.shape[0] * (self.points.shape[1] - 1)
        return self.rejections / segs if segs else 0.0

    def frame_components(self, k: int, ambient_vecs: np.ndarray) -> np.ndarray:
        """Ambient tangent vectors at knot k -> components in the moving frame."""
        if self.frames is None:
            return np.asarray(ambient_vecs, dtype=float)
        return np.einsum("...ij,...i->...j", self.frames[:, k], ambient_vecs)

    def frame_to_ambient(self, k: int, comps: np.ndarray) -> np.ndarray:
        if self.frames is None:
            return np.asarray(comps, dtype=float)
        return np.einsum("...ij,...j->...i", self.frames[:, k], comps)


def sample_paths(model, x0, partition: Partition, n_paths: int, seed: int,
                 tag: str, workers: int = 1) -> PathEnsemble:
    """Draw n_paths skeletons of the model diffusion on the partition.

    Sampling is blockwise with one counter-based substream per block, so the
    result is bit-identical for any worker count. On the sphere a segment
    whose endpoints land within the cut-locus margin is redrawn (and
    counted); the run aborts if the rejection rate passes MAX_REJECTION_RATE.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.ambient,):
        raise ValueError("start point has shape %r, expected (%d,)" % (x0.shape, model.ambient))
    grid = partition.grid()
    K = len(partition.times)
    points = np.empty((n_paths, K + 1, model.ambient))
    points[:, 0] = x0
    needs_frames = isinstance(model, Sphere2)
    frames = np.empty((n_paths, K + 1, model.ambient, model.dim)) if needs_frames else None
    rejections = np.zeros(len(mc.block_ranges(n_paths)), dtype=np.int64)

    def fill(start, stop):
        rng = mc.derive_stream(mc.StreamKey(seed, tag, start, 0))
        b = stop - start
        cur = np.broadcast_to(x0, (b, model.ambient)).copy()
        if needs_frames:
            frames[start:stop, 0] = model.canonical_frame(cur)
        rej = 0
        for k in range(K):
            dt = grid[k + 1] - grid[k]
            if needs_frames:
                nxt, fr = model.heat_kernel_step_frame(cur, dt, rng,
                                                       frames[start:stop, k])
            else:
                nxt = model.heat_kernel_step(cur, dt, rng)
                fr = None
            if model.cut_threshold is not None:
                bad = model.distance(cur, nxt) >= model.cut_threshold
                guard = 0
                while np.any(bad):
                    rej += int(bad.sum())
                    if needs_frames:
                        nxt[bad], fr[bad] = model.heat_kernel_step_frame(
                            cur[bad], dt, rng, frames[start:stop, k][bad])
                    else:
                        nxt[bad] = model.heat_kernel_step(cur[bad], dt, rng)
                    bad = model.distance(cur, nxt) >= model.cut_threshold
                    guard += 1
                    if guard > 1000:
                        raise ExcessiveRejection("segment resampling does not terminate")
            points[start:stop, k + 1] = nxt
            if needs_frames:
                frames[start:stop, k + 1] = fr
            cur = nxt
        block_index = start // mc.BLOCK
        rejections[block_index] = rej

    mc.run_blocks(n_paths, fill, workers)
    ens = PathEnsemble(model, x0, partition, points, frames,
                       int(rejections.sum()), seed, tag)
    if ens.rejection_rate > MAX_REJECTION_RATE:
        raise ExcessiveRejection("rejection rate %g exceeds %g"
                                 % (ens.rejection_rate, MAX_REJECTION_RATE))
    return ens


def brownian_motion_map(ens: PathEnsemble) -> np.ndarray:
    """Anti-development W of each path: (B, K+1, dim), W_0 = 0.

    Increment k is the log of the next knot, read in the frame transported to
    the current knot; on the circle this is the continuous angular lift.
    """
    model = ens.model
    K = len(ens.partition.times)
    W = np.zeros((ens.n_paths, K + 1, model.dim))
    for k in range(K):
        inc = model.log_map(ens.points[:, k], ens.points[:, k + 1])
        W[:, k + 1] = W[:, k] + ens.frame_components(k, inc)
    return W


def drifted_brownian_map(ens: PathEnsemble) -> np.ndarray:
    """W plus the trapezoidal drift compensation (1/2) int P grad f.

    The compensated process is the martingale Brownian motion of the weighted
    dynamics; for weightless models it equals W. (For the shipped weighted
    model the compensation enters with a plus sign: the generator's drift is
    -(1/2) grad f, so the anti-development needs +(1/2) int P grad f added
    back to become driftless. Verified against E[W^f_T] = 0, E[(W^f_T)^2] = T
    and the Ito isometry.)
    """
    model = ens.model
    W = brownian_motion_map(ens)
    if model.kappa_f == 0.0:
        return W
    grid = ens.partition.grid()
    out = W.copy()
    g = [ens.frame_components(k, model.grad_f(ens.points[:, k])) for k in range(len(grid))]
    acc = np.zeros_like(W[:, 0])
    for k in range(len(grid) - 1):
        dt = grid[k + 1] - grid[k]
        acc = acc + 0.5 * (dt / 2.0) * (g[k] + g[k + 1])
        out[:, k + 1] += acc
    return out


@dataclass(frozen=True)
class SobolevCurve:
    """Piecewise-linear H^1 curve h with h(0) = 0, given by knots and values."""

    knots: tuple            # (0 = s_0 < s_1 < ... < s_m)
    values: np.ndarray      # (m+1, dim), values[0] = 0

    def __post_init__(self):
        ks = tuple(float(s) for s in self.knots)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if ks[0] != 0.0 or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("curve knots must start at 0 and increase")
        if vals.shape[0] != len(ks) or np.any(vals[0] != 0.0):
            raise ValueError("values must align with knots and start at 0")
        object.__setattr__(self, "knots", ks)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return self.knots[-1]

    def deriv(self, t: float) -> np.ndarray:
        """Right-continuous derivative; zero beyond the last knot."""
        ks = self.knots
        if t >= ks[-1]:
            return np.zeros(self.dim)
        i = int(np.searchsorted(ks, t, side="right") - 1)
        i = max(i, 0)
        return (self.values[i + 1] - self.values[i]) / (ks[i + 1] - ks[i])

    def at(self, t: float) -> np.ndarray:
        ks = self.knots
        if t <= 0:
            return np.zeros(self.dim)
        if t >= ks[-1]:
            return self.values[-1].copy()
        i = int(np.searchsorted(ks, t, side="right") - 1)
        lam = (t - ks[i]) / (ks[i + 1] - ks[i])
        return (1 - lam) * self.values[i] + lam * self.values[i + 1]

    def norm_sq(self) -> float:
        """Exact int_0^T |h'|^2 ds for the piecewise-linear curve."""
        ks = np.asarray(self.knots)
        dv = np.diff(self.values, axis=0)
        dt = np.diff(ks)
        return float(np.sum(np.sum(dv * dv, axis=1) / dt))


def linear_curve(T: float, direction) -> SobolevCurve:
    """h(t) = t * v on [0, T]."""
    v = np.atleast_1d(np.asarray(direction, dtype=float))
    return SobolevCurve((0.0, float(T)), np.stack([np.zeros_like(v), T * v]))


def basis_curves(dim: int, T: float, count: int = 8) -> list:
    """count hat-integrated curves: h_i' = indicator of the i-th dyadic slot.

    Slots cycle through coordinate axes when dim > 1. The curves have
    disjoint derivative supports, so they are H^1-orthogonal.
    """
    out = []
    for i in range(count):
        a, b = T * i / count, T * (i + 1) / count
        knots = sorted({0.0, a, b, T})
        axis = i % dim
        vals = []
        for s in knots:
            v = np.zeros(dim)
            v[axis] = min(max(s - a, 0.0), b - a)
            vals.append(v)
        out.append(SobolevCurve(tuple(knots), np.stack(vals)))
    return out


def ito_sum(Y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Left-endpoint Riemann-Ito sum of Y dX along axis 1."""
    dX = np.diff(X, axis=1)
    return np.sum(Y[:, :-1] * dX, axis=tuple(range(1, X.ndim)))


def stratonovich_sum(Y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Midpoint (Stratonovich) sum of Y o dX along axis 1."""
    dX = np.diff(X, axis=1)
    mid = 0.5 * (Y[:, :-1] + Y[:, 1:])
    return np.sum(mid * dX, axis=tuple(range(1, X.ndim)))


def ito_integral(ens: PathEnsemble, curve: SobolevCurve, drifted: bool = True) -> np.ndarray:
    """I_h = sum_k <h'(t_k), W^f_{t_{k+1}} - W^f_{t_k}> per path."""
    W = drifted_brownian_map(ens) if drifted else brownian_motion_map(ens)
    grid = ens.partition.grid()
    hdot = np.stack([curve.deriv(t) for t in grid[:-1]])   # (K, dim)
    dW = np.diff(W, axis=1)
    return np.einsum("kd,bkd->b", hdot, dW)


def stratonovich_integral(ens: PathEnsemble, curve: SobolevCurve,
                          drifted: bool = True) -> np.ndarray:
    W = drifted_brownian_map(ens) if drifted else brownian_motion_map(ens)
    grid = ens.partition.grid()
    hdot = np.stack([curve.deriv(t) for t in grid])        # (K+1, dim)
    dW = np.diff(W, axis=1)
    mid = 0.5 * (hdot[:-1] + hdot[1:])
    return np.einsum("kd,bkd->b", mid, dW)


def radon_nikodym(weighted_model, free_ens: PathEnsemble) -> np.ndarray:
    """Girsanov density dGamma_x / dGamma^Delta_x on a weight-free ensemble.

    ln Z = -(1/2) sum <P grad f, dW> (left endpoint) - (1/8) trapezoid |grad f|^2 dt.
    The minus sign on the stochastic term reweights toward the dynamics with
    drift -(1/2) grad f; checked against exact transition moments.
    """
    if free_ens.model.kappa_f != 0.0:
        raise ValueError("radon_nikodym expects an ensemble of the weight-free dynamics")
    W = brownian_motion_map(free_ens)
    grid = free_ens.partition.grid()
    gf = np.stack([free_ens.frame_components(k, weighted_model.grad_f(free_ens.points[:, k]))
                   for k in range(len(grid))], axis=1)     # (B, K+1, dim)
    dW = np.diff(W, axis=1)
    stoch = np.einsum("bkd,bkd->b", gf[:, :-1], dW)
    g2 = np.sum(gf * gf, axis=-1)                          # (B, K+1)
    dt = np.diff(grid)
    lebesgue = np.sum(0.5 * dt * (g2[:, :-1] + g2[:, 1:]), axis=1)
    return np.exp(-0.5 * stoch - 0.125 * lebesgue)
