"""Projection martingales of cylinder functions and their quadratic variation.

F^t is the conditional expectation of F given the path up to time t: knots at
or before t are frozen from the outer path, later knots are resampled from
the current position. On models with exact kernels and closed-form heat flow
the projection is analytic; otherwise it is a nested Monte Carlo mean whose
inner noise is tracked and debiased out of variance-type statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import cylinder as cyl
from . import montecarlo as mc
from . import pathspace as ps
from .geometry import UnsupportedFamilyError, heat_flow_closed_form


class LadderTooCoarse(RuntimeError):
    """Richardson extrapolation of the dt ladder left a residual above 10%."""


def _sample_tail(model, starts, taus, seed, tag, workers=1):
    """Forward transitions from each start through relative times taus."""
    starts = np.asarray(starts, dtype=float)
    M = starts.shape[0]
    out = np.empty((M, len(taus), model.ambient))

    def fill(s, e):
        rng = mc.derive_stream(mc.StreamKey(seed, tag, s, 0))
        cur = starts[s:e]
        prev = 0.0
        for i, tau in enumerate(taus):
            cur = model.heat_kernel_step(cur, tau - prev, rng)
            out[s:e, i] = cur
            prev = tau

    mc.run_blocks(M, fill, workers)
    return out


def project(model, F, ens, t, inner, seed, tag, workers=1, with_spread=False):
    """Per-path F^t values for every path of the ensemble.

    Returns (values, spread) when with_spread is set; spread is the inner
    sampling variance of each nested mean (zeros on the analytic fast path).
    """
    part = ens.partition
    idx_t = 0 if t == 0.0 else part.index_of(t)
    head_times = [tj for tj in F.times if tj <= t]
    head_idx = [part.index_of(tj) for tj in head_times]
    head_pts = ens.points[:, head_idx, :]
    y_t = ens.points[:, idx_t]
    try:
        proj = cyl.analytic_projection(model, F, t)
        values = proj(head_pts, y_t)
        spread = np.zeros_like(values)
    except UnsupportedFamilyError:
        tail_times = [tj - t for tj in F.times if tj > t]
        if not tail_times:
            values = F.value(model, head_pts)
            spread = np.zeros_like(values)
        else:
            B = ens.n_paths
            starts = np.repeat(y_t, inner, axis=0)
            tails = _sample_tail(model, starts, tail_times, seed,
                                 "%s/tail@%.12g" % (tag, t), workers)
            tails = tails.reshape(B, inner, len(tail_times), model.ambient)
            head_b = np.broadcast_to(head_pts[:, None, :, :],
                                     (B, inner, len(head_idx), model.ambient))
            knots = np.concatenate([head_b, tails], axis=2)
            vals = F.value(model, knots)                      # (B, inner)
            values = vals.mean(axis=1)
            spread = vals.var(axis=1, ddof=1) if inner > 1 else np.zeros(B)
    if with_spread:
        return values, spread
    return values


def projection_gradient_sq(model, F, ens, t):
    """Analytic |grad_x E[F_tail]|^2 at gamma(t) per path, when available.

    This is the closed-form value of the instantaneous quadratic variation of
    the projection martingale at time t.
    """
    if F.families is None:
        raise UnsupportedFamilyError("needs a separable cylinder function")
    flowed = [heat_flow_closed_form(model, fam, tj - t)
              for tj, fam in zip(F.times, F.families) if tj > t]
    idx_t = 0 if t == 0.0 else ens.partition.index_of(t)
    y = ens.points[:, idx_t]
    g = 0.0
    for fam in flowed:
        g = g + fam.grad_ambient(model, y)
    if isinstance(g, float):
        return np.zeros(ens.n_paths)
    return np.sum(g * g, axis=-1)


@dataclass
class MartingaleTrace:
    times: tuple
    values: np.ndarray    # (B, K)
    qv: np.ndarray        # (B, K) cumulative sum of squared increments

    @property
    def final(self) -> np.ndarray:
        return self.values[:, -1]


def quadratic_variation(model, F, ens, trace_times, inner, seed, tag,
                        workers=1) -> MartingaleTrace:
    """Skeleton of the projection martingale and its running quadratic variation.

    The discrete quadratic variation is exact in expectation on any grid:
    E[sum of squared increments] = Var(F^T) by martingale orthogonality.
    """
    ts = tuple(float(t) for t in trace_times)
    cols = [project(model, F, ens, t, inner, seed, "%s/qv%d" % (tag, i), workers)
            for i, t in enumerate(ts)]
    values = np.stack(cols, axis=1)
    inc = np.diff(values, axis=1)
    qv = np.concatenate([np.zeros((values.shape[0], 1)), np.cumsum(inc * inc, axis=1)],
                        axis=1)
    return MartingaleTrace(ts, values, qv)


@dataclass
class InfinitesimalQV:
    t: float
    ladder: tuple               # dt values, decreasing
    means: tuple                # ensemble mean of (F^{t+s}-F^t)^2 / s per rung
    ses: tuple
    value: float                # Richardson extrapolation from the last pair
    se: float
    residual: float             # relative change between the last two extrapolations
    per_path: np.ndarray        # (B,) per-path extrapolated conditional values
    crosscheck: float | None    # analytic |grad of projection|^2 mean, if available
    per_path_se: np.ndarray | None = None  # (B,) nested noise of per_path


def infinitesimal_qv(model, F, ens, t, inner, seed, tag, ladder_k=(4, 5, 6, 7, 8, 9),
                     workers=1, strict=True) -> InfinitesimalQV:
    """dt-ladder estimate of the instantaneous quadratic variation at time t.

    Each rung estimates E[(F^{t+s} - F^t)^2 | path up to t] / s with s a
    dyadic fraction of the gap to the next knot of F after t; rung pairs are
    Richardson extrapolated. Raises LadderTooCoarse when the residual stays
    above 10% (strict mode).
    """
    future = [tj for tj in F.times if tj > t]
    B = ens.n_paths
    if not future:
        zero = np.zeros(B)
        return InfinitesimalQV(t, (), (), (), 0.0, 0.0, 0.0, zero, 0.0)
    gap = future[0] - t
    f_t, spread_t = project(model, F, ens, t, inner, seed, tag + "/base", workers,
                            with_spread=True)
    try:
        cyl.analytic_projection(model, F, t)
        analytic = True
    except UnsupportedFamilyError:
        analytic = False

    m1 = inner if analytic else max(8, int(math.sqrt(inner)))
    m2 = 0 if analytic else max(8, inner // m1)
    idx_t = 0 if t == 0.0 else ens.partition.index_of(t)
    y_t = ens.points[:, idx_t]

    ladder, means, ses, paths, path_ses = [], [], [], [], []
    for ki, k in enumerate(ladder_k):
        s = gap * 2.0 ** (-k)
        mids = _sample_tail(model, np.repeat(y_t, m1, axis=0), [s], seed,
                            "%s/mid%d" % (tag, ki), workers)[:, 0, :]
        if analytic:
            proj = cyl.analytic_projection(model, F, t + s)
            head_idx = [ens.partition.index_of(tj) for tj in F.times if tj <= t]
            head = ens.points[:, head_idx, :]
            head_b = np.repeat(head, m1, axis=0)
            w = proj(head_b, mids).reshape(B, m1)
            sq = (w - f_t[:, None]) ** 2
            cond = sq.mean(axis=1)
        else:
            tail_times = [tj - (t + s) for tj in future]
            starts = np.repeat(mids, m2, axis=0)
            tails = _sample_tail(model, starts, tail_times, seed,
                                 "%s/tails%d" % (tag, ki), workers)
            tails = tails.reshape(B, m1, m2, len(future), model.ambient)
            head_idx = [ens.partition.index_of(tj) for tj in F.times if tj <= t]
            head = ens.points[:, head_idx, :]
            head_b = np.broadcast_to(head[:, None, None, :, :],
                                     (B, m1, m2, len(head_idx), model.ambient))
            vals = F.value(model, np.concatenate([head_b, tails], axis=3))
            w = vals.mean(axis=2)                              # (B, m1)
            inner_var = vals.var(axis=2, ddof=1) / m2          # (B, m1)
            sq = (w - f_t[:, None]) ** 2
            cond = (sq.mean(axis=1)
                    - inner_var.mean(axis=1) - spread_t / max(inner, 1))
        per = cond / s
        ladder.append(s)
        paths.append(per)
        path_ses.append(sq.std(axis=1, ddof=1) / math.sqrt(sq.shape[1]) / s)
        mean, se = float(per.mean()), float(per.std(ddof=1) / math.sqrt(B))
        means.append(mean)
        ses.append(se)

    extr = [2.0 * means[i + 1] - means[i] for i in range(len(means) - 1)]
    value = extr[-1]
    per_path = 2.0 * paths[-1] - paths[-2]
    per_path_se = np.sqrt(4.0 * path_ses[-1] ** 2 + path_ses[-2] ** 2)
    se = math.sqrt((2 * ses[-1]) ** 2 + ses[-2] ** 2)
    residual = abs(extr[-1] - extr[-2]) / max(abs(value), 1e-300) if len(extr) > 1 else 0.0
    if strict and residual > 0.10:
        raise LadderTooCoarse("Richardson residual %.3g above 10%%" % residual)
    try:
        cross = float(np.mean(projection_gradient_sq(model, F, ens, t)))
    except UnsupportedFamilyError:
        cross = None
    return InfinitesimalQV(t, tuple(ladder), tuple(means), tuple(ses),
                           value, se, residual, per_path, cross, per_path_se)


def moment_growth(model, F, x, k_order, base_time, gaps, n_paths, inner, seed,
                  tag, workers=1):
    """Moments E|F^{s+g} - F^s|^{2k} over a gap ladder, with a log-log slope.

    Returns (rows, slope) where each row is (gap, moment estimate) and slope
    is the least-squares slope of log moment against log gap.
    """
    times = sorted({base_time} | {base_time + g for g in gaps} | set(F.times))
    part = ps.Partition(tuple(t for t in times if t > 0))
    ens = ps.sample_paths(model, x, part, n_paths, seed, tag, workers)
    f_base = project(model, F, ens, base_time, inner, seed, tag + "/base", workers)
    rows = []
    for i, g in enumerate(gaps):
        f_g = project(model, F, ens, base_time + g, inner, seed,
                      "%s/gap%d" % (tag, i), workers)
        m = np.abs(f_g - f_base) ** (2 * k_order)
        rows.append((g, mc.accumulate(m, seed, tag)))
    lg = np.log([g for g, _ in rows])
    lm = np.log([est.mean for _, est in rows])
    slope = float(np.polyfit(lg, lm, 1)[0])
    return rows, slope


def doob_sup(trace: MartingaleTrace, eps_list):
    """Empirical P(sup_k |F^{t_k} - F^{t_0}| >= eps) against the L^1 bound.

    Returns rows (eps, p_hat, p_se, bound, ratio); Doob's inequality says
    ratio <= 1 up to Monte Carlo error.
    """
    G = trace.values - trace.values[:, :1]
    sup = np.max(np.abs(G), axis=1)
    l1 = float(np.mean(np.abs(G[:, -1])))
    n = G.shape[0]
    rows = []
    for eps in eps_list:
        p = float(np.mean(sup >= eps))
        p_se = math.sqrt(max(p * (1 - p), 1e-300) / n)
        bound = l1 / eps
        rows.append((eps, p, p_se, bound, p / bound if bound > 0 else 0.0))
    return rows
