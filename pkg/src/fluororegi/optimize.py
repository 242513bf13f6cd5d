"""Derivative-free box-constrained optimizers.

Every optimizer minimizes ``obj(x) -> float`` and returns an
:class:`OptimizerReport`.  Population methods draw all random numbers
in the (single-threaded) optimizer logic and hand whole batches to
:func:`evaluate_points`, so results do not depend on how a batch is
evaluated.  Wrap an objective in :class:`ParallelObjective` to spread a
batch over threads; results are gathered in index order.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

GRID_CAP = 10**8


class GridTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class BoxConstraints:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(lo > hi):
            raise ValueError("lower must not exceed upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_widths, centre=None) -> "BoxConstraints":
        h = np.asarray(half_widths, dtype=float)
        c = np.zeros_like(h) if centre is None else np.asarray(centre, dtype=float)
        return cls(c - h, c + h)

    @property
    def n(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass
class OptimizerReport:
    x: np.ndarray
    fun: float
    nfev: int
    trace: list = field(default_factory=list)   # best value after each iteration
    nit: int = 0
    message: str = ""
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "fun": self.fun, "nfev": self.nfev, "nit": self.nit,
                "trace": list(self.trace), "message": self.message}


# --------------------------------------------------------------------------
# objective plumbing


def evaluate_points(obj: Callable, X: np.ndarray) -> np.ndarray:
    """Evaluate ``obj`` on the rows of ``X``; uses ``obj.evaluate_batch`` when present."""
    X = np.atleast_2d(X)
    batch = getattr(obj, "evaluate_batch", None)
    vals = batch(X) if batch is not None else [obj(x) for x in X]
    vals = np.asarray(vals, dtype=float).reshape(len(X))
    return vals


class ParallelObjective:
    """Evaluate batches of an objective on a thread pool, preserving order."""

    def __init__(self, obj: Callable, workers: int = 1):
        self.obj = obj
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def __call__(self, x) -> float:
        return float(self.obj(x))

    def evaluate_batch(self, X) -> np.ndarray:
        if self._pool is None:
            return np.array([self.obj(x) for x in X], dtype=float)
        return np.fromiter(self._pool.map(self.obj, list(X)), dtype=float, count=len(X))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# grid search


def grid_axes(box: BoxConstraints, increments) -> list[np.ndarray]:
    inc = np.broadcast_to(np.asarray(increments, dtype=float), box.lower.shape)
    axes = []
    for lo, hi, d in zip(box.lower, box.upper, inc):
        if d < 0 or (d == 0 and hi > lo):
            raise ValueError("increments must be positive")
        k = 0 if d == 0 else int(np.floor((hi - lo) / d + 1e-9))
        axes.append(lo + d * np.arange(k + 1))
    return axes


def minimize_grid(obj: Callable, box: BoxConstraints, increments, cap: int = GRID_CAP,
                  chunk: int = 4096) -> OptimizerReport:
    """Exhaustive search of ``{lower + k * inc <= upper}``.

    Points are visited in lexicographic index order, so ties go to the
    lexicographically smallest index.
    """
    axes = grid_axes(box, increments)
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape, dtype=np.int64))
    if total > cap:
        raise GridTooLargeError(f"grid of {total} points exceeds cap {cap}")
    best_val, best_x, trace = np.inf, None, []
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(total, start + chunk)), shape)
        X = np.stack([a[i] for a, i in zip(axes, idx)], axis=1)
        vals = evaluate_points(obj, X)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_x = float(vals[j]), X[j].copy()
        trace.append(best_val)
    return OptimizerReport(best_x, best_val, total, trace, len(trace), "grid exhausted",
                           {"shape": shape})


# --------------------------------------------------------------------------
# differential evolution


def minimize_de(obj: Callable, box: BoxConstraints, iters: int = 400, pop: int = 1000,
                cr: float = 0.2, dither=(0.5, 1.0), seed: int = 0) -> OptimizerReport:
    """DE/rand/1/bin with F drawn uniformly from ``dither`` for every mutant."""
    if pop < 4:
        raise ValueError("DE needs a population of at least 4")
    rng = np.random.default_rng(seed)
    n = box.n
    P = box.lower + rng.random((pop, n)) * box.width
    f = evaluate_points(obj, P)
    nfev = pop
    trace = [float(f.min())]
    for _ in range(iters):
        # three distinct partners, all different from the target
        m = pop - 1
        a = rng.integers(0, m, pop)
        b = rng.integers(0, m - 1, pop)
        b += b >= a
        c = rng.integers(0, m - 2, pop)
        c += c >= np.minimum(a, b)
        c += c >= np.maximum(a, b)
        r = np.stack([a, b, c], axis=1)
        r += r >= np.arange(pop)[:, None]
        F = rng.uniform(dither[0], dither[1], (pop, 1))
        V = P[r[:, 0]] + F * (P[r[:, 1]] - P[r[:, 2]])
        cross = rng.random((pop, n)) < cr
        cross[np.arange(pop), rng.integers(0, n, pop)] = True
        U = box.clip(np.where(cross, V, P))
        fu = evaluate_points(obj, U)
        nfev += pop
        better = fu <= f
        P[better], f[better] = U[better], fu[better]
        trace.append(float(f.min()))
    j = int(np.argmin(f))
    return OptimizerReport(P[j].copy(), float(f[j]), nfev, trace, iters, "iteration limit")


# --------------------------------------------------------------------------
# particle swarm


def minimize_pso(obj: Callable, box: BoxConstraints, iters: int = 50, particles: int = 21000,
                 omega: float = 0.7298, phi_p: float = 1.4961, phi_g: float = 1.4961,
                 seed: int = 0) -> OptimizerReport:
    """Global-best PSO; velocities clamped to the box width, positions to the box."""
    if particles < 1:
        raise ValueError("PSO needs at least one particle")
    rng = np.random.default_rng(seed)
    n, w = box.n, box.width
    X = box.lower + rng.random((particles, n)) * w
    V = (2.0 * rng.random((particles, n)) - 1.0) * w
    f = evaluate_points(obj, X)
    nfev = particles
    pbest, pval = X.copy(), f.copy()
    g = int(np.argmin(pval))
    trace = [float(pval[g])]
    for _ in range(iters):
        rp = rng.random((particles, n))
        rg = rng.random((particles, n))
        V = omega * V + phi_p * rp * (pbest - X) + phi_g * rg * (pbest[g] - X)
        V = np.clip(V, -w, w)
        X = box.clip(X + V)
        f = evaluate_points(obj, X)
        nfev += particles
        better = f < pval
        pbest[better], pval[better] = X[better], f[better]
        g = int(np.argmin(pval))
        trace.append(float(pval[g]))
    return OptimizerReport(pbest[g].copy(), float(pval[g]), nfev, trace, iters, "iteration limit")


# --------------------------------------------------------------------------
# CMA-ES


def minimize_cmaes(obj: Callable, init, init_sigma, pop: int = 100,
                   penalty: Optional[Callable] = None, seed: int = 0,
                   box: Optional[BoxConstraints] = None, maxfevals: int = 10000,
                   tolx: float = 1e-11, tolfun: float = 1e-12) -> OptimizerReport:
    """(mu/mu_w, lambda)-CMA-ES.

    The search runs in coordinates scaled by ``init_sigma`` so a single
    global step size (starting at 1) covers per-coordinate scales.  With a
    ``box``, samples are clipped before evaluation.  ``penalty(x)`` is
    added to ``obj(x)``; the reported value is the sum.
    """
    scale = np.asarray(init_sigma, dtype=float).ravel()
    if np.any(scale <= 0):
        raise ValueError("init_sigma must be positive")
    n = scale.size
    x0 = np.asarray(init, dtype=float).ravel()
    if box is not None:
        x0 = box.clip(x0)
    rng = np.random.default_rng(seed)

    lam = int(pop)
    mu = lam // 2
    wts = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    wts /= wts.sum()
    mueff = 1.0 / np.sum(wts**2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, np.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    def total(X):
        v = evaluate_points(obj, X)
        if penalty is not None:
            v = v + np.array([penalty(x) for x in X])
        return v

    mean = x0 / scale
    sigma = 1.0
    C = np.eye(n)
    pc = np.zeros(n)
    ps = np.zeros(n)
    best_x, best_f = x0.copy(), float(total(x0[None])[0])
    nfev, trace, nit = 1, [best_f], 0
    hist_len = 10 + int(np.ceil(30 * n / lam))
    hist: list[float] = []
    message = "evaluation limit"
    while nfev + lam <= maxfevals:
        nit += 1
        evals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals, 1e-300))
        Z = rng.standard_normal((lam, n))
        Y = (Z * D) @ B.T
        Xs = mean + sigma * Y
        X = Xs * scale
        if box is not None:
            X = box.clip(X)
        f = total(X)
        nfev += lam
        order = np.argsort(f, kind="stable")
        if f[order[0]] < best_f:
            best_f, best_x = float(f[order[0]]), X[order[0]].copy()
        trace.append(best_f)

        ysel = Y[order[:mu]]
        yw = wts @ ysel
        mean = mean + sigma * yw
        invsqrt = B @ np.diag(1 / D) @ B.T
        ps = (1 - cs) * ps + np.sqrt(cs * (2 - cs) * mueff) * (invsqrt @ yw)
        hsig = (np.linalg.norm(ps) / np.sqrt(1 - (1 - cs) ** (2 * nit)) / chi_n) < (1.4 + 2 / (n + 1))
        pc = (1 - cc) * pc + hsig * np.sqrt(cc * (2 - cc) * mueff) * yw
        C = ((1 - c1 - cmu) * C + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
             + cmu * (ysel.T * wts) @ ysel)
        C = (C + C.T) / 2
        sigma *= np.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))

        hist.append(float(f[order[0]]))
        if sigma * np.sqrt(np.max(np.diag(C))) < tolx:
            message = "tolx"
            break
        if len(hist) >= hist_len:
            recent = hist[-hist_len:]
            if max(max(recent), f.max()) - min(min(recent), f.min()) < tolfun:
                message = "tolfun"
                break
        if D.max() / D.min() > 1e7:
            message = "condition"
            break
    ev = np.linalg.eigvalsh(C)
    return OptimizerReport(best_x, best_f, nfev, trace, nit, message,
                           {"sigma": sigma, "cov_condition": float(ev.max() / ev.min()),
                            "mean": mean * scale})


# --------------------------------------------------------------------------
# BOBYQA


def minimize_bobyqa(obj: Callable, init, box: BoxConstraints, maxfun: Optional[int] = None,
                    rhobeg: float = 0.1, rhoend: float = 1e-8, npt: Optional[int] = None) -> OptimizerReport:
    """Powell's BOBYQA (via Py-BOBYQA), run in box-normalised coordinates.

    ``rhobeg``/``rhoend`` are fractions of the box width.  An ``init`` on
    the boundary is nudged inward by 1e-6 of the width.
    """
    import pybobyqa

    x0 = np.asarray(init, dtype=float).ravel()
    if not box.contains(x0):
        raise ValueError("init lies outside the box")
    lo, hi = box.lower, box.upper
    fixed = box.width <= 0
    on_edge = ~fixed & ((x0 <= lo) | (x0 >= hi))
    if np.any(on_edge):
        warnings.warn("BOBYQA init on the boundary; nudging inward", RuntimeWarning, stacklevel=2)
        eps = 1e-6 * box.width
        x0 = np.where(on_edge & (x0 <= lo), lo + eps, x0)
        x0 = np.where(on_edge & (x0 >= hi), hi - eps, x0)
    free = ~fixed
    if not np.any(free):
        v = float(obj(x0))
        return OptimizerReport(x0, v, 1, [v], 0, "no free variables")

    width = box.width[free]
    trace: list[float] = []
    state = {"best": np.inf}

    def to_full(u):
        x = x0.copy()
        x[free] = np.clip(lo[free] + u * width, lo[free], hi[free])
        return x

    def f(u):
        v = float(obj(to_full(u)))
        state["best"] = min(state["best"], v)
        trace.append(state["best"])
        return v

    u0 = (x0[free] - lo[free]) / width
    n = int(free.sum())
    kwargs = {}
    if n == 1:
        kwargs["npt"] = 3
    elif npt is not None:
        kwargs["npt"] = npt
    res = pybobyqa.solve(f, u0, bounds=(np.zeros(n), np.ones(n)), rhobeg=min(rhobeg, 0.499 * 1.0),
                         rhoend=rhoend, maxfun=maxfun or 200 * (n + 1), do_logging=False, **kwargs)
    x = to_full(res.x)
    return OptimizerReport(x, float(res.f), int(res.nf), trace, len(trace), str(res.msg),
                           {"flag": int(res.flag)})
