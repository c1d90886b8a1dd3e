"""Gaussian-process Bayesian optimization over (w0, lambda)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

LENGTH_SCALE = 0.2
NOISE = 1e-6
MAX_JITTER = 1e-3
N_CANDIDATES = 1024


@dataclass(frozen=True)
class SearchSpace:
    w0_range: tuple[float, float] = (10.0, 50.0)
    lam_range: tuple[float, float] = (0.0, 100.0)

    def __post_init__(self):
        for name, (lo, hi) in (("w0", self.w0_range), ("lambda", self.lam_range)):
            if not lo <= hi:
                raise ValueError(f"{name} range is empty: [{lo}, {hi}]")

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.w0_range, self.lam_range], dtype=float)

    def round_point(self, point) -> tuple[float, float]:
        # w0 to an integer, lambda to one decimal, then clipped back into range
        w0 = float(np.clip(round(float(point[0])), *self.w0_range))
        lam = float(np.clip(round(float(point[1]), 1), *self.lam_range))
        return w0, lam

    def to_unit(self, points) -> np.ndarray:
        b = self.bounds
        span = b[:, 1] - b[:, 0]
        span = np.where(span > 0, span, 1.0)
        return (np.atleast_2d(np.asarray(points, dtype=float)) - b[:, 0]) / span

    def from_unit(self, u) -> np.ndarray:
        b = self.bounds
        return b[:, 0] + np.asarray(u) * (b[:, 1] - b[:, 0])


@dataclass
class TuneTrace:
    points: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def add(self, point, score):
        self.points.append(tuple(point))
        self.scores.append(score)

    def __len__(self):
        return len(self.points)

    @property
    def best_so_far(self) -> list[float]:
        out, best = [], -math.inf
        for s in self.scores:
            best = max(best, s)
            out.append(best)
        return out

    def best(self):
        k = int(np.argmax(self.scores))
        return self.points[k], self.scores[k]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "w0", "lambda", "score"])
            for i, ((w0, lam), s) in enumerate(zip(self.points, self.scores)):
                w.writerow([i, w0, lam, repr(float(s))])


def rbf_kernel(a: np.ndarray, b: np.ndarray, variance: float, length: float = LENGTH_SCALE) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return variance * np.exp(-0.5 * d2 / length ** 2)


def _signal_variance(y: np.ndarray) -> float:
    v = float(np.var(y)) if len(y) > 1 else 0.0
    return v if v > 0 else 1.0


def gp_posterior(x_obs, y_obs, x_query, length: float = LENGTH_SCALE, noise: float = NOISE):
    """Posterior mean and latent variance at x_query (all inputs in the unit box).

    Prior mean is the sample mean of the scores; the kernel variance is their
    sample variance. Noise is relative to that variance and escalated by 10x on
    a failed Cholesky until MAX_JITTER.
    """
    x_obs = np.atleast_2d(np.asarray(x_obs, dtype=float))
    x_query = np.atleast_2d(np.asarray(x_query, dtype=float))
    y = np.asarray(y_obs, dtype=float)
    if len(y) < 1:
        raise ValueError("gp_posterior needs at least one observation")
    sv = _signal_variance(y)
    mu0 = float(y.mean())
    K = rbf_kernel(x_obs, x_obs, sv, length)
    jitter = noise
    while True:
        try:
            factor = cho_factor(K + jitter * sv * np.eye(len(y)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10
            if jitter > MAX_JITTER:
                raise np.linalg.LinAlgError("kernel matrix ill-conditioned beyond the jitter limit")
    Ks = rbf_kernel(x_query, x_obs, sv, length)
    alpha = cho_solve(factor, y - mu0)
    mean = mu0 + Ks @ alpha
    v = cho_solve(factor, Ks.T)
    var = sv - np.sum(Ks * v.T, axis=1)
    return mean, np.maximum(var, 0.0)


def expected_improvement(mean, var, best: float, floor: float = 0.0) -> np.ndarray:
    """EI for maximization. Points whose std is at or below `floor` get max(mean - best, 0)."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    gain = mean - best
    ei = np.maximum(gain, 0.0)
    ok = sd > floor
    z = gain[ok] / sd[ok]
    ei[ok] = gain[ok] * norm.cdf(z) + sd[ok] * norm.pdf(z)
    return np.maximum(ei, 0.0)


def bayes_optimize(objective, space: SearchSpace | None = None, total: int = 24, init: int = 4,
                   seed: int = 0, n_candidates: int = N_CANDIDATES, callback=None) -> TuneTrace:
    space = space or SearchSpace()
    if not total >= init >= 1:
        raise ValueError("need total >= init >= 1")
    rng = np.random.default_rng(seed)
    trace = TuneTrace()
    for it in range(total):
        if it < init:
            u = rng.uniform(size=2)
        else:
            cand = rng.uniform(size=(n_candidates, 2))
            good = [k for k, s in enumerate(trace.scores) if np.isfinite(s)]
            if not good:
                u = cand[0]
            else:
                x = space.to_unit([trace.points[k] for k in good])
                y = np.array([trace.scores[k] for k in good])
                # score candidates at the rounded location they would be evaluated at
                rounded = np.array([space.round_point(p) for p in space.from_unit(cand)])
                mean, var = gp_posterior(x, y, space.to_unit(rounded))
                floor = math.sqrt(NOISE * _signal_variance(y))
                ei = expected_improvement(mean, var, float(y.max()), floor)
                u = cand[int(np.argmax(ei))]
        point = space.round_point(space.from_unit(u))
        score = float(objective(point))
        if not np.isfinite(score):
            score = -math.inf
        trace.add(point, score)
        if callback is not None:
            callback(it, point, score)
    return trace


def psnr_objective(cases, base_cfg):
    """Mean PSNR over (measured volume, reference magnitude) cases for a (w0, lambda) point."""
    from .inference import reconstruct
    from .metrics import psnr
    from .trainer import NonFiniteError, train

    def objective(point):
        cfg = replace(base_cfg, w0=float(point[0]), lam=float(point[1]))
        vals = []
        for measured, ref in cases:
            try:
                params, coeffs, _ = train(measured, cfg)
            except NonFiniteError:
                return -math.inf
            res = reconstruct(params, coeffs, measured, cfg.use_kc)
            vals.append(psnr(ref, np.abs(res.combined)))
        return float(np.mean(vals))

    return objective
