"""(mu/mu_w, lambda)-CMA-ES for box-bounded derivative-free minimization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, OptimizerAbort

MAX_RESAMPLES = 10


@dataclass(frozen=True)
class CmaConfig:
    population_size: int = None
    initial_sigma: float = 0.3
    max_evals: int = 2000
    target_fitness: float = None
    bounds: tuple = None
    seed: int = 0
    tol_x: float = 1e-12
    penalty_weight: float = 1e4

    def resolved_popsize(self, n):
        return self.population_size or 4 + int(math.floor(3 * math.log(n)))

    def check(self, n):
        if self.resolved_popsize(n) < 4:
            raise InvalidArgument("population_size must be >= 4")
        if not self.initial_sigma > 0:
            raise InvalidArgument("initial_sigma must be > 0")
        if self.bounds is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n,)) for b in self.bounds)
            if np.any(lo >= hi):
                raise InvalidArgument("bounds need lo < hi in every dimension")


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    history: list = field(default_factory=list)
    converged: bool = False
    evals: int = 0

    def history_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["generation", "best_f", "mean_f", "sigma"])
            for h in self.history:
                writer.writerow([h["generation"], repr(h["best_f"]), repr(h["mean_f"]),
                                 repr(h["sigma"])])


def cmaes_minimize(objective, x0, cfg=None):
    """Minimize ``objective`` from ``x0``.

    Out-of-bounds samples are redrawn up to ten times; a sample still
    outside is evaluated at its clipped position with a quadratic penalty
    on the clipping distance.  The best point is always in bounds and never
    worse than ``x0``.
    """
    cfg = cfg or CmaConfig()
    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size
    cfg.check(n)
    if cfg.bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n,)).copy() for b in cfg.bounds)
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise InvalidArgument("x0 lies outside the bounds")

    def evaluate(x):
        f = float(objective(x))
        if not math.isfinite(f):
            raise OptimizerAbort(f"objective returned {f} at candidate {x.tolist()}", x.copy())
        return f

    lam = cfg.resolved_popsize(n)
    mu = lam // 2
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mueff = 1.0 / np.sum(weights ** 2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = x0.copy()
    sigma = float(cfg.initial_sigma)
    cov = np.eye(n)
    basis, diag = np.eye(n), np.ones(n)
    pc, ps = np.zeros(n), np.zeros(n)

    best_x, best_f = x0.copy(), evaluate(x0)
    evals = 1
    result = CmaResult(best_x, best_f, evals=evals)
    if cfg.target_fitness is not None and best_f <= cfg.target_fitness:
        result.converged = True
        return result

    gen = 0
    while evals + lam <= cfg.max_evals:
        gen += 1
        xs, fs = np.empty((lam, n)), np.empty(lam)
        for k in range(lam):
            rng = np.random.default_rng([cfg.seed, gen, k])
            for _ in range(MAX_RESAMPLES):
                x = mean + sigma * (basis @ (diag * rng.standard_normal(n)))
                if np.all(x >= lo) and np.all(x <= hi):
                    break
            clipped = np.clip(x, lo, hi)
            f = evaluate(clipped)
            gap = x - clipped
            fs[k] = f + cfg.penalty_weight * float(gap @ gap)
            xs[k] = x
            evals += 1
            if f < best_f:
                best_x, best_f = clipped.copy(), f
        order = np.argsort(fs, kind="stable")
        old_mean = mean
        mean = weights @ xs[order[:mu]]

        inv_sqrt = basis @ np.diag(1 / diag) @ basis.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt @ (mean - old_mean) / sigma
        hsig = (np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * evals / lam)) / chi_n
                < 1.4 + 2 / (n + 1))
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * (mean - old_mean) / sigma
        art = (xs[order[:mu]] - old_mean) / sigma
        cov = ((1 - c1 - cmu) * cov
               + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * cov)
               + cmu * (art.T * weights) @ art)
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))

        cov = np.triu(cov) + np.triu(cov, 1).T
        eigval, basis = np.linalg.eigh(cov)
        diag = np.sqrt(np.maximum(eigval, 1e-300))

        result.history.append({"generation": gen, "best_f": best_f,
                               "mean_f": float(np.mean(fs)), "sigma": sigma})
        if cfg.target_fitness is not None and best_f <= cfg.target_fitness:
            result.converged = True
            break
        if sigma * diag.max() < cfg.tol_x:
            result.converged = True
            break
    result.best_x, result.best_f, result.evals = best_x, best_f, evals
    return result
