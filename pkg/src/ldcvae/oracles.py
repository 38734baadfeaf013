"""Independent reference computations used by the test suite and ``check``.

Nothing here calls the autodiff engine or the closed forms it is used to
verify: densities are multiplied on grids, pairs are enumerated, risk tables
are tabulated with plain loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def _normal_logpdf(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)


def grid_product_moments(means: Sequence[float], variances: Sequence[float], lo: float = -10.0,
                         hi: float = 10.0, step: float = 1e-3) -> tuple[float, float]:
    """Mean and variance of the normalized pointwise product of 1-d normal
    densities, integrated numerically on ``[lo, hi]``."""
    x = np.arange(lo, hi + step / 2, step)
    logp = sum(_normal_logpdf(x, m, v) for m, v in zip(means, variances))
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = float(np.sum(w * x))
    return mean, float(np.sum(w * (x - mean) ** 2))


def brute_force_c_index(risks, times, censored) -> float:
    """Harrell's C by explicit enumeration of ordered pairs."""
    conc, n = 0.0, 0
    for i in range(len(risks)):
        if censored[i]:
            continue
        for j in range(len(risks)):
            if times[i] < times[j]:
                n += 1
                if risks[i] > risks[j]:
                    conc += 1.0
                elif risks[i] == risks[j]:
                    conc += 0.5
    if n == 0:
        raise ValueError("no comparable pairs")
    return conc / n


def grid_w2_squared(mean_a: float, var_a: float, mean_b: float, var_b: float, n: int = 200_001) -> float:
    """Squared 2-Wasserstein distance between two 1-d normals via their
    numerically inverted CDFs on a discretized line."""
    sd = math.sqrt(max(var_a, var_b))
    lo = min(mean_a, mean_b) - 12 * sd
    hi = max(mean_a, mean_b) + 12 * sd
    x = np.linspace(lo, hi, n)

    def cdf(m, v):
        p = np.exp(_normal_logpdf(x, m, v))
        c = np.cumsum(p)
        return c / c[-1]

    u = (np.arange(20_000) + 0.5) / 20_000
    qa = np.interp(u, cdf(mean_a, var_a), x)
    qb = np.interp(u, cdf(mean_b, var_b), x)
    return float(np.mean((qa - qb) ** 2))


def monte_carlo_kl(mean_q, var_q, mean_p, var_p, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Estimate and standard error of E_q[log q - log p] for diagonal normals."""
    mean_q, var_q = np.asarray(mean_q, float), np.asarray(var_q, float)
    mean_p, var_p = np.asarray(mean_p, float), np.asarray(var_p, float)
    z = mean_q + np.sqrt(var_q) * rng.standard_normal((n, mean_q.size))
    diff = np.sum(_normal_logpdf(z, mean_q, var_q) - _normal_logpdf(z, mean_p, var_p), axis=1)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n))


def tabulated_logrank(times_a, events_a, times_b, events_b) -> float:
    """Log-rank chi-square built row by row from the risk table."""
    rows = sorted(set(t for t, e in zip(times_a, events_a) if e) | set(t for t, e in zip(times_b, events_b) if e))
    o_minus_e, var = 0.0, 0.0
    for t in rows:
        n_a = sum(1 for s in times_a if s >= t)
        n_b = sum(1 for s in times_b if s >= t)
        d_a = sum(1 for s, e in zip(times_a, events_a) if e and s == t)
        d_b = sum(1 for s, e in zip(times_b, events_b) if e and s == t)
        n, d = n_a + n_b, d_a + d_b
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    return o_minus_e ** 2 / var


def product_limit(times, events) -> list[tuple[float, float]]:
    """Kaplan-Meier steps (event time, survival after it) by direct looping."""
    s, out = 1.0, []
    for t in sorted(set(t for t, e in zip(times, events) if e)):
        at_risk = sum(1 for u in times if u >= t)
        died = sum(1 for u, e in zip(times, events) if e and u == t)
        s *= 1.0 - died / at_risk
        out.append((t, s))
    return out


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat, out = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# the `check` command
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tolerance:g})"


def check_poe(n: int = 100, seed: int = 0) -> CheckResult:
    from .gaussian import DiagGaussian, poe_combine

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        means = rng.uniform(-2, 2, size=3)
        variances = rng.uniform(0.2, 3.0, size=3)
        experts = [DiagGaussian(np.array([m]), np.array([v])) for m, v in zip(means[1:], variances[1:])]
        prior = DiagGaussian(np.array([means[0]]), np.array([variances[0]]))
        got = poe_combine(experts, prior)
        gm, gv = grid_product_moments(means, variances)
        worst = max(worst, abs(got.mean.item() - gm), abs(got.var.item() - gv))
    return CheckResult("poe grid oracle", worst < 1e-4, worst, 1e-4)


def check_c_index(n: int = 100, seed: int = 0) -> CheckResult:
    from .survival import c_index

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(2, 51))
        times = rng.integers(1, 15, size=m).astype(float)
        censored = rng.random(m) < 0.3
        risks = rng.integers(0, 6, size=m).astype(float)
        try:
            ref = brute_force_c_index(risks, times, censored)
        except ValueError:
            continue
        worst = max(worst, abs(c_index(risks, times, censored) - ref))
    return CheckResult("c-index brute force", worst == 0.0, worst, 0.0)


def check_gradients(seed: int = 0) -> CheckResult:
    from . import autodiff as ad
    from .data import CohortSpec, generate_cohort
    from .gaussian import DiagGaussian, NoiseSource, wasserstein_align
    from .model import LdCvaeModel, ModelConfig
    from .survival import SurvivalLabel, SurvivalOutput, nll_survival

    rng = np.random.default_rng(seed)
    worst = 0.0
    labels = [SurvivalLabel(3.0, False, 2), SurvivalLabel(1.0, True, 1)]
    worst = max(worst, ad.finite_difference_check(
        lambda x: nll_survival([SurvivalOutput.from_logits(x[0]), SurvivalOutput.from_logits(x[1])], labels),
        rng.normal(size=(2, 4))))
    worst = max(worst, ad.finite_difference_check(
        lambda x: wasserstein_align(DiagGaussian.from_log_var(x[0], x[1]), DiagGaussian.from_log_var(x[2], x[3])),
        rng.normal(size=(4, 5))))
    config = ModelConfig(d_path=6, genomic_dims=(3, 2, 2, 3, 2, 2), d_genomic=8, d_model=8, d_latent=4,
                         n_layers=1, n_heads=2)
    model = LdCvaeModel(config, seed=seed)
    spec = CohortSpec(n_patients=2, bag_size_range=(3, 5), d_path=6, genomic_dims=config.genomic_dims, seed=seed)
    rec = generate_cohort(spec)[0]
    rec.label = rec.label.with_bin(1)

    def loss():
        return model.training_step(rec, 0.7, 0.1, NoiseSource(seed)).total

    report = ad.check_parameter_gradients(loss, model.params, max_coords=3, rng=rng)
    worst = max([worst] + list(report.values()))
    return CheckResult("finite-difference gradients", worst < 1e-4, worst, 1e-4)


def run_checks() -> list[CheckResult]:
    return [check_poe(), check_gradients(), check_c_index()]
