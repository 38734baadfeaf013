"""Diagonal Gaussian algebra: product of experts, KL divergences, alignment
distances and reparameterised sampling.  Every function is differentiable
through the tensors it is given."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch

LOG_VAR_CLAMP = (-10.0, 10.0)


class DiagGaussian:
    """N(mean, diag(var)) over a latent of dimension ``d``.

    A ``(k, d)`` mean/variance pair holds ``k`` independent Gaussians
    stacked row-wise; use :meth:`row` to pull one out.
    """

    __slots__ = ("mean", "var", "_log_var")

    def __init__(self, mean, var, log_var: Tensor | None = None):
        self.mean = ad.as_tensor(mean)
        self.var = ad.as_tensor(var)
        if self.mean.shape != self.var.shape or self.mean.ndim == 0:
            raise DimensionMismatch(f"mean {self.mean.shape} and var {self.var.shape} must have equal shapes")
        if np.any(self.var.data <= 0):
            raise ValueError("variances must be strictly positive")
        self._log_var = log_var

    @classmethod
    def from_log_var(cls, mean, log_var, clamp: tuple[float, float] | None = LOG_VAR_CLAMP) -> "DiagGaussian":
        log_var = ad.as_tensor(log_var)
        if clamp is not None:
            log_var = ad.clip(log_var, *clamp)
        return cls(mean, ad.exp(log_var), log_var=log_var)

    @classmethod
    def standard(cls, d: int) -> "DiagGaussian":
        return cls(np.zeros(d), np.ones(d), log_var=Tensor(np.zeros(d)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def row(self, i: int) -> "DiagGaussian":
        lv = None if self._log_var is None else self._log_var[i]
        return DiagGaussian(self.mean[i], self.var[i], log_var=lv)

    def __len__(self) -> int:
        return self.mean.shape[0] if self.mean.ndim > 1 else 1

    @property
    def log_var(self) -> Tensor:
        if self._log_var is None:
            self._log_var = ad.log(self.var)
        return self._log_var

    @property
    def precision(self) -> Tensor:
        return 1.0 / self.var

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.data.copy(), self.var.data.copy()

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.data, self.var.data)

    def __repr__(self) -> str:
        return f"DiagGaussian(d={self.dim})"


def _same_dim(*gs: DiagGaussian) -> int:
    dims = {g.dim for g in gs}
    if len(dims) != 1:
        raise DimensionMismatch(f"Gaussians of differing dimension: {sorted(dims)}")
    return dims.pop()


class NoiseSource:
    """Counter-based standard-normal stream: draw ``k`` of seed ``s`` is a
    pure function of ``(s, k)``."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def standard_normal(self, shape) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return rng.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return rng.random(shape)


def poe_combine(experts: Sequence[DiagGaussian], prior: DiagGaussian) -> DiagGaussian:
    """Product of Gaussian experts and a prior: precisions add, and the mean
    is the precision-weighted average of the factor means."""
    if not experts:
        return prior
    _same_dim(prior, *experts)
    precision = prior.precision
    weighted = prior.mean * prior.precision
    for e in experts:
        p = e.precision
        precision = precision + p
        weighted = weighted + e.mean * p
    var = 1.0 / precision
    return DiagGaussian(weighted * var, var)


def kl_to_standard(q: DiagGaussian, axis=None) -> Tensor:
    """KL(q || N(0, I)); ``axis=-1`` gives one value per stacked row."""
    return 0.5 * ad.sum_(q.var + ad.square(q.mean) - 1.0 - q.log_var, axis=axis)


def kl_between(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians."""
    _same_dim(q, p)
    diff = q.mean - p.mean
    return 0.5 * ad.sum_(p.log_var - q.log_var + (q.var + ad.square(diff)) / p.var - 1.0)


def wasserstein_align(a: DiagGaussian, b: DiagGaussian) -> Tensor:
    """Alignment loss with the variance vectors compared directly:
    ``||mu_a - mu_b||^2 + ||var_a - var_b||^2``."""
    _same_dim(a, b)
    return ad.sum_(ad.square(a.mean - b.mean)) + ad.sum_(ad.square(a.var - b.var))


def wasserstein2_exact(a: DiagGaussian, b: DiagGaussian) -> Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians."""
    _same_dim(a, b)
    return ad.sum_(ad.square(a.mean - b.mean)) + ad.sum_(ad.square(ad.sqrt(a.var) - ad.sqrt(b.var)))


ALIGNMENTS = {"printed": wasserstein_align, "exact": wasserstein2_exact}


def reparameterize(q: DiagGaussian, noise: NoiseSource) -> Tensor:
    eps = noise.standard_normal(q.mean.shape)
    return q.mean + ad.sqrt(q.var) * Tensor(eps)
