"""Feature embedders and the token-readout variational encoders."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyInputError, SchemaError
from .gaussian import DiagGaussian, NoiseSource
from .nn import Linear, ParamStore, TransformerBlock

GENOMIC_CATEGORIES = (
    "tumor_suppression",
    "oncogenesis",
    "protein_kinases",
    "cellular_differentiation",
    "transcription",
    "cytokines_and_growth",
)
N_CATEGORIES = len(GENOMIC_CATEGORIES)


SELU_ALPHA_PRIME = -1.7580993408473766


def alpha_dropout(h: Tensor, p: float, noise: NoiseSource) -> Tensor:
    """Self-normalizing dropout: dropped units are set to the negative SELU
    saturation value, then an affine map restores zero mean and unit variance."""
    keep = noise.uniform(h.shape) >= p
    q = 1.0 - p
    a = (q + SELU_ALPHA_PRIME ** 2 * q * p) ** -0.5
    b = -a * p * SELU_ALPHA_PRIME
    scale = Tensor(np.where(keep, a, 0.0))
    shift = Tensor(np.where(keep, b, a * SELU_ALPHA_PRIME + b))
    return h * scale + shift


class GenomicEmbedder:
    """One affine -> ELU -> affine embedder per functional category, with
    alpha-dropout on the hidden layer during training."""

    def __init__(self, store: ParamStore, name: str, raw_dims: Sequence[int], d_out: int,
                 dropout: float = 0.0):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.dropout = dropout
        if len(raw_dims) != N_CATEGORIES:
            raise SchemaError(f"expected {N_CATEGORIES} category lengths, got {len(raw_dims)}")
        self.raw_dims = tuple(int(d) for d in raw_dims)
        self.d_out = d_out
        self.layers = [
            (Linear(store, f"{name}.{cat}.fc1", n, d_out), Linear(store, f"{name}.{cat}.fc2", d_out, d_out))
            for cat, n in zip(GENOMIC_CATEGORIES, self.raw_dims)
        ]

    def __call__(self, raw: Sequence, noise: NoiseSource | None = None) -> Tensor:
        """``(N, d_out)`` embeddings; dropout is applied only when ``noise`` is given."""
        if len(raw) != N_CATEGORIES:
            raise SchemaError(f"expected {N_CATEGORIES} genomic categories, got {len(raw)}")
        rows = []
        for cat, n, vec, (fc1, fc2) in zip(GENOMIC_CATEGORIES, self.raw_dims, raw, self.layers):
            v = ad.as_tensor(vec)
            if v.shape != (n,):
                raise SchemaError(f"category {cat!r}: expected length {n}, got shape {v.shape}")
            h = ad.elu(fc1(ad.reshape(v, (1, n))))
            if noise is not None and self.dropout > 0:
                h = alpha_dropout(h, self.dropout, noise)
            rows.append(fc2(h))
        return ad.concat(rows, axis=0)


class TokenPosteriorEncoder:
    """Projects a set of elements to ``d_model``, prepends the mean and
    log-variance readout tokens and runs a transformer in which only the
    elements serve as keys.  The two token outputs are mapped to the
    posterior mean and log-variance."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_model: int, d_latent: int,
                 n_layers: int, n_heads: int, attention: str = "exact"):
        self.proj = Linear(store, f"{name}.proj", d_in, d_model)
        self.mu_token = store.normal(f"{name}.mu_token", 1, d_model)
        self.sigma_token = store.normal(f"{name}.sigma_token", 1, d_model)
        self.transformer = TransformerBlock(store, f"{name}.transformer", d_model, n_layers, n_heads, attention)
        self.mu_head = Linear(store, f"{name}.mu_head", d_model, d_latent)
        self.logvar_head = Linear(store, f"{name}.logvar_head", d_model, d_latent)
        self.d_in, self.d_model, self.d_latent = d_in, d_model, d_latent

    def __call__(self, elements: Tensor, attn_log: list | None = None) -> DiagGaussian:
        elements = ad.as_tensor(elements)
        if elements.ndim != 2 or elements.shape[1] != self.d_in:
            raise SchemaError(f"expected (n, {self.d_in}) elements, got {elements.shape}")
        n = elements.shape[0]
        seq = ad.concat([self.mu_token, self.sigma_token, self.proj(elements)], axis=0)
        out = self.transformer(seq, n_keys=n, attn_log=attn_log)
        mean = ad.reshape(self.mu_head(out[0:1]), (self.d_latent,))
        log_var = ad.reshape(self.logvar_head(out[1:2]), (self.d_latent,))
        return DiagGaussian.from_log_var(mean, log_var)


class VibTransEncoder(TokenPosteriorEncoder):
    """Pathology posterior q(z_Y | Y) from a bag of instance features."""

    def __call__(self, bag, attn_log: list | None = None) -> DiagGaussian:
        bag = ad.as_tensor(bag)
        if bag.ndim != 2 or bag.shape[0] == 0:
            raise EmptyInputError(f"pathology bag must hold at least one instance, got shape {bag.shape}")
        return super().__call__(bag, attn_log)


class LdVaeEncoder(TokenPosteriorEncoder):
    """Genomic posterior q(z | X) from the six embedded categories."""

    def __call__(self, genes, attn_log: list | None = None) -> DiagGaussian:
        genes = ad.as_tensor(genes)
        if genes.ndim != 2 or genes.shape[0] != N_CATEGORIES:
            raise SchemaError(f"expected {N_CATEGORIES} embedded categories, got shape {genes.shape}")
        return super().__call__(genes, attn_log)


class SurvivalHead:
    """Affine map from a latent vector to per-bin hazard logits."""

    def __init__(self, store: ParamStore, name: str, d_in: int, n_bins: int):
        self.fc = Linear(store, f"{name}.fc", d_in, n_bins)
        self.d_in = d_in

    def __call__(self, z: Tensor) -> Tensor:
        z = ad.as_tensor(z)
        return ad.reshape(self.fc(ad.reshape(z, (1, self.d_in))), (self.fc.d_out,))


def as_bag(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise SchemaError(f"feature bag must be 2-d, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise SchemaError("feature bag contains NaN")
    return arr
