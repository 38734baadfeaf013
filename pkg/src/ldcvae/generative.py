"""Latent differentiation, conditional generation of the functional genomic
embeddings, and the conditional VAE objective."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import N_CATEGORIES
from .errors import DimensionMismatch
from .gaussian import ALIGNMENTS, DiagGaussian, NoiseSource, kl_to_standard, poe_combine, reparameterize
from .nn import ParamStore, StackedLinear


class FunctionMapper:
    """psi_i: latent z -> (mean, log-variance) of the category-specific latent.

    The six mappers hold independent weights stacked on a leading axis.
    """

    def __init__(self, store: ParamStore, name: str, d_latent: int, hidden: int | None = None):
        hidden = hidden or 2 * d_latent
        self.d_latent = d_latent
        self.fc1 = StackedLinear(store, f"{name}.fc1", N_CATEGORIES, d_latent, hidden)
        self.fc2 = StackedLinear(store, f"{name}.fc2", N_CATEGORIES, hidden, 2 * d_latent)

    def __call__(self, z: Tensor) -> DiagGaussian:
        """Stacked ``(N, d)`` posteriors, one row per category."""
        d = self.d_latent
        z = ad.broadcast(ad.reshape(ad.as_tensor(z), (1, 1, d)), (N_CATEGORIES, 1, d))
        h = ad.reshape(self.fc2(ad.tanh(self.fc1(z))), (N_CATEGORIES, 2 * d))
        return DiagGaussian.from_log_var(h[:, :d], h[:, d:])


class FunctionDecoder:
    """theta_i: concat(z_i, z_Y) -> reconstructed category embedding."""

    def __init__(self, store: ParamStore, name: str, d_latent: int, d_out: int, hidden: int | None = None):
        hidden = hidden or d_out
        self.d_latent, self.d_out = d_latent, d_out
        self.fc1 = StackedLinear(store, f"{name}.fc1", N_CATEGORIES, 2 * d_latent, hidden)
        self.fc2 = StackedLinear(store, f"{name}.fc2", N_CATEGORIES, hidden, d_out)

    def __call__(self, z_specific: Tensor, z_path: Tensor) -> Tensor:
        d = self.d_latent
        zy = ad.broadcast(ad.reshape(ad.as_tensor(z_path), (1, d)), (N_CATEGORIES, d))
        h = ad.reshape(ad.concat([z_specific, zy], axis=1), (N_CATEGORIES, 1, 2 * d))
        return ad.reshape(self.fc2(ad.tanh(self.fc1(h))), (N_CATEGORIES, self.d_out))


def joint_posterior(path: DiagGaussian, genes: DiagGaussian | None = None) -> DiagGaussian:
    """PoE of the available marginal posteriors with the N(0, I) prior."""
    prior = DiagGaussian.standard(path.dim)
    experts = [path] if genes is None else [genes, path]
    return poe_combine(experts, prior)


def differentiate_latent(z: Tensor, mappers: FunctionMapper) -> list[DiagGaussian]:
    """Function-specific posteriors N(psi_i^mu(z), psi_i^var(z)), i = 1..N."""
    stacked = mappers(z)
    return [stacked.row(i) for i in range(N_CATEGORIES)]


def reconstruct_genomics(specific: DiagGaussian, z_path: Tensor, decoders: FunctionDecoder,
                         noise: NoiseSource | None) -> Tensor:
    """Decode every category from its own latent plus the pathology code.

    ``specific`` is the stacked ``(N, d)`` output of :class:`FunctionMapper`.
    With ``noise=None`` the category latents are their posterior means.
    Returns an ``(N, d_out)`` tensor.
    """
    if specific.mean.ndim != 2 or specific.mean.shape[0] != N_CATEGORIES:
        raise DimensionMismatch(f"expected {N_CATEGORIES} stacked posteriors, got {specific.mean.shape}")
    z = specific.mean if noise is None else reparameterize(specific, noise)
    return decoders(z, z_path)


@dataclass
class LdCvaeLossReport:
    recon: Tensor  # (N,) squared errors
    kl_joint: Tensor
    kl_specific: Tensor  # (N,)
    align: Tensor
    total: Tensor
    beta: float
    alpha: float

    def as_floats(self) -> dict:
        return {
            "recon": self.recon.data.tolist(),
            "kl_joint": self.kl_joint.item(),
            "kl_specific": self.kl_specific.data.tolist(),
            "align": self.align.item(),
            "total": self.total.item(),
            "beta": self.beta,
            "alpha": self.alpha,
        }


def ldcvae_loss(X: Tensor, path_post: DiagGaussian, gene_post: DiagGaussian, recon: Tensor,
                specific: DiagGaussian, joint: DiagGaussian, beta: float, alpha: float,
                alignment: str = "printed") -> LdCvaeLossReport:
    """Reconstruction + beta-weighted KL terms + alpha-weighted alignment."""
    X = ad.as_tensor(X)
    if X.shape != recon.shape:
        raise DimensionMismatch(f"targets {X.shape} vs reconstructions {recon.shape}")
    if specific.mean.ndim != 2 or specific.mean.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{specific.mean.shape} specific posteriors for {X.shape[0]} categories")
    if not 0.0 <= beta <= 1.0 or alpha < 0:
        raise ValueError(f"need beta in [0, 1] and alpha >= 0, got beta={beta}, alpha={alpha}")
    recon_terms = ad.sum_(ad.square(X - recon), axis=1)
    kl_specific = kl_to_standard(specific, axis=-1)
    kl_joint = kl_to_standard(joint)
    align = ALIGNMENTS[alignment](gene_post, path_post)
    total = ad.sum_(recon_terms) + (ad.sum_(kl_specific) + kl_joint) * float(beta) + align * float(alpha)
    return LdCvaeLossReport(recon_terms, kl_joint, kl_specific, align, total, float(beta), float(alpha))


def report_total_check(report: LdCvaeLossReport) -> float:
    """Absolute gap between the stored total and its recomputation from floats."""
    f = report.as_floats()
    recomputed = sum(f["recon"]) + f["beta"] * (sum(f["kl_specific"]) + f["kl_joint"]) + f["alpha"] * f["align"]
    return abs(recomputed - f["total"])
