"""The assembled multimodal survival model and its checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PatientRecord
from .encoders import GenomicEmbedder, LdVaeEncoder, SurvivalHead, VibTransEncoder
from .errors import HeaderError, TruncatedPayloadError, VersionMismatchError
from .fusion import CoAttention, FusionHead, MilAggregator
from .gaussian import DiagGaussian, NoiseSource, kl_to_standard, reparameterize
from .generative import (
    FunctionDecoder,
    FunctionMapper,
    LdCvaeLossReport,
    joint_posterior,
    ldcvae_loss,
    reconstruct_genomics,
)
from .nn import Linear, ParamStore
from .survival import SurvivalOutput, nll_survival


@dataclass(frozen=True)
class ModelConfig:
    d_path: int = 64
    genomic_dims: tuple[int, ...] = (12, 10, 8, 10, 12, 8)
    d_genomic: int = 64
    d_model: int = 64
    d_latent: int = 32
    n_layers: int = 2
    n_heads: int = 4
    n_bins: int = 4
    attention: str = "exact"
    alignment: str = "printed"
    genomic_branch: bool = True
    genomic_dropout: float = 0.25
    train_queries: str = "reconstructed"  # co-attention input during training: "reconstructed" or "genuine"

    def to_json(self) -> dict:
        d = asdict(self)
        d["genomic_dims"] = list(self.genomic_dims)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "genomic_dims" in d:
            d["genomic_dims"] = tuple(d["genomic_dims"])
        return cls(**d)


@dataclass
class StepResult:
    """Everything one training forward pass produces for a patient."""

    total: Tensor
    surv: Tensor
    vib: Tensor
    ldcvae: LdCvaeLossReport | None
    output: SurvivalOutput
    coattention: np.ndarray | None = None

    def components(self) -> dict:
        d = {
            "total": self.total.item(),
            "surv": self.surv.item(),
            "vib_trans": self.vib.item(),
            "ld_cvae": self.ldcvae.total.item() if self.ldcvae else 0.0,
        }
        if self.ldcvae is not None:
            f = self.ldcvae.as_floats()
            d.update(recon=sum(f["recon"]), kl_joint=f["kl_joint"], kl_specific=sum(f["kl_specific"]),
                     align=f["align"])
        return d


@dataclass
class Prediction:
    output: SurvivalOutput
    risk: float
    coattention: np.ndarray | None
    used_genomics: bool
    reconstruction: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


class LdCvaeModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = c = config
        self.seed = seed
        self.store = s = ParamStore(np.random.default_rng([seed, 0x1D]))
        self.vib = VibTransEncoder(s, "vib", c.d_path, c.d_model, c.d_latent, c.n_layers, c.n_heads, c.attention)
        self.vib_head = SurvivalHead(s, "vib_head", c.d_latent, c.n_bins)
        if c.genomic_branch:
            self.embedder = GenomicEmbedder(s, "genomic_embed", c.genomic_dims, c.d_genomic, c.genomic_dropout)
            self.ldvae = LdVaeEncoder(s, "ldvae", c.d_genomic, c.d_model, c.d_latent, c.n_layers, c.n_heads,
                                      c.attention)
            self.mappers = FunctionMapper(s, "mapper", c.d_latent)
            self.decoders = FunctionDecoder(s, "decoder", c.d_latent, c.d_genomic)
            self.coattn = CoAttention(s, "coattn", c.d_genomic, c.d_path, c.d_model)
            self.gene_mil = MilAggregator(s, "gene_mil", c.d_model, c.n_layers, c.n_heads, d_in=c.d_genomic,
                                          attention=c.attention)
        else:
            self.path_embed = Linear(s, "path_embed", c.d_path, c.d_model)
        self.path_mil = MilAggregator(s, "path_mil", c.d_model, c.n_layers, c.n_heads, attention=c.attention)
        self.head = FusionHead(s, "head", c.d_model, c.n_bins)

    # ------------------------------------------------------------------
    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.store.items())

    def n_parameters(self) -> int:
        return self.store.n_parameters()

    def _fuse(self, queries: Tensor | None, bag: Tensor) -> tuple[SurvivalOutput, np.ndarray | None]:
        if self.config.genomic_branch:
            attended, weights = self.coattn(queries, bag)
            path_vec = self.path_mil(attended)[0]
            gene_vec = self.gene_mil(queries)[0]
            return self.head(path_vec, gene_vec), weights.data
        path_vec = self.path_mil(self.path_embed(bag))[0]
        return self.head(path_vec, Tensor(np.zeros(self.config.d_model))), None

    def training_step(self, record: PatientRecord, beta: float, alpha: float, noise: NoiseSource) -> StepResult:
        """Overall objective for one complete patient: fusion-head survival
        NLL + VIB term + conditional VAE term."""
        label = record.label
        bag = Tensor(record.bag)
        q_path = self.vib(bag)
        z_path = reparameterize(q_path, noise)
        vib_out = SurvivalOutput.from_logits(self.vib_head(z_path))
        vib = nll_survival([vib_out], [label]) + kl_to_standard(q_path) * float(beta)

        report = None
        queries = None
        if self.config.genomic_branch:
            if record.genomics is None:
                raise ValueError(f"patient {record.id}: training needs complete genomic data")
            X = self.embedder(record.genomics, noise)
            q_gene = self.ldvae(X)
            joint = joint_posterior(q_path, q_gene)
            z = reparameterize(joint, noise)
            specific = self.mappers(z)
            recon = reconstruct_genomics(specific, z_path, self.decoders, noise)
            report = ldcvae_loss(X, q_path, q_gene, recon, specific, joint, beta, alpha, self.config.alignment)
            queries = X if self.config.train_queries == "genuine" else recon

        out, weights = self._fuse(queries, bag)
        surv = nll_survival([out], [label])
        total = surv + vib
        if report is not None:
            total = total + report.total
        return StepResult(total, surv, vib, report, out, weights)

    def predict(self, record: PatientRecord, missing: bool = False) -> Prediction:
        """Deterministic prediction from posterior means.

        Without genomics (``missing`` or absent data) the genomic embeddings
        are generated from the pathology-only PoE posterior.
        """
        with ad.no_grad():
            bag = Tensor(record.bag)
            if not self.config.genomic_branch:
                out, _ = self._fuse(None, bag)
                return Prediction(out, out.risk(), None, used_genomics=False)
            use_genes = record.genomics is not None and not missing
            recon = None
            if use_genes:
                queries = self.embedder(record.genomics)
            else:
                queries = self.generate_genomics(record.bag)
                recon = queries.data
            out, weights = self._fuse(queries, bag)
            return Prediction(out, out.risk(), weights, used_genomics=use_genes, reconstruction=recon)

    def generate_genomics(self, bag: np.ndarray) -> Tensor:
        """Reconstructed category embeddings from pathology alone."""
        q_path = self.vib(Tensor(bag))
        joint = joint_posterior(q_path)
        return reconstruct_genomics(self.mappers(joint.mean), q_path.mean, self.decoders, None)

    def posteriors(self, record: PatientRecord) -> dict[str, DiagGaussian]:
        with ad.no_grad():
            q_path = self.vib(Tensor(record.bag))
            out = {"path": q_path, "joint_missing": joint_posterior(q_path)}
            if self.config.genomic_branch and record.genomics is not None:
                q_gene = self.ldvae(self.embedder(record.genomics))
                out["gene"] = q_gene
                out["joint"] = joint_posterior(q_path, q_gene)
            return out

    # ------------------------------------------------------------------
    def save(self, path, metadata: dict | None = None) -> None:
        save_checkpoint(path, self, metadata)

    @classmethod
    def load(cls, path) -> "LdCvaeModel":
        return load_checkpoint(path)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LDCVCKPT"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path, model: LdCvaeModel, metadata: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, then named float64 tensors."""
    header = json.dumps({"config": model.config.to_json(), "seed": model.seed,
                         "metadata": metadata or {}}).encode()
    parts = [CKPT_MAGIC, _U32.pack(CKPT_VERSION), _U32.pack(len(header)), header, _U32.pack(len(model.store))]
    for name, t in model.store.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[LdCvaeModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise HeaderError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedPayloadError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (version,) = _U32.unpack(take(4))
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} != {CKPT_VERSION}")
    (hlen,) = _U32.unpack(take(4))
    header = json.loads(take(hlen))
    model = LdCvaeModel(ModelConfig.from_json(header["config"]), seed=header.get("seed", 0))
    (count,) = _U32.unpack(take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    model.store.load_state_dict(state)
    return model, header.get("metadata", {})
