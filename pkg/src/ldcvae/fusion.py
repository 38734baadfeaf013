"""Genomic-guided co-attention, set-based MIL aggregation and the final
survival head."""

from __future__ import annotations

import csv
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import GENOMIC_CATEGORIES
from .errors import EmptyInputError
from .nn import AttnPool, Linear, ParamStore, TransformerBlock
from .survival import SurvivalOutput


class CoAttention:
    """Single-head attention with genomic embeddings as queries over the
    pathology instances."""

    def __init__(self, store: ParamStore, name: str, d_query: int, d_instance: int, d_model: int):
        self.wq = Linear(store, f"{name}.wq", d_query, d_model, bias=False)
        self.wk = Linear(store, f"{name}.wk", d_instance, d_model, bias=False)
        self.wv = Linear(store, f"{name}.wv", d_instance, d_model, bias=False)
        self.scale = 1.0 / math.sqrt(d_model)

    def __call__(self, genes: Tensor, bag: Tensor) -> tuple[Tensor, Tensor]:
        bag = ad.as_tensor(bag)
        if bag.ndim != 2 or bag.shape[0] == 0:
            raise EmptyInputError(f"co-attention needs a non-empty bag, got shape {bag.shape}")
        scores = ad.matmul(self.wq(genes), ad.transpose(self.wk(bag))) * self.scale
        weights = ad.softmax_lastdim(scores)
        return ad.matmul(weights, self.wv(bag)), weights


class MilAggregator:
    """Transformer over a set followed by gated attention pooling."""

    def __init__(self, store: ParamStore, name: str, d_model: int, n_layers: int, n_heads: int,
                 d_in: int | None = None, attention: str = "exact"):
        self.proj = Linear(store, f"{name}.proj", d_in, d_model) if d_in not in (None, d_model) else None
        self.transformer = TransformerBlock(store, f"{name}.transformer", d_model, n_layers, n_heads, attention)
        self.pool = AttnPool(store, f"{name}.pool", d_model)

    def encode(self, seq: Tensor) -> Tensor:
        seq = ad.as_tensor(seq)
        if seq.ndim != 2 or seq.shape[0] == 0:
            raise EmptyInputError(f"MIL aggregation needs a non-empty sequence, got shape {seq.shape}")
        if self.proj is not None:
            seq = self.proj(seq)
        return self.transformer(seq)

    def __call__(self, seq: Tensor) -> tuple[Tensor, Tensor]:
        return self.pool(self.encode(seq))


def mil_aggregate(seq: Tensor, aggregator: MilAggregator) -> Tensor:
    return aggregator(seq)[0]


class FusionHead:
    def __init__(self, store: ParamStore, name: str, d_model: int, n_bins: int):
        self.fc = Linear(store, f"{name}.fc", 2 * d_model, n_bins)
        self.d_model = d_model

    def __call__(self, path_vec: Tensor, gene_vec: Tensor) -> SurvivalOutput:
        h = ad.reshape(ad.concat([path_vec, gene_vec]), (1, 2 * self.d_model))
        return SurvivalOutput.from_logits(ad.reshape(self.fc(h), (self.fc.d_out,)))


def predict_survival(path_vec: Tensor, gene_vec: Tensor, head: FusionHead) -> SurvivalOutput:
    return head(path_vec, gene_vec)


def write_coattention_csv(weights: np.ndarray, path, patient_id: str = "") -> None:
    """One row per (category, instance) pair."""
    weights = np.asarray(weights)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "category", "instance", "weight"])
        for c, cat in enumerate(GENOMIC_CATEGORIES[: weights.shape[0]]):
            for j in range(weights.shape[1]):
                w.writerow([patient_id, cat, j, repr(float(weights[c, j]))])


def top_instances(weights: np.ndarray, k: int = 5) -> list[set[int]]:
    """Per-category index sets of the ``k`` most attended instances."""
    weights = np.asarray(weights)
    k = min(k, weights.shape[1])
    return [set(np.argsort(-row, kind="stable")[:k].tolist()) for row in weights]


def compare_top_instances(genuine: np.ndarray, generated: np.ndarray, k: int = 5) -> dict:
    """Overlap of top-k attended instances under genuine vs generated queries."""
    a, b = top_instances(genuine, k), top_instances(generated, k)
    overlaps = [len(x & y) / max(len(x), 1) for x, y in zip(a, b)]
    return {
        "k": min(k, np.asarray(genuine).shape[1]),
        "per_category": dict(zip(GENOMIC_CATEGORIES, overlaps)),
        "mean_overlap": float(np.mean(overlaps)),
    }
