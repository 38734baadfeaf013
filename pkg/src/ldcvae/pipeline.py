"""Training, evaluation and cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import N_FOLDS, PatientRecord, mask_genomics
from .errors import EmptyInputError
from .fusion import compare_top_instances, write_coattention_csv
from .gaussian import NoiseSource
from .model import LdCvaeModel, ModelConfig
from .nn import AdamW
from .survival import (
    KMCurve,
    LogRankResult,
    apply_bins,
    bin_edges,
    c_index,
    km_curve,
    label_arrays,
    logrank_test,
    stratify_median,
    write_km_csv,
    write_km_svg,
)

log = logging.getLogger(__name__)

ETA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
LOSS_KEYS = ("total", "surv", "vib_trans", "ld_cvae", "recon", "kl_joint", "kl_specific", "align")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-4
    weight_decay: float = 1e-5
    accumulation_steps: int = 32
    alpha: float = 0.1
    warmup_steps: int | None = None  # None: one epoch of optimizer steps
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.accumulation_steps < 1:
            raise ValueError("epochs and accumulation_steps must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.alpha < 0:
            raise ValueError("lr, weight_decay and alpha must be non-negative")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_json(d["model"])
        return cls(**d)

    def warmup_for(self, n_train: int) -> int:
        return self.warmup_steps or math.ceil(n_train / self.accumulation_steps)


def beta_at(step: int, warmup_steps: int) -> float:
    """Cosine KL annealing from 0 at step 0 to 1 at ``warmup_steps``."""
    if step < 0 or warmup_steps <= 0:
        raise ValueError(f"need step >= 0 and warmup_steps > 0, got {step}, {warmup_steps}")
    return 0.5 * (1.0 - math.cos(math.pi * min(step / warmup_steps, 1.0)))


def bin_records(records: Sequence[PatientRecord], edges: np.ndarray) -> list[PatientRecord]:
    times, _ = label_arrays([r.label for r in records])
    bins = apply_bins(times, edges)
    return [replace(r, label=r.label.with_bin(b)) for r, b in zip(records, bins)]


@dataclass
class TrainResult:
    model: LdCvaeModel
    edges: np.ndarray
    trace: list[dict]
    optimizer_steps: int

    def epoch_means(self, key: str) -> np.ndarray:
        """Per-patient average of one loss component for every epoch."""
        epochs = sorted({r["epoch"] for r in self.trace})
        out = []
        for e in epochs:
            rows = [r for r in self.trace if r["epoch"] == e]
            out.append(sum(r[key] for r in rows) / sum(r["n_patients"] for r in rows))
        return np.array(out)


def train_fold(records: Sequence[PatientRecord], config: TrainConfig = TrainConfig(),
               log_path=None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a model on complete training records, one patient per forward pass.

    Gradients of ``accumulation_steps`` patients are summed before each
    optimizer step.  Every optimizer step appends one record to the trace
    (and to ``log_path`` as a JSON line) holding the summed loss components.
    """
    if not records:
        raise EmptyInputError("empty training set")
    times, censored = label_arrays([r.label for r in records])
    edges = bin_edges(times, censored, config.model.n_bins)
    train = bin_records(records, edges)
    n = len(train)
    acc = config.accumulation_steps
    warmup = config.warmup_for(n)

    model = LdCvaeModel(config.model, seed=config.seed)
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 0x0D3E])
    trace: list[dict] = []
    sink = open(log_path, "w") if log_path is not None else None
    step = 0
    try:
        for epoch in range(config.epochs):
            order = order_rng.permutation(n)
            for start in range(0, n, acc):
                beta = beta_at(step, warmup)
                opt.zero_grad()
                sums = dict.fromkeys(LOSS_KEYS, 0.0)
                chunk = order[start:start + acc]
                for idx in chunk:
                    noise = NoiseSource(config.seed, counter=(epoch * n + int(idx)) << 8)
                    res = model.training_step(train[idx], beta, config.alpha, noise)
                    ad.backward(res.total)
                    for k, v in res.components().items():
                        sums[k] += v
                opt.step()
                step += 1
                row = {"step": step, "epoch": epoch, "beta": beta, "n_patients": len(chunk), **sums}
                trace.append(row)
                if sink is not None:
                    sink.write(json.dumps(row) + "\n")
                if on_step is not None:
                    on_step(row)
            log.info("epoch %d total/patient %.4f", epoch, sum(r["total"] for r in trace if r["epoch"] == epoch) / n)
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(model, edges, trace, step)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    ids: list[str]
    risks: np.ndarray
    c_index: float
    high: np.ndarray
    low: np.ndarray
    km: dict[str, KMCurve]
    logrank: LogRankResult | None
    coattention: dict[str, np.ndarray]


def evaluate(model: LdCvaeModel, records: Sequence[PatientRecord], missing: bool = False) -> EvalResult:
    """Risk for every record, then concordance, median split, KM and log-rank.

    In missing mode the genomic vectors are stripped from the records before
    the model sees them.  Records without genomics always go through the
    generation path.
    """
    if not records:
        raise EmptyInputError("empty evaluation set")
    if missing:
        records = [r.without_genomics() for r in records]
    risks, coattn = [], {}
    for rec in records:
        pred = model.predict(rec)
        risks.append(pred.risk)
        if pred.coattention is not None:
            coattn[rec.id] = pred.coattention
    risks = np.array(risks)
    times, censored = label_arrays([r.label for r in records])
    ci = c_index(risks, times, censored)
    km, lr = {}, None
    if len(records) >= 2:
        high, low = stratify_median(risks)
        for name, idx in (("high", high), ("low", low)):
            if idx.size:
                km[name] = km_curve(times[idx], censored[idx])
        if high.size and low.size and not censored.all():
            lr = logrank_test(times[high], censored[high], times[low], censored[low])
    else:
        high, low = np.array([], dtype=int), np.arange(len(records))
    return EvalResult([r.id for r in records], risks, ci, high, low, km, lr, coattn)


def eta_sweep(model: LdCvaeModel, records: Sequence[PatientRecord], etas: Sequence[float] = ETA_GRID,
              seed: int = 0) -> dict[float, float]:
    """C-index when a fraction ``eta`` of the records lose their genomics."""
    return {float(eta): evaluate(model, mask_genomics(records, eta, seed)).c_index for eta in etas}


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    c_index_complete: float
    c_index_missing: float
    loss_trace: list[dict]
    km: dict[str, dict[str, KMCurve]]
    logrank_p: dict[str, float]
    c_index_baseline: float | None = None
    eta_sweep: dict[float, float] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = {"fold": self.fold, "c_index_complete": self.c_index_complete,
             "c_index_missing": self.c_index_missing,
             "logrank_p_complete": self.logrank_p.get("complete", float("nan")),
             "logrank_p_missing": self.logrank_p.get("missing", float("nan"))}
        if self.c_index_baseline is not None:
            d["c_index_baseline"] = self.c_index_baseline
        for eta, ci in self.eta_sweep.items():
            d[f"c_index_eta_{eta:g}"] = ci
        return d


@dataclass
class CVResult:
    folds: list[FoldResult]

    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and population std of every numeric fold column."""
        rows = [f.row() for f in self.folds]
        keys = [k for k in rows[0] if k != "fold"]
        out = {}
        for k in keys:
            vals = np.array([r[k] for r in rows], dtype=float)
            out[k] = (float(np.mean(vals)), float(np.std(vals)))
        return out


def split_fold(records: Sequence[PatientRecord], fold: int) -> tuple[list[PatientRecord], list[PatientRecord]]:
    train = [r for r in records if r.fold != fold]
    test = [r for r in records if r.fold == fold]
    return train, test


def run_fold(records: Sequence[PatientRecord], fold: int, config: TrainConfig = TrainConfig(),
             baseline: bool = False, etas: Sequence[float] | None = None, report_dir=None) -> FoldResult:
    train, test = split_fold(records, fold)
    if not train or not test:
        raise EmptyInputError(f"fold {fold} leaves an empty train or test split")
    out = Path(report_dir) if report_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    fit = train_fold(train, config, log_path=out / f"fold{fold}_loss.jsonl" if out else None)
    complete = evaluate(fit.model, test)
    missing = evaluate(fit.model, test, missing=True)
    seconds = time.perf_counter() - start
    result = FoldResult(
        fold=fold,
        c_index_complete=complete.c_index,
        c_index_missing=missing.c_index,
        loss_trace=fit.trace,
        km={"complete": complete.km, "missing": missing.km},
        logrank_p={k: v.logrank.p_value for k, v in (("complete", complete), ("missing", missing)) if v.logrank},
        extras={"edges": fit.edges.tolist(), "optimizer_steps": fit.optimizer_steps, "model": fit.model,
                "risks_complete": complete.risks, "risks_missing": missing.risks, "seconds": seconds},
    )
    if etas:
        result.eta_sweep = eta_sweep(fit.model, test, etas, seed=config.seed + fold)
    if baseline:
        base_cfg = replace(config, model=replace(config.model, genomic_branch=False))
        base_fit = train_fold(train, base_cfg)
        result.c_index_baseline = evaluate(base_fit.model, test, missing=True).c_index
    if out is not None:
        _write_fold_reports(out, result, complete, missing)
    return result


def _write_fold_reports(out: Path, result: FoldResult, complete: EvalResult, missing: EvalResult) -> None:
    f = result.fold
    with open(out / f"fold{f}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "risk_complete", "risk_missing", "group_complete"])
        high = set(complete.high.tolist())
        for i, pid in enumerate(complete.ids):
            w.writerow([pid, repr(float(complete.risks[i])), repr(float(missing.risks[i])),
                        "high" if i in high else "low"])
    for mode, res in (("complete", complete), ("missing", missing)):
        if res.km:
            write_km_csv(res.km, out / f"fold{f}_km_{mode}.csv")
            p = f" p={res.logrank.p_value:.3g}" if res.logrank else ""
            write_km_svg(res.km, out / f"fold{f}_km_{mode}.svg", title=f"fold {f} {mode}{p}")
    if complete.coattention:
        pid = complete.ids[0]
        write_coattention_csv(complete.coattention[pid], out / f"fold{f}_coattention_{pid}.csv", pid)
        if pid in missing.coattention:
            write_coattention_csv(missing.coattention[pid], out / f"fold{f}_coattention_{pid}_generated.csv", pid)
            swap = compare_top_instances(complete.coattention[pid], missing.coattention[pid])
            (out / f"fold{f}_coattention_swap.json").write_text(json.dumps({"patient": pid, **swap}, indent=1))


def run_cv(records: Sequence[PatientRecord], config: TrainConfig = TrainConfig(), report_dir=None,
           folds: Sequence[int] = range(N_FOLDS), baseline: bool = False,
           etas: Sequence[float] | None = None) -> CVResult:
    results = [run_fold(records, f, config, baseline=baseline, etas=etas, report_dir=report_dir) for f in folds]
    cv = CVResult(results)
    if report_dir is not None:
        write_summary_csv(cv, Path(report_dir) / "summary.csv")
    return cv


def write_summary_csv(cv: CVResult, path) -> None:
    """Rows are (mode, metric); columns mean, std and one per fold."""
    rows = [f.row() for f in cv.folds]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "metric", "mean", "std"] + [f"fold{r['fold']}" for r in rows])
        for key, (mean, std) in cv.summary().items():
            mode, metric = _split_key(key)
            w.writerow([mode, metric, repr(mean), repr(std)] + [repr(float(r[key])) for r in rows])


def _split_key(key: str) -> tuple[str, str]:
    if key.startswith("c_index_eta_"):
        return f"eta={key.rsplit('_', 1)[1]}", "c_index"
    metric, _, mode = key.rpartition("_")
    return mode, metric
