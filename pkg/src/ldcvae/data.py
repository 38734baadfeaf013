"""Seeded synthetic multimodal cohorts and their on-disk format.

A cohort directory holds ``manifest.json`` (spec, genomic schema and one
entry per patient with its payload offsets) and ``features.bin``: an 8-byte
magic, a little-endian uint32 format version, then float32 little-endian
values.  Generated features are rounded to float32 so a write/read cycle
is exact; in memory everything is float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import GENOMIC_CATEGORIES, N_CATEGORIES
from .errors import CohortSpecError, HeaderError, TruncatedPayloadError, VersionMismatchError
from .survival import SurvivalLabel

MAGIC = b"LDCVCOH\x00"
FORMAT_VERSION = 1
N_FOLDS = 5
MANIFEST = "manifest.json"
FEATURES = "features.bin"


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 200
    bag_size_range: tuple[int, int] = (16, 48)
    d_path: int = 64
    genomic_dims: tuple[int, ...] = (12, 10, 8, 10, 12, 8)
    signal_strength: float = 1.5
    censor_rate: float = 0.2
    missing_rate: float = 0.0
    seed: int = 7
    n_atoms: int = 8
    noise_scale: float = 1.0
    base_months: float = 24.0

    def __post_init__(self):
        lo, hi = self.bag_size_range
        problems = []
        if self.n_patients < 1:
            problems.append("n_patients must be >= 1")
        if not 1 <= lo <= hi:
            problems.append(f"bag_size_range must satisfy 1 <= min <= max, got {self.bag_size_range}")
        if self.d_path < 1:
            problems.append("d_path must be >= 1")
        if len(self.genomic_dims) != N_CATEGORIES or min(self.genomic_dims) < 1:
            problems.append(f"genomic_dims needs {N_CATEGORIES} positive lengths")
        if self.signal_strength < 0:
            problems.append("signal_strength must be >= 0")
        if not 0 <= self.censor_rate < 1:
            problems.append("censor_rate must lie in [0, 1)")
        if not 0 <= self.missing_rate <= 1:
            problems.append("missing_rate must lie in [0, 1]")
        if self.n_atoms < 1 or self.noise_scale < 0 or self.base_months <= 0:
            problems.append("n_atoms, noise_scale and base_months must be positive")
        if problems:
            raise CohortSpecError("; ".join(problems))

    def to_json(self) -> dict:
        d = asdict(self)
        d["bag_size_range"] = list(self.bag_size_range)
        d["genomic_dims"] = list(self.genomic_dims)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        if "bag_size_range" in d:
            d["bag_size_range"] = tuple(d["bag_size_range"])
        if "genomic_dims" in d:
            d["genomic_dims"] = tuple(d["genomic_dims"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CohortSpecError(f"unknown cohort spec fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def schema(self) -> dict[str, int]:
        return dict(zip(GENOMIC_CATEGORIES, self.genomic_dims))


@dataclass
class PatientRecord:
    id: str
    bag: np.ndarray
    genomics: tuple[np.ndarray, ...] | None
    label: SurvivalLabel
    fold: int = 0
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def has_genomics(self) -> bool:
        return self.genomics is not None

    def without_genomics(self) -> "PatientRecord":
        return replace(self, genomics=None)

    def same_as(self, other: "PatientRecord") -> bool:
        if (self.id, self.label, self.fold) != (other.id, other.label, other.fold):
            return False
        if self.bag.shape != other.bag.shape or not np.array_equal(self.bag, other.bag):
            return False
        if self.has_genomics != other.has_genomics:
            return False
        if self.genomics is None:
            return True
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.genomics, other.genomics))


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def assign_folds(n: int, seed: int, n_folds: int = N_FOLDS) -> np.ndarray:
    """Balanced fold labels from a seeded permutation of patient indices."""
    perm = np.random.default_rng([seed, 0xF01D]).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % n_folds
    return folds


def generate_cohort(spec: CohortSpec) -> list[PatientRecord]:
    """Draw a cohort where one latent risk factor drives pathology features,
    genomic categories and an exponential survival time."""
    rng = np.random.default_rng(spec.seed)
    atoms = rng.normal(size=(spec.n_atoms, spec.d_path))
    direction = rng.normal(size=spec.d_path)
    direction /= np.linalg.norm(direction)
    # random signs, magnitudes bounded away from zero so every coordinate carries signal
    loadings = [rng.choice([-1.0, 1.0], size=n) * rng.uniform(1.0, 2.0, size=n) for n in spec.genomic_dims]
    folds = assign_folds(spec.n_patients, spec.seed)
    width = len(str(spec.n_patients - 1))
    lo, hi = spec.bag_size_range
    s = spec.signal_strength

    records = []
    for k in range(spec.n_patients):
        r = rng.normal()
        m = int(rng.integers(lo, hi + 1))
        which = rng.integers(0, spec.n_atoms, size=m)
        bag = atoms[which] + s * r * direction + spec.noise_scale * rng.normal(size=(m, spec.d_path))
        genomics = tuple(_f32(s * r * a + spec.noise_scale * rng.normal(size=a.size)) for a in loadings)
        event_time = spec.base_months * rng.exponential() / math.exp(r)
        censored = bool(rng.random() < spec.censor_rate)
        u = rng.random()
        observed = event_time * u if censored else event_time
        observed = max(observed, 1e-6)
        records.append(PatientRecord(
            id=f"P{k:0{width}d}",
            bag=_f32(bag),
            genomics=genomics,
            label=SurvivalLabel(float(observed), censored),
            fold=int(folds[k]),
            extras={"risk_factor": float(r), "event_time": float(event_time)},
        ))
    return records


def mask_genomics(records: Sequence[PatientRecord], eta: float, seed: int) -> list[PatientRecord]:
    """Drop genomics for round(eta * n) patients chosen without replacement."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {eta}")
    n = len(records)
    count = int(math.floor(eta * n + 0.5))
    chosen = np.random.default_rng([seed, 0x3A5C]).choice(n, size=count, replace=False) if count else []
    masked = set(int(i) for i in chosen)
    return [rec.without_genomics() if i in masked else rec for i, rec in enumerate(records)]


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sI")


def write_cohort(records: Sequence[PatientRecord], path, spec: CohortSpec | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    d_path = spec.d_path if spec else (records[0].bag.shape[1] if records else 0)
    dims = spec.genomic_dims if spec else (
        tuple(g.size for g in next((r.genomics for r in records if r.has_genomics), ())) or ())
    chunks, entries, offset = [], [], 0
    for rec in records:
        bag = np.asarray(rec.bag, dtype="<f4")
        entry = {
            "id": rec.id,
            "fold": rec.fold,
            "time_months": rec.label.time_months,
            "censored": rec.label.censored,
            "n_instances": int(bag.shape[0]),
            "offset": offset,
            "has_genomics": rec.has_genomics,
        }
        chunks.append(bag.reshape(-1))
        offset += bag.size
        if rec.has_genomics:
            g = np.concatenate([np.asarray(v, dtype="<f4") for v in rec.genomics])
            entry["genomic_offset"] = offset
            chunks.append(g)
            offset += g.size
        entries.append(entry)
    manifest = {
        "format": "ldcvae-cohort",
        "version": FORMAT_VERSION,
        "spec": spec.to_json() if spec else None,
        "d_path": int(d_path),
        "genomic_schema": dict(zip(GENOMIC_CATEGORIES, map(int, dims))),
        "n_values": offset,
        "patients": entries,
    }
    payload = np.concatenate(chunks).astype("<f4").tobytes() if chunks else b""
    (path / FEATURES).write_bytes(_HEADER.pack(MAGIC, FORMAT_VERSION) + payload)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise HeaderError(f"malformed manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != "ldcvae-cohort":
        raise HeaderError("manifest is not an ldcvae cohort")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"manifest version {manifest.get('version')} != {FORMAT_VERSION}")
    return manifest


def read_cohort(path) -> list[PatientRecord]:
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / FEATURES).read_bytes()
    if len(raw) < _HEADER.size:
        raise HeaderError("features.bin shorter than its header")
    magic, version = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise HeaderError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"payload version {version} != {FORMAT_VERSION}")
    payload = raw[_HEADER.size:]
    n_values = int(manifest.get("n_values", 0))
    if len(payload) != 4 * n_values:
        raise TruncatedPayloadError(f"payload holds {len(payload) // 4} values, manifest expects {n_values}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    d_path = int(manifest["d_path"])
    dims = [int(v) for v in manifest["genomic_schema"].values()]
    records = []
    for e in manifest["patients"]:
        start, m = int(e["offset"]), int(e["n_instances"])
        bag = values[start:start + m * d_path].reshape(m, d_path).copy()
        genomics = None
        if e["has_genomics"]:
            g0 = int(e["genomic_offset"])
            splits = np.cumsum(dims)[:-1]
            genomics = tuple(a.copy() for a in np.split(values[g0:g0 + sum(dims)], splits))
        records.append(PatientRecord(
            id=e["id"], bag=bag, genomics=genomics,
            label=SurvivalLabel(float(e["time_months"]), bool(e["censored"])), fold=int(e["fold"]),
        ))
    return records


def read_spec(path) -> CohortSpec | None:
    spec = read_manifest(path).get("spec")
    return CohortSpec.from_json(spec) if spec else None
