import json
import struct

import numpy as np
import pytest
from sklearn.linear_model import LinearRegression
from sklearn.model_selection import cross_val_score

from ldcvae.data import (
    FEATURES,
    MANIFEST,
    CohortSpec,
    assign_folds,
    generate_cohort,
    mask_genomics,
    read_cohort,
    read_spec,
    write_cohort,
)
from ldcvae.errors import CohortSpecError, HeaderError, TruncatedPayloadError, VersionMismatchError


def test_same_seed_byte_identical(tmp_path, small_spec):
    write_cohort(generate_cohort(small_spec), tmp_path / "a", small_spec)
    write_cohort(generate_cohort(small_spec), tmp_path / "b", small_spec)
    for name in (MANIFEST, FEATURES):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_censor_rate_zero():
    records = generate_cohort(CohortSpec(n_patients=50, censor_rate=0.0))
    assert not any(r.label.censored for r in records)


def test_times_positive_and_censoring_before_event():
    records = generate_cohort(CohortSpec(n_patients=300, censor_rate=0.4))
    for r in records:
        assert r.label.time_months > 0
        if r.label.censored:
            assert r.label.time_months <= r.extras["event_time"]
        else:
            assert r.label.time_months == r.extras["event_time"]
    frac = np.mean([r.label.censored for r in records])
    assert abs(frac - 0.4) < 0.1


def test_bag_sizes_and_shapes(small_spec, small_cohort):
    lo, hi = small_spec.bag_size_range
    for r in small_cohort:
        assert lo <= r.bag.shape[0] <= hi and r.bag.shape[1] == small_spec.d_path
        assert [g.size for g in r.genomics] == list(small_spec.genomic_dims)


@pytest.mark.parametrize("bad", [
    {"bag_size_range": (5, 2)},
    {"n_patients": 0},
    {"censor_rate": 1.0},
    {"missing_rate": 1.5},
    {"signal_strength": -1.0},
    {"genomic_dims": (3, 3)},
])
def test_degenerate_spec(bad):
    with pytest.raises(CohortSpecError):
        CohortSpec(**bad)


def test_spec_json_round_trip():
    spec = CohortSpec(n_patients=10, signal_strength=0.5)
    assert CohortSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    with pytest.raises(CohortSpecError):
        CohortSpec.from_json({"n_patient": 3})


def test_fold_partition():
    for n in (5, 23, 200, 201):
        folds = assign_folds(n, seed=7)
        counts = np.bincount(folds, minlength=5)
        assert counts.sum() == n and counts.max() - counts.min() <= 1
    assert np.array_equal(assign_folds(40, 3), assign_folds(40, 3))


def test_folds_in_generated_cohort():
    records = generate_cohort(CohortSpec())
    counts = np.bincount([r.fold for r in records], minlength=5)
    assert counts.tolist() == [40] * 5


def test_cross_modal_signal():
    records = generate_cohort(CohortSpec(n_patients=400, signal_strength=1.0))
    x = np.stack([r.bag.mean(axis=0) for r in records])
    for k in range(6):
        y = np.stack([r.genomics[k] for r in records])
        r2 = cross_val_score(LinearRegression(), x, y, cv=5, scoring="r2").mean()
        assert r2 > 0.3, (k, r2)


def test_mask_identity_and_all(small_cohort):
    assert all(a is b for a, b in zip(mask_genomics(small_cohort, 0.0, 1), small_cohort))
    assert not any(r.has_genomics for r in mask_genomics(small_cohort, 1.0, 1))


def test_mask_half_of_100():
    records = generate_cohort(CohortSpec(n_patients=100, bag_size_range=(2, 3), d_path=4))
    a = mask_genomics(records, 0.5, seed=11)
    b = mask_genomics(records, 0.5, seed=11)
    masked = [r.id for r in a if not r.has_genomics]
    assert len(masked) == 50 and masked == [r.id for r in b if not r.has_genomics]
    assert masked != [r.id for r in mask_genomics(records, 0.5, seed=12) if not r.has_genomics]


def test_mask_rejects_bad_rate(small_cohort):
    with pytest.raises(ValueError):
        mask_genomics(small_cohort, 1.2, 0)


def test_round_trip_50_patients(tmp_path):
    spec = CohortSpec(n_patients=50, seed=21)
    records = mask_genomics(generate_cohort(spec), 0.2, 3)
    write_cohort(records, tmp_path / "c", spec)
    back = read_cohort(tmp_path / "c")
    assert len(back) == 50 and all(a.same_as(b) for a, b in zip(records, back))
    assert read_spec(tmp_path / "c") == spec


def test_corrupted_magic(tmp_path, small_spec, small_cohort):
    write_cohort(small_cohort, tmp_path / "c", small_spec)
    path = tmp_path / "c" / FEATURES
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(HeaderError):
        read_cohort(tmp_path / "c")


def test_truncated_payload(tmp_path, small_spec, small_cohort):
    write_cohort(small_cohort, tmp_path / "c", small_spec)
    path = tmp_path / "c" / FEATURES
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_cohort(tmp_path / "c")


def test_version_mismatch(tmp_path, small_spec, small_cohort):
    write_cohort(small_cohort, tmp_path / "c", small_spec)
    path = tmp_path / "c" / FEATURES
    raw = path.read_bytes()
    path.write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(VersionMismatchError):
        read_cohort(tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / MANIFEST).read_text())
    manifest["version"] = 2
    (tmp_path / "c" / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatchError):
        read_cohort(tmp_path / "c")


def test_malformed_manifest(tmp_path, small_spec, small_cohort):
    write_cohort(small_cohort, tmp_path / "c", small_spec)
    (tmp_path / "c" / MANIFEST).write_text("{not json")
    with pytest.raises(HeaderError):
        read_cohort(tmp_path / "c")


def test_errors_are_distinct():
    assert len({HeaderError, TruncatedPayloadError, VersionMismatchError}) == 3
    assert not issubclass(HeaderError, TruncatedPayloadError)
    assert not issubclass(TruncatedPayloadError, VersionMismatchError)


def test_empty_cohort(tmp_path, small_spec):
    write_cohort([], tmp_path / "c", small_spec)
    assert (tmp_path / "c" / FEATURES).stat().st_size == 12
    assert read_cohort(tmp_path / "c") == []


def test_schema_recorded_in_manifest(tmp_path, small_spec, small_cohort):
    write_cohort(small_cohort, tmp_path / "c", small_spec)
    manifest = json.loads((tmp_path / "c" / MANIFEST).read_text())
    assert list(manifest["genomic_schema"].values()) == list(small_spec.genomic_dims)
    assert manifest["genomic_schema"]["cytokines_and_growth"] == small_spec.genomic_dims[-1]
