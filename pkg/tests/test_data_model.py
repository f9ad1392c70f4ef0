from datetime import datetime

import numpy as np
import pytest

from conftest import make_profile
from fluxlattice.data_model import (
    Clustering,
    CycleDataset,
    IngestConfig,
    UqPrediction,
    assign_split,
    canonical_labels,
    load_dataset,
    parse_timestamp,
    save_dataset,
    split_sidecar_path,
)
from fluxlattice.errors import IntegrityError, ParseError, ValidationError

HEADER = "cycle_id,assembly_id,bank_position,scan_start_time,axial_index,count\n"


def test_profile_arrays_are_read_only():
    p = make_profile(idx=[0, 2, 5], counts=[1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        p.counts[0] = 9.0
    dense = p.dense()
    assert np.isnan(dense[1]) and dense[5] == 3.0


@pytest.mark.parametrize(
    "idx, counts",
    [([0, 0], [1, 2]), ([2, 1], [1, 2]), ([0, 180], [1, 2]), ([0, 1], [1, -1]), ([0, 1], [1, np.nan])],
)
def test_profile_rejects_bad_points(idx, counts):
    with pytest.raises(ValidationError):
        make_profile(idx=idx, counts=counts)


def test_normalized_profile_may_be_negative():
    p = make_profile(idx=[0, 1], counts=[1.0, 1.0]).replace(counts=[-1.0, 1.0], normalized=True)
    assert p.counts[0] == -1.0


def test_dataset_requires_unique_keys_and_split():
    p = make_profile()
    with pytest.raises(IntegrityError):
        CycleDataset([p, p], {"c1": "train"})
    with pytest.raises(ValidationError):
        CycleDataset([p], {})


def test_cycles_are_historical(small_dataset):
    assert small_dataset.cycles() == ["cyc0", "cyc1", "cyc2", "cyc3"]
    assert [p.cycle_id for p in small_dataset.for_assembly("B2", "predict")] == ["cyc3"]


def test_csv_round_trip(tmp_path, small_dataset):
    path = tmp_path / "d.csv"
    save_dataset(small_dataset, path)
    assert split_sidecar_path(path).exists()
    back = load_dataset(path, IngestConfig(axial_grid_size=20))
    assert back.split == small_dataset.split
    for p in small_dataset.profiles:
        assert back.get(*p.key) == p


def _write(tmp_path, body):
    path = tmp_path / "x.csv"
    path.write_text(HEADER + body)
    return path


def test_parse_error_names_line(tmp_path):
    path = _write(tmp_path, "c1,A,0.5,2020-01-01T00:00:00,0,10\nc1,A,0.5,2020-01-01T00:00:00,1,abc\n")
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(path)


def test_negative_count_rejected(tmp_path):
    path = _write(tmp_path, "c1,A,0.5,2020-01-01T00:00:00,0,-1\n")
    with pytest.raises(ValidationError, match="line 2"):
        load_dataset(path)


def test_duplicate_point_is_integrity_error(tmp_path):
    path = _write(tmp_path, "c1,A,0.5,2020-01-01T00:00:00,0,1\nc1,A,0.5,2020-01-01T00:00:00,0,2\n")
    with pytest.raises(IntegrityError):
        load_dataset(path)


def test_bad_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n")
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(path)


def test_split_rules():
    cycles = [f"c{i}" for i in range(5)]
    assert assign_split(cycles, IngestConfig(n_predict=2)) == {
        "c0": "train", "c1": "train", "c2": "train", "c3": "predict", "c4": "predict"
    }
    s = assign_split(cycles, IngestConfig(predict_cycles=("c1",)))
    assert [c for c, v in s.items() if v == "predict"] == ["c1"]


def test_timestamp_with_zulu():
    t = parse_timestamp("2020-01-01T00:00:00Z")
    assert t.utcoffset().total_seconds() == 0 and t.hour == 0


def test_clustering_validation():
    with pytest.raises(ValidationError):
        Clustering(["a", "b"], [0, 2], "kmeans")
    with pytest.raises(ValidationError):
        Clustering(["a", "a"], [0, 1], "kmeans")
    with pytest.raises(ValidationError):
        Clustering(["a"], [0], "spectral")
    c = Clustering(["a", "b", "c"], [1, 0, 1], "kmeans")
    assert c.k == 2 and c.sizes == [1, 2] and c.members(1) == ["a", "c"]
    r = c.restrict(["b", "c"])
    assert r.labels.tolist() == [0, 1]


def test_canonical_labels():
    assert canonical_labels([5, 5, 2, 9, 2]).tolist() == [0, 0, 1, 2, 1]


def test_uq_interval():
    u = UqPrediction(0.1, 3.0, 2.0, 0.5, "gp")
    assert u.ci95_low == pytest.approx(2.0 - 0.98) and u.ci95_high == pytest.approx(2.98)
    with pytest.raises(ValidationError):
        UqPrediction(0.1, 3.0, 2.0, -0.5, "gp")
