import itertools

import numpy as np
import pytest

from swr.data import SyntheticTaskSpec, batches, generate, load_dataset, prototype, save_dataset
from swr.container import FormatError


def small(family="A", noise=0.5, seed=0, classes=12):
    return SyntheticTaskSpec(family, classes, (4, 2, 2), noise=noise, seed=seed)


def test_generate_shapes_and_determinism():
    a, b = generate(small()), generate(small())
    for split in ("train", "val", "test"):
        assert a.splits[split][0].tobytes() == b.splits[split][0].tobytes()
        assert a.splits[split][1].tolist() == b.splits[split][1].tolist()
    x, y = a.splits["train"]
    assert x.shape == (48, 1, 16, 32) and x.dtype == np.float32
    assert 0 <= y.min() and y.max() < 12


def test_zero_noise_examples_are_prototypes():
    ds = generate(small(noise=0.0))
    x, y = ds.splits["train"]
    for label in range(12):
        members = x[y == label]
        assert np.all(members == members[0])
        assert members[0].tobytes() == prototype(ds.spec, label).tobytes()


def test_prototypes_pairwise_distinct():
    for family in ("A", "B"):
        spec = small(family)
        protos = [prototype(spec, k) for k in range(12)]
        dists = [np.linalg.norm(p - q) for p, q in itertools.combinations(protos, 2)]
        assert min(dists) > 1.0
    # the family shift changes every generator
    a, b = small("A"), small("B")
    assert min(np.linalg.norm(prototype(a, k) - prototype(b, k)) for k in range(12)) > 0.1


def test_union_labels_cover_both_families():
    spec = SyntheticTaskSpec("union", 24, (2, 1, 1))
    assert spec.class_source(0) == ("A", 0)
    assert spec.class_source(12) == ("B", 0)
    assert prototype(spec, 13).tobytes() == prototype(small("B"), 1).tobytes()


def test_splits_differ():
    ds = generate(small())
    assert ds.splits["val"][0][0].tobytes() != ds.splits["test"][0][0].tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec("C")
    with pytest.raises(ValueError):
        SyntheticTaskSpec("A", 13)
    with pytest.raises(ValueError):
        SyntheticTaskSpec("A", noise=-1)


def test_batches_partition_and_order():
    ds = generate(small())
    got = list(batches(ds, "train", 10, epoch_seed=3))
    assert [len(yb) for _, yb in got] == [10, 10, 10, 10, 8]
    x = np.concatenate([xb for xb, _ in got])
    ref = ds.splits["train"][0]
    assert sorted(map(bytes, x)) == sorted(map(bytes, ref))
    again = list(batches(ds, "train", 10, epoch_seed=3))
    assert all(a[1].tolist() == b[1].tolist() for a, b in zip(got, again))
    orders = {tuple(np.concatenate([yb for _, yb in batches(ds, "train", 48, s)]).tolist()) for s in range(20)}
    assert len(orders) == 20
    with pytest.raises(KeyError):
        next(batches(ds, "dev", 4, 0))


def test_dump_roundtrip(tmp_path):
    ds = generate(small("B"))
    save_dataset(tmp_path / "b.data", ds)
    back = load_dataset(tmp_path / "b.data")
    assert back.spec == ds.spec
    for split in ds.splits:
        assert back.splits[split][0].tobytes() == ds.splits[split][0].tobytes()
        assert back.splits[split][1].tolist() == ds.splits[split][1].tolist()
    (tmp_path / "bad.data").write_bytes(b"SWRCKPT1" + (tmp_path / "b.data").read_bytes()[8:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "bad.data")


def test_raw_linear_probe_is_weak():
    """A linear classifier on raw inputs cannot solve the downstream task."""
    from sklearn.linear_model import LogisticRegression

    ds = generate(SyntheticTaskSpec("A", 12))
    xtr, ytr = ds.splits["train"]
    xte, yte = ds.splits["test"]
    probe = LogisticRegression(max_iter=2000).fit(xtr.reshape(len(xtr), -1), ytr)
    assert probe.score(xte.reshape(len(xte), -1), yte) < 0.6
