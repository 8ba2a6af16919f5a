import numpy as np
import pytest

from loraga.data import DataError, DatasetSpec, generate, read_csv, split, teacher_network, write_csv
from loraga.nn import Network, NetworkSpec


def test_teacher_student_shapes_and_determinism():
    spec = DatasetSpec("teacher_student", n_samples=20, seed=3, dims=(5, 7, 2))
    a, b = generate(spec), generate(spec)
    assert a.inputs.shape == (5, 20) and a.targets.shape == (2, 20)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    np.testing.assert_allclose(a.targets, a.teacher.predict(a.inputs))


def test_noise_changes_targets_only():
    clean = generate(DatasetSpec("teacher_student", n_samples=20, dims=(5, 4)))
    noisy = generate(DatasetSpec("teacher_student", n_samples=20, dims=(5, 4), noise_sigma=0.1))
    np.testing.assert_array_equal(clean.inputs, noisy.inputs)
    assert 0 < np.std(noisy.targets - clean.targets) < 0.2


def test_teacher_shift_is_low_rank_and_scaled():
    spec = DatasetSpec("teacher_student", dims=(16, 12, 8), teacher_seed=2, shift_rank=3,
                       shift_scale=0.5)
    shifted = teacher_network(spec)
    base = Network.from_spec(NetworkSpec(spec.dims, "tanh", "mse", 2))
    for ls, lb in zip(shifted.layers, base.layers):
        d = ls.w - lb.w
        assert np.linalg.matrix_rank(d) == 3
        assert np.linalg.norm(d) == pytest.approx(0.5 * np.linalg.norm(lb.w))


def test_blobs_one_hot():
    ds = generate(DatasetSpec("blobs", n_samples=30, classes=4, dim=3))
    assert ds.inputs.shape == (3, 30)
    np.testing.assert_array_equal(ds.targets.sum(axis=0), np.ones(30))


def test_split_partitions_samples():
    ds = generate(DatasetSpec("teacher_student", n_samples=10, dims=(3, 2)))
    a, b = split(ds, (0.7, 0.3), seed=0)
    assert len(a) == 7 and len(b) == 3
    cols = np.concatenate([a.inputs, b.inputs], axis=1)
    assert sorted(map(tuple, cols.T)) == sorted(map(tuple, ds.inputs.T))
    with pytest.raises(DataError):
        split(ds, (0.5, 0.4), 0)
    with pytest.raises(DataError):
        split(ds, (1.0, 0.0), 0)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 5)), rng.standard_normal((1, 5))
    p = tmp_path / "d.csv"
    write_csv(p, x, y, names=["a", "b", "c"], target_name="y")
    rx, ry = read_csv(p, "y")
    np.testing.assert_array_equal(rx, x)
    np.testing.assert_array_equal(ry, y)
    rx, ry = read_csv(p, 0)
    np.testing.assert_array_equal(ry, x[:1])


def test_csv_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match=":3:"):
        read_csv(p, "b")
    p.write_text("a,b\n1,2\n3,x\n")
    with pytest.raises(DataError, match=":3:"):
        read_csv(p, "b")
    p.write_text("a,b\n1,nan\n")
    with pytest.raises(DataError, match=":2:"):
        read_csv(p, "b")
    with pytest.raises(DataError, match="not in header"):
        read_csv(p, "z")
    p.write_text("a,b\n")
    with pytest.raises(DataError, match="no data"):
        read_csv(p, "a")


def test_csv_dataset_subsamples(tmp_path):
    rng = np.random.default_rng(0)
    p = tmp_path / "d.csv"
    write_csv(p, rng.standard_normal((2, 10)), rng.standard_normal((1, 10)))
    ds = generate(DatasetSpec("csv", n_samples=4, path=str(p), target_column="target"))
    assert ds.inputs.shape == (2, 4)


def test_spec_validation():
    with pytest.raises(DataError):
        DatasetSpec("images")
    with pytest.raises(DataError):
        DatasetSpec("csv")
    with pytest.raises(DataError):
        DatasetSpec("blobs", n_samples=0)


def test_split_seeds_give_different_partitions():
    ds = generate(DatasetSpec("teacher_student", n_samples=50, dims=(3, 2)))
    firsts = {tuple(split(ds, (0.8, 0.2), s)[1].inputs[0]) for s in range(10)}
    assert len(firsts) == 10
