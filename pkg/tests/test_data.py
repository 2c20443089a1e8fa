import io

import numpy as np
import pytest

from vmtlab import data
from vmtlab.data import BatchStream, DataError, TaskSpec, make_task
from vmtlab.rng import stream


class TestGenerators:
    def test_sizes_and_split(self):
        task = make_task(TaskSpec(n=1200))
        assert len(task.source_train) == 960 and len(task.source_test) == 240
        assert len(task.target_train) == 960 and len(task.target_test) == 240
        assert task.target_train.labels is None
        assert task.source_train.labels.shape == (960, 2)

    def test_balanced_moons(self):
        x, y = data._two_moons(1000, 0.0, np.random.default_rng(0))
        assert (y == 0).sum() == 500
        # noiseless moons lie on unit circles around (0, 0) and (1, 0.5)
        np.testing.assert_allclose(np.linalg.norm(x[y == 0], axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(x[y == 1] - [1.0, 0.5], axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        a, b = make_task(TaskSpec(seed=4)), make_task(TaskSpec(seed=4))
        for da, db in zip(a.datasets(), b.datasets()):
            assert np.array_equal(da.inputs, db.inputs)
        c = make_task(TaskSpec(seed=5))
        assert not np.array_equal(a.source_train.inputs, c.source_train.inputs)

    def test_gaussian_clusters(self):
        task = make_task(TaskSpec(generator="gaussian-clusters", n_classes=4, n=400))
        assert task.source_train.labels.shape[1] == 4
        assert set(task.source_test.label_index) == {0, 1, 2, 3}

    def test_validation_labels_subset(self):
        task = make_task(TaskSpec(val_fraction=0.1))
        idx, labels = task.validation_labels()
        assert len(idx) == 96 and labels.shape == (96, 2)
        assert len(set(idx)) == 96


class TestShift:
    def test_identity(self, rng):
        x = rng.normal(size=(10, 2))
        np.testing.assert_allclose(data.shift_points(x, 0.0, (0, 0), 1.0), x, atol=1e-15)

    def test_rotation_preserves_centroid_and_distances(self, rng):
        x = rng.normal(size=(50, 2))
        y = data.shift_points(x, 35.0, (0, 0), 1.0)
        np.testing.assert_allclose(y.mean(0), x.mean(0), atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(y - y.mean(0), axis=1), np.linalg.norm(x - x.mean(0), axis=1),
                                   atol=1e-12)

    def test_quarter_turn(self):
        y = data.shift_points(np.array([[1.0, 0.0]]), 90.0, (0.0, 0.0), 1.0, center=(0.0, 0.0))
        np.testing.assert_allclose(y, [[0.0, 1.0]], atol=1e-15)


class TestStandardize:
    def test_per_domain_train_stats(self):
        task = make_task(TaskSpec())
        np.testing.assert_allclose(task.source_train.inputs.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(task.source_train.inputs.std(0), 1.0, atol=1e-12)

    def test_per_sample_needs_two_features(self):
        ds = data.DomainDataset(np.ones((3, 1)), None, "target", "train", 2)
        with pytest.raises(DataError, match="2 features"):
            data.standardize(ds, "per-sample")

    def test_constant_column_clamped(self):
        ds = data.DomainDataset(np.ones((4, 2)), None, "target", "train", 2)
        out = data.standardize(ds, "per-domain")
        assert np.isfinite(out.inputs).all()


class TestValidation:
    @pytest.mark.parametrize("kw,msg", [
        ({"generator": "spirals"}, "generator"),
        ({"n": 5}, "n must"),
        ({"rotation": 400.0}, "rotation"),
        ({"scale": 0.0}, "scale"),
        ({"normalization": "batch"}, "normalization"),
    ])
    def test_bad_spec(self, kw, msg):
        with pytest.raises(DataError, match=msg):
            TaskSpec(**kw).validate()


class TestBatches:
    def test_epoch_covers_each_row_once(self):
        task = make_task(TaskSpec(n=100))
        bs = BatchStream(task.source_train, task.target_train, 16, stream(0, "batches"))
        seen = np.concatenate([bs.next_indices()[0] for _ in range(5)])
        assert len(set(seen)) == 80

    def test_state_roundtrip(self):
        task = make_task(TaskSpec(n=100))
        a = BatchStream(task.source_train, task.target_train, 16, stream(0, "batches"))
        for _ in range(3):
            next(a)
        b = BatchStream(task.source_train, task.target_train, 16, stream(1, "other"))
        b.load_state(a.state())
        for _ in range(10):
            for u, v in zip(next(a), next(b)):
                assert np.array_equal(u, v)

    def test_batch_too_large(self):
        task = make_task(TaskSpec(n=20))
        with pytest.raises(DataError, match="larger"):
            BatchStream(task.source_train, task.target_train, 64, stream(0, "b"))

    def test_unlabeled_source_rejected(self):
        task = make_task(TaskSpec(n=100))
        with pytest.raises(DataError, match="labeled"):
            BatchStream(task.target_train, task.target_train, 8, stream(0, "b"))


def test_dump_has_no_target_train_labels():
    task = make_task(TaskSpec(n=50))
    text = data.dump_task_text(task)
    lines = text.splitlines()
    assert lines[0].startswith("# generator=two-moons")
    rows = [ln.split(",") for ln in lines[2:]]
    assert len(rows) == 100
    assert all(r[2] == "" for r in rows if r[0] == "target" and r[1] == "train")
    assert all(r[2] != "" for r in rows if r[1] == "test")
    buf = io.StringIO()
    data.dump_task(task, buf)
    assert buf.getvalue() == text
