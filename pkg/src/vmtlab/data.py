"""Synthetic source/target tasks, standardization and batch streams."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .rng import stream

GENERATORS = ("two-moons", "gaussian-clusters")
NORMALIZATION_MODES = ("none", "per-sample", "per-domain")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    generator: str = "two-moons"
    n: int = 1200  # samples per domain, split 80/20 into train/test
    noise: float = 0.08
    rotation: float = 35.0  # degrees, about the target centroid
    translation: tuple[float, ...] = (0.0, 0.0)
    scale: float = 1.0
    n_classes: int = 2  # gaussian-clusters only; two-moons is always 2
    normalization: str = "per-domain"
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise DataError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.n < 10:
            raise DataError(f"n must be >= 10, got {self.n}")
        if self.noise < 0:
            raise DataError(f"noise must be >= 0, got {self.noise}")
        if not 0.0 <= self.rotation < 360.0:
            raise DataError(f"rotation must lie in [0, 360), got {self.rotation}")
        if self.scale <= 0:
            raise DataError(f"scale must be > 0, got {self.scale}")
        if len(self.translation) != 2:
            raise DataError("translation must have 2 components")
        if self.normalization not in NORMALIZATION_MODES:
            raise DataError(f"unknown normalization {self.normalization!r}; expected one of {NORMALIZATION_MODES}")
        if self.generator == "gaussian-clusters" and self.n_classes < 2:
            raise DataError("gaussian-clusters needs n_classes >= 2")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DataError("val_fraction must lie in [0, 1)")

    @property
    def classes(self) -> int:
        return 2 if self.generator == "two-moons" else self.n_classes


@dataclass(frozen=True)
class DomainDataset:
    inputs: np.ndarray
    labels: np.ndarray | None  # one-hot rows; None for the target training split
    domain: str
    split: str
    n_classes: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise DataError("labels and inputs differ in length")

    def __len__(self):
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def label_index(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"{self.domain}/{self.split} carries no labels")
        return self.labels.argmax(axis=1)


@dataclass(frozen=True)
class DomainTask:
    """Source and target splits of one task.

    Target training labels are not part of any public field; the held-aside
    validation labels are reachable only through :meth:`validation_labels`.
    """

    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset
    spec: TaskSpec
    _val_index: np.ndarray = field(repr=False, compare=False, default=None)
    _val_labels: np.ndarray = field(repr=False, compare=False, default=None)

    def validation_labels(self) -> tuple[np.ndarray, np.ndarray]:
        """(row indices into target_train, one-hot labels) for hyperparameter selection."""
        return self._val_index, self._val_labels

    def datasets(self) -> list[DomainDataset]:
        return [self.source_train, self.source_test, self.target_train, self.target_test]


def _one_hot(idx: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[idx]


def _two_moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_upper = n // 2
    n_lower = n - n_upper
    t_up = rng.uniform(0.0, np.pi, n_upper)
    t_lo = rng.uniform(0.0, np.pi, n_lower)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)])
    x = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n_upper, dtype=int), np.ones(n_lower, dtype=int)])
    x = x + noise * rng.normal(size=x.shape)
    return x, y


def _gaussian_clusters(n: int, k: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = np.arange(n) % k
    angles = 2.0 * np.pi * y / k
    centers = 2.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    return centers + noise * rng.normal(size=(n, 2)), y


def _draw(spec: TaskSpec, label: str) -> tuple[np.ndarray, np.ndarray]:
    rng = stream(spec.seed, label)
    if spec.generator == "two-moons":
        x, y = _two_moons(spec.n, spec.noise, rng)
    else:
        x, y = _gaussian_clusters(spec.n, spec.classes, spec.noise, rng)
    order = rng.permutation(spec.n)
    return x[order], y[order]


def _split(x, y, k, domain, with_train_labels, provenance):
    n_train = int(round(0.8 * len(x)))
    train = DomainDataset(x[:n_train], _one_hot(y[:n_train], k) if with_train_labels else None,
                          domain, "train", k, dict(provenance))
    test = DomainDataset(x[n_train:], _one_hot(y[n_train:], k), domain, "test", k, dict(provenance))
    return train, test


def gen_source(spec: TaskSpec) -> tuple[DomainDataset, DomainDataset]:
    """(train, test) source splits; deterministic given ``spec.seed``."""
    spec.validate()
    x, y = _draw(spec, "source")
    return _split(x, y, spec.classes, "source", True, {"generator": spec.generator, "normalization": "none"})


def shift_points(x: np.ndarray, rotation: float, translation, scale: float, center=None) -> np.ndarray:
    """Rotate (degrees) and scale about ``center`` (default: centroid), then translate."""
    c = x.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    th = np.deg2rad(rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return c + scale * (x - c) @ rot.T + np.asarray(translation, dtype=np.float64)


def gen_target(spec: TaskSpec) -> tuple[DomainDataset, DomainDataset, np.ndarray, np.ndarray]:
    """Shifted target draw: (train without labels, test, val row index, val labels)."""
    spec.validate()
    x, y = _draw(spec, "target")
    x = shift_points(x, spec.rotation, spec.translation, spec.scale)
    prov = {"generator": spec.generator, "normalization": "none", "rotation": spec.rotation,
            "translation": list(spec.translation), "scale": spec.scale}
    train, test = _split(x, y, spec.classes, "target", False, prov)
    rng = stream(spec.seed, "validation")
    n_val = int(round(spec.val_fraction * len(train)))
    val_index = np.sort(rng.choice(len(train), size=n_val, replace=False))
    val_labels = _one_hot(y[: len(train)][val_index], spec.classes)
    return train, test, val_index, val_labels


def standardize(dataset: DomainDataset, mode: str, stats: tuple[np.ndarray, np.ndarray] | None = None) -> DomainDataset:
    """Standardize inputs. ``per-domain`` uses ``stats`` = (mean, std) if given,
    otherwise statistics of ``dataset`` itself."""
    if mode not in NORMALIZATION_MODES:
        raise DataError(f"unknown normalization {mode!r}")
    if mode == "none":
        return dataset
    x = dataset.inputs
    if mode == "per-sample":
        if x.shape[1] < 2:
            raise DataError("per-sample standardization needs at least 2 features")
        mu = x.mean(axis=1, keepdims=True)
        sd = np.maximum(x.std(axis=1, keepdims=True), 1e-8)
    else:
        mu, sd = stats if stats is not None else domain_stats(dataset)
    prov = dict(dataset.provenance, normalization=mode)
    return replace(dataset, inputs=(x - mu) / sd, provenance=prov)


def domain_stats(dataset: DomainDataset) -> tuple[np.ndarray, np.ndarray]:
    x = dataset.inputs
    return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8)


def standardize_pair(train: DomainDataset, test: DomainDataset, mode: str) -> tuple[DomainDataset, DomainDataset]:
    """Per-domain statistics come from the train split and apply to both."""
    stats = domain_stats(train) if mode == "per-domain" else None
    return standardize(train, mode, stats), standardize(test, mode, stats)


def make_task(spec: TaskSpec) -> DomainTask:
    s_train, s_test = gen_source(spec)
    t_train, t_test, val_index, val_labels = gen_target(spec)
    s_train, s_test = standardize_pair(s_train, s_test, spec.normalization)
    t_train, t_test = standardize_pair(t_train, t_test, spec.normalization)
    return DomainTask(s_train, s_test, t_train, t_test, spec, val_index, val_labels)


class BatchStream:
    """Endless (source x, source labels, target x) batches.

    Each domain is reshuffled independently at the start of its own epoch;
    an epoch is ``len // batch`` batches, the remainder is dropped.
    """

    def __init__(self, src: DomainDataset, tgt: DomainDataset, batch: int, rng: np.random.Generator):
        if batch < 2:
            raise DataError(f"batch must be >= 2 (mixup needs pairs), got {batch}")
        if src.labels is None:
            raise DataError("source dataset must be labeled")
        for ds in (src, tgt):
            if batch > len(ds):
                raise DataError(f"batch {batch} larger than {ds.domain}/{ds.split} with {len(ds)} rows")
        self.src, self.tgt, self.batch, self.rng = src, tgt, batch, rng
        self._order = {"source": np.empty(0, dtype=int), "target": np.empty(0, dtype=int)}
        self._pos = {"source": 0, "target": 0}

    def _take(self, key: str, n: int) -> np.ndarray:
        if self._pos[key] + self.batch > len(self._order[key]):
            self._order[key] = self.rng.permutation(n)
            self._pos[key] = 0
        idx = self._order[key][self._pos[key]: self._pos[key] + self.batch]
        self._pos[key] += self.batch
        return idx

    def next_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return self._take("source", len(self.src)), self._take("target", len(self.tgt))

    def next_target(self) -> np.ndarray:
        """A target-only batch (refinement never touches source data)."""
        return self.tgt.inputs[self._take("target", len(self.tgt))]

    def __iter__(self):
        return self

    def __next__(self):
        si, ti = self.next_indices()
        # target batches carry inputs only
        return self.src.inputs[si], self.src.labels[si], self.tgt.inputs[ti]

    def state(self) -> dict:
        return {
            "order": {k: v.tolist() for k, v in self._order.items()},
            "pos": dict(self._pos),
            "rng": self.rng.bit_generator.state,
        }

    def load_state(self, state: dict) -> None:
        self._order = {k: np.asarray(v, dtype=int) for k, v in state["order"].items()}
        self._pos = dict(state["pos"])
        self.rng.bit_generator.state = state["rng"]


def batch_iter(src: DomainDataset, tgt: DomainDataset, batch: int, rng: np.random.Generator) -> BatchStream:
    return BatchStream(src, tgt, batch, rng)


def dump_task(task: DomainTask, path_or_buf) -> None:
    """Delimited dump: header echoing the TaskSpec, then domain,split,label,features."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        spec = asdict(task.spec)
        fh.write("# " + " ".join(f"{k}={v}" for k, v in spec.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        dim = task.source_train.dim
        w.writerow(["domain", "split", "label"] + [f"x{i}" for i in range(dim)])
        for ds in task.datasets():
            labels = ds.label_index if ds.labels is not None else None
            for i, row in enumerate(ds.inputs):
                w.writerow([ds.domain, ds.split, "" if labels is None else int(labels[i])] + [repr(float(v)) for v in row])
    finally:
        if own:
            fh.close()


def dump_task_text(task: DomainTask) -> str:
    buf = io.StringIO()
    dump_task(task, buf)
    return buf.getvalue()
