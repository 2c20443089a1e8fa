"""Accuracy, the interpolation gradient-norm probe, loss-term timing, feature export."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .data import DomainDataset
from .nn import Classifier


class EvalError(ValueError):
    pass


@dataclass
class MetricsRecord:
    iteration: int
    source_acc: float
    target_acc: float
    target_entropy: float
    degenerate: bool
    components: dict[str, float] = field(default_factory=dict)
    probe_mean: float = float("nan")
    probe_max: float = float("nan")


def predict(model: Classifier, x) -> np.ndarray:
    return model(np.asarray(x, dtype=np.float64)).probs.data


def accuracy(model: Classifier, dataset: DomainDataset) -> float:
    """Percent correct; argmax ties go to the lowest class index."""
    if len(dataset) == 0:
        raise EvalError("accuracy of an empty dataset")
    if dataset.labels is None:
        raise EvalError(f"{dataset.domain}/{dataset.split} has no labels")
    pred = predict(model, dataset.inputs).argmax(axis=1)
    return 100.0 * float((pred == dataset.label_index).mean())


def mean_entropy(model: Classifier, x) -> float:
    p = predict(model, x)
    return float(-(p * np.log(np.maximum(p, 1e-30))).sum(axis=1).mean())


def is_degenerate(entropy: float, acc: float, n_classes: int) -> bool:
    """Confident collapse: entropy < 0.01 ln K while accuracy < 1.5/K * 100%."""
    return entropy < 0.01 * np.log(n_classes) and acc < 150.0 / n_classes


# ---------------------------------------------------------------------------
# interpolation gradient-norm probe
# ---------------------------------------------------------------------------

def sample_pairs(n: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct unordered index pairs (i < j), drawn without replacement."""
    total = n * (n - 1) // 2
    if n_pairs > total:
        raise EvalError(f"cannot draw {n_pairs} distinct pairs from {n} points")
    codes = np.sort(rng.choice(total, size=n_pairs, replace=False))
    # decode k -> (i, j) in row-major order over the strict upper triangle
    i = np.zeros(n_pairs, dtype=int)
    for row in range(n - 1):
        start = row * n - row * (row + 1) // 2
        i[codes >= start] = row
    start_i = i * n - i * (i + 1) // 2
    j = codes - start_i + i + 1
    return np.column_stack([i, j])


@dataclass
class ProbeResult:
    pairs: np.ndarray  # (P, 2) indices, or empty when pairs were given directly
    lambdas: np.ndarray
    norms: np.ndarray  # (P, L)

    @property
    def mean(self) -> float:
        return float(self.norms.mean())

    @property
    def max(self) -> float:
        return float(self.norms.max())

    def rows(self):
        for p in range(self.norms.shape[0]):
            for k, lam in enumerate(self.lambdas):
                yield p, float(lam), float(self.norms[p, k])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_id", "lambda", "grad_norm"])
            for p, lam, v in self.rows():
                w.writerow([p, repr(lam), repr(v)])


def input_grad_norms(model: Classifier, x, output: str = "predicted") -> np.ndarray:
    """Per-row ||d f(x) / dx||: of the predicted-class probability, or the
    Frobenius norm of the full probability Jacobian (``output='jacobian'``)."""
    x = np.asarray(x, dtype=np.float64)
    frozen = losses.detached(model)
    tape = ad.Tape()
    xv = tape.variable(x)
    probs = frozen(xv).probs
    k = probs.shape[1]
    if output == "predicted":
        onehot = np.eye(k)[probs.data.argmax(axis=1)]
        g = ad.grad(tape, ad.sum(ad.mul(probs, onehot)), xv)
        return np.sqrt((g * g).sum(axis=1))
    if output != "jacobian":
        raise EvalError(f"unknown probe output {output!r}")
    sq = np.zeros(len(x))
    for c in range(k):
        sel = np.zeros_like(probs.data)
        sel[:, c] = 1.0
        g = ad.grad(tape, ad.sum(ad.mul(probs, sel)), xv)
        sq += (g * g).sum(axis=1)
    return np.sqrt(sq)


def interpolation_grad_norms(model: Classifier, x_pairs, lambdas, output: str = "predicted") -> ProbeResult:
    """Gradient norms at x = lam * x_i + (1 - lam) * x_j for each pair and lam.

    ``x_pairs`` has shape (P, 2, d).
    """
    x_pairs = np.asarray(x_pairs, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.min() < 0 or lambdas.max() > 1:
        raise EvalError("lambda grid must lie within [0, 1]")
    xi, xj = x_pairs[:, 0], x_pairs[:, 1]
    lam = lambdas[None, :, None]
    grid = lam * xi[:, None, :] + (1.0 - lam) * xj[:, None, :]
    n_pairs, n_lam, d = grid.shape
    norms = input_grad_norms(model, grid.reshape(-1, d), output).reshape(n_pairs, n_lam)
    return ProbeResult(np.empty((0, 2), dtype=int), lambdas, norms)


def probe_dataset(model: Classifier, dataset: DomainDataset, n_pairs: int = 200, n_lambdas: int = 11,
                  rng: np.random.Generator | None = None, seed: int = 0, output: str = "predicted") -> ProbeResult:
    """Probe on pairs drawn from ``dataset`` (typically the target test split)."""
    if rng is None:
        from .rng import stream

        rng = stream(seed, "probe")
    pairs = sample_pairs(len(dataset), n_pairs, rng)
    x = dataset.inputs[pairs]
    res = interpolation_grad_norms(model, x, np.linspace(0.0, 1.0, n_lambdas), output)
    res.pairs = pairs
    return res


# ---------------------------------------------------------------------------
# feature export
# ---------------------------------------------------------------------------

def export_features(model: Classifier, datasets, path) -> int:
    """Write domain, split, label, g(x) features and predicted class; returns row count."""
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    count = 0
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise EvalError(f"cannot write feature export to {path}: {exc}") from None
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        width = model.arch.feature_dim
        w.writerow(["domain", "split", "label"] + [f"z{i}" for i in range(width)] + ["predicted"])
        for ds in datasets:
            out = model(ds.inputs)
            feats = out.features.data
            pred = out.probs.data.argmax(axis=1)
            labels = ds.label_index if ds.labels is not None else None
            for i in range(len(ds)):
                label = "" if labels is None else int(labels[i])
                w.writerow([ds.domain, ds.split, label] + [repr(float(v)) for v in feats[i]] + [int(pred[i])])
                count += 1
    return count


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def time_loss_terms(model: Classifier, x, cfg: losses.LossConfig, repetitions: int = 100,
                    site: str = "logits", seed: int = 0) -> dict[str, float]:
    """Mean wall time (seconds) of forward+backward for L_m and L_v alone."""
    if repetitions < 10:
        raise EvalError("repetitions must be >= 10")
    from .rng import Streams

    x = np.asarray(x, dtype=np.float64)
    weights = {k: (v.data if isinstance(v, ad.Tensor) else v) for k, v in model.weights.items()}
    trainable = [n for n in weights if not n.startswith("d.")]
    streams = Streams(seed)
    xi = cfg.xi_for(model.arch.input_dim)

    def one(term: str) -> float:
        tape = ad.Tape()
        w = dict(weights)
        for n in trainable:
            w[n] = tape.variable(weights[n])
        m = Classifier(model.arch, w)
        t0 = time.perf_counter()
        fwd = m(x)
        if term == "L_m":
            loss = losses.vmt_loss(m, x, cfg.alpha, site, streams["mixup"], fwd)
        else:
            loss = losses.vat_loss(m, x, cfg.epsilon, xi, cfg.power_iters, streams["vat"], fwd.probs.data)
        ad.backward(tape, loss)
        return time.perf_counter() - t0

    times = {"L_m": [], "L_v": []}
    for _ in range(repetitions):
        # interleave so drift in machine load hits both terms alike
        times["L_m"].append(one("L_m"))
        times["L_v"].append(one("L_v"))
    out = {k: float(np.mean(v)) for k, v in times.items()}
    out["ratio"] = out["L_v"] / out["L_m"]
    return out
