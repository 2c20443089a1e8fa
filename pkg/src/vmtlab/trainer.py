"""Joint VMT/VADA training, DIRT-T refinement, ablations and seed sweeps."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import evaluation as ev
from . import losses
from .config import ExperimentConfig
from .data import BatchStream, DomainTask, make_task
from .nn import (
    ArchitectureError,
    Classifier,
    ModelParams,
    adam_step,
    collect_grads,
    default_architecture,
    ema_update,
    init_params,
    load_arrays,
    params_from_arrays,
    params_to_arrays,
    save_arrays,
    tracked_weights,
)
from .rng import Streams, stream

logger = logging.getLogger(__name__)

CLASSIFIER_GROUPS = ("encoder_g", "head_h")


class TrainingDiverged(RuntimeError):
    """A loss term produced a non-finite value."""

    def __init__(self, iteration: int, component: str, detail: str = ""):
        self.iteration = iteration
        self.component = component
        super().__init__(f"non-finite {component} at iteration {iteration}: {detail}")


@dataclass
class TrainState:
    params: ModelParams
    iteration: int
    streams: Streams
    batches: dict | None = None
    history: list[ev.MetricsRecord] = field(default_factory=list)
    status: str = "running"
    phase: str = "train"

    @property
    def last(self) -> ev.MetricsRecord | None:
        return self.history[-1] if self.history else None

    def save(self, path, cfg: ExperimentConfig | None = None) -> None:
        meta = {
            "arch": self.params.arch.to_dict(),
            "adam_t": self.params.adam_t,
            "iteration": self.iteration,
            "streams": self.streams.state(),
            "batches": self.batches,
            "history": [_record_to_dict(r) for r in self.history],
            "status": self.status,
            "phase": self.phase,
            "config_hash": cfg.hash() if cfg is not None else "",
            "config": cfgmod.serialize(cfg) if cfg is not None else "",
            "shapes": {k: list(v.shape) for k, v in self.params.values.items()},
        }
        save_arrays(path, params_to_arrays(self.params), meta)

    @classmethod
    def load(cls, path) -> tuple["TrainState", dict]:
        import os

        from .nn import Architecture

        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
        arrays, meta = load_arrays(path)
        params = params_from_arrays(Architecture.from_dict(meta["arch"]), arrays, meta["adam_t"])
        state = cls(
            params=params,
            iteration=int(meta["iteration"]),
            streams=Streams.from_state(meta["streams"]),
            batches=meta.get("batches"),
            history=[ev.MetricsRecord(**r) for r in meta.get("history", [])],
            status=meta.get("status", "running"),
            phase=meta.get("phase", "train"),
        )
        return state, meta


def _record_to_dict(r: ev.MetricsRecord) -> dict:
    return {
        "iteration": r.iteration,
        "source_acc": r.source_acc,
        "target_acc": r.target_acc,
        "target_entropy": r.target_entropy,
        "degenerate": bool(r.degenerate),
        "components": dict(r.components),
        "probe_mean": r.probe_mean,
        "probe_max": r.probe_max,
    }


def architecture_for(cfg: ExperimentConfig, task: DomainTask):
    return default_architecture(task.source_train.dim, task.spec.classes, cfg.model.hidden, cfg.model.depth)


def init_state(cfg: ExperimentConfig) -> TrainState:
    task = make_task(cfg.data)
    params = init_params(architecture_for(cfg, task), cfg.seed)
    return TrainState(params=params, iteration=0, streams=Streams(cfg.seed))


def evaluate(params: ModelParams, task: DomainTask, cfg: ExperimentConfig, iteration: int,
             components: dict[str, float] | None = None, probe: bool = True) -> ev.MetricsRecord:
    """Metrics through the EMA shadow model."""
    model = params.eval_model()
    src = ev.accuracy(model, task.source_test)
    tgt = ev.accuracy(model, task.target_test)
    ent = ev.mean_entropy(model, task.target_test.inputs)
    rec = ev.MetricsRecord(iteration, src, tgt, ent, ev.is_degenerate(ent, tgt, task.spec.classes),
                           dict(components or {}))
    if probe:
        n = len(task.target_test)
        pairs = min(cfg.eval.probe_pairs, n * (n - 1) // 2)
        res = ev.probe_dataset(model, task.target_test, pairs, cfg.eval.probe_lambdas,
                               rng=stream(cfg.seed, "probe"), output=cfg.eval.probe_output)
        rec.probe_mean, rec.probe_max = res.mean, res.max
    return rec


def _snapshot(params: ModelParams, prefix: str) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.values.items() if k.startswith(prefix)}


def _assert_unchanged(params: ModelParams, snap: dict[str, np.ndarray], step: str) -> None:
    for k, v in snap.items():
        if not np.array_equal(params.values[k], v):
            raise AssertionError(f"parameter {k} changed during {step}")


def discriminator_step(params: ModelParams, xs: np.ndarray, xt: np.ndarray, cfg: ExperimentConfig) -> float:
    """Step A: update the discriminator only, on features of the current encoder."""
    feats = Classifier(params.arch, params.values)(np.concatenate([xs, xt])).features.data
    tape = ad.Tape()
    weights, tracked = tracked_weights(params, tape, ["discriminator_d"])
    d = Classifier(params.arch, weights).discriminate(feats)
    ns = len(xs)
    disc_loss, _ = losses.domain_losses(ad.slice_rows(d, 0, ns), ad.slice_rows(d, ns, len(feats)))
    grads = collect_grads(ad.backward(tape, disc_loss), tracked)
    o = cfg.optim
    adam_step(params, "discriminator_d", grads, o.lr, o.beta1, o.beta2, o.eps)
    return disc_loss.item()


def classifier_step(params: ModelParams, xs, ys, xt, cfg: ExperimentConfig, mask: losses.LossTermMask,
                    streams: Streams) -> dict[str, float]:
    """Step B: combined objective, update encoder and head only."""
    tape = ad.Tape()
    weights, tracked = tracked_weights(params, tape, CLASSIFIER_GROUPS)
    total, comps = losses.combined_objective(Classifier(params.arch, weights), (xs, ys), xt, cfg.loss, mask, streams)
    grads = collect_grads(ad.backward(tape, total), tracked)
    o = cfg.optim
    adam_step(params, CLASSIFIER_GROUPS, grads, o.lr, o.beta1, o.beta2, o.eps)
    return comps


def train_vmt(cfg: ExperimentConfig, state: TrainState | None = None, task: DomainTask | None = None,
              on_record: Callable[[ev.MetricsRecord], None] | None = None,
              stop_at: int | None = None) -> TrainState:
    """Alternating discriminator / classifier updates with EMA tracking.

    ``state`` resumes a saved run; ``stop_at`` ends early (for checkpointing)
    without marking the run complete.
    """
    cfg.validate()
    task = task if task is not None else make_task(cfg.data)
    mask = cfg.mask.mask()
    if state is None:
        state = TrainState(init_params(architecture_for(cfg, task), cfg.seed), 0, Streams(cfg.seed))
    params = state.params
    batches = BatchStream(task.source_train, task.target_train, cfg.train.batch_size, state.streams["batches"])
    if state.batches is not None:
        batches.load_state(state.batches)
    total_iters = cfg.train.iterations
    end = total_iters if stop_at is None else min(stop_at, total_iters)

    def record(it: int, comps):
        rec = evaluate(params, task, cfg, it, comps)
        state.history.append(rec)
        if on_record is not None:
            on_record(rec)

    if state.iteration == 0 and total_iters == 0:
        record(0, dict.fromkeys(losses.COMPONENTS, 0.0) | {"total": 0.0})

    comps: dict[str, float] = {}
    for it in range(state.iteration + 1, end + 1):
        xs, ys, xt = next(batches)
        snap = _snapshot(params, "g.") | _snapshot(params, "h.") if cfg.train.check_groups else None
        try:
            if cfg.loss.lambda_d > 0:
                for _ in range(cfg.train.disc_steps):
                    try:
                        discriminator_step(params, xs, xt, cfg)
                    except ad.NumericOverflowError as exc:
                        raise losses.NonFiniteLoss("L_d (discriminator step)", str(exc)) from exc
            if snap is not None:
                _assert_unchanged(params, snap, "discriminator step")
                snap = _snapshot(params, "d.")
            try:
                comps = classifier_step(params, xs, ys, xt, cfg, mask, state.streams)
            except ad.NumericOverflowError as exc:
                raise losses.NonFiniteLoss("combined objective (backward)", str(exc)) from exc
        except losses.NonFiniteLoss as exc:
            state.status = "failed"
            raise TrainingDiverged(it, exc.component, str(exc)) from exc
        if snap is not None:
            _assert_unchanged(params, snap, "classifier step")
        ema_update(params, cfg.optim.ema_momentum)
        state.iteration = it
        if it % cfg.train.eval_interval == 0 or it == total_iters:
            record(it, comps)
    state.batches = batches.state()
    if state.iteration >= total_iters:
        state.status = "degenerate" if state.last is not None and state.last.degenerate else "completed"
    return state


def source_only(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.update("loss", lambda_d=0.0, lambda_s=0.0, lambda_t=0.0)


# ---------------------------------------------------------------------------
# DIRT-T
# ---------------------------------------------------------------------------

def refine_dirt_t(init: TrainState, cfg: ExperimentConfig, task: DomainTask | None = None,
                  on_record: Callable[[ev.MetricsRecord], None] | None = None) -> TrainState:
    """Target-only refinement anchored to a periodically refreshed teacher."""
    cfg.validate()
    task = task if task is not None else make_task(cfg.data)
    expected = architecture_for(cfg, task)
    if init.params.arch != expected:
        raise ArchitectureError(f"checkpoint architecture {init.params.arch.to_dict()} "
                                f"does not match config {expected.to_dict()}")
    mask = cfg.mask.mask()
    arch = init.params.arch
    teacher_w = {k: v.copy() for k, v in init.params.shadow.items()}
    student = ModelParams(
        arch,
        values={k: v.copy() for k, v in teacher_w.items()},
        shadow={k: v.copy() for k, v in teacher_w.items()},
        adam_m={k: np.zeros_like(v) for k, v in teacher_w.items()},
        adam_v={k: np.zeros_like(v) for k, v in teacher_w.items()},
    )
    streams = Streams(cfg.seed, prefix="refine/")
    batches = BatchStream(task.source_train, task.target_train, cfg.train.batch_size, streams["batches"])
    state = TrainState(student, 0, streams, phase="refine")
    o = cfg.optim
    n_iters = cfg.refine.iterations

    def record(it, comps):
        rec = evaluate(student, task, cfg, it, comps)
        state.history.append(rec)
        if on_record is not None:
            on_record(rec)

    if n_iters == 0:
        record(0, {})
    comps: dict[str, float] = {}
    for it in range(1, n_iters + 1):
        xt = batches.next_target()
        tape = ad.Tape()
        weights, tracked = tracked_weights(student, tape, CLASSIFIER_GROUPS)
        try:
            total, comps = losses.dirt_t_objective(Classifier(arch, weights), Classifier(arch, teacher_w), xt,
                                                   cfg.loss, mask, streams)
            try:
                grads = collect_grads(ad.backward(tape, total), tracked)
            except ad.NumericOverflowError as exc:
                raise losses.NonFiniteLoss("refinement objective (backward)", str(exc)) from exc
        except losses.NonFiniteLoss as exc:
            state.status = "failed"
            raise TrainingDiverged(it, exc.component, str(exc)) from exc
        adam_step(student, CLASSIFIER_GROUPS, grads, o.lr, o.beta1, o.beta2, o.eps)
        ema_update(student, o.ema_momentum)
        if it % cfg.refine.interval == 0:
            teacher_w = {k: v.copy() for k, v in student.shadow.items()}
        state.iteration = it
        if it % cfg.refine.eval_interval == 0 or it == n_iters:
            record(it, comps)
    state.status = "degenerate" if state.last is not None and state.last.degenerate else "completed"
    return state


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    status: str  # completed | degenerate | failed
    source_acc: float = float("nan")
    target_acc: float = float("nan")
    target_entropy: float = float("nan")
    probe_mean: float = float("nan")
    error: str = ""
    label: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "failed"


def run_one(cfg: ExperimentConfig, label: str = "") -> RunResult:
    """One full training run, with failures captured instead of raised."""
    try:
        state = train_vmt(cfg)
    except TrainingDiverged as exc:
        return RunResult(cfg.seed, "failed", error=str(exc), label=label)
    last = state.last
    return RunResult(cfg.seed, state.status, last.source_acc, last.target_acc, last.target_entropy,
                     last.probe_mean, label=label)


def _run_star(args):
    return run_one(*args)


def run_many(jobs: Sequence[tuple[ExperimentConfig, str]], workers: int = 1) -> list[RunResult]:
    if workers <= 1 or len(jobs) <= 1:
        return [run_one(c, lbl) for c, lbl in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_star, jobs))


@dataclass
class SweepSummary:
    mean: float
    std: float
    min: float
    max: float
    n_completed: int
    n_failed: int

    def __str__(self):
        return f"{self.mean:.1f} ± {self.std:.1f} (n={self.n_completed}, failed={self.n_failed})"


def summarize(results: Sequence[RunResult], key: str = "target_acc") -> SweepSummary:
    done = sorted((r for r in results if r.ok), key=lambda r: r.seed)
    vals = np.array([getattr(r, key) for r in done], dtype=np.float64)
    failed = sum(1 for r in results if not r.ok)
    if len(vals) == 0:
        nan = float("nan")
        return SweepSummary(nan, nan, nan, nan, 0, failed)
    return SweepSummary(float(vals.mean()), float(vals.std()), float(vals.min()), float(vals.max()), len(vals), failed)


def seed_sweep(cfg: ExperimentConfig, seeds: Sequence[int], workers: int = 1) -> tuple[list[RunResult], SweepSummary]:
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"seeds must be distinct, got {list(seeds)}")
    results = run_many([(cfg.with_seed(s), "") for s in seeds], workers)
    return results, summarize(results)


@dataclass
class AblationRow:
    mask: losses.LossTermMask
    results: list[RunResult]

    @property
    def label(self) -> str:
        return self.mask.label

    def accuracies(self) -> np.ndarray:
        return np.array([r.target_acc if r.ok else np.nan for r in self.results])

    @property
    def median(self) -> float:
        acc = self.accuracies()
        acc = acc[~np.isnan(acc)]
        return float(np.median(acc)) if len(acc) else float("nan")

    @property
    def spread(self) -> float:
        acc = self.accuracies()
        acc = acc[~np.isnan(acc)]
        return float(acc.max() - acc.min()) if len(acc) else float("nan")


def run_ablation(base: ExperimentConfig, rows: Sequence[losses.LossTermMask] = losses.TABLE4_ROWS,
                 seeds: Sequence[int] = (0,), workers: int = 1) -> list[AblationRow]:
    """One run per (mask, seed); seeds are shared across rows."""
    if not rows:
        raise ValueError("ablation needs at least one row")
    jobs = [(base.with_mask(m).with_seed(s), m.label) for m in rows for s in seeds]
    flat = run_many(jobs, workers)
    out = []
    for i, m in enumerate(rows):
        out.append(AblationRow(m, flat[i * len(seeds):(i + 1) * len(seeds)]))
    return out


def replace_loss(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, loss=replace(cfg.loss, **kw))
