"""Command-line harness: train, refine, sweep, ablate, probe and small utilities.

Every run directory holds ``checkpoint.npz``, ``metrics.csv`` and
``manifest.json``; the manifest is written last, atomically, and carries the
full configuration text so the directory alone reproduces the run.

Exit codes: 0 success, 1 error, 2 completed but degenerate.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from . import evaluation as ev
from . import kernels, losses, trainer
from .config import ConfigError, ExperimentConfig
from .data import DataError, dump_task, make_task
from .nn import ArchitectureError
from .rng import stream

logger = logging.getLogger("vmtlab")

EXIT_OK, EXIT_ERROR, EXIT_DEGENERATE = 0, 1, 2
OUT_ENV = "VMTLAB_OUT"
CHECKPOINT, METRICS, MANIFEST = "checkpoint.npz", "metrics.csv", "manifest.json"

TRAIN_COLUMNS = list(losses.COMPONENTS) + ["total"]
REFINE_COLUMNS = ["L_m_tgt", "L_v_tgt", "L_c_tgt", "KL_teacher", "total"]
BASE_COLUMNS = ["iteration", "source_acc", "target_acc", "target_entropy", "degenerate", "probe_mean", "probe_max"]


class CliError(RuntimeError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def resolve_out(out: str | None, default_name: str) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


class MetricsWriter:
    """Streams one row per evaluation; only deterministic values, no timings."""

    def __init__(self, path: Path, component_columns: Sequence[str]):
        self.path = path
        self.components = list(component_columns)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(BASE_COLUMNS + self.components)
        self._fh.flush()

    def __call__(self, rec: ev.MetricsRecord) -> None:
        row = [rec.iteration, rec.source_acc, rec.target_acc, rec.target_entropy, rec.degenerate,
               rec.probe_mean, rec.probe_max]
        row += [rec.components.get(c, 0.0) for c in self.components]
        self._w.writerow([_fmt(v) for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _manifest(kind: str, cfg: ExperimentConfig, out: Path, started: str, status: str,
              state: trainer.TrainState | None, error: str = "", extra: dict | None = None) -> dict:
    last = state.last if state is not None else None
    outputs = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp"))
    payload = {
        "kind": kind,
        "status": status,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "started": started,
        "finished": _now(),
        "config_hash": cfg.hash(),
        "config_text": cfgmod.serialize(cfg),
        "config": cfgmod.to_dict(cfg),
        "outputs": outputs + [MANIFEST],
        "error": error,
        "iterations_done": state.iteration if state is not None else 0,
    }
    if last is not None:
        payload["final"] = {
            "source_acc": last.source_acc,
            "target_acc": last.target_acc,
            "target_entropy": last.target_entropy,
            "degenerate": bool(last.degenerate),
            "probe_mean": None if np.isnan(last.probe_mean) else last.probe_mean,
        }
    if extra:
        payload.update(extra)
    return payload


def _status_code(status: str) -> int:
    return {"completed": EXIT_OK, "degenerate": EXIT_DEGENERATE}.get(status, EXIT_ERROR)


def execute_train(cfg: ExperimentConfig, out: Path) -> trainer.RunResult:
    """One training run into ``out``; failures are recorded, never raised."""
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    writer = MetricsWriter(out / METRICS, TRAIN_COLUMNS)
    state, error, status = None, "", "failed"
    try:
        state = trainer.init_state(cfg)
        state = trainer.train_vmt(cfg, state=state, on_record=writer)
        status = state.status
    except trainer.TrainingDiverged as exc:
        error = str(exc)
    finally:
        writer.close()
    if state is not None:
        state.status = status
        state.save(out / CHECKPOINT, cfg)
    write_json_atomic(out / MANIFEST, _manifest("train", cfg, out, started, status, state, error,
                                                {"seed": cfg.seed}))
    last = state.last if state is not None else None
    if last is None or status == "failed":
        return trainer.RunResult(cfg.seed, "failed", error=error, label=cfg.mask.mask().label)
    return trainer.RunResult(cfg.seed, status, last.source_acc, last.target_acc, last.target_entropy,
                             last.probe_mean, label=cfg.mask.mask().label)


def _execute_star(args):
    cfg_text, out = args
    return execute_train(cfgmod.parse(cfg_text), Path(out))


def execute_many(jobs: Sequence[tuple[ExperimentConfig, Path]], workers: int) -> list[trainer.RunResult]:
    payload = [(cfgmod.serialize(c), str(p)) for c, p in jobs]
    if workers <= 1 or len(jobs) <= 1:
        return [_execute_star(j) for j in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute_star, payload))


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    """``"0..9"`` (inclusive), ``"0,3,5"`` or a mix of both."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise CliError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise CliError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise CliError(f"duplicate seeds in {text!r}")
    return seeds


def load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mask", None) is not None or getattr(args, "site", None) is not None:
        terms = args.mask if args.mask is not None else cfg.mask.terms
        site = args.site if args.site is not None else cfg.mask.site
        cfg = cfg.with_mask(losses.LossTermMask.parse(terms, site))
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.update("train", iterations=args.iterations)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = resolve_out(args.out, f"train-seed{cfg.seed}")
    res = execute_train(cfg, out)
    if res.status == "failed":
        print(f"run failed: {res.error}", file=sys.stderr)
    else:
        print(f"{res.status}: source {res.source_acc:.2f}% target {res.target_acc:.2f}% -> {out}")
    return _status_code(res.status)


def cmd_refine(args) -> int:
    cfg = load_config(args)
    init, meta = trainer.TrainState.load(args.init)
    out = resolve_out(args.out, f"refine-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    task = make_task(cfg.data)
    before = trainer.evaluate(init.params, task, cfg, 0, probe=False)
    writer = MetricsWriter(out / METRICS, REFINE_COLUMNS)
    state, error, status = None, "", "failed"
    try:
        state = trainer.refine_dirt_t(init, cfg, task, on_record=writer)
        status = state.status
    except trainer.TrainingDiverged as exc:
        error = str(exc)
    finally:
        writer.close()
    if state is not None:
        state.save(out / CHECKPOINT, cfg)
    extra = {"seed": cfg.seed, "init_checkpoint": os.path.abspath(args.init),
             "init_config_hash": meta.get("config_hash", ""), "init_target_acc": before.target_acc}
    write_json_atomic(out / MANIFEST, _manifest("refine", cfg, out, started, status, state, error, extra))
    if status == "failed":
        print(f"refinement failed: {error}", file=sys.stderr)
    else:
        print(f"{status}: target {before.target_acc:.2f}% -> {state.last.target_acc:.2f}% -> {out}")
    return _status_code(status)


def _write_table(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _result_row(r: trainer.RunResult) -> list[str]:
    vals = [r.source_acc, r.target_acc, r.target_entropy, r.probe_mean]
    return [str(r.seed), r.status] + ["" if np.isnan(v) else _fmt(v) for v in vals] + [r.error]


RESULT_HEADER = ["seed", "status", "source_acc", "target_acc", "target_entropy", "probe_mean", "error"]


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    seeds = parse_seeds(args.seeds)
    out = resolve_out(args.out, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    results = execute_many([(cfg.with_seed(s), out / f"seed{s}") for s in seeds], args.workers)
    results.sort(key=lambda r: r.seed)
    _write_table(out / "runs.csv", RESULT_HEADER, (_result_row(r) for r in results))
    s = trainer.summarize(results)
    _write_table(out / "summary.csv", ["metric", "mean", "std", "min", "max", "n_completed", "n_failed"],
                 [["target_acc"] + [_fmt(v) for v in (s.mean, s.std, s.min, s.max)] + [s.n_completed, s.n_failed]])
    print(f"target accuracy {s} -> {out}")
    return EXIT_OK if s.n_completed >= 1 else EXIT_ERROR


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    seeds = parse_seeds(args.seeds)
    site = args.site or cfg.mask.site
    rows = [losses.LossTermMask.parse(r, site) for r in args.rows] if args.rows else \
        [losses.LossTermMask(m.use_Lc, m.use_Lv, m.use_Lm, site) for m in losses.TABLE4_ROWS]
    out = resolve_out(args.out, "ablate")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.with_mask(m).with_seed(s), out / f"{m.terms.replace(',', '-') or 'none'}" / f"seed{s}")
            for m in rows for s in seeds]
    flat = execute_many(jobs, args.workers)
    table, completed = [], 0
    for i, m in enumerate(rows):
        row = trainer.AblationRow(m, flat[i * len(seeds):(i + 1) * len(seeds)])
        n_ok = sum(r.ok for r in row.results)
        completed += n_ok
        med = row.median
        table.append([row.label, "" if np.isnan(med) else _fmt(med), "" if np.isnan(row.spread) else _fmt(row.spread),
                      n_ok, len(seeds) - n_ok])
        print(f"{row.label:<16} median {med:6.2f}  spread {row.spread:5.2f}  failed {len(seeds) - n_ok}")
    _write_table(out / "ablation.csv", ["terms", "median_target_acc", "spread", "n_completed", "n_failed"], table)
    _write_table(out / "runs.csv", ["terms"] + RESULT_HEADER,
                 ([m.label] + _result_row(r) for m, r in zip([m for m in rows for _ in seeds], flat)))
    return EXIT_OK if completed >= 1 else EXIT_ERROR


def cmd_probe(args) -> int:
    state, meta = trainer.TrainState.load(args.checkpoint)
    cfg = cfgmod.parse(meta["config"]) if meta.get("config") else ExperimentConfig()
    if args.config:
        cfg = cfgmod.load(args.config)
    task = make_task(cfg.data)
    model = state.params.eval_model()
    rng = stream(cfg.seed if args.seed is None else args.seed, "probe")
    res = ev.probe_dataset(model, task.target_test, args.pairs or cfg.eval.probe_pairs,
                           args.lambdas or cfg.eval.probe_lambdas, rng=rng, output=args.output or cfg.eval.probe_output)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("probe.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    res.write(out)
    print(f"probe mean {res.mean:.6g} max {res.max:.6g} ({res.norms.size} rows) -> {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    state, meta = trainer.TrainState.load(args.checkpoint)
    cfg = cfgmod.parse(meta["config"]) if meta.get("config") else ExperimentConfig()
    task = make_task(cfg.data)
    n = ev.export_features(state.params.eval_model(), task.datasets(), args.out)
    print(f"wrote {n} rows -> {args.out}")
    return EXIT_OK


def cmd_dump_data(args) -> int:
    cfg = load_config(args)
    task = make_task(cfg.data)
    if args.out:
        dump_task(task, args.out)
    else:
        dump_task(task, sys.stdout)
    return EXIT_OK


def cmd_timing(args) -> int:
    cfg = load_config(args)
    task = make_task(cfg.data)
    state = trainer.init_state(cfg)
    x = task.target_train.inputs[: cfg.train.batch_size]
    t = ev.time_loss_terms(state.params.classifier(), x, cfg.loss, args.repetitions, cfg.mask.site, cfg.seed)
    print(f"L_m {t['L_m'] * 1e3:.3f} ms  L_v {t['L_v'] * 1e3:.3f} ms  ratio {t['ratio']:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmtlab", description="Virtual mixup training for domain adaptation on toy tasks.")
    p.add_argument("--version", action="version", version=f"vmtlab {__version__} ({kernels.BACKEND} kernels)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, mask=True):
        sp.add_argument("--config", help="config file (defaults when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iterations", type=int, help="override train.iterations")
        if mask:
            sp.add_argument("--mask", help="regularizers to enable, e.g. Lc,Lv,Lm")
            sp.add_argument("--site", help="mixup site: logits | prob | inter")
        if out:
            sp.add_argument("--out", help=f"output directory (default under ${OUT_ENV} or ./runs)")

    sp = sub.add_parser("train", help="joint VMT training run")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("refine", help="DIRT-T refinement from a checkpoint")
    sp.add_argument("--init", required=True, help="checkpoint from a train run")
    common(sp)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("sweep", help="seed sweep with summary table")
    common(sp)
    sp.add_argument("--seeds", default="0..9")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="regularizer ablation table")
    common(sp, mask=False)
    sp.add_argument("--site", help="mixup site for every row")
    sp.add_argument("--rows", nargs="+", help="term sets, e.g. Lc Lc,Lv Lc,Lm Lc,Lv,Lm")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("probe", help="interpolation gradient-norm probe")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--lambdas", type=int)
    sp.add_argument("--output", choices=("predicted", "jacobian"))
    sp.add_argument("--out", help="grid file (default: probe.csv next to the checkpoint)")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("export", help="export encoder features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("dump-data", help="write the generated task as text")
    common(sp, mask=False)
    sp.set_defaults(func=cmd_dump_data)

    sp = sub.add_parser("timing", help="time L_m against L_v")
    common(sp, out=False)
    sp.add_argument("--repetitions", type=int, default=100)
    sp.set_defaults(func=cmd_timing)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CliError, DataError, ArchitectureError, losses.LossError, ev.EvalError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
