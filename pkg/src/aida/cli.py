"""Command-line entry point: gen-data, train, adapt, eval, ablate, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import protocol
from .config import RunConfig, config_to_dict, load_config
from .data import load_dataset, save_dataset
from .errors import AidaError, ConfigError, FormatError
from .metrics import MetricsReport, evaluate_embeddings
from .model import embed_numpy, load_checkpoint, model_params, save_checkpoint
from .plots import line_chart
from .trainer import CSV_BASE_COLUMNS, TrainState, checkpoint_tensors, sf_refine, state_from_checkpoint, train

log = logging.getLogger("aida")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.aida"
ADAPTED_CHECKPOINT = "checkpoint_adapted.aida"
METRICS_CSV = "metrics.csv"
REPORT_FIELDS = ("rank1", "rank5", "rank10", "map", "nmi", "silhouette", "num_queries", "num_skipped")


class SourceFreeViolation(AidaError):
    pass


def _setup_logging():
    level = os.environ.get("AIDA_LOG_LEVEL", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"AIDA_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "controller_mode", None):
        ctrl = dataclasses.replace(cfg.train.controller, mode=args.controller_mode)
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, controller=ctrl))
    return cfg


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def metrics_columns(num_domains: int) -> list[str]:
    return [*CSV_BASE_COLUMNS, *(f"alpha_{k + 1}" for k in range(num_domains))]


def _report_table(reports: dict[str, MetricsReport]) -> str:
    lines = [f"{'domain':<22}" + "".join(f"{k:>12}" for k in REPORT_FIELDS)]
    for name, r in reports.items():
        vals = "".join(f"{getattr(r, k):>12.4f}" if isinstance(getattr(r, k), float) else f"{getattr(r, k):>12d}" for k in REPORT_FIELDS)
        lines.append(f"{name:<22}{vals}")
    return "\n".join(lines)


# -- gen-data -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    sources, target = protocol.benchmark(cfg.data, cfg.seed)
    files = []
    for role, ds in [*(("source", s) for s in sources), ("target", target)]:
        name = f"source_{ds.spec.domain_id}.json" if role == "source" else "target.json"
        save_dataset(ds, out / name)
        files.append(
            {
                "path": name,
                "role": role,
                "domain_id": ds.spec.domain_id,
                "seed": ds.spec.seed,
                "num_identities": ds.spec.num_identities,
                "num_samples": len(ds),
                "sha256": _sha256(out / name),
            }
        )
    manifest = {
        "format_version": 1,
        "created": dt.datetime.now(dt.timezone.utc).isoformat(),
        "root_seed": cfg.seed,
        "data": config_to_dict(cfg.data),
        "files": files,
        "total_samples": sum(f["num_samples"] for f in files),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("wrote %d domains (%d samples) to %s", len(files), manifest["total_samples"], out)
    return 0


def _source_paths(cfg: RunConfig, data_dir: str | None) -> list[Path]:
    data_dir = data_dir or cfg.paths.data_dir
    if data_dir:
        manifest_path = Path(data_dir) / MANIFEST
        if not manifest_path.exists():
            raise FileNotFoundError(f"manifest not found: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        return [Path(data_dir) / f["path"] for f in manifest["files"] if f["role"] == "source"]
    if not cfg.paths.sources:
        raise ConfigError("no source datasets: set paths.sources, paths.data_dir or pass --data")
    return [Path(p) for p in cfg.paths.sources]


def _target_path(cfg: RunConfig, args) -> Path:
    if getattr(args, "target", None):
        return Path(args.target)
    if cfg.paths.target:
        return Path(cfg.paths.target)
    raise ConfigError("no target dataset: set paths.target or pass --target")


# -- train ----------------------------------------------------------------------


def write_run_outputs(out: Path, state: TrainState, csv_name: str = METRICS_CSV, prefix: str = "") -> None:
    k = len(state.controller.alpha)
    write_csv(out / csv_name, state.history, metrics_columns(k))
    trace_cols = ["stage", "epoch", "step", "entropy", "grad_var", "e_max", "v_max", "lambda_pmr", *(f"alpha_{i + 1}" for i in range(k))]
    write_csv(out / f"{prefix}controller_trace.csv", state.history, trace_cols)
    write_csv(out / f"{prefix}epochs.csv", state.epoch_log, ["stage", "epoch", "mean_loss", "train_acc"])
    render_plots(out, state.history, k, prefix)


def render_plots(out: Path, rows: list[dict], k: int, prefix: str = "") -> dict[str, Path]:
    def series(col):
        pts = [(float(r["step"]), float(r[col])) for r in rows if r.get(col, "") != ""]
        return [p[0] for p in pts], [p[1] for p in pts]

    charts = {
        "loss": line_chart({c: series(c) for c in ("loss_total", "loss_id", "loss_tri") if series(c)[0]}, "training loss", ylabel="loss"),
        "lambda": line_chart({"lambda_pmr": series("lambda_pmr")}, "consistency strength", ylabel="lambda"),
        "alpha": line_chart({f"alpha_{i + 1}": series(f"alpha_{i + 1}") for i in range(k)}, "mixing weights", ylabel="alpha"),
    }
    paths = {}
    for name, svg in charts.items():
        p = out / f"{prefix}{name}.svg"
        p.write_text(svg)
        paths[name] = p
    return paths


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    sources = [load_dataset(p) for p in _source_paths(cfg, args.data)]
    tcfg = cfg.train_config()
    state = train(tcfg, sources, stages=args.stage)
    save_checkpoint(checkpoint_tensors(state), out / CHECKPOINT)
    write_run_outputs(out, state)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    log.info("trained %d steps; checkpoint at %s", state.step, out / CHECKPOINT)
    return 0


# -- adapt ----------------------------------------------------------------------


def cmd_adapt(args) -> int:
    cfg = _resolve(args)
    if cfg.paths.sources or cfg.paths.data_dir or getattr(args, "data", None):
        raise SourceFreeViolation(
            "source-free adaptation refuses to run: source datasets were supplied "
            f"(paths.sources={list(cfg.paths.sources)}, paths.data_dir={cfg.paths.data_dir!r}, --data={getattr(args, 'data', None)!r})"
        )
    out = _out_dir(args)
    ckpt = Path(args.checkpoint or cfg.paths.checkpoint or "")
    if not args.checkpoint and not cfg.paths.checkpoint:
        raise ConfigError("no checkpoint: set paths.checkpoint or pass --checkpoint")
    target = load_dataset(_target_path(cfg, args))
    tcfg = cfg.train_config()
    state = state_from_checkpoint(load_checkpoint(ckpt), tcfg)

    before = evaluate_embeddings(embed_numpy(state.params, target.features), target.labels, target.cameras, seed=cfg.seed)
    # refinement sees the unlabeled vectors only
    state = sf_refine(state, tcfg, target.features)
    after = evaluate_embeddings(embed_numpy(state.params, target.features), target.labels, target.cameras, seed=cfg.seed)

    save_checkpoint(checkpoint_tensors(state), out / ADAPTED_CHECKPOINT)
    write_run_outputs(out, state, csv_name="adapt_metrics.csv", prefix="adapt_")
    (out / "adapt_eval.json").write_text(json.dumps({"before": before.to_dict(), "after": after.to_dict()}, indent=2, sort_keys=True) + "\n")
    print(_report_table({"target (before)": before, "target (after)": after}))
    return 0


# -- eval -----------------------------------------------------------------------


def evaluate_checkpoint(ckpt: Path, dataset: Path, seed: int = 0) -> MetricsReport:
    params = model_params(load_checkpoint(ckpt))
    ds = load_dataset(dataset)
    return evaluate_embeddings(embed_numpy(params, ds.features), ds.labels, ds.cameras, seed=seed)


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    ckpt = args.checkpoint or cfg.paths.checkpoint
    if not ckpt:
        raise ConfigError("no checkpoint: set paths.checkpoint or pass --checkpoint")
    datasets = args.dataset or ([cfg.paths.target] if cfg.paths.target else [])
    if not datasets:
        raise ConfigError("nothing to evaluate: pass --dataset or set paths.target")
    reports = {Path(d).stem: evaluate_checkpoint(Path(ckpt), Path(d), cfg.seed) for d in datasets}
    print(_report_table(reports))
    (out / "eval.json").write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n")
    csv_path = out / "eval.csv"
    new = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["checkpoint", "dataset", *REPORT_FIELDS])
        for d, (name, r) in zip(datasets, reports.items()):
            w.writerow([str(ckpt), str(d), *(_fmt(getattr(r, k)) for k in REPORT_FIELDS)])
    return 0


# -- ablate ---------------------------------------------------------------------


def _ablation_seed(payload):
    data_cfg, tcfg, seed, settings, proto = payload
    return protocol.run_ablation_seed(data_cfg, tcfg, seed, settings, proto)


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    ab = cfg.ablate
    seeds = list(ab.seeds) if args.seed is None else [args.seed]
    payloads = [(cfg.data, cfg.train_config(), s, list(ab.settings), ab.protocol) for s in seeds]
    jobs = args.jobs or ab.jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_ablation_seed, payloads))
    else:
        per_seed = [_ablation_seed(p) for p in payloads]
    rows = [r for chunk in per_seed for r in chunk]
    write_csv(out / "ablation_runs.csv", rows, ["seed", "setting", "transfer", "rank1", "map"])
    columns, table = protocol.ablation_table(rows)
    write_csv(out / "ablation.csv", table, ["setting", *columns, "avg_gain"])
    md = protocol.ablation_markdown(columns, table)
    (out / "ablation.md").write_text(md)
    print(md, end="")
    return 0


# -- report ---------------------------------------------------------------------


def read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"metrics CSV not found: {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rows = read_csv(run_dir / METRICS_CSV)
    if not rows:
        raise FormatError(f"{run_dir / METRICS_CSV} has no rows")
    k = sum(1 for c in rows[0] if c.startswith("alpha_"))
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    render_plots(out, rows, k, prefix="report_")
    last = rows[-1]
    lines = [
        "# Run report",
        "",
        f"Steps: {len(rows)} (last stage `{last['stage']}`, epoch {last['epoch']})",
        "",
        "## Final values",
        "",
        "| quantity | value |",
        "|---|---|",
    ]
    for col in ("loss_total", "loss_id", "loss_tri", "loss_pmr_point", "loss_rel", "entropy", "grad_var", "lambda_pmr", *(f"alpha_{i + 1}" for i in range(k))):
        if last.get(col, "") != "":
            lines.append(f"| {col} | {last[col]} |")
    lines += ["", "![loss](report_loss.svg)", "![lambda](report_lambda.svg)", "![alpha](report_alpha.svg)", ""]
    for name in ("eval.json", "adapt_eval.json"):
        p = run_dir / name
        if p.exists():
            doc = json.loads(p.read_text())
            lines += [f"## {name}", "", "| split | " + " | ".join(REPORT_FIELDS) + " |", "|---|" + "---|" * len(REPORT_FIELDS)]
            for split, rep in doc.items():
                lines.append(f"| {split} | " + " | ".join(_fmt(rep[f]) for f in REPORT_FIELDS) + " |")
            lines.append("")
    if (run_dir / "ablation.md").exists():
        lines += ["## Ablation", "", (run_dir / "ablation.md").read_text()]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(f"report written to {out / 'report.md'}")
    return 0


# -- entry ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, metavar="N", help="override the root seed")
    common.add_argument("--controller-mode", choices=("literal", "per_domain"), help="mixing-weight update rule")

    parser = argparse.ArgumentParser(prog="aida", description="Adaptive intermediate-domain training on synthetic Re-ID domains.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write source/target datasets and a manifest")

    p = sub.add_parser("train", parents=[common], help="stage 1 and stage 2 training")
    p.add_argument("--stage", choices=("sup", "aida", "all"), default="all")
    p.add_argument("--data", metavar="DIR", help="directory holding a gen-data manifest")

    p = sub.add_parser("adapt", parents=[common], help="source-free refinement on target data")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--target", metavar="PATH")
    p.add_argument("--data", metavar="DIR", help=argparse.SUPPRESS)

    p = sub.add_parser("eval", parents=[common], help="retrieval and clustering metrics")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--dataset", metavar="PATH", action="append")

    p = sub.add_parser("ablate", parents=[common], help="settings A-D over seeds")
    p.add_argument("--jobs", type=int, default=0, help="parallel worker processes")

    p = sub.add_parser("report", parents=[common], help="render plots and a markdown summary of a run")
    p.add_argument("run_dir", metavar="RUN_DIR")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return COMMANDS[args.command](args)
    except SourceFreeViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (AidaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
