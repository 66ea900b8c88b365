"""Command-line front end: ``commcl pretrain | run | report | dump-world``.

Configuration is a JSON tree with the sections ``world``, ``backbone``,
``method``, ``train``, ``eval`` and ``output``. Any key not listed in
:data:`DEFAULTS` is rejected. Exit codes: 0 success, 1 runtime or numeric
fault, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_backbone, save_backbone, save_tensors
from .errors import CommError, ConfigError, DataError, UsageError
from .runner import RunConfig, run_stream, write_results
from .synth import SCENARIOS, WorldSpec, build_world, make_stream
from .towers import EncoderConfig, pretrain_backbone

EXIT_OK, EXIT_FAULT, EXIT_USAGE = 0, 1, 2
ABLATIONS = ("no-cross", "no-self", "no-realign")


def _defaults() -> dict:
    world = WorldSpec().to_dict()
    run = RunConfig()
    return {
        "world": world,
        "backbone": {
            "encoder": EncoderConfig().to_dict(),
            "checkpoint": "runs/backbone",
            "pretrain": {"seed": 0, "steps": 400, "learning_rate": 2e-3, "per_class": 2, "min_retrieval": 0.9},
        },
        "method": {"name": run.method, "cross": run.cross, "self": run.self_reg,
                   "realign": run.realign, "lambda_self": run.lambda_self},
        "train": {
            "scenario": "random", "reversed": False, "seed": run.seed, "epochs": run.epochs,
            "batch_size": run.batch_size, "prompt_lr": run.prompt_lr, "gate_lr": run.gate_lr,
            "realign_lr": run.realign_lr, "gate_samples": run.gate_samples, "gate_steps": run.gate_steps,
            "realign_samples": run.realign_samples, "realign_steps": run.realign_steps,
            "train_composition": run.train_composition,
        },
        "eval": {"mode": run.eval_mode, "specific_composition": run.specific_composition},
        "output": {"dir": "runs"},
    }


DEFAULTS = _defaults()


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, path: str = "") -> dict:
    """Strict recursive merge: unknown keys and type changes are errors."""
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        default = base[key]
        if isinstance(default, dict) and key != "temporal":
            out[key] = _merge(default, value, where)
            continue
        if key == "temporal":
            if not isinstance(value, dict) or not all(isinstance(v, int) and v >= 1 for v in value.values()):
                raise ConfigError(f"{where} must map modality names to positive integers")
            out[key] = dict(value)
            continue
        ok = (
            isinstance(value, bool) if isinstance(default, bool)
            else isinstance(value, (int, float)) and not isinstance(value, bool) if isinstance(default, float)
            else isinstance(value, int) and not isinstance(value, bool) if isinstance(default, int)
            else isinstance(value, type(default))
        )
        if not ok:
            raise ConfigError(f"{where} expects {type(default).__name__}, got {value!r}")
        out[key] = float(value) if isinstance(default, float) else value
    return out


def load_config(path: str | os.PathLike | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    cfg = _merge(DEFAULTS, raw)
    validate_config(cfg)
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def world_spec(cfg: dict) -> WorldSpec:
    return WorldSpec(**cfg["world"])


def encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(**cfg["backbone"]["encoder"])


def run_config(cfg: dict) -> RunConfig:
    m, tr, ev = cfg["method"], cfg["train"], cfg["eval"]
    keep = {f.name for f in fields(RunConfig)}
    train = {k: v for k, v in tr.items() if k in keep}
    return RunConfig(method=m["name"], cross=m["cross"], self_reg=m["self"], realign=m["realign"],
                     lambda_self=m["lambda_self"], eval_mode=ev["mode"],
                     specific_composition=ev["specific_composition"], **train)


def validate_config(cfg: dict):
    spec = world_spec(cfg)
    enc = encoder_config(cfg)
    run_config(cfg)
    if cfg["train"]["scenario"] not in SCENARIOS:
        raise ConfigError(f"train.scenario must be one of {SCENARIOS}")
    if spec.d_model != enc.d_model or spec.vocab_size != enc.vocab_size or spec.text_len != enc.text_len:
        raise ConfigError("world and backbone.encoder disagree on d_model, vocab_size or text_len")
    if spec.spatial_len > enc.max_tokens:
        raise ConfigError("world.spatial_len exceeds backbone.encoder.max_tokens")


# --------------------------------------------------------------------------
# manifests


def _atomic_json(path: Path, payload: dict):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _manifest(cfg: dict, out_dir: Path, status: str, artifacts: dict, timings: dict, **extra) -> dict:
    return {
        "status": status,
        "tool_version": __version__,
        "config": cfg,
        "world_seed": cfg["world"]["seed"],
        "backbone_checkpoint": str(cfg["backbone"]["checkpoint"]),
        "output_dir": str(out_dir),
        "artifacts": {k: str(Path(v).name) for k, v in artifacts.items()},
        "timings": timings,
        **extra,
    }


# --------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg: dict, out: str | None = None, seed: int | None = None) -> int:
    if seed is not None:
        cfg["backbone"]["pretrain"]["seed"] = seed
    if out is not None:
        cfg["backbone"]["checkpoint"] = out
    pre = cfg["backbone"]["pretrain"]
    ckpt = Path(cfg["backbone"]["checkpoint"])
    ckpt.mkdir(parents=True, exist_ok=True)
    (ckpt / "experiment.json").unlink(missing_ok=True)

    t0 = time.perf_counter()
    world = build_world(world_spec(cfg))
    t_world = time.perf_counter() - t0
    try:
        backbone, report = pretrain_backbone(
            world.pretrain_corpus(), encoder_config(cfg), seed=pre["seed"], steps=pre["steps"],
            learning_rate=pre["learning_rate"], per_class=pre["per_class"],
            min_retrieval=pre["min_retrieval"], log=lambda s: print(s, flush=True))
    except CommError as exc:
        timings = {"world": t_world, "total": time.perf_counter() - t0}
        _atomic_json(ckpt / "experiment.json", _manifest(
            cfg, ckpt, "fault", {}, timings, fault={"type": type(exc).__name__, "message": str(exc)}))
        raise
    save_backbone(backbone, ckpt, {"world_seed": cfg["world"]["seed"], "pretrain": pre,
                                   "retrieval": report.retrieval, "final_loss": report.final_loss})
    timings = {"world": t_world, "total": time.perf_counter() - t0}
    _atomic_json(ckpt / "experiment.json", _manifest(
        cfg, ckpt, "complete", {"checkpoint": ckpt / "manifest.json"}, timings,
        retrieval=report.retrieval, weights_hash=report.weights_hash))
    floor = pre["min_retrieval"]
    print(f"held-out retrieval {report.retrieval:.3f} (retrieval ≥ {floor:.2f})")
    print(f"checkpoint {ckpt} sha256 {report.weights_hash}")
    return EXIT_OK


def run_name(cfg: dict) -> str:
    tr = cfg["train"]
    label = run_config(cfg).label()
    return f"{label}-{tr['scenario']}{'-rev' if tr['reversed'] else ''}-s{tr['seed']}"


def execute_run(cfg: dict, out_dir: str | os.PathLike, progress=None) -> tuple[int, dict]:
    """One run into ``out_dir``. Returns (exit code, manifest)."""
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").unlink(missing_ok=True)
    t0 = time.perf_counter()
    timings: dict = {}

    ckpt = Path(cfg["backbone"]["checkpoint"])
    if not (ckpt / "manifest.json").is_file():
        raise UsageError(f"no backbone checkpoint at {ckpt}; run `commcl pretrain` first")
    backbone, bmeta = load_backbone(ckpt)
    if backbone.cfg.to_dict() != cfg["backbone"]["encoder"]:
        raise ConfigError("checkpoint encoder geometry differs from backbone.encoder")
    trained_on = bmeta["meta"].get("world_seed")
    if trained_on is not None and trained_on != cfg["world"]["seed"]:
        print(f"warning: backbone was pretrained on world seed {trained_on}, "
              f"running on world seed {cfg['world']['seed']}", file=sys.stderr)
    world = build_world(world_spec(cfg))
    rc = run_config(cfg)
    stream = make_stream(world, cfg["train"]["scenario"], cfg["train"]["reversed"], rc.seed)
    (out / "stream.json").write_text(stream.to_json() + "\n")
    timings["setup"] = time.perf_counter() - t0

    step_times = []
    last = [time.perf_counter()]

    def on_step(log):
        now = time.perf_counter()
        step_times.append(now - last[0])
        last[0] = now
        if progress:
            progress(log)

    extra = {"backbone_hash": backbone.weights_hash(), "run": rc.label(), "run_name": run_name(cfg)}
    try:
        result = run_stream(backbone, world, stream, rc, progress=on_step)
        status, code = "complete", EXIT_OK
    except CommError as exc:
        result = getattr(exc, "partial", None)
        status, code = "fault", EXIT_FAULT
        extra["fault"] = {"type": type(exc).__name__, "message": str(exc),
                          "context": getattr(exc, "context", {}),
                          "completed_steps": len(result.steps) if result else 0}
    artifacts = write_results(result, out) if result is not None else {}
    artifacts["stream"] = out / "stream.json"
    timings["steps"] = step_times
    timings["total"] = time.perf_counter() - t0
    manifest = _manifest(cfg, out, status, artifacts, timings, **extra)
    _atomic_json(out / "manifest.json", manifest)
    return code, manifest


def _print_progress(log):
    acc = " ".join(f"{k}={v:.3f}" for k, v in log["accuracy"].items())
    mods = ",".join(log["modalities"])
    print(f"t={log['t']:>2} [{mods}] {acc}", flush=True)


def _run_job(args):
    cfg, out_dir, verbose = args
    try:
        code, manifest = execute_run(cfg, out_dir, _print_progress if verbose else None)
    except (ConfigError, UsageError) as exc:
        return EXIT_USAGE, str(out_dir), str(exc)
    except CommError as exc:
        return EXIT_FAULT, str(out_dir), str(exc)
    return code, str(out_dir), manifest.get("fault", {}).get("message", "")


def cmd_run(cfg: dict, methods=None, scenario=None, seeds=None, eval_mode=None, ablate=None,
            reversed_=False, out=None, jobs=1, verbose=True) -> int:
    if methods:
        cfg["method"]["name"] = methods
    if scenario:
        cfg["train"]["scenario"] = scenario
    if eval_mode:
        cfg["eval"]["mode"] = eval_mode
    if reversed_:
        cfg["train"]["reversed"] = True
    if out:
        cfg["output"]["dir"] = out
    variants = ablate or [""]
    seeds = seeds if seeds else [cfg["train"]["seed"]]
    jobs_list = []
    for variant in variants:
        flags = [f for f in variant.split(",") if f and f != "none"]
        bad = [f for f in flags if f not in ABLATIONS]
        if bad:
            raise UsageError(f"unknown ablation {bad}; choose from {ABLATIONS}")
        for seed in seeds:
            c = copy.deepcopy(cfg)
            c["train"]["seed"] = seed
            for f in flags:
                c["method"][f.removeprefix("no-")] = False
            validate_config(c)
            jobs_list.append((c, Path(c["output"]["dir"]) / run_name(c), verbose and jobs == 1))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_list))
    else:
        results = [_run_job(j) for j in jobs_list]
    worst = EXIT_OK
    for code, out_dir, msg in results:
        status = "ok" if code == EXIT_OK else f"exit {code}: {msg}"
        print(f"{out_dir}: {status}")
        worst = max(worst, code)
    return worst


def _read_run(d: Path) -> dict:
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise UsageError(f"{d}: no manifest (run incomplete or not a run directory)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("status") != "complete":
        raise UsageError(f"{d}: run did not complete ({manifest.get('status')})")
    metrics = json.loads((d / "metrics.json").read_text())
    rows = []
    with open(d / "accuracy_matrix.csv", newline="") as f:
        for r in csv.DictReader(f):
            rows.append((r["mode"], int(r["t"]), int(r["j"]), r["modality"], float(r["accuracy"])))
    return {"dir": d, "manifest": manifest, "metrics": metrics, "matrix": rows}


def faa_over_time(matrix_rows, mode: str) -> list[tuple[int, str, float]]:
    """Per-modality mean accuracy over that modality's seen tasks after every step."""
    out = []
    steps = sorted({t for md, t, *_ in matrix_rows if md == mode})
    for t in steps:
        cells = [(m, a) for md, tt, j, m, a in matrix_rows if md == mode and tt == t]
        for m in sorted({m for m, _ in cells}):
            out.append((t, m, float(np.mean([a for mm, a in cells if mm == m]))))
    return out


def format_table(runs: list[dict]) -> str:
    mods = []
    for r in runs:
        for mode in r["metrics"]["metrics"].values():
            mods += [m for m in mode["per_modality"] if m not in mods]
    header = ["run", "mode"] + [f"{m} FAA" for m in mods] + ["AIA", "FAA", "F"]
    lines = []
    for r in runs:
        name = r["manifest"].get("run_name", r["dir"].name)
        for mode, rep in r["metrics"]["metrics"].items():
            cells = [name, mode]
            for m in mods:
                pm = rep["per_modality"].get(m)
                cells.append(f"{100 * pm['FAA']:.2f}" if pm else "-")
            ov = rep["overall"]
            cells += [f"{100 * ov['AIA']:.2f}", f"{100 * ov['FAA']:.2f}",
                      f"{100 * ov['F']:.2f}" if ov["F_defined"] else "n/a"]
            lines.append(cells)
    widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]

    def fmt(row):
        return "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines])


def cmd_report(dirs: list[str], out: str | None = None) -> int:
    if not dirs:
        raise UsageError("report needs at least one run directory")
    runs = [_read_run(Path(d)) for d in dirs]
    seeds = sorted({r["manifest"]["world_seed"] for r in runs})
    if len(seeds) > 1:
        banner = f"WARNING: runs were generated from different world seeds {seeds}; rows are not comparable"
        print("!" * len(banner))
        print(banner)
        print("!" * len(banner))
    table = format_table(runs)
    print(table)
    out_dir = Path(out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    plot = out_dir / "faa_vs_time.csv"
    with open(plot, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "mode", "t", "modality", "faa"])
        for r in runs:
            name = r["manifest"].get("run_name", r["dir"].name)
            for mode in r["metrics"]["metrics"]:
                for t, m, v in faa_over_time(r["matrix"], mode):
                    w.writerow([name, mode, t, m, repr(v)])
    (out_dir / "report.txt").write_text(table + "\n")
    print(f"plot data: {plot}")
    return EXIT_OK


def cmd_dump_world(cfg: dict, out: str) -> int:
    world = build_world(world_spec(cfg))
    tr = cfg["train"]
    stream = make_stream(world, tr["scenario"], tr["reversed"], tr["seed"])
    meta = {"spec": world.spec.to_dict(),
            "classes": [{"class_id": c.class_id, "modality": c.modality, "tokens": c.tokens.tolist(),
                         "pretrain": c.pretrain} for c in world.classes],
            "stream": json.loads(stream.to_json())}
    path = save_tensors(out, world.tensors(), "world", meta)
    print(f"world written to {path.parent} ({len(world.classes)} classes, {len(stream)} tasks)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="commcl", description="Multimodal continual prompt learning on synthetic data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def config_arg(sp):
        sp.add_argument("--config", "-c", help="JSON config (defaults apply when omitted)")

    sp = sub.add_parser("pretrain", help="pretrain and freeze the two-tower backbone")
    config_arg(sp)
    sp.add_argument("--out", help="checkpoint directory (overrides backbone.checkpoint)")
    sp.add_argument("--seed", type=int, help="pretraining seed")

    sp = sub.add_parser("run", help="continual training and evaluation over one stream")
    config_arg(sp)
    sp.add_argument("--method", choices=("comm", "ft"))
    sp.add_argument("--scenario", choices=SCENARIOS)
    sp.add_argument("--seed", type=_seed_list, help="run seed, or a comma list for several runs")
    sp.add_argument("--eval-mode", choices=("specific", "agnostic", "both"))
    sp.add_argument("--ablate", action="append",
                    help="comma list from no-cross,no-self,no-realign; repeat for several variants")
    sp.add_argument("--reversed", action="store_true", help="reverse the task order")
    sp.add_argument("--out", help="output root (overrides output.dir)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.add_argument("--quiet", action="store_true", help="suppress per-step progress")

    sp = sub.add_parser("report", help="compare finished runs")
    sp.add_argument("dirs", nargs="+", help="run directories")
    sp.add_argument("--out", help="directory for faa_vs_time.csv and report.txt")

    sp = sub.add_parser("dump-world", help="write the generated world to a tensor container")
    config_arg(sp)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command == "report":
            return cmd_report(args.dirs, args.out)
        cfg = load_config(args.config)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.out, args.seed)
        if args.command == "dump-world":
            return cmd_dump_world(cfg, args.out)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return cmd_run(cfg, args.method, args.scenario, args.seed, args.eval_mode, args.ablate,
                       args.reversed, args.out, args.jobs, verbose=not args.quiet)
    except (ConfigError, UsageError) as exc:
        print(f"commcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CommError, DataError) as exc:
        print(f"commcl: fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
