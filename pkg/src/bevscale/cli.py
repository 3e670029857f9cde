"""Command-line entry point: data generation, training, evaluation and scaling analysis.

Errors print one line to stderr, ``error[<kind>]: <message>``, and exit with a
kind-specific code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import yaml

EXIT_CODES = {"ok": 0, "error": 1, "usage": 2, "missing_config": 3, "corrupt_shard": 4, "missing_input": 5}
RUNS_ENV = "BEVSCALE_RUNS"

DEFAULT_SWEEP_MODELS = {
    "S": {"backbone": {"width": 8, "ffn_ratio": 2, "layers": [1, 1, 1, 1, 1], "window": 4}},
    "M": {"backbone": {"width": 16, "ffn_ratio": 2, "layers": [1, 1, 1, 1, 1], "window": 4}},
    "L": {"backbone": {"width": 32, "ffn_ratio": 4, "layers": [1, 2, 1, 2, 1], "window": 4}},
}

DEFAULTS = {
    "seed": 0,
    "model": {"backbone": {"width": 16, "ffn_ratio": 2, "layers": [1, 1, 1, 1, 1], "window": 4}},
    "data": {"size": 256, "seed": 0, "eval_size": 64, "eval_seed": 1_000_000, "range_m": 16.0, "voxel": 1.0,
             "history": 4},
    "stage": {},
    "stages": {"pretrain": {"steps": 300, "drop_path": 0.0},
               "midtrain": {"steps": 150, "lr": 3e-3, "drop_path": 0.0},
               "finetune": {"steps": 100, "lr": 1e-3, "drop_path": 0.0}},
    "sweep": {"sizes": [1000, 4000, 16000], "seeds": [0, 1, 2], "models": DEFAULT_SWEEP_MODELS,
              "stage": {"lr": 3e-3, "drop_path": 0.0}},
    "distill": {"student": {"backbone": {"width": 8, "ffn_ratio": 2, "layers": [1, 1, 1, 1, 1], "window": 4}},
                "distill_steps": 150, "finetune_steps": 50},
    "eval": {"score_thr": 0.1, "iou": {"0": 0.7, "1": 0.5}},
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("models",):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_config", f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise CliError("missing_config", f"config file unreadable: {path}: {str(exc).splitlines()[0]}") from None
    if not isinstance(cfg, dict):
        raise CliError("missing_config", f"config file must hold a mapping: {path}")
    return cfg


def run_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def effective_config(args) -> dict:
    cfg = deep_merge(DEFAULTS, load_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def run_dir(args, cfg: dict) -> Path:
    d = Path(args.run_dir) if args.run_dir else run_root() / f"{args.command}-seed{cfg['seed']}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def echo_config(d: Path, cfg: dict) -> None:
    (d / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


# ------------------------------------------------------------------ helpers


def _grid(cfg):
    from .voxel import GridSpec

    d = cfg["data"]
    return GridSpec(float(d["range_m"]), float(d["range_m"]), float(d["voxel"]))


def _model_config(d: dict):
    from .model import PerceptionConfig

    try:
        return PerceptionConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("missing_config", f"invalid model config: {exc}") from None


def _stage(name: str, overrides: dict):
    from .training import StageConfig

    try:
        return StageConfig.default(name, **{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    except (TypeError, ValueError) as exc:
        raise CliError("missing_config", f"invalid stage config: {exc}") from None


def _world(cfg):
    from .world import WorldConfig

    return WorldConfig(range_m=float(cfg["data"]["range_m"]))


def _train_source(args, cfg):
    from .data import SyntheticSource

    if getattr(args, "data", None):
        return _open_shards(args.data)
    d = cfg["data"]
    return SyntheticSource(int(d["size"]), int(d["seed"]), _world(cfg), int(d["history"]), cache_size=int(d["size"]))


def _eval_source(args, cfg):
    from .data import SyntheticSource

    if getattr(args, "eval_data", None):
        return _open_shards(args.eval_data)
    d = cfg["data"]
    return SyntheticSource(int(d["eval_size"]), int(d["eval_seed"]), _world(cfg), int(d["history"]),
                           cache_size=int(d["eval_size"]))


def _open_shards(path):
    from .shards import ShardSource

    try:
        src = ShardSource(path)
        src.verify()
        return src
    except FileNotFoundError as exc:
        raise CliError("missing_input", str(exc)) from None


def _load_model(path):
    from .model import PerceptionConfig, PerceptionModel
    from .nn import load_params

    if not Path(path).is_file():
        raise CliError("missing_input", f"model file not found: {path}")
    state, meta = load_params(path)
    model = PerceptionModel(PerceptionConfig.from_dict(meta["model"]), 0)
    model.load_state_dict(state)
    return model


def _save_model(path, model, extra: dict | None = None):
    from .nn import save_params

    save_params(path, model.state_dict(), {"model": model.config.to_dict(), **(extra or {})})


def _iou(cfg) -> dict[int, float]:
    return {int(k): float(v) for k, v in cfg["eval"]["iou"].items()}


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg) -> int:
    from .data import SyntheticSource
    from .shards import write_shards

    cfg["data"]["size"] = args.frames
    out = Path(args.out) if args.out else run_dir(args, cfg) / "data"
    src = SyntheticSource(args.frames, cfg["seed"], _world(cfg), int(cfg["data"]["history"]))
    manifest = write_shards((src[i] for i in range(len(src))), out, args.shard_size,
                            {"seed": cfg["seed"], "range_m": cfg["data"]["range_m"], "history": cfg["data"]["history"]})
    print(json.dumps({"manifest": str(manifest), "samples": args.frames}))
    return 0


def cmd_train(args, cfg) -> int:
    from .model import PerceptionModel
    from .training import STAGES, run_stage, write_trace_csv

    d = run_dir(args, cfg)
    if args.steps is not None:
        if args.stage == "recipe":
            for s in STAGES:
                cfg["stages"][s]["steps"] = args.steps
        else:
            cfg["stage"]["steps"] = args.steps
    echo_config(d, cfg)
    grid = _grid(cfg)
    model = _load_model(args.init) if args.init else PerceptionModel(_model_config(cfg["model"]), cfg["seed"])
    source = _train_source(args, cfg)
    names = STAGES if args.stage == "recipe" else (args.stage,)
    trace = []
    for name in names:
        overrides = cfg["stages"].get(name, {}) if args.stage == "recipe" else cfg["stage"]
        res = run_stage(model, source, _stage(name, overrides), cfg["seed"], grid)
        trace += [{"stage": name, **r} for r in res.trace]
    _save_model(d / "model.bin", model, {"seed": cfg["seed"]})
    write_trace_csv(d / "trace.csv", trace)
    print(json.dumps({"run_dir": str(d), "steps": len(trace), "final_loss": trace[-1]["loss"] if trace else None}))
    return 0


def cmd_eval(args, cfg) -> int:
    from . import autodiff as ad
    from .encoders import ModalityFlags
    from .heads import write_detections_jsonl
    from .metrics import evaluate, metrics_summary, write_metrics_csv, write_metrics_json
    from .model import detect, forward
    from .training import eval_batches, evaluate_loss
    from .world import Box7

    model = _load_model(args.model)
    grid = _grid(cfg)
    src = _open_shards(args.data) if args.data else _eval_source(args, cfg)
    d = run_dir(args, cfg)
    echo_config(d, cfg)
    mods = ("lidar", "camera", "radar", "surfel")
    flags = ModalityFlags.parse(",".join(mods))
    frames, all_dets = [], []
    with ad.no_grad():
        for b in eval_batches(src, grid, 8):
            out = forward(model, b, flags, ("detection",))
            for dets, gts in zip(detect(out, b, float(cfg["eval"]["score_thr"])), b.gt_boxes):
                frames.append((dets, [Box7.from_array(g[:7], int(g[7])) for g in gts]))
                all_dets += dets
    metrics = evaluate(frames, _iou(cfg))
    loss = evaluate_loss(model, src, grid, ("detection",), mods)
    write_metrics_csv(d / "metrics.csv", d.name, metrics)
    write_metrics_json(d / "metrics.json", metrics)
    write_detections_jsonl(d / "detections.jsonl", all_dets)
    print(json.dumps({"eval_loss": loss, **metrics_summary(metrics)}, sort_keys=True))
    return 0


def _sweep_cell(payload):
    from .training import SweepSpec, scaling_sweep

    name, model_dict, size, seed, spec = payload
    return scaling_sweep({name: _model_config(model_dict)}, [size], [seed], SweepSpec(**spec))[0]


def cmd_sweep(args, cfg) -> int:
    from .training import SweepSpec, append_record, read_records, sweep_run_id

    d = run_dir(args, cfg)
    echo_config(d, cfg)
    sw = cfg["sweep"]
    out_csv = Path(args.out) if args.out else d / "records.csv"
    stage = _stage("pretrain", sw.get("stage", {}))
    spec = dict(stage=stage, eval_size=int(cfg["data"]["eval_size"]), data_seed=int(cfg["data"]["seed"]),
                eval_seed=int(cfg["data"]["eval_seed"]), range_m=float(cfg["data"]["range_m"]),
                voxel=float(cfg["data"]["voxel"]))
    models = sw["models"]
    for m in models.values():
        _model_config(m)
    done = {r.run_id for r in read_records(out_csv)}
    cells = [(n, models[n], int(s), int(seed), spec) for seed in sw["seeds"] for n in models for s in sw["sizes"]
             if sweep_run_id(n, int(s), int(seed)) not in done]
    if args.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for rec in pool.map(_sweep_cell, cells):
                append_record(out_csv, rec)
                print(f"{rec.run_id} loss={rec.final_loss:.6f}", flush=True)
    else:
        from .training import scaling_sweep

        for n, m, s, seed, _ in cells:
            for rec in scaling_sweep({n: _model_config(m)}, [s], [seed], SweepSpec(**spec), out_csv=out_csv):
                print(f"{rec.run_id} loss={rec.final_loss:.6f}", flush=True)
    print(json.dumps({"records": str(out_csv), "count": len(read_records(out_csv))}))
    return 0


def cmd_fit(args, cfg) -> int:
    from .training import efficient_frontier, fit_loglinear, mean_records, read_records, write_fits_json

    path = Path(args.records)
    if not path.is_file():
        raise CliError("missing_input", f"records file not found: {path}")
    try:
        recs = read_records(path)
    except (ValueError, KeyError) as exc:
        raise CliError("missing_input", f"unreadable records: {exc}") from None
    try:
        fits = fit_loglinear(mean_records(recs))
    except ValueError as exc:
        raise CliError("error", str(exc)) from None
    front = efficient_frontier(mean_records(recs))
    for size, f in fits.items():
        print(f"examples={size} intercept={f.intercept:.6g} slope={f.slope:.6g} r2={f.r2:.6g}")
    print("frontier=" + ",".join(r.run_id for r in front))
    if args.run_dir:
        d = run_dir(args, cfg)
        write_fits_json(d / "fits.json", fits, front)
    return 0


def cmd_distill(args, cfg) -> int:
    from .training import distill_run

    d = run_dir(args, cfg)
    echo_config(d, cfg)
    teacher = _load_model(args.teacher)
    dc = cfg["distill"]
    ft = _stage("finetune", cfg["stages"]["finetune"])
    student, report = distill_run(teacher, _model_config(dc["student"]), _train_source(args, cfg),
                                  _eval_source(args, cfg), _grid(cfg), int(dc["distill_steps"]),
                                  int(dc["finetune_steps"]), cfg["seed"], ft)
    _save_model(d / "student.bin", student, {"seed": cfg["seed"]})
    (d / "report.json").write_text(json.dumps(asdict(report), indent=2, sort_keys=True))
    print(json.dumps(asdict(report), sort_keys=True))
    return 0


def cmd_ablate(args, cfg) -> int:
    from .training import RecipeSteps, ablate_grid, ablate_recipe, ablate_tasks

    d = run_dir(args, cfg)
    echo_config(d, cfg)
    grid = _grid(cfg)
    model_cfg = _model_config(cfg["model"])
    src, ev = _train_source(args, cfg), _eval_source(args, cfg)
    st = cfg["stages"]
    recipe = RecipeSteps(_stage("pretrain", st["pretrain"]), _stage("midtrain", st["midtrain"]),
                         _stage("finetune", st["finetune"]))
    if args.kind == "recipe":
        res = ablate_recipe(model_cfg, src, src, ev, grid, cfg["seed"], recipe, _iou(cfg))
    elif args.kind == "tasks":
        res = ablate_tasks(model_cfg, src, src, src, ev, grid, cfg["seed"], recipe, _iou(cfg))
    elif args.kind == "modalities":
        variants = {"lidar": {"modalities": ("lidar",)}, "lidar+camera": {"modalities": ("lidar", "camera")},
                    "lidar+camera+radar": {"modalities": ("lidar", "camera", "radar")},
                    "all": {"modalities": ("lidar", "camera", "radar", "surfel")}}
        res = ablate_grid(model_cfg, src, ev, grid, cfg["seed"], recipe.pretrain, variants)
    else:
        variants = {f"frames={k}": {"frames": k} for k in (1, 2, 4)}
        res = ablate_grid(model_cfg, src, ev, grid, cfg["seed"], recipe.pretrain, variants)
    (d / f"ablate_{args.kind}.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    print(json.dumps({"kind": args.kind, **res}, sort_keys=True))
    return 0


def cmd_plot(args, cfg) -> int:
    from .plots import plot_all
    from .training import read_records

    path = Path(args.records)
    if not path.is_file():
        raise CliError("missing_input", f"records file not found: {path}")
    out = Path(args.out) if args.out else run_dir(args, cfg) / "plots"
    paths = plot_all(read_records(path), out)
    print(json.dumps({"plots": [str(p) for p in paths]}))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    common.add_argument("--config", default=None, help="YAML config file")
    common.add_argument("--run-dir", default=None, help=f"output directory (default ${RUNS_ENV}/<command>-seed<seed>)")

    p = _Parser(prog="bevscale", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic sample shards")
    g.add_argument("--frames", type=int, required=True, help="number of samples to generate")
    g.add_argument("--out", default=None)
    g.add_argument("--shard-size", type=int, default=256)

    t = sub.add_parser("train", parents=[common], help="train one stage or the full recipe")
    t.add_argument("--stage", choices=["pretrain", "midtrain", "finetune", "recipe"], default="pretrain")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--data", default=None, help="shard directory (default: synthetic stream)")
    t.add_argument("--init", default=None, help="parameter file to start from")

    e = sub.add_parser("eval", parents=[common], help="AP/APH on a shard directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", default=None)

    s = sub.add_parser("sweep", parents=[common], help="model x data scaling grid")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default=None, help="records CSV (appended; finished cells are skipped)")

    f = sub.add_parser("fit", parents=[common], help="log-linear fits and efficient frontier")
    f.add_argument("--records", required=True)

    d = sub.add_parser("distill", parents=[common], help="distill a small student from a teacher")
    d.add_argument("--teacher", required=True)
    d.add_argument("--data", default=None)

    a = sub.add_parser("ablate", parents=[common], help="recipe / task / modality / frame ablations")
    a.add_argument("--kind", choices=["recipe", "tasks", "modalities", "frames"], required=True)
    a.add_argument("--data", default=None)

    pl = sub.add_parser("plot", parents=[common], help="SVG plots from a records CSV")
    pl.add_argument("--records", required=True)
    pl.add_argument("--out", default=None)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "fit": cmd_fit,
            "distill": cmd_distill, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    from .shards import CorruptShardError

    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except CorruptShardError as exc:
        kind, msg = "corrupt_shard", str(exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - report anything else on one line
        kind, msg = "error", f"{type(exc).__name__}: {exc}"
    print(f"error[{kind}]: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[kind]


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
