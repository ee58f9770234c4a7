"""``headfuse`` command line: simulate | train | run | eval | bandwidth | sweep.

Settings resolve as flags > ``--config`` YAML file > defaults; the seed
falls back to ``HEADFUSE_SEED`` before the built-in default.  Each command
writes its artifacts into ``--out`` (a fresh timestamped directory under
``runs/`` when omitted) and prints one JSON summary line on stdout.  Logs
go to stderr.  Exit status: 0 ok, 2 bad configuration or input, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__, plotting, wire
from .errors import ConfigError, HeadfuseError, UsageError, WireFormatError
from .evaluation import (
    EvalConfig,
    compare_strategies,
    occlusion_benchmark,
    run_episodes,
    sender_suite_sweep,
)
from .fusion import (
    ComplementaryParams,
    HeteroHead,
    HomoHead,
    LateFusion,
    NoFusion,
    load_checkpoint,
    save_checkpoint,
    train_complementary,
)
from .simulator import (
    BENCHMARK_SEED,
    TOY_TRAINING_SEED,
    ScenarioConfig,
    Thresholds,
    dump_scenario,
    generate_scenario,
    homogeneous,
    load_scenario,
    run_episode,
    toy_training_set,
)

log = logging.getLogger("headfuse")

STRATEGIES = ("no_fusion", "late_fusion", "hetero_head", "homo_head")

SWEEP_SEED = 2000

DEFAULTS = {
    "seed": None,
    "jobs": 1,
    "fps": 10.0,
    "scenes": 10,
    "strategies": ["no_fusion", "late_fusion", "hetero_head"],
    "scenario": None,
    "scenario_config": {},
    "checkpoint": None,
    "homogeneous": False,
    "codec": "none",
    "quantize": False,
    "thresholds": {"score": 0.25, "nms_iou": 0.15, "late_sender": 0.75},
    "epochs": 200,
    "lr": 1e-3,
    "train_scenes": 6,
    "preset": None,
    "benchmark": False,
}


# -- configuration ----------------------------------------------------------------


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    unknown = set(data) - set(DEFAULTS) - {"out"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


def resolve(args):
    """Merge defaults, the config file and explicit flags into one dict."""
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    cfg["out"] = None
    file_cfg = _read_config(args.config)
    for k, v in file_cfg.items():
        if k == "thresholds":
            if not isinstance(v, dict) or set(v) - set(DEFAULTS["thresholds"]):
                raise ConfigError("thresholds must map score / nms_iou / late_sender to numbers")
            cfg["thresholds"].update(v)
        else:
            cfg[k] = v
    if "seed" not in file_cfg and os.environ.get("HEADFUSE_SEED"):
        try:
            cfg["seed"] = int(os.environ["HEADFUSE_SEED"])
        except ValueError:
            raise ConfigError("HEADFUSE_SEED must be an integer") from None
    for k, v in vars(args).items():
        if v is None or k in ("config", "command", "func", "verbose", "overwrite"):
            continue
        if k in ("score_threshold", "nms_iou", "late_threshold"):
            key = {"score_threshold": "score", "nms_iou": "nms_iou", "late_threshold": "late_sender"}[k]
            cfg["thresholds"][key] = v
        else:
            cfg[k] = v
    if isinstance(cfg["strategies"], str):
        cfg["strategies"] = [s for s in cfg["strategies"].split(",") if s]
    bad = [s for s in cfg["strategies"] if s not in STRATEGIES]
    if bad:
        raise ConfigError(f"unknown strategies: {', '.join(bad)} (choose from {', '.join(STRATEGIES)})")
    for k in ("scenes", "jobs", "epochs", "train_scenes"):
        if not isinstance(cfg[k], int) or cfg[k] < 1:
            raise ConfigError(f"{k} must be a positive integer")
    try:
        cfg["thresholds_obj"] = Thresholds(**{k: float(v) for k, v in cfg["thresholds"].items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad thresholds: {exc}") from None
    if cfg["codec"] not in wire.CODECS:
        raise ConfigError(f"unknown codec {cfg['codec']!r}")
    return cfg


def _output_dir(cfg, command, overwrite):
    if cfg["out"] is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        out = Path("runs") / f"{command}-{stamp}"
    else:
        out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {out} is not empty (pass --overwrite to reuse it)")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write(path, text):
    path.write_text(text)
    return str(path)


def _seed(cfg, default=0):
    return default if cfg["seed"] is None else int(cfg["seed"])


def _scenario_config(cfg):
    return ScenarioConfig.from_dict(cfg["scenario_config"]) if cfg["scenario_config"] else ScenarioConfig()


def _scenes(cfg):
    if cfg["scenario"]:
        paths = cfg["scenario"] if isinstance(cfg["scenario"], list) else [cfg["scenario"]]
        scenes = [load_scenario(p) for p in paths]
    else:
        sc_cfg = _scenario_config(cfg)
        scenes = [generate_scenario(_seed(cfg) + i, sc_cfg) for i in range(cfg["scenes"])]
    return [homogeneous(s) for s in scenes] if cfg["homogeneous"] else scenes


def _params(cfg):
    if cfg["checkpoint"] is None:
        return None
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path.read_bytes())
    except WireFormatError as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from None


def _strategy(name, cfg, params):
    if name == "no_fusion":
        return NoFusion()
    if name == "late_fusion":
        return LateFusion(cfg["thresholds_obj"].late_sender)
    if name == "hetero_head":
        return HeteroHead()
    if params is None:
        raise ConfigError("homo_head needs --checkpoint (see the train command)")
    return HomoHead(params)


# -- commands -----------------------------------------------------------------------


def cmd_simulate(cfg, out):
    """Scenario YAML files plus one result JSON per scene (all strategies)."""
    scenes = _scenes(cfg)
    params = _params(cfg)
    strategies = [_strategy(n, cfg, params) for n in cfg["strategies"]]
    (out / "scenes").mkdir(exist_ok=True)
    (out / "results").mkdir(exist_ok=True)
    per_strategy = {s.name: run_episodes(scenes, s, None, cfg["thresholds_obj"], cfg["jobs"]) for s in strategies}
    for i, sc in enumerate(scenes):
        tag = f"scene_{i:04d}"
        _write(out / "scenes" / f"{tag}.yaml", dump_scenario(sc))
        result = {name: eps[i].to_dict() for name, eps in per_strategy.items()}
        _write(out / "results" / f"{tag}.json", json.dumps(result, sort_keys=True, indent=1))
    log.info("simulated %d scenes x %d strategies", len(scenes), len(strategies))
    return {"scenes": len(scenes), "result_files": len(scenes), "strategies": [s.name for s in strategies]}


def cmd_train(cfg, out):
    """Train the complementary fusion weights on the bundled toy set."""
    data = toy_training_set(cfg["train_scenes"], TOY_TRAINING_SEED, _scenario_config(cfg))
    if not data:
        raise ConfigError("toy training set is empty (no sender in range)")
    params = ComplementaryParams.init(data[0][0].channels, seed=_seed(cfg))
    log.info("training on %d samples for %d epochs", len(data), cfg["epochs"])
    res = train_complementary(params, data, epochs=cfg["epochs"], lr=cfg["lr"], seed=_seed(cfg))
    ckpt = out / "complementary.ckpt"
    save_checkpoint(res.params, ckpt)
    lines = ["epoch,loss", f"0,{res.initial_loss!r}"] + [f"{i + 1},{v!r}" for i, v in enumerate(res.history)]
    _write(out / "loss.csv", "\n".join(lines) + "\n")
    return {
        "checkpoint": str(ckpt),
        "samples": len(data),
        "epochs": cfg["epochs"],
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
    }


def cmd_run(cfg, out):
    """One strategy over the selected scenes; episode JSON per scene."""
    params = _params(cfg)
    if len(cfg["strategies"]) != 1:
        raise ConfigError("run takes exactly one strategy")
    strategy = _strategy(cfg["strategies"][0], cfg, params)
    scenes = _scenes(cfg)
    n_dets = 0
    for i, sc in enumerate(scenes):
        ep = run_episode(sc, strategy, None, cfg["thresholds_obj"], cfg["codec"], cfg["quantize"])
        n_dets += sum(len(f.detections) for f in ep.frames)
        _write(out / f"episode_{i:04d}.json", ep.to_json())
    return {"strategy": strategy.name, "episodes": len(scenes), "detections": n_dets}


def cmd_eval(cfg, out):
    """Strategy table (CSV, JSON, PNG); ``--benchmark`` runs the two-suite occlusion benchmark."""
    params = _params(cfg)
    if cfg["benchmark"]:
        if params is None:
            raise ConfigError("--benchmark needs --checkpoint for the homo_head row")
        res = occlusion_benchmark(params, cfg["scenes"], _seed(cfg, BENCHMARK_SEED),
                                  cfg["thresholds_obj"], jobs=cfg["jobs"])
        _write(out / "benchmark.json", res.to_json())
        for name, table in (("heterogeneous", res.heterogeneous), ("homogeneous", res.homogeneous)):
            _write(out / f"{name}.csv", table.to_csv())
            plotting.plot_strategies(table, out / f"{name}.png")
        return {"scenes": cfg["scenes"], "hetero_gain_ap50": res.hetero_gain(), "homo_margin_ap50": res.homo_margin()}
    strategies = [_strategy(n, cfg, params) for n in cfg["strategies"]]
    scenes = _scenes(cfg)
    table = compare_strategies(scenes, strategies, None, cfg["thresholds_obj"], EvalConfig(), cfg["fps"],
                               include_reference=False, jobs=cfg["jobs"])
    _write(out / "table.csv", table.to_csv())
    _write(out / "table.json", table.to_json())
    plotting.plot_strategies(table, out / "table.png")
    return {"rows": len(table.rows), "table": table.as_records()}


def cmd_bandwidth(cfg, out):
    """Payload arithmetic for one preset (or all of them)."""
    names = [cfg["preset"]] if cfg["preset"] else wire.preset_names()
    summary = {}
    for name in names:
        if name not in wire.preset_names():
            raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(wire.preset_names())})")
        report = wire.preset_report(name, cfg["fps"] if cfg["fps"] != DEFAULTS["fps"] else None)
        _write(out / f"{name}.csv", report.to_csv())
        _write(out / f"{name}.json", report.to_json())
        plotting.plot_bandwidth(report, out / f"{name}.png")
        summary[name] = {r.strategy: r.mbps for r in report.rows}
        summary[name]["ratio"] = report.row("head").ratio_vs_intermediate
    if len(names) == 1:
        return {"preset": names[0], **summary[names[0]]}
    return {"presets": summary}


def cmd_sweep(cfg, out):
    """Transmitted-FP vs threshold curve of the sender backbone (CSV + PNG)."""
    res = sender_suite_sweep(cfg["scenes"], _seed(cfg, SWEEP_SEED), jobs=cfg["jobs"])
    _write(out / "sweep.csv", res.to_csv())
    _write(out / "sweep.json", json.dumps(res.to_dict(), indent=2))
    plotting.plot_sweep(res, out / "sweep.png")
    return {"scenes": cfg["scenes"], "zero_fp_threshold": res.zero_fp_threshold, "fp_at_0": res.fp_counts[0]}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "run": cmd_run,
    "eval": cmd_eval,
    "bandwidth": cmd_bandwidth,
    "sweep": cmd_sweep,
}


# -- parser ------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="headfuse", description="Detection-head fusion simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of settings (flags override it)")
    common.add_argument("--seed", type=int, help="base seed (default: $HEADFUSE_SEED, else per command)")
    common.add_argument("--out", help="output directory (default: runs/<command>-<timestamp>)")
    common.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty --out")
    common.add_argument("--jobs", type=int, help="worker processes for per-scene work")
    common.add_argument("--fps", type=float, help="frame rate for bandwidth figures")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scenes", type=int, help="number of generated scenes")
    scene.add_argument("--scenario", nargs="+", help="scenario YAML file(s) instead of generated scenes")
    scene.add_argument("--strategies", help=f"comma-separated subset of {','.join(STRATEGIES)}")
    scene.add_argument("--checkpoint", help="complementary fusion checkpoint (needed by homo_head)")
    scene.add_argument("--homogeneous", action="store_true", default=None, help="give every agent the ego backbone")
    scene.add_argument("--score-threshold", type=float, help="decode score threshold")
    scene.add_argument("--nms-iou", type=float, help="NMS IoU threshold")
    scene.add_argument("--late-threshold", type=float, help="late-fusion sender threshold")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, scene], help="generate scenes and episode results")
    p = sub.add_parser("train", parents=[common], help="train complementary fusion on the toy set")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-scenes", type=int, help="scenes in the toy training set")
    p = sub.add_parser("run", parents=[common, scene], help="run one strategy and dump episodes")
    p.add_argument("--codec", choices=sorted(wire.CODECS))
    p.add_argument("--quantize", action="store_true", default=None, help="uint8 head payloads")
    p = sub.add_parser("eval", parents=[common, scene], help="AP/bandwidth table")
    p.add_argument("--benchmark", action="store_true", default=None, help="two-suite occlusion benchmark")
    p = sub.add_parser("bandwidth", parents=[common], help="payload arithmetic for a preset")
    p.add_argument("--preset", help=f"one of {', '.join(wire.preset_names())} (default: all)")
    p = sub.add_parser("sweep", parents=[common], help="false positives vs sender threshold")
    p.add_argument("--scenes", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = resolve(args)
        out = _output_dir(cfg, args.command, args.overwrite)
        summary = COMMANDS[args.command](cfg, out)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return 2
    except (HeadfuseError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    summary = {"command": args.command, "out": str(out), **summary}
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
