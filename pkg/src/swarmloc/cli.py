"""Command-line entry point: dataset generation, training, evaluation,
decentralized runs, and plot-data export.

Configuration is a flat INI file with one section per module
([sim], [net], [train], [loss], [pgo], [lm], [simple], [bus]); any value
can be overridden on the command line with --set section.key=value.
Unknown sections or keys are rejected. Every command prints its fully
resolved configuration, and file outputs get a sibling .config.json so a
run is reproducible from its artifacts alone.

Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import eval as ev
from . import matchnet as mn
from . import pgo, runtime, sim, train
from .geom import transform_point


class ConfigError(ValueError):
    pass


SECTION_TYPES = {
    "sim": sim.SceneConfig,
    "net": mn.MatchNetConfig,
    "train": train.TrainConfig,
    "loss": train.LossWeights,
    "pgo": pgo.PgoConfig,
    "lm": pgo.LMSettings,
    "simple": ev.SimpleMatchConfig,
    "bus": runtime.BusConfig,
}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(type(default[0])(p) for p in parts)
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    """Merged {section: {key: value}} from file plus --set overrides."""
    merged: dict[str, dict] = {name: {} for name in SECTION_TYPES}

    def apply(section: str, key: str, raw: str):
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTION_TYPES[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        default = getattr(cls(), key)
        merged[section][key] = _coerce(raw, default)

    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                apply(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        apply(section.strip(), key.strip(), raw.strip())
    return merged


def build(section: str, merged: dict[str, dict]):
    cls = SECTION_TYPES[section]
    kwargs = dict(merged.get(section, {}))
    if section == "train" and "loss" in merged:
        kwargs["weights"] = train.LossWeights(**merged["loss"])
    return cls(**kwargs)


def resolved_config(merged: dict[str, dict]) -> dict:
    out = {}
    for section in sorted(SECTION_TYPES):
        cfg = build(section, merged)
        d = dataclasses.asdict(cfg)
        out[section] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(d.items())
        }
    return out


def _log_config(resolved: dict, out_path: Path | None) -> None:
    text = json.dumps(resolved, sort_keys=True)
    print(f"resolved-config: {text}")
    if out_path is not None:
        with open(f"{out_path}.config.json", "w") as fh:
            fh.write(text + "\n")


def _load_net(ckpt: str | None):
    if ckpt is None:
        return None
    params, net_cfg = mn.load_checkpoint(ckpt)
    return params, net_cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    merged = load_config(args.config, args.set or [])
    scene_cfg = build("sim", merged)
    _log_config(resolved_config(merged), Path(args.out))
    scene, frames = sim.generate_dataset(scene_cfg)
    sim.write_dataset(scene, frames, args.out)
    header = {
        "n_robots": scene_cfg.n_robots,
        "n_frames": scene_cfg.n_frames,
        "n_trees": int(scene.trees.shape[0]),
        "seed": scene_cfg.seed,
        "out": str(args.out),
    }
    print(json.dumps(header, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    merged = load_config(args.config, args.set or [])
    net_cfg = build("net", merged)
    train_cfg = build("train", merged)
    pgo_cfg = build("pgo", merged)
    _log_config(resolved_config(merged), Path(args.out))
    datasets = []
    for path in args.data:
        _, _, frames = sim.read_dataset(path)
        datasets.append(frames)
    metrics_path = args.metrics or f"{args.out}.metrics.csv"
    out = train.train(
        datasets,
        net_cfg,
        train_cfg,
        pgo_cfg=pgo_cfg,
        metrics_path=metrics_path,
        checkpoint_path=args.out,
    )
    print(
        json.dumps(
            {
                "checkpoint": str(args.out),
                "epochs": len(out.metrics),
                "best_val_f1": out.best_val_f1,
                "skipped_samples": out.skipped_samples,
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_eval(args) -> int:
    merged = load_config(args.config, args.set or [])
    eval_cfg = ev.EvalConfig(
        simple=build("simple", merged), pgo=build("pgo", merged), lm=build("lm", merged)
    )
    _log_config(resolved_config(merged), Path(args.out) if args.out else None)
    _, _, frames = sim.read_dataset(args.data)
    net = _load_net(args.ckpt)
    if args.method.startswith("learned") and net is None:
        raise ConfigError("--ckpt is required for learned methods")
    captured = [] if (args.dump_graphs and args.method.endswith("+pgo")) else None
    report = ev.run_pipeline(
        frames, args.method, net=net, eval_cfg=eval_cfg, capture_first_graph=captured
    )
    if args.out:
        report.save(args.out)
        if captured:
            graph, solved = captured[0]
            with open(f"{args.out}.graph.json", "w") as fh:
                json.dump(pgo.graph_debug_dump(graph, solved), fh, sort_keys=True)
                fh.write("\n")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_run(args) -> int:
    merged = load_config(args.config, args.set or [])
    eval_cfg = ev.EvalConfig(
        simple=build("simple", merged), pgo=build("pgo", merged), lm=build("lm", merged)
    )
    bus_cfg = build("bus", merged)
    if args.latency is not None:
        bus_cfg = dataclasses.replace(bus_cfg, latency=args.latency)
    if args.drop is not None:
        bus_cfg = dataclasses.replace(bus_cfg, drop=args.drop)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _log_config(resolved_config(merged), out_dir / "run")
    _, _, frames = sim.read_dataset(args.data)
    net = _load_net(args.ckpt)
    run = runtime.run_decentralized(frames, net=net, bus_config=bus_cfg, eval_cfg=eval_cfg)
    for k, report in enumerate(run.reports):
        report.save(out_dir / f"node{k}")
    runtime.write_message_log(out_dir / "messages.csv", run.message_log)
    summary = {
        "combined_rpe": run.combined_rpe,
        "per_node_rpe": [r.rpe_rmse for r in run.reports],
        "messages": len(run.message_log),
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_export_plots(args) -> int:
    merged = load_config(args.config, args.set or [])
    eval_cfg = ev.EvalConfig(
        simple=build("simple", merged), pgo=build("pgo", merged), lm=build("lm", merged)
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _log_config(resolved_config(merged), out_dir / "plots")
    _, _, frames = sim.read_dataset(args.data)
    net = _load_net(args.ckpt)
    if args.method.startswith("learned") and net is None:
        raise ConfigError("--ckpt is required for learned methods")
    report, est_t, _ = ev.run_pipeline(
        frames, args.method, net=net, eval_cfg=eval_cfg, collect_poses=True
    )

    import csv

    with open(out_dir / "trajectories_gt.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "robot", "x", "y", "z"])
        for f, fr in enumerate(frames):
            for i, p in enumerate(fr.gt):
                writer.writerow([f, i, *[repr(float(v)) for v in p.t]])

    # estimated trajectories anchored on robot 0's ground truth (overlay data)
    with open(out_dir / "trajectories_est_ref0.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "robot", "x", "y", "z"])
        for f in range(1, len(frames)):
            anchor = frames[f].gt[0]
            for j in range(report.n_robots):
                if j == 0 or not np.all(np.isfinite(est_t[f, 0, j])):
                    continue
                world = transform_point(anchor, est_t[f, 0, j])
                writer.writerow([f, j, *[repr(float(v)) for v in world]])

    with open(out_dir / "rpe_over_time.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "rpe"])
        for f, v in enumerate(report.frame_rpe):
            if np.isfinite(v):
                writer.writerow([f, repr(float(v))])

    with open(out_dir / "rpe_heatmap.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        n = report.n_robots
        writer.writerow(["i\\j"] + list(range(n)))
        for i in range(n):
            row = [i]
            for j in range(n):
                v = report.rpe_per_pair[i, j]
                row.append("" if not np.isfinite(v) else repr(float(v)))
            writer.writerow(row)
    print(json.dumps({"out_dir": str(out_dir), "method": args.method}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmloc",
        description="multi-robot visual-range relative localization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )

    p = sub.add_parser("gen", help="generate a simulated dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset (.jsonl)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the match network")
    common(p)
    p.add_argument("--data", action="append", required=True, help="dataset path (repeatable)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a method on a dataset")
    common(p)
    p.add_argument("--method", required=True, choices=ev.METHODS)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint (required for learned methods)")
    p.add_argument("--out", help="output prefix for report JSON/CSVs")
    p.add_argument(
        "--dump-graphs", action="store_true",
        help="also dump the first solved factor graph (JSON) for regression diffing",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="decentralized per-robot run over a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint for the learned front-end")
    p.add_argument("--latency", type=int, help="bus latency in frames")
    p.add_argument("--drop", type=float, help="bus drop probability")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export-plots", help="emit CSV series for plots")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="pvo", choices=ev.METHODS)
    p.add_argument("--ckpt")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (sim.DatasetError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
