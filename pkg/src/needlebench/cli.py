"""Command-line entry points: data generation, training, evaluation, serving.

Every subcommand takes --config (YAML) and repeatable --set a.b.c=value
overrides; the resolved config is snapshotted into the run directory so a
run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path


from . import config as cfgmod
from .campaign import (
    DEFAULT_ARMS,
    Arm,
    build_suite,
    insertion_table,
    plot_success_rates,
    plot_vn_trace,
    run_ablation_campaign,
    run_insertion_campaign,
    tracking_table,
)
from .encoder import EncoderConfig, TraConRegister, VisionEncoder
from .head import CdfConfig, CdfHead
from .pipeline import run_trial
from .policy import (
    DemoSet,
    PolicyNet,
    PolicyNetConfig,
    behavior_clone,
    constant_velocity_action,
    expert_action,
)
from .checkpoint import load_params, save_params
from .config import from_mapping
from .datasets import generate_demos, generate_tracking_dataset, load_dataset, save_dataset
from .simulator import make_scenario
from .tensor import ConfigError
from .tracking import OnlineTracker
from .training import (
    eval_tracking,
    fit_confidence_calibration,
    load_tracker_artifacts,
    save_tracker_artifacts,
    train_stage1,
)


def _parse_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--run", default=None, help="run directory (defaults to run.dir)")


def _load(args) -> tuple[dict, Path]:
    cfg = cfgmod.load_config(args.config, tuple(args.overrides))
    run = Path(args.run or cfg["run"]["dir"])
    run.mkdir(parents=True, exist_ok=True)
    cfgmod.save_config(cfg, run / "config.yaml")
    return cfg, run


def _dataset(cfg: dict, run: Path):
    ddir = run / "dataset"
    if (ddir / "manifest.json").exists():
        return load_dataset(ddir)
    videos, splits = generate_tracking_dataset(cfgmod.build(cfg, "data"))
    return videos, splits


def _tracker_bundle(run: Path):
    meta_path = run / "tracker.json"
    if not meta_path.exists():
        raise ConfigError(f"no trained tracker under {run} (run train-stage1 first)")
    meta = json.loads(meta_path.read_text())
    return load_tracker_artifacts(
        run / "tracker.nbck",
        from_mapping(EncoderConfig, meta["encoder"], "tracker.encoder"),
        from_mapping(CdfConfig, meta["head"], "tracker.head"),
        meta["register_len"], meta.get("register_seed", 0))


def _tracker_factory(bundle):
    encoder, head, register, calibration = bundle
    return lambda: OnlineTracker(encoder, head, register,
                                 calibration=calibration)


def _policy_net(run: Path) -> PolicyNet:
    meta_path = run / "policy.json"
    if not meta_path.exists():
        raise ConfigError(f"no cloned policy under {run} (run clone-policy first)")
    meta = json.loads(meta_path.read_text())
    net = PolicyNet(PolicyNetConfig(**meta))
    net.load_state(load_params(run / "policy.nbck"))
    return net


def _policy_fn(run: Path, name: str):
    if name == "uncertainty":
        return expert_action
    if name == "constant":
        return constant_velocity_action
    if name == "learned":
        return _policy_net(run).act
    raise ConfigError(f"unknown policy {name!r}")


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, run = _load(args)
    videos, splits = generate_tracking_dataset(cfgmod.build(cfg, "data"))
    save_dataset(run / "dataset", videos, splits)
    print(f"wrote {len(videos)} videos to {run / 'dataset'} "
          f"(train/val/test = {len(splits['train'])}/{len(splits['val'])}/"
          f"{len(splits['test'])})")
    return 0


def cmd_train_stage1(args) -> int:
    cfg, run = _load(args)
    videos, splits = _dataset(cfg, run)
    encoder_cfg = cfgmod.build(cfg, "encoder")
    head_cfg = cfgmod.build(cfg, "head")
    stage1 = cfgmod.build(cfg, "stage1")
    encoder = VisionEncoder(encoder_cfg)
    head = CdfHead(head_cfg)
    register = TraConRegister(args.register_len, encoder_cfg.dim,
                              seed=stage1.seed)
    info = train_stage1(encoder, head, register, videos, splits, stage1,
                        sample_cfg=cfgmod.build(cfg, "sample"),
                        verbose=not args.quiet)
    calibration = fit_confidence_calibration(encoder, head, register, videos,
                                             splits["val"])
    save_tracker_artifacts(run / "tracker.nbck", head, register, calibration)
    (run / "tracker.json").write_text(json.dumps({
        "encoder": dataclasses.asdict(encoder_cfg),
        "head": dataclasses.asdict(head_cfg),
        "register_len": args.register_len,
        "register_seed": stage1.seed,
    }, indent=1))
    (run / "history.json").write_text(json.dumps(info, indent=1))
    print(f"best val AUC {info['best_val_auc']:.3f} "
          f"(epoch {info['best_epoch']}); artifacts in {run}")
    return 0


def cmd_clone_policy(args) -> int:
    cfg, run = _load(args)
    demo_path = run / "demos.npz"
    if demo_path.exists():
        demos = DemoSet.load(demo_path)
    else:
        factory = None
        if not args.no_tracker:
            factory = _tracker_factory(_tracker_bundle(run))
        demos = generate_demos(cfgmod.build(cfg, "demos"), factory)
        demos.save(demo_path)
    pol = cfg["policy"]
    net_cfg = PolicyNetConfig(in_dim=int(demos.x.shape[1]),
                              hidden=int(pol["hidden"]),
                              stop_threshold=float(pol["stop_threshold"]),
                              seed=int(pol["seed"]))
    net = PolicyNet(net_cfg)
    metrics = behavior_clone(net, demos, cfgmod.build(cfg, "clone"))
    save_params(run / "policy.nbck",
                {k: p.data for k, p in net.parameters().items()})
    (run / "policy.json").write_text(json.dumps(dataclasses.asdict(net_cfg)))
    (run / "clone_metrics.json").write_text(json.dumps(metrics, indent=1))
    print(" ".join(f"{k}={v:.4g}" for k, v in metrics.items()
                   if isinstance(v, (int, float))))
    return 0


def cmd_eval_track(args) -> int:
    cfg, run = _load(args)
    videos, splits = _dataset(cfg, run)
    encoder, head, register, calibration = _tracker_bundle(run)
    evals = eval_tracking(encoder, head, register, videos, splits[args.split],
                          calibration=calibration)
    out = {mode: dataclasses.asdict(e) for mode, e in evals.items()}
    (run / f"eval_{args.split}.json").write_text(json.dumps(out, indent=1))
    for mode, e in out.items():
        print(f"{mode:>6}: AUC {100 * e['auc']:.1f}%  P {100 * e['precision']:.1f}%  "
              f"Err {e['err_mm']:.2f} mm  SD {e['sd_mm']:.2f} mm  "
              f"({e['n_frames']} frames)")
    return 0


def cmd_trial(args) -> int:
    cfg, run = _load(args)
    bundle = _tracker_bundle(run)
    scenario = make_scenario(args.seed, args.mode, occlusion=args.occlusion)
    pipe = cfgmod.build(cfg, "pipeline")
    pipe = dataclasses.replace(pipe, pipeline=args.pipeline)
    record = run / f"trial_{args.policy}_{args.pipeline}_{args.seed}.jsonl"
    res = run_trial(scenario, _tracker_factory(bundle),
                    _policy_fn(run, args.policy), pipe, record_path=record,
                    record_meta={"trial_id": 0, "control": "headless",
                                 "policy": args.policy,
                                 "scenario_args": {"seed": args.seed,
                                                   "mode": args.mode,
                                                   "occlusion": args.occlusion,
                                                   "target_px": None}})
    print(json.dumps(res.to_meta(), indent=1))
    print(f"record: {record}")
    if args.plot:
        plot_path = record.with_suffix(".png")
        plot_vn_trace(res.records, plot_path)
        print(f"plot: {plot_path}")
    return 0 if res.success else 1


def cmd_campaign(args) -> int:
    cfg, run = _load(args)
    bundle = _tracker_bundle(run)
    net = _policy_net(run) if args.with_learned else None
    arms = DEFAULT_ARMS
    if net is not None:
        arms = arms + (Arm("learned_async", "learned", "async"),)
    suite = build_suite(cfgmod.build(cfg, "suite"))
    out_dir = run / "campaign"
    out_dir.mkdir(exist_ok=True)
    result = run_insertion_campaign(
        _tracker_factory(bundle), suite=suite, arms=arms, net=net,
        base_cfg=cfgmod.build(cfg, "pipeline"),
        record_dir=out_dir if args.records else None,
        progress=None if args.quiet else print)
    (out_dir / "campaign.json").write_text(json.dumps(result, indent=1))
    table = insertion_table(result, baseline="uncertainty_async")
    (out_dir / "table.txt").write_text(table)
    print(table, end="")
    if args.plots:
        plot_success_rates(result, out_dir / "success.png")
    return 0


def cmd_ablate(args) -> int:
    cfg, run = _load(args)
    axes = tuple(a.strip() for a in args.axes.split(",") if a.strip())
    tracking_cfg = cfgmod.build(cfg, "ablation")
    needs_runtime = bool({"pipeline", "policy"} & set(axes))
    bundle = _tracker_bundle(run) if needs_runtime else None
    net = None
    if needs_runtime and (run / "policy.json").exists():
        net = _policy_net(run)
    report = run_ablation_campaign(
        axes=axes, tracking_cfg=tracking_cfg,
        tracker_factory=_tracker_factory(bundle) if bundle else None,
        suite=build_suite(cfgmod.build(cfg, "suite")) if needs_runtime else None,
        net=net, base_cfg=cfgmod.build(cfg, "pipeline"),
        out_dir=run / "ablation",
        progress=None if args.quiet else print)
    for name, table in report["tables"].items():
        print(f"== {name} ==")
        print(table, end="")
    return 0


def cmd_serve(args) -> int:
    cfg, run = _load(args)
    from .gateway import serve

    serve(run, cfg, host=args.host or cfg["gateway"]["host"],
          port=args.port or int(cfg["gateway"]["port"]))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="needlebench",
        description="synthetic ultrasound needle tracking and insertion bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the tracking video dataset")
    _parse_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train tracking head + register")
    _parse_common(p)
    p.add_argument("--register-len", type=int, default=4)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("clone-policy", help="behavior-clone the expert policy")
    _parse_common(p)
    p.add_argument("--no-tracker", action="store_true",
                   help="build demo features from ground truth only")
    p.set_defaults(fn=cmd_clone_policy)

    p = sub.add_parser("eval-track", help="evaluate tracking on a split")
    _parse_common(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_eval_track)

    p = sub.add_parser("trial", help="run a single insertion trial")
    _parse_common(p)
    p.add_argument("--policy", default="uncertainty",
                   choices=("uncertainty", "constant", "learned"))
    p.add_argument("--pipeline", default="async", choices=("async", "sync"))
    p.add_argument("--mode", default="IPS", choices=("IPS", "IPM"))
    p.add_argument("--occlusion", default="heavy",
                   choices=("none", "light", "heavy"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_trial)

    p = sub.add_parser("campaign", help="run the paired insertion campaign")
    _parse_common(p)
    p.add_argument("--with-learned", action="store_true",
                   help="also include the cloned-policy arm")
    p.add_argument("--records", action="store_true",
                   help="write per-trial JSONL records")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_campaign)

    p = sub.add_parser("ablate", help="run one-at-a-time ablations")
    _parse_common(p)
    p.add_argument("--axes", default="register_length,fusion",
                   help="comma list from register_length,fusion,pipeline,policy")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("serve", help="serve live trials to the browser UI")
    _parse_common(p)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
