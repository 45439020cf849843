"""Paired evaluation campaigns and one-at-a-time ablations.

Insertion campaigns replay one fixed seeded scenario suite under every
arm (policy x pipeline), so trial k is directly comparable across arms.
Tracking ablations retrain the head with a single knob changed from the
baseline (register length or fusion mode) on shared data and seeds, then
evaluate online tracking on the held-out split.  Reports come out as
plain-text tables (mean +/- sd over seeds, parenthesized deltas against
the baseline row) plus JSON dumps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import TrackingDataConfig, generate_tracking_dataset
from .encoder import EncoderConfig, TraConRegister, VisionEncoder
from .head import CdfConfig, CdfHead
from .metrics import summarize_trials
from .pipeline import PipelineConfig, run_trial
from .policy import PolicyNet, constant_velocity_action, expert_action
from .simulator import InsertionScenario, make_scenario
from .tensor import ConfigError
from .training import Stage1Config, eval_tracking, train_stage1

AXES = ("register_length", "fusion", "pipeline", "policy")


# -- paired scenario suite -------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    n_trials: int = 40  # even split, IPS first then IPM
    seed: int = 1000
    occlusion: str = "heavy"

    def __post_init__(self):
        if self.n_trials <= 0 or self.n_trials % 2:
            raise ConfigError(f"n_trials must be positive and even, got {self.n_trials}")


def build_suite(cfg: SuiteConfig = SuiteConfig()) -> list[InsertionScenario]:
    """Fixed scenario list shared by every arm; trial k is paired across arms."""
    half = cfg.n_trials // 2
    return [make_scenario(cfg.seed + k, "IPS" if k < half else "IPM",
                          occlusion=cfg.occlusion, name=f"trial{k:03d}")
            for k in range(cfg.n_trials)]


# -- insertion arms --------------------------------------------------------------


@dataclass(frozen=True)
class Arm:
    name: str
    policy: str  # "uncertainty" | "constant" | "learned"
    pipeline: str  # "async" | "sync"


DEFAULT_ARMS = (
    Arm("uncertainty_async", "uncertainty", "async"),
    Arm("constant_async", "constant", "async"),
    Arm("uncertainty_sync", "uncertainty", "sync"),
)


def policy_bank(net: Optional[PolicyNet] = None) -> dict[str, Callable]:
    bank = {"uncertainty": expert_action, "constant": constant_velocity_action}
    if net is not None:
        bank["learned"] = net.act
    return bank


def _mode_summaries(trials: list[dict]) -> dict[str, dict]:
    modes = sorted({t["mode"] for t in trials})
    groups: dict[str, list[dict]] = {m: [t for t in trials if t["mode"] == m]
                                     for m in modes}
    groups["pooled"] = trials
    return {m: asdict(summarize_trials(g)) for m, g in groups.items()}


def run_insertion_campaign(tracker_factory: Callable,
                           suite: Optional[list[InsertionScenario]] = None,
                           arms: tuple[Arm, ...] = DEFAULT_ARMS,
                           net: Optional[PolicyNet] = None,
                           base_cfg: PipelineConfig = PipelineConfig(),
                           record_dir: Optional[str | Path] = None,
                           progress: Optional[Callable[[str], None]] = None,
                           ) -> dict:
    """Run every arm over the shared suite; returns per-arm trials + summaries."""
    scenarios = build_suite() if suite is None else suite
    bank = policy_bank(net)
    out = {"n_trials": len(scenarios), "arms": {}}
    for arm in arms:
        if arm.policy not in bank:
            raise ConfigError(
                f"no policy {arm.policy!r} available (train/load one first)")
        cfg = replace(base_cfg, pipeline=arm.pipeline)
        trials = []
        for k, scn in enumerate(scenarios):
            rec = (Path(record_dir) / f"{arm.name}_{k:03d}.jsonl"
                   if record_dir else None)
            res = run_trial(scn, tracker_factory, bank[arm.policy], cfg,
                            record_path=rec)
            trials.append({"trial": k, "mode": scn.mode, **res.to_meta()})
            if progress:
                progress(f"{arm.name} {k + 1}/{len(scenarios)}: "
                         f"{'success' if res.success else res.failure_reason}")
        out["arms"][arm.name] = {
            "policy": arm.policy, "pipeline": arm.pipeline,
            "trials": trials, "summary": _mode_summaries(trials),
        }
    return out


# -- tracking ablation (retrain per variant) --------------------------------------


@dataclass(frozen=True)
class TrackingAblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    baseline_register: int = 4
    register_lengths: tuple[int, ...] = (0, 16)  # one-at-a-time deltas
    fusions: tuple[str, ...] = ("shallow_only", "deep_only")
    data: TrackingDataConfig = field(default_factory=TrackingDataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: CdfConfig = field(default_factory=CdfConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.baseline_register in self.register_lengths:
            raise ConfigError("baseline register length duplicated in variants")


def tracking_variants(cfg: TrackingAblationConfig) -> list[dict]:
    """Baseline first, then single-knob departures from it."""
    base = {"name": f"full_L{cfg.baseline_register}", "fusion": "full",
            "register_len": cfg.baseline_register, "axis": "baseline"}
    out = [base]
    for L in cfg.register_lengths:
        out.append({"name": f"L{L}", "fusion": "full", "register_len": L,
                    "axis": "register_length"})
    for f in cfg.fusions:
        out.append({"name": f, "fusion": f,
                    "register_len": cfg.baseline_register, "axis": "fusion"})
    return out


def run_tracking_ablation(cfg: TrackingAblationConfig = TrackingAblationConfig(),
                          axes: tuple[str, ...] = ("register_length", "fusion"),
                          progress: Optional[Callable[[str], None]] = None,
                          ) -> dict:
    """Train + evaluate each variant on the same data for each seed."""
    variants = [v for v in tracking_variants(cfg)
                if v["axis"] == "baseline" or v["axis"] in axes]
    per_seed: dict[str, list[dict]] = {v["name"]: [] for v in variants}
    for seed in cfg.seeds:
        videos, splits = generate_tracking_dataset(replace(cfg.data, seed=seed))
        encoder = VisionEncoder(cfg.encoder)  # frozen; shared by all variants
        for v in variants:
            head = CdfHead(replace(cfg.head, fusion=v["fusion"], seed=seed))
            register = TraConRegister(v["register_len"], cfg.encoder.dim,
                                      seed=seed)
            info = train_stage1(encoder, head, register, videos, splits,
                                replace(cfg.stage1, seed=seed))
            evals = eval_tracking(encoder, head, register, videos,
                                  splits["test"])
            row = {mode: asdict(e) for mode, e in evals.items()}
            row["best_val_auc"] = info["best_val_auc"]
            per_seed[v["name"]].append(row)
            if progress:
                progress(f"seed {seed} {v['name']}: "
                         f"pooled AUC {row['pooled']['auc']:.3f}")
    return {"variants": variants, "seeds": list(cfg.seeds),
            "per_seed": per_seed, "aggregate": _aggregate_tracking(per_seed),
            "scale": {"n_videos": cfg.data.n_videos,
                      "frames_per_video": cfg.data.frames_per_video,
                      "epochs": cfg.stage1.epochs,
                      "steps_per_epoch": cfg.stage1.steps_per_epoch,
                      "batch": cfg.stage1.batch}}


def _aggregate_tracking(per_seed: dict[str, list[dict]]) -> dict:
    """mean/sd across seeds for every (variant, mode, metric)."""
    agg: dict = {}
    for name, rows in per_seed.items():
        modes = [m for m in rows[0] if m != "best_val_auc"]
        agg[name] = {}
        for mode in modes:
            agg[name][mode] = {}
            for metric in ("auc", "precision", "err_mm", "sd_mm"):
                vals = np.array([r[mode][metric] for r in rows])
                agg[name][mode][metric] = {"mean": float(vals.mean()),
                                           "sd": float(vals.std())}
    return agg


# -- report tables -----------------------------------------------------------------


def _cell(mean: float, sd: float, delta: Optional[float], pct: bool) -> str:
    scale = 100.0 if pct else 1.0
    s = f"{mean * scale:.1f}±{sd * scale:.1f}"
    if delta is not None:
        s += f"({delta * scale:+.1f})"
    return s


def tracking_table(result: dict) -> str:
    """Tracking-ablation table: AUC/P in %, Err/SD in mm, deltas vs baseline."""
    agg = result["aggregate"]
    base_name = result["variants"][0]["name"]
    modes = [m for m in agg[base_name] if m != "pooled"] + ["pooled"]
    header = ["variant"]
    for m in modes:
        header += [f"{m} AUC%", "P%", "Err mm", "SD mm"]
    rows = [header]
    for v in result["variants"]:
        name = v["name"]
        row = [name + (" (base)" if name == base_name else "")]
        for m in modes:
            for metric, pct in (("auc", True), ("precision", True),
                                ("err_mm", False), ("sd_mm", False)):
                cell = agg[name][m][metric]
                delta = (None if name == base_name else
                         cell["mean"] - agg[base_name][m][metric]["mean"])
                row.append(_cell(cell["mean"], cell["sd"], delta, pct))
        rows.append(row)
    return _render(rows)


def insertion_table(result: dict, baseline: Optional[str] = None) -> str:
    """Insertion-campaign table: SUC in %, mean time in s, deltas vs baseline."""
    arms = result["arms"]
    base_name = baseline or next(iter(arms))
    modes = [m for m in arms[base_name]["summary"] if m != "pooled"] + ["pooled"]
    header = ["arm"]
    for m in modes:
        header += [f"{m} SUC%", "T s", "n"]
    rows = [header]
    for name, arm in arms.items():
        row = [name + (" (base)" if name == base_name else "")]
        for m in modes:
            s = arm["summary"][m]
            base = arms[base_name]["summary"][m]
            suc = f"{s['suc'] * 100:.1f}"
            if name != base_name:
                suc += f"({(s['suc'] - base['suc']) * 100:+.1f})"
            t = "-" if np.isnan(s["mean_time_s"]) else f"{s['mean_time_s']:.1f}"
            row += [suc, t, f"{s['n_success']}/{s['n_trials']}"]
        rows.append(row)
    return _render(rows)


def _render(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# -- combined entry point ------------------------------------------------------------


def run_ablation_campaign(axes: tuple[str, ...] = AXES,
                          tracking_cfg: TrackingAblationConfig = TrackingAblationConfig(),
                          tracker_factory: Optional[Callable] = None,
                          suite: Optional[list[InsertionScenario]] = None,
                          net: Optional[PolicyNet] = None,
                          base_cfg: PipelineConfig = PipelineConfig(),
                          out_dir: Optional[str | Path] = None,
                          progress: Optional[Callable[[str], None]] = None,
                          ) -> dict:
    """One-at-a-time ablations over the requested axes.

    register_length/fusion retrain the tracker; pipeline/policy replay the
    paired insertion suite (requires a tracker_factory).  Tables and JSON
    are written under out_dir when given.
    """
    unknown = set(axes) - set(AXES)
    if unknown:
        raise ConfigError(f"unknown ablation axes {sorted(unknown)}")
    report: dict = {"axes": list(axes), "tables": {}}
    t_axes = tuple(a for a in axes if a in ("register_length", "fusion"))
    r_axes = tuple(a for a in axes if a in ("pipeline", "policy"))
    if t_axes:
        report["tracking"] = run_tracking_ablation(tracking_cfg, t_axes,
                                                   progress)
        report["tables"]["tracking"] = tracking_table(report["tracking"])
    if r_axes:
        if tracker_factory is None:
            raise ConfigError("pipeline/policy ablations need a tracker_factory")
        arms = [Arm("baseline", "uncertainty", "async")]
        if "pipeline" in r_axes:
            arms.append(Arm("sync_pipeline", "uncertainty", "sync"))
        if "policy" in r_axes:
            arms.append(Arm("constant_policy", "constant", "async"))
            if net is not None:
                arms.append(Arm("learned_policy", "learned", "async"))
        report["insertion"] = run_insertion_campaign(
            tracker_factory, suite=suite, arms=tuple(arms), net=net,
            base_cfg=base_cfg, progress=progress)
        report["tables"]["insertion"] = insertion_table(report["insertion"],
                                                        baseline="baseline")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(
            {k: v for k, v in report.items() if k != "tables"}, indent=1))
        for name, text in report["tables"].items():
            (out / f"table_{name}.txt").write_text(text)
    return report


# -- optional plots --------------------------------------------------------------


def plot_vn_trace(records: list[dict], path: str | Path) -> None:
    """Commanded needle speed and tracker confidence over one trial."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = [r["t"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.step(t, [r["v_n"] for r in records], where="post", label="v_n (mm/s)")
    ax.step(t, [10 * r["confidence"] for r in records], where="post",
            label="10 x confidence", alpha=0.7)
    ax.set_xlabel("time (s)")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_success_rates(result: dict, path: str | Path) -> None:
    """Bar chart of per-arm pooled success rates from an insertion campaign."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(result["arms"])
    sucs = [100 * result["arms"][n]["summary"]["pooled"]["suc"] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(names, sucs)
    ax.set_ylabel("SUC (%)")
    ax.set_ylim(0, 100)
    for i, s in enumerate(sucs):
        ax.text(i, s + 1, f"{s:.0f}", ha="center")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
