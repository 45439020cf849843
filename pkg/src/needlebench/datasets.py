"""Dataset generation: scripted tracking videos, crop sampling, expert demos.

Tracking videos are scripted insertions (constant commanded speed until the
tip reaches the target, probe centering in IPM) rendered to uint8 frames
with per-frame ground-truth boxes and visibility.  Videos split into
train/val/test by whole video with floor rounding, so 60 videos at
0.7/0.1/0.2 give 42/6/12.

Training samples crop a template around the first frame's box and a search
window around the previous frame's box; train-time augmentation jitters
the crop centers, gain, and blur.  Samples whose mapped ground-truth
center leaves the search crop are dropped and counted.

Demos roll the scripted expert at a fixed control rate and record policy
features with the expert's action; optionally a tracker runs in the loop
so features come from tracker estimates while supervision stays
ground-truth driven.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import cv2
import numpy as np

from .policy import DemoSet, ExpertConfig, PolicyInput, expert_action, features
from .simulator import (
    Action,
    InsertionScenario,
    Simulator,
    frame_to_u8,
    make_scenario,
    u8_to_f64,
)
from .tensor import ConfigError


@dataclass
class TrackingVideo:
    video_id: int
    mode: str
    frames: np.ndarray  # (N, S, S) uint8
    gt_boxes: np.ndarray  # (N, 4) float64, image px
    visibilities: np.ndarray  # (N,) float64
    mm_per_px: float
    scenario_name: str

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class TrackingDataConfig:
    n_videos: int = 60
    frames_per_video: int = 120
    fps: float = 25.0
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    occlusion_cycle: tuple[str, ...] = ("none", "light", "heavy")
    speeds: tuple[float, ...] = (12.0, 16.0, 20.0)

    def __post_init__(self):
        if self.n_videos <= 0 or self.frames_per_video <= 0:
            raise ConfigError("n_videos and frames_per_video must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must sum to 1, got {self.split}")


def generate_video(scenario: InsertionScenario, n_frames: int, fps: float,
                   speed_mm_s: float, video_id: int = 0) -> TrackingVideo:
    """Scripted insertion: constant speed until within 1 mm, then hold."""
    sim = Simulator(scenario, dt=1.0 / fps)
    frames = np.zeros((n_frames, scenario.phantom.size, scenario.phantom.size),
                      dtype=np.uint8)
    boxes = np.zeros((n_frames, 4))
    vis = np.zeros(n_frames)
    for i in range(n_frames):
        v = speed_mm_s if sim.tip_to_target_mm() > 1.0 else 0.0
        v_p = (0.0, 0.0, 0.0)
        if scenario.mode == "IPM":
            err_px = float(sim.tip_image_px()[0]) - scenario.phantom.size / 2.0
            v_p = (0.5 * err_px * scenario.phantom.mm_per_px, 0.0, 0.0)
        f = sim.step(Action(theta_n_deg=scenario.theta0_deg, v_n_mm_s=v,
                            v_p_mm_s=v_p))
        frames[i] = frame_to_u8(f.image)
        boxes[i] = f.gt_box
        vis[i] = f.visibility
    return TrackingVideo(video_id=video_id, mode=scenario.mode, frames=frames,
                         gt_boxes=boxes, visibilities=vis,
                         mm_per_px=scenario.phantom.mm_per_px,
                         scenario_name=scenario.name)


def split_videos(n: int, ratios: tuple[float, float, float],
                 seed: int) -> dict[str, list[int]]:
    """Shuffle video ids, then slice with floor-rounded train/val sizes."""
    ids = np.arange(n)
    np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).shuffle(ids)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return {"train": sorted(ids[:n_train].tolist()),
            "val": sorted(ids[n_train:n_train + n_val].tolist()),
            "test": sorted(ids[n_train + n_val:].tolist())}


def generate_tracking_dataset(cfg: TrackingDataConfig,
                              ) -> tuple[list[TrackingVideo], dict[str, list[int]]]:
    videos = []
    for i in range(cfg.n_videos):
        mode = "IPS" if i % 2 == 0 else "IPM"
        occ = cfg.occlusion_cycle[i % len(cfg.occlusion_cycle)]
        speed = cfg.speeds[i % len(cfg.speeds)]
        scn = make_scenario(cfg.seed * 100003 + i, mode, occlusion=occ,
                            name=f"v{i:03d}-{mode}-{occ}")
        videos.append(generate_video(scn, cfg.frames_per_video, cfg.fps,
                                     speed, video_id=i))
    return videos, split_videos(cfg.n_videos, cfg.split, cfg.seed)


# -- crop sampling ----------------------------------------------------------


@dataclass(frozen=True)
class SampleConfig:
    template_side: int = 32
    search_side: int = 64
    max_template_shift: float = 4.0
    max_search_shift: float = 12.0
    gain_jitter: float = 0.10
    blur_prob: float = 0.25
    blur_sigma: float = 0.8


@dataclass
class TrackSample:
    template: np.ndarray  # (t, t) float64 [0, 1]
    search: np.ndarray  # (s, s) float64 [0, 1]
    gt_box: np.ndarray  # (4,) search-crop coordinates
    visibility: float


def _crop_u8(frame: np.ndarray, center: np.ndarray, side: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = frame.shape
    ox = int(round(float(center[0]))) - side // 2
    oy = int(round(float(center[1]))) - side // 2
    out = np.zeros((side, side), dtype=frame.dtype)
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + side, w), min(oy + side, h)
    if x1 > x0 and y1 > y0:
        out[y0 - oy:y1 - oy, x0 - ox:x1 - ox] = frame[y0:y1, x0:x1]
    return out, np.array([ox, oy], dtype=np.float64)


def _center(box: np.ndarray) -> np.ndarray:
    return np.array([(box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0])


def make_sample(video: TrackingVideo, idx: int,
                rng: Optional[np.random.Generator] = None,
                cfg: SampleConfig = SampleConfig()) -> Optional[TrackSample]:
    """One (template, search, box) sample; rng enables augmentation.

    Returns None when the augmented search crop no longer contains the
    ground-truth center (the caller counts drops).
    """
    if not (0 <= idx < video.n_frames):
        raise ConfigError(f"frame index {idx} out of range")
    t_center = _center(video.gt_boxes[0])
    prev = video.gt_boxes[max(idx - 1, 0)]
    s_center = _center(prev)
    if rng is not None:
        t_center = t_center + rng.uniform(-cfg.max_template_shift,
                                          cfg.max_template_shift, size=2)
        s_center = s_center + rng.uniform(-cfg.max_search_shift,
                                          cfg.max_search_shift, size=2)
    template_u8, _ = _crop_u8(video.frames[0], t_center, cfg.template_side)
    search_u8, origin = _crop_u8(video.frames[idx], s_center, cfg.search_side)
    gt = video.gt_boxes[idx] - np.array([origin[0], origin[1],
                                         origin[0], origin[1]])
    c = _center(gt)
    if not (0.0 <= c[0] < cfg.search_side and 0.0 <= c[1] < cfg.search_side):
        return None
    template = u8_to_f64(template_u8)
    search = u8_to_f64(search_u8)
    if rng is not None:
        gain = 1.0 + float(rng.uniform(-cfg.gain_jitter, cfg.gain_jitter))
        template = np.clip(template * gain, 0.0, 1.0)
        search = np.clip(search * gain, 0.0, 1.0)
        if rng.uniform() < cfg.blur_prob:
            search = cv2.GaussianBlur(search, (0, 0), cfg.blur_sigma)
    return TrackSample(template=template, search=search, gt_box=gt,
                       visibility=float(video.visibilities[idx]))


def sample_batch(videos: list[TrackingVideo], ids: list[int],
                 rng: np.random.Generator, batch: int,
                 cfg: SampleConfig = SampleConfig(),
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    """Stacked training batch from the given video ids; drops are retried.

    Returns (templates (B,t,t), searches (B,s,s), boxes (B,4),
    visibilities (B,), n_dropped).
    """
    by_id = {v.video_id: v for v in videos}
    temps, searches, boxes, vis = [], [], [], []
    dropped = 0
    guard = 0
    while len(temps) < batch:
        guard += 1
        if guard > batch * 50:
            raise RuntimeError("sampling keeps getting dropped; check crops")
        vid = by_id[ids[int(rng.integers(len(ids)))]]
        idx = int(rng.integers(vid.n_frames))
        s = make_sample(vid, idx, rng=rng, cfg=cfg)
        if s is None:
            dropped += 1
            continue
        temps.append(s.template)
        searches.append(s.search)
        boxes.append(s.gt_box)
        vis.append(s.visibility)
    return (np.stack(temps), np.stack(searches), np.stack(boxes),
            np.array(vis), dropped)


# -- disk round trip -----------------------------------------------------------


def save_dataset(dirpath: str | Path, videos: list[TrackingVideo],
                 splits: dict[str, list[int]]) -> None:
    """PGM frames plus JSONL labels per video and a manifest at the root."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    for v in videos:
        vdir = root / f"v{v.video_id:03d}"
        vdir.mkdir(exist_ok=True)
        for i in range(v.n_frames):
            cv2.imwrite(str(vdir / f"f{i:04d}.pgm"), v.frames[i])
        with open(vdir / "labels.jsonl", "w") as fh:
            for i in range(v.n_frames):
                fh.write(json.dumps({
                    "frame_id": i,
                    "gt_box": [float(x) for x in v.gt_boxes[i]],
                    "visibility": float(v.visibilities[i]),
                }) + "\n")
        with open(vdir / "meta.json", "w") as fh:
            json.dump({"video_id": v.video_id, "mode": v.mode,
                       "mm_per_px": v.mm_per_px,
                       "scenario_name": v.scenario_name,
                       "n_frames": v.n_frames}, fh)
    with open(root / "manifest.json", "w") as fh:
        json.dump({"n_videos": len(videos), "splits": splits}, fh, indent=2)


def load_dataset(dirpath: str | Path,
                 ) -> tuple[list[TrackingVideo], dict[str, list[int]]]:
    root = Path(dirpath)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    videos = []
    for vdir in sorted(root.glob("v[0-9][0-9][0-9]")):
        with open(vdir / "meta.json") as fh:
            meta = json.load(fh)
        n = meta["n_frames"]
        frames = np.zeros((n, 0, 0), dtype=np.uint8)
        stack = []
        for i in range(n):
            img = cv2.imread(str(vdir / f"f{i:04d}.pgm"), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise ConfigError(f"missing frame {i} in {vdir}")
            stack.append(img)
        frames = np.stack(stack)
        boxes = np.zeros((n, 4))
        vis = np.zeros(n)
        with open(vdir / "labels.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                boxes[rec["frame_id"]] = rec["gt_box"]
                vis[rec["frame_id"]] = rec["visibility"]
        videos.append(TrackingVideo(
            video_id=meta["video_id"], mode=meta["mode"], frames=frames,
            gt_boxes=boxes, visibilities=vis, mm_per_px=meta["mm_per_px"],
            scenario_name=meta["scenario_name"]))
    return videos, manifest["splits"]


# -- expert demonstrations -------------------------------------------------------


@dataclass(frozen=True)
class DemoConfig:
    n_trials: int = 40
    fps: float = 20.0
    control_hz: float = 10.0
    max_s: float = 25.0
    seed: int = 0
    occlusion_cycle: tuple[str, ...] = ("none", "light", "heavy")

    def __post_init__(self):
        period = self.fps / self.control_hz
        if abs(period - round(period)) > 1e-9 or period < 1:
            raise ConfigError("fps must be an integer multiple of control_hz")


def generate_demos(cfg: DemoConfig,
                   tracker_factory: Optional[Callable[[], object]] = None,
                   expert_cfg: ExpertConfig = ExpertConfig()) -> DemoSet:
    """Roll the expert; record (features, action) at each control tick.

    Features come from ground truth, or from a fresh tracker per trial when
    tracker_factory is given (supervision stays ground-truth driven).
    """
    parts = []
    period = int(round(cfg.fps / cfg.control_hz))
    for trial in range(cfg.n_trials):
        mode = "IPS" if trial % 2 == 0 else "IPM"
        occ = cfg.occlusion_cycle[trial % len(cfg.occlusion_cycle)]
        scn = make_scenario(cfg.seed * 7919 + trial, mode, occlusion=occ)
        sim = Simulator(scn, dt=1.0 / cfg.fps)
        tracker = tracker_factory() if tracker_factory else None
        if tracker is not None:
            f0 = sim.render()
            tracker.start(f0.image, f0.gt_box, frame_id=0, timestamp=0.0)
        xs, vs, ths, vps, stops = [], [], [], [], []
        action = Action(theta_n_deg=scn.theta0_deg, v_n_mm_s=0.0)
        max_ticks = int(cfg.max_s * cfg.fps)
        for tick in range(max_ticks):
            if tick % period == 0:
                gt_pi = PolicyInput(
                    tip_img=sim.tip_image_px(), target_img=sim.target_image_px(),
                    entry_img=sim.entry_image_px(),
                    visibility=sim.tip_visibility(),
                    mm_per_px=scn.phantom.mm_per_px, mode=mode)
                action = expert_action(gt_pi, expert_cfg)
                if tracker is not None:
                    f = sim.render()
                    st = tracker.update(f.image, frame_id=tick,
                                        timestamp=sim.sim_time)
                    obs_pi = PolicyInput(
                        tip_img=np.array([(st.box[0] + st.box[2]) / 2.0,
                                          (st.box[1] + st.box[3]) / 2.0]),
                        target_img=sim.target_image_px(),
                        entry_img=sim.entry_image_px(),
                        visibility=st.confidence,
                        mm_per_px=scn.phantom.mm_per_px, mode=mode,
                        pooled_register=st.pooled_register)
                else:
                    obs_pi = gt_pi
                xs.append(features(obs_pi))
                vs.append(action.v_n_mm_s)
                ths.append(action.theta_n_deg)
                vps.append(action.v_p_mm_s[0])
                stops.append(1.0 if action.stop else 0.0)
                if action.stop:
                    break
            sim.advance(action)
            if "tip_out_of_bounds" in sim.events:
                break
        if xs:
            n = len(xs)
            parts.append(DemoSet(
                x=np.stack(xs), v=np.array(vs), theta=np.array(ths),
                vp=np.array(vps), stop=np.array(stops),
                trial_id=np.full(n, trial)))
    if not parts:
        raise RuntimeError("no demonstrations were recorded")
    return DemoSet.concat(parts)
