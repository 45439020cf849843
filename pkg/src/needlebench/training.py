"""Stage-1 tracking-head training and confidence calibration fitting.

Only the head and the register tokens receive gradients; the backbone
stays frozen.  The learning rate follows a step schedule (base, then x0.1
at the drop epoch).  Validation is a cheap crop-level box AUC on the val
split; the best-epoch parameters are restored at the end.  A non-finite
loss aborts immediately with the offending epoch/step in the message.

The tracker artifact on disk is just head + register + optional
calibration knots: the frozen encoder is reproducible from its config
seed, so it is never serialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import optim, tensor as T
from .checkpoint import load_params, save_params
from .datasets import SampleConfig, TrackingVideo, make_sample, sample_batch
from .encoder import EncoderConfig, TraConRegister, VisionEncoder
from .head import CdfConfig, CdfHead, tracking_loss
from .metrics import eval_by_mode, success_curve, iou
from .policy import IsotonicCalibration, fit_isotonic
from .tensor import ConfigError, Parameter
from .tracking import OnlineTracker, track_frames


def param_state(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def assign_state(params: dict[str, Parameter],
                 state: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        if k not in state:
            raise ConfigError(f"missing parameter {k} in state")
        if state[k].shape != p.data.shape:
            raise ConfigError(f"shape mismatch for {k}: "
                              f"{state[k].shape} vs {p.data.shape}")
        p.data = np.array(state[k], dtype=np.float64)


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 30
    steps_per_epoch: int = 25
    batch: int = 16
    lr: float = 1e-4
    lr_drop_epoch: int = 20
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    val_every: int = 5  # epochs between validation probes
    val_samples: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.steps_per_epoch <= 0 or self.batch <= 0:
            raise ConfigError("epochs, steps_per_epoch and batch must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


def crop_val_auc(encoder: VisionEncoder, head: CdfHead,
                 register: TraConRegister, videos: list[TrackingVideo],
                 ids: list[int], n_samples: int, seed: int = 0,
                 sample_cfg: SampleConfig = SampleConfig()) -> float:
    """Box AUC on unaugmented crops from the given videos (fast val probe)."""
    by_id = {v.video_id: v for v in videos}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
    temps, searches, gts = [], [], []
    guard = 0
    while len(temps) < n_samples:
        guard += 1
        if guard > n_samples * 50:
            break
        v = by_id[ids[int(rng.integers(len(ids)))]]
        s = make_sample(v, int(rng.integers(v.n_frames)), rng=None,
                        cfg=sample_cfg)
        if s is None:
            continue
        temps.append(s.template)
        searches.append(s.search)
        gts.append(s.gt_box)
    if not temps:
        raise RuntimeError("no validation samples could be drawn")
    with T.no_grad():
        obs = encoder.encode(np.stack(temps), np.stack(searches), register)
        out = head.forward(obs)
    ious = np.array([iou(p.box, g) for p, g in zip(out.preds, gts)])
    return float(success_curve(ious).mean())


def train_stage1(encoder: VisionEncoder, head: CdfHead,
                 register: TraConRegister, videos: list[TrackingVideo],
                 splits: dict[str, list[int]],
                 cfg: Stage1Config = Stage1Config(),
                 sample_cfg: SampleConfig = SampleConfig(),
                 verbose: bool = False) -> dict:
    """Train head + register on the train split; restore the best-val epoch.

    Returns history (per-epoch loss parts, lr, val AUC probes), the best
    validation AUC, and the total number of dropped samples.
    """
    if not splits.get("train") or not splits.get("val"):
        raise ConfigError("splits must provide non-empty train and val ids")
    params = {**head.parameters(), **register.parameters()}
    opt = optim.AdamW(params.values(), lr=cfg.lr,
                      weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57A6E1]))
    history: list[dict] = []
    best = {"val_auc": -1.0, "epoch": -1, "state": param_state(params)}
    dropped_total = 0
    for epoch in range(cfg.epochs):
        opt.lr = optim.step_drop_lr(cfg.lr, epoch, cfg.lr_drop_epoch,
                                    cfg.lr_drop_factor)
        sums: dict[str, float] = {}
        for step in range(cfg.steps_per_epoch):
            temps, searches, boxes, vis, dropped = sample_batch(
                videos, splits["train"], rng, cfg.batch, cfg=sample_cfg)
            dropped_total += dropped
            obs = encoder.encode(temps, searches, register)
            out = head.forward(obs)
            loss, parts = tracking_loss(head, out, boxes, visibilities=vis)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step}: {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        rec = {("loss_" + k): v / cfg.steps_per_epoch for k, v in sums.items()}
        rec.update(epoch=epoch, lr=opt.lr)
        last = (epoch == cfg.epochs - 1)
        if last or (epoch % cfg.val_every == cfg.val_every - 1):
            val_auc = crop_val_auc(encoder, head, register, videos,
                                   splits["val"], cfg.val_samples,
                                   seed=cfg.seed, sample_cfg=sample_cfg)
            rec["val_auc"] = val_auc
            if val_auc > best["val_auc"]:
                best = {"val_auc": val_auc, "epoch": epoch,
                        "state": param_state(params)}
        history.append(rec)
        if verbose:
            print("  ".join(f"{k}={v:.4g}" for k, v in rec.items()))
    assign_state(params, best["state"])
    return {"history": history, "best_val_auc": best["val_auc"],
            "best_epoch": best["epoch"], "dropped_samples": dropped_total}


def eval_tracking(encoder: VisionEncoder, head: CdfHead,
                  register: TraConRegister, videos: list[TrackingVideo],
                  ids: list[int],
                  calibration: Optional[IsotonicCalibration] = None,
                  fusion: Optional[str] = None) -> dict:
    """Full online tracking over whole videos; per-mode + pooled metrics."""
    by_id = {v.video_id: v for v in videos}
    per_video = []
    for vid in ids:
        v = by_id[vid]
        tracker = OnlineTracker(encoder, head, register,
                                calibration=calibration, fusion=fusion)
        preds = track_frames(tracker, v.frames, v.gt_boxes)
        per_video.append((v.mode, preds, v.gt_boxes))
    mm = by_id[ids[0]].mm_per_px
    return {k: e for k, e in eval_by_mode(per_video, mm).items()}


def fit_confidence_calibration(encoder: VisionEncoder, head: CdfHead,
                               register: TraConRegister,
                               videos: list[TrackingVideo], ids: list[int],
                               ) -> IsotonicCalibration:
    """Track the given videos and regress true visibility on raw confidence."""
    by_id = {v.video_id: v for v in videos}
    raw, vis = [], []
    for vid in ids:
        v = by_id[vid]
        tracker = OnlineTracker(encoder, head, register)
        img0 = v.frames[0].astype(np.float64) / 255.0
        st = tracker.start(img0, v.gt_boxes[0])
        raw.append(st.raw_confidence)
        vis.append(float(v.visibilities[0]))
        for i in range(1, v.n_frames):
            st = tracker.update(v.frames[i].astype(np.float64) / 255.0,
                                frame_id=i)
            raw.append(st.raw_confidence)
            vis.append(float(v.visibilities[i]))
    return fit_isotonic(np.array(raw), np.array(vis))


# -- artifact io ---------------------------------------------------------------


def save_tracker_artifacts(path, head: CdfHead, register: TraConRegister,
                           calibration: Optional[IsotonicCalibration] = None,
                           ) -> None:
    state = param_state({**head.parameters(), **register.parameters()})
    if calibration is not None:
        state.update(calibration.state())
    save_params(path, state)


def load_tracker_artifacts(path, encoder_cfg: EncoderConfig,
                           head_cfg: CdfConfig, register_len: int,
                           register_seed: int = 0,
                           ) -> tuple[VisionEncoder, CdfHead, TraConRegister,
                                      Optional[IsotonicCalibration]]:
    """Rebuild encoder from config (it is frozen + seeded) and load the rest."""
    state = load_params(path)
    encoder = VisionEncoder(encoder_cfg)
    head = CdfHead(head_cfg)
    head.load_state({k: v for k, v in state.items() if k.startswith("head/")})
    register = TraConRegister(register_len, encoder_cfg.dim, seed=register_seed)
    if register_len:
        assign_state(register.parameters(), state)
    calibration = None
    if "calibration/knots_x" in state:
        calibration = IsotonicCalibration.from_state(state)
    return encoder, head, register, calibration
