"""Online tip tracking: template from frame 0, search window follows the tip.

The tracker crops a fixed template around the ground-truth tip box on the
first frame, then on each update crops a search window centered on the
previous prediction, runs the frozen encoder plus trained head under
no-grad, and maps the decoded box back to full-image coordinates.  An
optional calibration maps raw peak confidence to a visibility estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .encoder import TraConRegister, VisionEncoder
from .head import CdfHead
from .tensor import ConfigError


def crop_centered(image: np.ndarray, center_xy: np.ndarray,
                  side: int) -> tuple[np.ndarray, np.ndarray]:
    """(side, side) crop around center with zero padding past the borders.

    Returns (crop, origin) where origin is the full-image pixel of the
    crop's (0, 0) corner, so full = crop_coord + origin.
    """
    h, w = image.shape
    cx, cy = float(center_xy[0]), float(center_xy[1])
    ox = int(round(cx)) - side // 2
    oy = int(round(cy)) - side // 2
    crop = np.zeros((side, side), dtype=image.dtype)
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + side, w), min(oy + side, h)
    if x1 > x0 and y1 > y0:
        crop[y0 - oy:y1 - oy, x0 - ox:x1 - ox] = image[y0:y1, x0:x1]
    return crop, np.array([ox, oy], dtype=np.float64)


def box_center(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    return np.array([(box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0])


@dataclass
class TrackState:
    """One tracking update mapped back to full-image coordinates."""

    box: np.ndarray  # (4,) x1,y1,x2,y2 full-image px
    raw_confidence: float  # sigmoid of the peak score logit
    confidence: float  # calibrated visibility estimate (= raw if uncalibrated)
    degenerate: bool
    score_map: np.ndarray  # (H, W) logits over the search grid
    search_origin: np.ndarray  # (2,) full-image px of search crop corner
    pooled_register: np.ndarray  # (C,) register summary for downstream policy
    frame_id: int
    timestamp: float


def track_frames(tracker: "OnlineTracker", frames_u8: np.ndarray,
                 gt_boxes: np.ndarray, fps: float = 25.0) -> np.ndarray:
    """Run a tracker over a whole video; frame 0 initializes the template.

    frames_u8: (N, S, S) uint8.  Returns predicted boxes (N, 4).
    """
    n = frames_u8.shape[0]
    preds = np.zeros((n, 4))
    img0 = frames_u8[0].astype(np.float64) / 255.0
    preds[0] = tracker.start(img0, gt_boxes[0], frame_id=0, timestamp=0.0).box
    for i in range(1, n):
        img = frames_u8[i].astype(np.float64) / 255.0
        preds[i] = tracker.update(img, frame_id=i, timestamp=i / fps).box
    return preds


class OnlineTracker:
    def __init__(self, encoder: VisionEncoder, head: CdfHead,
                 register: TraConRegister,
                 calibration: Optional[Callable[[float], float]] = None,
                 fusion: Optional[str] = None):
        self.encoder = encoder
        self.head = head
        self.register = register
        self.calibration = calibration
        self.fusion = fusion
        self.template: Optional[np.ndarray] = None
        self.last: Optional[TrackState] = None

    @property
    def started(self) -> bool:
        return self.template is not None

    def start(self, image: np.ndarray, gt_box: np.ndarray,
              frame_id: int = 0, timestamp: float = 0.0) -> TrackState:
        """Freeze the template around the given box, then track this frame."""
        side = self.encoder.cfg.template_side
        self.template, _ = crop_centered(image, box_center(gt_box), side)
        self.last = None
        self._center = box_center(gt_box)
        return self.update(image, frame_id=frame_id, timestamp=timestamp)

    def update(self, image: np.ndarray, frame_id: int = -1,
               timestamp: float = 0.0) -> TrackState:
        if self.template is None:
            raise ConfigError("tracker.start() must run before update()")
        side = self.encoder.cfg.search_side
        search, origin = crop_centered(image, self._center, side)
        with T.no_grad():
            obs = self.encoder.encode(self.template, search, self.register,
                                      frame_id=frame_id, timestamp=timestamp)
            out = self.head.forward(obs, fusion=self.fusion)
        pred = out.preds[0]
        box = pred.box + np.array([origin[0], origin[1], origin[0], origin[1]])
        raw = pred.confidence
        conf = float(self.calibration(raw)) if self.calibration else raw
        state = TrackState(
            box=box, raw_confidence=raw, confidence=conf,
            degenerate=pred.degenerate, score_map=pred.score_map,
            search_origin=origin, pooled_register=out.pooled_register,
            frame_id=frame_id, timestamp=timestamp)
        h, w = image.shape
        center = np.clip(box_center(box), [0.0, 0.0], [w - 1.0, h - 1.0])
        self._center = center
        self.last = state
        return state
