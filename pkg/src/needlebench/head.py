"""Cross-depth fusion tracking head with anchor-free box decoding.

Stages, in order:

1. ``reduce``: per-depth MLP reductors (backbone dim -> internal C) with a
   trailing layer norm; the shallow reductor serves the shallow template
   and search streams, the deep reductor serves the deep streams and the
   register slice.
2. ``semantic_fusion``: channel attention between the shallow stream
   (queries) and deep stream (keys/values), computed on transposed C x L
   views so attention weights live over channels, wrapped post-norm in a
   transformer block whose residual rides on the shallow stream.
3. ``positional_correlation``: token attention with search queries against
   template keys/values, residual on the search stream.
4. ``conditional_feature_gating``: FiLM-style per-channel scale and shift
   computed from the mean-pooled register slice, blended by a learnable
   scalar alpha; initialized to the exact identity.
5. ``predict_box``: shared 1x1 projection to one score channel plus four
   left/top/right/bottom offset channels, decoded at the score argmax.

Fusion ablations: "full", "shallow_only", "deep_only".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import EncodedObservation, orthogonal
from .tensor import ConfigError, Parameter, Tensor

FUSION_MODES = ("full", "shallow_only", "deep_only")


@dataclass
class CdfConfig:
    backbone_dim: int = 128
    internal_dim: int = 64
    mlp_hidden: int = 128
    search_grid: int = 8
    stride: int = 8
    fusion: str = "full"
    score_sigma: float = 1.0  # gaussian target width, grid cells
    score_pos_weight: float = 32.0  # extra BCE weight on the target bump
    w_score: float = 1.0
    w_l1: float = 1.0
    w_iou: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.internal_dim <= 0 or self.search_grid <= 0 or self.stride <= 0:
            raise ConfigError("internal_dim, search_grid and stride must be positive")
        if self.score_pos_weight < 0:
            raise ConfigError("score_pos_weight must be non-negative")


@dataclass
class BoxPrediction:
    """Decoded box in search-crop pixels plus its confidence."""

    box: np.ndarray  # (4,) x1, y1, x2, y2
    confidence: float
    score_map: np.ndarray  # (H, W) raw logits
    offsets: np.ndarray  # (4, H, W) l/t/r/b px
    cell: tuple[int, int]  # argmax (row, col)
    degenerate: bool = False


@dataclass
class HeadOutput:
    """Forward result; tensors stay on the tape for loss building."""

    score_logits: Tensor  # (..., H, W)
    offsets: Tensor  # (..., 4, H, W)
    fused: Tensor  # (..., L_x, C) post-gating search features
    pooled_register: np.ndarray  # (..., C) mean-pooled reduced register
    preds: list[BoxPrediction]
    batched: bool


def _attn_block_params(rng, c: int, hidden: int, tag: str,
                       store: dict[str, Parameter]) -> dict[str, Parameter]:
    blk = {
        "wq": Parameter(orthogonal(rng, c, c)),
        "bq": Parameter(np.zeros(c)),
        "wk": Parameter(orthogonal(rng, c, c)),
        "bk": Parameter(np.zeros(c)),
        "wv": Parameter(orthogonal(rng, c, c)),
        "bv": Parameter(np.zeros(c)),
        "wo": Parameter(orthogonal(rng, c, c, gain=0.5)),
        "bo": Parameter(np.zeros(c)),
        "ln1_g": Parameter(np.ones(c)),
        "ln1_b": Parameter(np.zeros(c)),
        "w1": Parameter(orthogonal(rng, c, hidden)),
        "b1": Parameter(np.zeros(hidden)),
        "w2": Parameter(orthogonal(rng, hidden, c, gain=0.5)),
        "b2": Parameter(np.zeros(c)),
        "ln2_g": Parameter(np.ones(c)),
        "ln2_b": Parameter(np.zeros(c)),
    }
    for k, v in blk.items():
        store[f"{tag}/{k}"] = v
    return blk


def _reductor_params(rng, d: int, hidden: int, c: int, tag: str,
                     store: dict[str, Parameter]) -> dict[str, Parameter]:
    red = {
        "w1": Parameter(orthogonal(rng, d, hidden)),
        "b1": Parameter(np.zeros(hidden)),
        "w2": Parameter(orthogonal(rng, hidden, c)),
        "b2": Parameter(np.zeros(c)),
        "ln_g": Parameter(np.ones(c)),
        "ln_b": Parameter(np.zeros(c)),
    }
    for k, v in red.items():
        store[f"{tag}/{k}"] = v
    return red


class CdfHead:
    """See module docstring."""

    def __init__(self, cfg: CdfConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c, d, hidden = cfg.internal_dim, cfg.backbone_dim, cfg.mlp_hidden
        self._params: dict[str, Parameter] = {}
        self.red_shallow = _reductor_params(rng, d, hidden, c, "head/red_shallow",
                                            self._params)
        self.red_deep = _reductor_params(rng, d, hidden, c, "head/red_deep",
                                         self._params)
        self.semfus = _attn_block_params(rng, c, hidden, "head/semfus", self._params)
        self.poscor = _attn_block_params(rng, c, hidden, "head/poscor", self._params)
        # gating starts as the exact identity: gamma = 1, beta = 0, alpha = 1
        gate = {
            "wg": Parameter(np.zeros((c, c))),
            "bg": Parameter(np.ones(c)),
            "wb": Parameter(np.zeros((c, c))),
            "bb": Parameter(np.zeros(c)),
            "alpha": Parameter(np.asarray(1.0)),
        }
        for k, v in gate.items():
            self._params[f"head/gate/{k}"] = v
        self.gate = gate
        self.conv_w = Parameter(0.1 * orthogonal(rng, c, 5))
        self.conv_b = Parameter(np.zeros(5))
        self._params["head/conv/w"] = self.conv_w
        self._params["head/conv/b"] = self.conv_b

    def parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    # -- stages -----------------------------------------------------------

    def _reduce_one(self, x: Tensor, red: dict) -> Tensor:
        h = T.mlp(x, red["w1"], red["b1"], red["w2"], red["b2"])
        return T.layer_norm(h, red["ln_g"], red["ln_b"])

    def reduce(self, obs: EncodedObservation) -> dict[str, Tensor]:
        """Backbone-dim taps -> internal-dim streams (x/z, shallow/deep, r)."""
        return {
            "x_s": self._reduce_one(obs.shallow_x, self.red_shallow),
            "z_s": self._reduce_one(obs.shallow_z, self.red_shallow),
            "x_d": self._reduce_one(obs.deep_x, self.red_deep),
            "z_d": self._reduce_one(obs.deep_z, self.red_deep),
            "r": self._reduce_one(obs.register, self.red_deep)
                 if obs.register.shape[-2] else obs.register,
        }

    def channel_attention(self, shallow: Tensor, deep: Tensor) -> Tensor:
        """Raw channel attention, pre output-projection and pre-residual.

        Queries come from the shallow stream, keys/values from the deep
        stream; all three are transposed to (..., C, L) so the softmax
        normalizes over channels.  Scores are scaled by 1/sqrt(L).
        """
        L = shallow.shape[-2]
        q = T.swap_last2(T.linear(shallow, self.semfus["wq"], self.semfus["bq"]))
        k = T.swap_last2(T.linear(deep, self.semfus["wk"], self.semfus["bk"]))
        v = T.swap_last2(T.linear(deep, self.semfus["wv"], self.semfus["bv"]))
        scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(L))
        weights = T.softmax(scores, axis=-1)  # (..., C, C)
        return T.swap_last2(T.matmul(weights, v))  # back to (..., L, C)

    def semantic_fusion(self, shallow: Tensor, deep: Tensor) -> Tensor:
        """Channel-attention block; the residual rides on the shallow stream."""
        blk = self.semfus
        att = T.linear(self.channel_attention(shallow, deep), blk["wo"], blk["bo"])
        h = T.layer_norm(T.add(shallow, att), blk["ln1_g"], blk["ln1_b"])
        m = T.mlp(h, blk["w1"], blk["b1"], blk["w2"], blk["b2"])
        return T.layer_norm(T.add(h, m), blk["ln2_g"], blk["ln2_b"])

    def token_attention(self, x: Tensor, z: Tensor) -> Tensor:
        """Raw token attention: search queries over template keys/values."""
        c = self.cfg.internal_dim
        q = T.linear(x, self.poscor["wq"], self.poscor["bq"])
        k = T.linear(z, self.poscor["wk"], self.poscor["bk"])
        v = T.linear(z, self.poscor["wv"], self.poscor["bv"])
        scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(c))
        weights = T.softmax(scores, axis=-1)  # (..., L_x, L_z)
        return T.matmul(weights, v)

    def positional_correlation(self, x: Tensor, z: Tensor) -> Tensor:
        """Token-attention block; the residual rides on the search stream."""
        blk = self.poscor
        att = T.linear(self.token_attention(x, z), blk["wo"], blk["bo"])
        h = T.layer_norm(T.add(x, att), blk["ln1_g"], blk["ln1_b"])
        m = T.mlp(h, blk["w1"], blk["b1"], blk["w2"], blk["b2"])
        return T.layer_norm(T.add(h, m), blk["ln2_g"], blk["ln2_b"])

    def conditional_feature_gating(self, f: Tensor, r: Tensor) -> Tensor:
        """f' = f * (alpha * gamma(r)) + alpha * beta(r); identity at init.

        r is the reduced register slice (..., L_r, C); its token mean
        conditions the per-channel scale gamma and shift beta.  Empty
        registers bypass gating entirely.
        """
        if r.shape[-2] == 0:
            return f
        rbar = T.mean(r, axis=-2, keepdims=True)  # (..., 1, C)
        gamma = T.linear(rbar, self.gate["wg"], self.gate["bg"])
        beta = T.linear(rbar, self.gate["wb"], self.gate["bb"])
        alpha = self.gate["alpha"]
        return T.add(T.mul(f, T.mul(gamma, alpha)), T.mul(beta, alpha))

    def predict_box(self, fused: Tensor) -> tuple[Tensor, Tensor, list[BoxPrediction]]:
        """1x1 projection to score + l/t/r/b maps, then per-sample decode."""
        cfg = self.cfg
        H = W = cfg.search_grid
        lead = fused.shape[:-2]
        maps = T.linear(fused, self.conv_w, self.conv_b)  # (..., L, 5)
        maps = T.swap_last2(maps)  # (..., 5, L)
        maps = T.reshape(maps, lead + (5, H, W))
        score = T.reshape(T.narrow(maps, len(lead), 0, 1), lead + (H, W))
        offsets = T.narrow(maps, len(lead), 1, 4)  # (..., 4, H, W)
        flat_scores = score.data.reshape((-1, H, W))
        flat_offsets = offsets.data.reshape((-1, 4, H, W))
        preds = [decode_box(s, o, cfg.stride)
                 for s, o in zip(flat_scores, flat_offsets)]
        return score, offsets, preds

    def forward(self, obs: EncodedObservation,
                fusion: str | None = None) -> HeadOutput:
        fusion = self.cfg.fusion if fusion is None else fusion
        if fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        red = self.reduce(obs)
        if fusion == "full":
            xf = self.semantic_fusion(red["x_s"], red["x_d"])
            zf = self.semantic_fusion(red["z_s"], red["z_d"])
        elif fusion == "shallow_only":
            xf, zf = red["x_s"], red["z_s"]
        else:
            xf, zf = red["x_d"], red["z_d"]
        f = self.positional_correlation(xf, zf)
        fprime = self.conditional_feature_gating(f, red["r"])
        score, offsets, preds = self.predict_box(fprime)
        if red["r"].shape[-2]:
            pooled = red["r"].data.mean(axis=-2)
        else:
            pooled = np.zeros(fprime.shape[:-2] + (self.cfg.internal_dim,))
        return HeadOutput(score_logits=score, offsets=offsets, fused=fprime,
                          pooled_register=pooled, preds=preds,
                          batched=fprime.ndim > 2)


def decode_box(score_logits: np.ndarray, offsets: np.ndarray,
               stride: int) -> BoxPrediction:
    """Argmax-cell decode; ties take the lowest row-major index.

    A box thinner than 1 px in either axis is clamped to a 1 px extent
    around its midpoint, flagged, and its confidence forced to zero.
    """
    H, W = score_logits.shape
    idx = int(np.argmax(score_logits))
    i, j = divmod(idx, W)
    l_, t_, r_, b_ = (float(v) for v in offsets[:, i, j])
    cx = (j + 0.5) * stride
    cy = (i + 0.5) * stride
    box = np.array([cx - l_, cy - t_, cx + r_, cy + b_], dtype=np.float64)
    peak = float(score_logits[i, j])
    confidence = float(1.0 / (1.0 + np.exp(-peak)))
    degenerate = False
    if box[2] - box[0] < 1.0:
        mid = 0.5 * (box[0] + box[2])
        box[0], box[2] = mid - 0.5, mid + 0.5
        degenerate = True
    if box[3] - box[1] < 1.0:
        mid = 0.5 * (box[1] + box[3])
        box[1], box[3] = mid - 0.5, mid + 0.5
        degenerate = True
    if degenerate:
        confidence = 0.0
    return BoxPrediction(box=box, confidence=confidence, score_map=score_logits,
                         offsets=offsets, cell=(i, j), degenerate=degenerate)


def gaussian_score_target(gt_box: np.ndarray, grid: int, stride: int,
                          sigma: float) -> np.ndarray:
    """(H, W) gaussian bump centered on the gt box center, sigma in cells."""
    gx = 0.5 * (gt_box[0] + gt_box[2]) / stride - 0.5
    gy = 0.5 * (gt_box[1] + gt_box[3]) / stride - 0.5
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    d2 = (ii - gy) ** 2 + (jj - gx) ** 2
    return np.exp(-d2 / (2.0 * sigma ** 2))


def positive_cells(gt_box: np.ndarray, grid: int, stride: int) -> np.ndarray:
    """(H, W) bool mask of cells whose center falls inside the gt box."""
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    cx = (jj + 0.5) * stride
    cy = (ii + 0.5) * stride
    return ((cx > gt_box[0]) & (cx < gt_box[2]) &
            (cy > gt_box[1]) & (cy < gt_box[3]))


def offset_targets(gt_box: np.ndarray, grid: int, stride: int) -> np.ndarray:
    """(4, H, W) per-cell l/t/r/b distances from cell centers to gt sides."""
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    cx = (jj + 0.5) * stride
    cy = (ii + 0.5) * stride
    return np.stack([cx - gt_box[0], cy - gt_box[1],
                     gt_box[2] - cx, gt_box[3] - cy])


def tracking_loss(head: CdfHead, out: HeadOutput, gt_boxes: np.ndarray,
                  visibilities: np.ndarray | float | None = None,
                  ) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum: score BCE + offset L1 at positive cells + (1 - IoU).

    gt_boxes is (4,) or (B, 4) in search-crop pixels, matching the batching
    of ``out``.  The IoU term uses the box decoded at the predicted argmax
    cell; the cell choice is treated as a constant.

    When per-sample ``visibilities`` are given, the gaussian score target
    peaks at the frame's visibility instead of 1, so the trained score head
    reads out how visible the tip is — the raw signal confidence
    calibration later maps onto visibility.
    """
    cfg = head.cfg
    H = W = cfg.search_grid
    gt = np.asarray(gt_boxes, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt[None]
    B = gt.shape[0]
    score = T.reshape(out.score_logits, (B, H, W))
    offsets = T.reshape(out.offsets, (B, 4, H, W))

    amp = np.broadcast_to(np.asarray(
        1.0 if visibilities is None else visibilities, dtype=np.float64), (B,))
    shapes = np.stack([gaussian_score_target(g, H, cfg.stride, cfg.score_sigma)
                       for g in gt])
    targets = amp[:, None, None] * shapes
    # the bump is ~6 of 256 cells; without extra weight the background water-
    # level dominates and the peak's magnitude (the visibility readout) never
    # gets fit
    bce = T.bce_with_logits(score, targets,
                            weight=1.0 + cfg.score_pos_weight * shapes)

    masks = np.stack([positive_cells(g, H, cfg.stride) for g in gt])
    off_t = np.stack([offset_targets(g, H, cfg.stride) for g in gt])
    mask4 = np.broadcast_to(masks[:, None, :, :], (B, 4, H, W)).astype(np.float64)
    n_pos = float(mask4.sum())
    if n_pos > 0:
        diff = T.abs_(T.sub(offsets, Tensor(off_t)))
        l1 = T.mul(T.sum_(T.mul(diff, Tensor(mask4))), 1.0 / n_pos)
    else:
        l1 = Tensor(0.0)

    # gather offsets at each sample's argmax cell via one-hot matmul
    onehot = np.zeros((B, H * W, 1))
    for b in range(B):
        i, j = out.preds[b].cell
        onehot[b, i * W + j, 0] = 1.0
    sel = T.matmul(T.reshape(offsets, (B, 4, H * W)), Tensor(onehot))
    sel = T.reshape(sel, (B, 4))  # l, t, r, b at the argmax cell
    centers = np.array([[(out.preds[b].cell[1] + 0.5) * cfg.stride,
                         (out.preds[b].cell[0] + 0.5) * cfg.stride]
                        for b in range(B)])
    px1 = T.sub(Tensor(centers[:, 0:1]), T.narrow(sel, 1, 0, 1))
    py1 = T.sub(Tensor(centers[:, 1:2]), T.narrow(sel, 1, 1, 1))
    px2 = T.add(Tensor(centers[:, 0:1]), T.narrow(sel, 1, 2, 1))
    py2 = T.add(Tensor(centers[:, 1:2]), T.narrow(sel, 1, 3, 1))
    gx1, gy1, gx2, gy2 = (Tensor(gt[:, k:k + 1]) for k in range(4))
    iw = T.relu(T.sub(T.minimum(px2, gx2), T.maximum(px1, gx1)))
    ih = T.relu(T.sub(T.minimum(py2, gy2), T.maximum(py1, gy1)))
    inter = T.mul(iw, ih)
    area_p = T.mul(T.relu(T.sub(px2, px1)), T.relu(T.sub(py2, py1)))
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = T.add(T.sub(area_p, inter), Tensor(area_g[:, None]))
    iou = T.div(inter, T.add(union, 1e-9))
    iou_loss = T.mean(T.sub(1.0, iou))

    total = T.add(T.add(T.mul(bce, cfg.w_score), T.mul(l1, cfg.w_l1)),
                  T.mul(iou_loss, cfg.w_iou))
    parts = {"score_bce": float(bce.data), "offset_l1": float(l1.data),
             "iou": float(iou_loss.data), "total": float(total.data)}
    return total, parts
