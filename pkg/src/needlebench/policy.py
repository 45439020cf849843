"""Insertion control: scripted expert, constant-speed baseline, cloned MLP.

All policies see the same observation (tracked tip, instruction target,
calibrated visibility, pooled register summary) and emit actuator
``Action``s.  The expert slows quadratically with visibility, pauses when
the tip estimate is unreliable, tapers near the target, and stops inside
the stop radius.  The constant-speed baseline keeps pushing regardless of
visibility.  The MLP policy is trained by behavior cloning on expert
demonstrations and refuses to act until it has been trained or loaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import optim, tensor as T
from .simulator import (
    Action,
    THETA_MAX_DEG,
    THETA_MIN_DEG,
    V_MAX_MM_S,
    VP_MAX_MM_S,
)
from .tensor import ConfigError, Parameter, Tensor


@dataclass(frozen=True)
class PolicyInput:
    """What a policy may observe at one control tick."""

    tip_img: np.ndarray  # (2,) tracked tip estimate, image px
    target_img: np.ndarray  # (2,) instruction target, image px
    entry_img: np.ndarray  # (2,) insertion point, image px (robot odometry)
    visibility: float  # calibrated tracker confidence in [0, 1]
    mm_per_px: float
    mode: str  # "IPS" | "IPM"
    pooled_register: np.ndarray = field(default_factory=lambda: np.zeros(0))
    image_width: int = 256


def features(pi: PolicyInput) -> np.ndarray:
    """(9 + C,) feature vector; register summary is appended raw."""
    d = (np.asarray(pi.target_img, dtype=np.float64)
         - np.asarray(pi.tip_img, dtype=np.float64)) * pi.mm_per_px
    dist = float(np.hypot(d[0], d[1]))
    ang = math.degrees(math.atan2(d[1], d[0])) / 90.0
    aim = _aim_angle(pi) / 90.0
    off = (float(pi.tip_img[0]) - pi.image_width / 2.0) / (pi.image_width / 2.0)
    base = np.array([d[0] / 10.0, d[1] / 10.0, dist / 10.0,
                     float(pi.visibility), ang, aim,
                     _aim_offset_mm(pi) / 10.0,
                     1.0 if pi.mode == "IPM" else 0.0, off])
    return np.concatenate([base, np.asarray(pi.pooled_register, dtype=np.float64)])


def _aim_angle(pi: PolicyInput) -> float:
    """Angle (deg) of the entry->target ray; the needle pivots at entry, so
    holding this angle drives the tip straight at the target."""
    d = np.asarray(pi.target_img, dtype=np.float64) - np.asarray(pi.entry_img)
    return math.degrees(math.atan2(d[1], d[0]))


def _aim_offset_mm(pi: PolicyInput) -> float:
    """Signed distance (mm) of the tracked tip from the entry->target line."""
    e = np.asarray(pi.entry_img, dtype=np.float64)
    d = np.asarray(pi.target_img, dtype=np.float64) - e
    n = float(np.hypot(d[0], d[1]))
    if n < 1e-9:
        return 0.0
    r = np.asarray(pi.tip_img, dtype=np.float64) - e
    return float((d[0] * r[1] - d[1] * r[0]) / n) * pi.mm_per_px


def _steer(pi: PolicyInput) -> float:
    return float(np.clip(_aim_angle(pi), THETA_MIN_DEG, THETA_MAX_DEG))


def _probe_follow(pi: PolicyInput, gain: float) -> tuple[float, float, float]:
    if pi.mode != "IPM":
        return (0.0, 0.0, 0.0)
    err_px = float(pi.tip_img[0]) - pi.image_width / 2.0
    v = float(np.clip(gain * err_px * pi.mm_per_px, -VP_MAX_MM_S, VP_MAX_MM_S))
    return (v, 0.0, 0.0)


@dataclass(frozen=True)
class ExpertConfig:
    v_max: float = V_MAX_MM_S
    v_min: float = 1.0  # taper floor just outside the stop radius
    tau_stop_mm: float = 2.0
    vis_floor: float = 0.2  # below this the expert pauses outright
    probe_gain: float = 0.5  # IPM centering P-gain, (mm/s) per mm of offset


def expert_action(pi: PolicyInput, cfg: ExpertConfig = ExpertConfig()) -> Action:
    """Visibility-gated speed with a linear taper near the target.

    v = v_max * visibility^2, zeroed below the visibility floor; within
    (tau, 3 tau] of the target the speed is capped by a linear ramp from
    v_min at tau to v_max at 3 tau; at or inside tau the expert stops.
    """
    d = (np.asarray(pi.target_img) - np.asarray(pi.tip_img)) * pi.mm_per_px
    dist = float(np.hypot(d[0], d[1]))
    if dist <= cfg.tau_stop_mm:
        return Action(theta_n_deg=_steer(pi), stop=True)
    v = cfg.v_max * pi.visibility ** 2 if pi.visibility >= cfg.vis_floor else 0.0
    if dist < 3.0 * cfg.tau_stop_mm:
        cap = cfg.v_min + (cfg.v_max - cfg.v_min) * (
            (dist - cfg.tau_stop_mm) / (2.0 * cfg.tau_stop_mm))
        v = min(v, cap)
    return Action(theta_n_deg=_steer(pi), v_n_mm_s=v,
                  v_p_mm_s=_probe_follow(pi, cfg.probe_gain))


@dataclass(frozen=True)
class ConstantVelocityConfig:
    v: float = 10.0
    tau_stop_mm: float = 2.0
    probe_gain: float = 0.5


def constant_velocity_action(pi: PolicyInput,
                             cfg: ConstantVelocityConfig = ConstantVelocityConfig(),
                             ) -> Action:
    """Baseline: same steering and stop rule, but never slows for visibility."""
    d = (np.asarray(pi.target_img) - np.asarray(pi.tip_img)) * pi.mm_per_px
    dist = float(np.hypot(d[0], d[1]))
    if dist <= cfg.tau_stop_mm:
        return Action(theta_n_deg=_steer(pi), stop=True)
    return Action(theta_n_deg=_steer(pi), v_n_mm_s=cfg.v,
                  v_p_mm_s=_probe_follow(pi, cfg.probe_gain))


# -- learned policy -------------------------------------------------------------


@dataclass(frozen=True)
class PolicyNetConfig:
    in_dim: int
    hidden: int = 64
    v_max: float = V_MAX_MM_S
    vp_max: float = VP_MAX_MM_S
    stop_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.in_dim <= 0 or self.hidden <= 0:
            raise ConfigError("in_dim and hidden must be positive")


class PolicyNet:
    """MLP over policy features with squashed action heads.

    Heads: v = v_max * sigmoid, theta mapped into the needle's angle
    limits, probe velocity = vp_max * tanh, stop = sigmoid > threshold.
    """

    def __init__(self, cfg: PolicyNetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h, f = cfg.hidden, cfg.in_dim
        s1 = math.sqrt(2.0 / f)
        s2 = math.sqrt(2.0 / h)
        self.params: dict[str, Parameter] = {
            "policy/w1": Parameter(rng.normal(0.0, s1, size=(f, h))),
            "policy/b1": Parameter(np.zeros(h)),
            "policy/w2": Parameter(rng.normal(0.0, s2, size=(h, h))),
            "policy/b2": Parameter(np.zeros(h)),
            "policy/w3": Parameter(rng.normal(0.0, s2, size=(h, 4))),
            "policy/b3": Parameter(np.zeros(4)),
        }
        self.trained = False

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.params)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise ConfigError(f"missing parameter {k} in state")
            if state[k].shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {k}")
            p.data = np.array(state[k], dtype=np.float64)
        self.trained = True

    def raw_outputs(self, x: Tensor) -> Tensor:
        """(..., F) -> (..., 4) pre-squash head values."""
        p = self.params
        h = T.gelu(T.linear(x, p["policy/w1"], p["policy/b1"]))
        h = T.gelu(T.linear(h, p["policy/w2"], p["policy/b2"]))
        return T.linear(h, p["policy/w3"], p["policy/b3"])

    def action_tensors(self, x: Tensor) -> dict[str, Tensor]:
        """Differentiable heads: v, theta, vp, stop_logit."""
        raw = self.raw_outputs(x)
        v = T.mul(T.sigmoid(T.narrow(raw, -1, 0, 1)), self.cfg.v_max)
        span = THETA_MAX_DEG - THETA_MIN_DEG
        theta = T.add(T.mul(T.sigmoid(T.narrow(raw, -1, 1, 1)), span),
                      THETA_MIN_DEG)
        vp = T.mul(T.tanh(T.narrow(raw, -1, 2, 1)), self.cfg.vp_max)
        stop_logit = T.narrow(raw, -1, 3, 1)
        return {"v": v, "theta": theta, "vp": vp, "stop_logit": stop_logit}

    def act(self, pi: PolicyInput) -> Action:
        if not self.trained:
            raise ConfigError("policy network is untrained; clone or load first")
        x = features(pi)
        if x.shape[0] != self.cfg.in_dim:
            raise ConfigError(
                f"feature length {x.shape[0]} != configured in_dim {self.cfg.in_dim}")
        with T.no_grad():
            out = self.action_tensors(Tensor(x[None, :]))
        stop = 1.0 / (1.0 + math.exp(-float(out["stop_logit"].data[0, 0])))
        if stop > self.cfg.stop_threshold:
            return Action(theta_n_deg=float(out["theta"].data[0, 0]), stop=True)
        vp = float(out["vp"].data[0, 0]) if pi.mode == "IPM" else 0.0
        return Action(theta_n_deg=float(out["theta"].data[0, 0]),
                      v_n_mm_s=float(out["v"].data[0, 0]),
                      v_p_mm_s=(vp, 0.0, 0.0))


@dataclass(frozen=True)
class CloneConfig:
    epochs: int = 60
    batch: int = 64
    lr: float = 3e-3
    min_lr: float = 1e-4
    weight_decay: float = 1e-4
    stop_pos_weight: float = 4.0  # stop frames are rare; upweight them
    val_fraction: float = 0.2
    seed: int = 0


def _clone_loss(net: PolicyNet, x: Tensor, tv: Tensor, tth: Tensor,
                tvp: Tensor, tstop: Tensor, pos_weight: float) -> Tensor:
    out = net.action_tensors(x)
    lv = T.mse_loss(T.div(out["v"], net.cfg.v_max), T.div(tv, net.cfg.v_max))
    span = THETA_MAX_DEG - THETA_MIN_DEG
    lth = T.mse_loss(T.div(T.sub(out["theta"], THETA_MIN_DEG), span),
                     T.div(T.sub(tth, THETA_MIN_DEG), span))
    lvp = T.mse_loss(T.div(out["vp"], net.cfg.vp_max),
                     T.div(tvp, net.cfg.vp_max))
    w = Tensor(np.where(tstop.data > 0.5, pos_weight, 1.0))
    lstop = T.bce_with_logits(out["stop_logit"], tstop, weight=w)
    return T.add(T.add(lv, lth), T.add(lvp, lstop))


def behavior_clone(net: PolicyNet, demos: "DemoSet",
                   cfg: CloneConfig = CloneConfig()) -> dict:
    """Fit the policy net to expert demonstrations; split held out by trial.

    Returns validation metrics: v_rmse_mm_s, stop_recall, stop_precision,
    pearson_r (predicted vs expert speed on non-stop frames), plus
    epoch_losses (mean train loss per epoch).
    """
    rng = np.random.default_rng(cfg.seed)
    trial_ids = np.unique(demos.trial_id)
    rng.shuffle(trial_ids)
    n_val = max(1, int(round(len(trial_ids) * cfg.val_fraction)))
    val_trials = set(trial_ids[:n_val].tolist())
    val_mask = np.isin(demos.trial_id, list(val_trials))
    tr = demos.subset(~val_mask)
    va = demos.subset(val_mask)
    if tr.n == 0 or va.n == 0:
        raise ConfigError("behavior cloning needs both train and val trials")

    params = net.parameters()
    opt = optim.AdamW(params.values(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, tr.n // cfg.batch)
    total = cfg.epochs * steps_per_epoch
    step = 0
    epoch_losses = []
    for _epoch in range(cfg.epochs):
        order = rng.permutation(tr.n)
        epoch_sum = 0.0
        n_steps = 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            if idx.size == 0:
                continue
            opt.lr = optim.cosine_lr(cfg.lr, step, total, min_lr=cfg.min_lr)
            loss = _clone_loss(
                net, Tensor(tr.x[idx]),
                Tensor(tr.v[idx, None]), Tensor(tr.theta[idx, None]),
                Tensor(tr.vp[idx, None]), Tensor(tr.stop[idx, None]),
                cfg.stop_pos_weight)
            if not np.isfinite(loss.data):
                raise FloatingPointError("clone loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            epoch_sum += float(loss.data)
            n_steps += 1
        epoch_losses.append(epoch_sum / max(n_steps, 1))
    net.trained = True
    out = clone_eval(net, va)
    out["epoch_losses"] = epoch_losses
    return out


def clone_eval(net: PolicyNet, demos: "DemoSet") -> dict:
    """Validation metrics for a trained policy on held-out demos."""
    with T.no_grad():
        out = net.action_tensors(Tensor(demos.x))
    v_hat = out["v"].data[:, 0]
    stop_p = 1.0 / (1.0 + np.exp(-out["stop_logit"].data[:, 0]))
    stop_hat = stop_p > net.cfg.stop_threshold
    stop_true = demos.stop > 0.5
    go = ~stop_true
    v_rmse = float(np.sqrt(np.mean((v_hat[go] - demos.v[go]) ** 2))) if go.any() else 0.0
    tp = int(np.sum(stop_hat & stop_true))
    recall = tp / max(int(stop_true.sum()), 1)
    precision = tp / max(int(stop_hat.sum()), 1)
    if go.any() and np.std(v_hat[go]) > 1e-12 and np.std(demos.v[go]) > 1e-12:
        r = float(np.corrcoef(v_hat[go], demos.v[go])[0, 1])
    else:
        r = 0.0
    return {"v_rmse_mm_s": v_rmse, "stop_recall": float(recall),
            "stop_precision": float(precision), "pearson_r": r,
            "n_val": int(demos.n)}


def visibility_monotonicity(net: PolicyNet, contexts: list[PolicyInput],
                            n_grid: int = 21) -> float:
    """Fraction of adjacent visibility probes with non-decreasing speed.

    Each context is evaluated on a visibility grid over [0, 1] with all
    other features held fixed; pairs where a stop fired are skipped.
    """
    ok = 0
    total = 0
    grid = np.linspace(0.0, 1.0, n_grid)
    for ctx in contexts:
        vs = []
        for g in grid:
            x = features(PolicyInput(
                tip_img=ctx.tip_img, target_img=ctx.target_img,
                entry_img=ctx.entry_img,
                visibility=float(g), mm_per_px=ctx.mm_per_px, mode=ctx.mode,
                pooled_register=ctx.pooled_register,
                image_width=ctx.image_width))
            with T.no_grad():
                out = net.action_tensors(Tensor(x[None, :]))
            vs.append(float(out["v"].data[0, 0]))
        for a, b in zip(vs, vs[1:]):
            total += 1
            if b >= a - 1e-6:
                ok += 1
    return ok / max(total, 1)


@dataclass
class DemoSet:
    """Flat arrays of expert demonstrations for cloning."""

    x: np.ndarray  # (N, F) features
    v: np.ndarray  # (N,) expert speed mm/s
    theta: np.ndarray  # (N,) expert angle deg
    vp: np.ndarray  # (N,) expert probe speed mm/s
    stop: np.ndarray  # (N,) 0/1
    trial_id: np.ndarray  # (N,) int

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    def subset(self, mask: np.ndarray) -> "DemoSet":
        return DemoSet(self.x[mask], self.v[mask], self.theta[mask],
                       self.vp[mask], self.stop[mask], self.trial_id[mask])

    @staticmethod
    def concat(parts: list["DemoSet"]) -> "DemoSet":
        return DemoSet(*[np.concatenate([getattr(p, f) for p in parts], axis=0)
                         for f in ("x", "v", "theta", "vp", "stop", "trial_id")])

    def save(self, path) -> None:
        np.savez_compressed(path, x=self.x, v=self.v, theta=self.theta,
                            vp=self.vp, stop=self.stop, trial_id=self.trial_id)

    @staticmethod
    def load(path) -> "DemoSet":
        with np.load(path) as z:
            return DemoSet(**{k: z[k] for k in
                              ("x", "v", "theta", "vp", "stop", "trial_id")})


# -- confidence calibration -----------------------------------------------------


class IsotonicCalibration:
    """Monotone map raw confidence -> visibility via PAVA + linear interp."""

    def __init__(self, knots_x: np.ndarray, knots_y: np.ndarray):
        kx = np.asarray(knots_x, dtype=np.float64)
        ky = np.asarray(knots_y, dtype=np.float64)
        if kx.ndim != 1 or kx.shape != ky.shape or kx.size == 0:
            raise ConfigError("calibration knots must be matching 1-d arrays")
        if np.any(np.diff(kx) < 0) or np.any(np.diff(ky) < -1e-12):
            raise ConfigError("calibration knots must be non-decreasing")
        self.knots_x = kx
        self.knots_y = ky

    def __call__(self, raw: float) -> float:
        return float(np.interp(raw, self.knots_x, self.knots_y))

    def state(self) -> dict[str, np.ndarray]:
        return {"calibration/knots_x": self.knots_x,
                "calibration/knots_y": self.knots_y}

    @staticmethod
    def from_state(state: dict[str, np.ndarray]) -> "IsotonicCalibration":
        return IsotonicCalibration(state["calibration/knots_x"],
                                   state["calibration/knots_y"])


def fit_isotonic(raw: np.ndarray, vis: np.ndarray) -> IsotonicCalibration:
    """Pool-adjacent-violators regression of visibility on raw confidence."""
    raw = np.asarray(raw, dtype=np.float64)
    vis = np.asarray(vis, dtype=np.float64)
    if raw.shape != vis.shape or raw.ndim != 1 or raw.size < 2:
        raise ConfigError("calibration needs matching 1-d arrays, n >= 2")
    order = np.argsort(raw, kind="stable")
    x = raw[order]
    y = vis[order]
    # blocks of (sum, weight, count) pooled until monotone
    vals: list[float] = []
    wts: list[float] = []
    cnts: list[int] = []
    for yi in y:
        vals.append(float(yi))
        wts.append(1.0)
        cnts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / (wts[-2] + wts[-1])
            w = wts[-2] + wts[-1]
            c = cnts[-2] + cnts[-1]
            vals = vals[:-2] + [v]
            wts = wts[:-2] + [w]
            cnts = cnts[:-2] + [c]
    knots_x, knots_y = [], []
    i = 0
    for v, c in zip(vals, cnts):
        block = x[i:i + c]
        knots_x.append(float(block.mean()))
        knots_y.append(float(np.clip(v, 0.0, 1.0)))
        i += c
    # deduplicate equal x knots (np.interp needs non-decreasing x; equal is fine
    # but collapse exact ties to their mean y for a cleaner map)
    kx = np.asarray(knots_x)
    ky = np.asarray(knots_y)
    ux, inv = np.unique(kx, return_inverse=True)
    uy = np.array([ky[inv == k].mean() for k in range(ux.size)])
    uy = np.maximum.accumulate(uy)
    return IsotonicCalibration(ux, uy)
