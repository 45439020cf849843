"""Synthetic B-mode phantom with a straight-needle insertion model.

World coordinates are pixels with x to the right and y downward (depth).
The probe's lateral position shifts the visible window: a world point
appears at image x = world x - probe offset.  Frames compose, in order,
layered tissue echogenicity, multiplicative low-pass speckle, an additive
needle (shaft line whose brightness falls off with insertion angle, plus a
brighter tip blob), and multiplicative polygonal occluders.  Ground-truth
tip visibility is the occluder transmission sampled at the tip pixel, so
a tip under a single 0.8-attenuation occluder reads exactly 0.2.

Axial kinematics are kept in closed form per constant-velocity segment:
x_n = segment_base + v * (ticks * dt), so a constant-speed insertion after
N steps equals v * (N * dt) + x_0 to machine precision, with no
integration drift.  The probe translation uses the same scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .tensor import ConfigError

MODES = ("IPS", "IPM")

THETA_MIN_DEG = 15.0
THETA_MAX_DEG = 75.0
V_MAX_MM_S = 20.0
VP_MAX_MM_S = 10.0
THETA_SLEW_DEG_S = 40.0

TIP_BOX_SIDE_PX = 12.0
SHAFT_SIGMA_PX = 1.2
TIP_SIGMA_PX = 2.2
SHAFT_PEAK = 0.40
TIP_PEAK = 0.62


@dataclass(frozen=True)
class Action:
    """Actuator command: needle angle/speed, probe velocity, stop flag."""

    theta_n_deg: float = 45.0
    v_n_mm_s: float = 0.0
    v_p_mm_s: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stop: bool = False

    def __post_init__(self):
        if self.stop and (self.v_n_mm_s != 0.0 or any(self.v_p_mm_s)):
            object.__setattr__(self, "v_n_mm_s", 0.0)
            object.__setattr__(self, "v_p_mm_s", (0.0, 0.0, 0.0))


HOLD_ACTION = Action(v_n_mm_s=0.0)


@dataclass(frozen=True)
class TissueLayer:
    y0: int
    y1: int
    echo: float


@dataclass(frozen=True)
class Occluder:
    """Filled polygon that multiplies the image by (1 - attenuation).

    An oscillation period > 0 sweeps the polygon laterally:
    offset_x(t) = amplitude * sin(2 pi t / period + phase).
    """

    polygon: tuple[tuple[float, float], ...]
    attenuation: float
    osc_amplitude_px: float = 0.0
    osc_period_s: float = 0.0
    osc_phase: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.attenuation <= 1.0):
            raise ConfigError(f"attenuation must be in [0,1], got {self.attenuation}")

    def offset_x(self, t: float) -> float:
        if self.osc_period_s <= 0.0:
            return 0.0
        return self.osc_amplitude_px * math.sin(
            2.0 * math.pi * t / self.osc_period_s + self.osc_phase)


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 256
    mm_per_px: float = 0.5
    background_echo: float = 0.32
    layers: tuple[TissueLayer, ...] = (
        TissueLayer(0, 34, 0.46),
        TissueLayer(34, 120, 0.30),
        TissueLayer(120, 200, 0.38),
        TissueLayer(200, 256, 0.26),
    )
    occluders: tuple[Occluder, ...] = ()
    target_px: tuple[float, float] = (170.0, 150.0)
    draw_target_marker: bool = True
    speckle_grain_px: float = 2.5
    speckle_contrast: float = 0.22
    seed: int = 0

    def __post_init__(self):
        if self.mm_per_px <= 0:
            raise ConfigError(f"mm_per_px must be positive, got {self.mm_per_px}")
        tx, ty = self.target_px
        if not (0 <= tx < self.size and 0 <= ty < self.size):
            raise ConfigError(f"target {self.target_px} outside {self.size}px image")


@dataclass(frozen=True)
class InsertionScenario:
    """One trial setup: phantom, needle entry/angle, probe technique."""

    phantom: PhantomConfig
    entry_px: tuple[float, float] = (10.0, 90.0)
    theta0_deg: float = 45.0
    mode: str = "IPS"
    name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class Frame:
    """One rendered image plus ground truth for that instant."""

    image: np.ndarray  # (size, size) float64 in [0, 1]
    gt_box: np.ndarray  # (4,) x1,y1,x2,y2 image px
    visibility: float  # occluder transmission at the tip, [0, 1]
    frame_id: int
    sim_time: float
    tip_img: np.ndarray  # (2,) image px
    tip_world: np.ndarray  # (2,) world px
    theta_deg: float
    x_n_mm: float
    probe_offset_px: float
    out_of_bounds: bool


def shaft_gain(theta_deg: float) -> float:
    """Shaft brightness vs insertion angle; steeper inserts render dimmer."""
    return SHAFT_PEAK * math.cos(math.radians(theta_deg)) ** 1.5


class _Segment:
    """Closed-form constant-velocity integrator: base + v * (ticks * dt)."""

    __slots__ = ("base", "v", "ticks")

    def __init__(self, base: float):
        self.base = float(base)
        self.v = 0.0
        self.ticks = 0

    def value(self, dt: float) -> float:
        return self.base + self.v * (self.ticks * dt)

    def advance(self, v: float, dt: float) -> None:
        if v != self.v:
            self.base = self.value(dt)
            self.v = v
            self.ticks = 0
        self.ticks += 1


class Simulator:
    """Steps the needle/probe state and renders frames on demand."""

    def __init__(self, scenario: InsertionScenario, dt: float):
        if dt <= 0:
            raise ConfigError(f"dt must be positive, got {dt}")
        self.scenario = scenario
        self.phantom = scenario.phantom
        self.dt = float(dt)
        self.mode = scenario.mode
        self.entry = np.asarray(scenario.entry_px, dtype=np.float64)
        self.theta = float(np.clip(scenario.theta0_deg, THETA_MIN_DEG, THETA_MAX_DEG))
        self._xn = _Segment(0.0)
        self._xp = _Segment(0.0)  # lateral probe translation, mm
        self.tick = 0
        self.stopped = False
        self.events: list[str] = []
        n = self.phantom.size
        jj, ii = np.meshgrid(np.arange(n, dtype=np.float64),
                             np.arange(n, dtype=np.float64))
        self._grid_x = jj
        self._grid_y = ii

    # -- kinematics --------------------------------------------------------

    @property
    def sim_time(self) -> float:
        return self.tick * self.dt

    @property
    def x_n_mm(self) -> float:
        return self._xn.value(self.dt)

    @property
    def probe_x_mm(self) -> float:
        return self._xp.value(self.dt)

    @property
    def probe_offset_px(self) -> float:
        return self.probe_x_mm / self.phantom.mm_per_px

    def tip_world_px(self) -> np.ndarray:
        rad = math.radians(self.theta)
        d = self.x_n_mm / self.phantom.mm_per_px
        return self.entry + d * np.array([math.cos(rad), math.sin(rad)])

    def tip_image_px(self) -> np.ndarray:
        tip = self.tip_world_px()
        return tip - np.array([self.probe_offset_px, 0.0])

    def advance(self, action: Action) -> None:
        """Apply one actuator tick with zero-order hold (no rendering)."""
        if action.stop:
            self.stopped = True
        v_n = 0.0 if self.stopped else float(np.clip(action.v_n_mm_s, 0.0, V_MAX_MM_S))
        v_p = 0.0 if self.stopped else float(np.clip(action.v_p_mm_s[0],
                                                     -VP_MAX_MM_S, VP_MAX_MM_S))
        if self.mode == "IPS":
            v_p = 0.0
        theta_cmd = float(np.clip(action.theta_n_deg, THETA_MIN_DEG, THETA_MAX_DEG))
        max_slew = THETA_SLEW_DEG_S * self.dt
        self.theta += float(np.clip(theta_cmd - self.theta, -max_slew, max_slew))
        self._xn.advance(v_n, self.dt)
        self._xp.advance(v_p, self.dt)
        self.tick += 1
        tip = self.tip_image_px()
        n = self.phantom.size
        inside = (0 <= round(tip[1]) < n) and (0 <= round(tip[0]) < n)
        if not inside and "tip_out_of_bounds" not in self.events:
            self.events.append("tip_out_of_bounds")

    def step(self, action: Action) -> Frame:
        self.advance(action)
        return self.render()

    # -- rendering -----------------------------------------------------------

    def _speckle(self, frame_id: int) -> np.ndarray:
        ph = self.phantom
        rng = np.random.default_rng(np.random.SeedSequence([ph.seed, frame_id]))
        white = rng.standard_normal((ph.size, ph.size), dtype=np.float32)
        low = cv2.GaussianBlur(white, (0, 0), ph.speckle_grain_px)
        low /= max(float(low.std()), 1e-9)
        return np.clip(1.0 + ph.speckle_contrast * low, 0.05, None)

    def _occluder_transmission(self, t: float, probe_px: float) -> np.ndarray:
        ph = self.phantom
        trans = np.ones((ph.size, ph.size))
        for occ in ph.occluders:
            dx = occ.offset_x(t) - probe_px
            pts = np.asarray(occ.polygon, dtype=np.float64) + np.array([dx, 0.0])
            mask = np.zeros((ph.size, ph.size), dtype=np.uint8)
            cv2.fillPoly(mask, [np.round(pts).astype(np.int32)], 1)
            trans *= 1.0 - occ.attenuation * mask
        return trans

    def _window(self, xs: list[float], ys: list[float], pad: float):
        """Integer sub-window [y0:y1, x0:x1] covering points plus padding."""
        n = self.phantom.size
        x0 = int(np.clip(math.floor(min(xs) - pad), 0, n))
        x1 = int(np.clip(math.ceil(max(xs) + pad) + 1, 0, n))
        y0 = int(np.clip(math.floor(min(ys) - pad), 0, n))
        y1 = int(np.clip(math.ceil(max(ys) + pad) + 1, 0, n))
        return x0, x1, y0, y1

    def render(self) -> Frame:
        ph = self.phantom
        n = ph.size
        probe_px = self.probe_offset_px
        t = self.sim_time

        base = np.full((n, n), ph.background_echo)
        for layer in ph.layers:
            base[max(layer.y0, 0):min(layer.y1, n)] = layer.echo
        if ph.draw_target_marker:
            tx = ph.target_px[0] - probe_px
            ty = ph.target_px[1]
            x0, x1, y0, y1 = self._window([tx], [ty], 14.0)
            if x0 < x1 and y0 < y1:
                d2 = ((self._grid_x[y0:y1, x0:x1] - tx) ** 2
                      + (self._grid_y[y0:y1, x0:x1] - ty) ** 2)
                base[y0:y1, x0:x1] *= 1.0 - 0.45 * np.exp(-d2 / (2.0 * 3.0 ** 2))

        img = base * self._speckle(self.tick)

        entry_img = self.entry - np.array([probe_px, 0.0])
        tip_img = self.tip_image_px()
        x0, x1, y0, y1 = self._window([entry_img[0], tip_img[0]],
                                      [entry_img[1], tip_img[1]], 10.0)
        if x0 < x1 and y0 < y1:
            gx = self._grid_x[y0:y1, x0:x1]
            gy = self._grid_y[y0:y1, x0:x1]
            seg = tip_img - entry_img
            seg_len2 = float(seg @ seg)
            px = gx - entry_img[0]
            py = gy - entry_img[1]
            if seg_len2 > 0:
                u = np.clip((px * seg[0] + py * seg[1]) / seg_len2, 0.0, 1.0)
            else:
                u = 0.0
            dx = px - u * seg[0]
            dy = py - u * seg[1]
            d2_line = dx ** 2 + dy ** 2
            img[y0:y1, x0:x1] += (shaft_gain(self.theta)
                                  * np.exp(-d2_line / (2.0 * SHAFT_SIGMA_PX ** 2)))
            d2_tip = (gx - tip_img[0]) ** 2 + (gy - tip_img[1]) ** 2
            img[y0:y1, x0:x1] += TIP_PEAK * np.exp(-d2_tip / (2.0 * TIP_SIGMA_PX ** 2))

        trans = self._occluder_transmission(t, probe_px)
        img = np.clip(img * trans, 0.0, 1.0)

        ti, tj = int(round(tip_img[1])), int(round(tip_img[0]))
        inside = 0 <= ti < n and 0 <= tj < n
        visibility = float(trans[ti, tj]) if inside else 0.0
        half = TIP_BOX_SIDE_PX / 2.0
        gt_box = np.array([tip_img[0] - half, tip_img[1] - half,
                           tip_img[0] + half, tip_img[1] + half])
        return Frame(image=img, gt_box=gt_box, visibility=visibility,
                     frame_id=self.tick, sim_time=t,
                     tip_img=tip_img, tip_world=self.tip_world_px(),
                     theta_deg=self.theta, x_n_mm=self.x_n_mm,
                     probe_offset_px=probe_px, out_of_bounds=not inside)

    def tip_visibility(self) -> float:
        """Occluder transmission at the tip pixel, without rendering.

        Uses point-in-polygon tests; matches the rendered visibility away
        from polygon edges (rasterization rounds edge pixels).
        """
        tip = self.tip_image_px()
        n = self.phantom.size
        ti, tj = round(float(tip[1])), round(float(tip[0]))
        if not (0 <= ti < n and 0 <= tj < n):
            return 0.0
        t = self.sim_time
        probe_px = self.probe_offset_px
        trans = 1.0
        pt = (float(tj), float(ti))
        for occ in self.phantom.occluders:
            dx = occ.offset_x(t) - probe_px
            pts = np.asarray(occ.polygon, dtype=np.float64) + np.array([dx, 0.0])
            contour = np.round(pts).astype(np.int32).reshape(-1, 1, 2)
            if cv2.pointPolygonTest(contour, pt, False) >= 0:
                trans *= 1.0 - occ.attenuation
        return trans

    # -- geometry helpers ------------------------------------------------------

    def target_image_px(self) -> np.ndarray:
        """Instruction target mapped into the current image frame."""
        return (np.asarray(self.phantom.target_px, dtype=np.float64)
                - np.array([self.probe_offset_px, 0.0]))

    def entry_image_px(self) -> np.ndarray:
        """Insertion point mapped into the current image frame."""
        return self.entry - np.array([self.probe_offset_px, 0.0])

    def tip_to_target_mm(self) -> float:
        d = self.tip_world_px() - np.asarray(self.phantom.target_px)
        return float(np.linalg.norm(d) * self.phantom.mm_per_px)


def frame_to_u8(image: np.ndarray) -> np.ndarray:
    """[0,1] float image -> uint8 for storage/wire."""
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def u8_to_f64(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0


# -- scenario generation -------------------------------------------------------


def _ray_target(rng: np.random.Generator, size: int,
                margin: float = 28.0) -> tuple[np.ndarray, float, np.ndarray]:
    """Sample entry, angle and an on-ray target that stays inside margins."""
    for _ in range(64):
        entry = np.array([rng.uniform(6.0, 18.0), rng.uniform(46.0, 120.0)])
        theta = rng.uniform(28.0, 62.0)
        dist = rng.uniform(95.0, 150.0)
        rad = math.radians(theta)
        target = entry + dist * np.array([math.cos(rad), math.sin(rad)])
        if margin < target[0] < size - margin and margin < target[1] < size - margin:
            return entry, theta, target
    raise RuntimeError("could not place target inside phantom")


def _path_occluders(rng: np.random.Generator, entry: np.ndarray,
                    target: np.ndarray, heavy: bool) -> list[Occluder]:
    occs: list[Occluder] = []
    n_static = int(rng.integers(1, 3))
    for _ in range(n_static):
        u = rng.uniform(0.30, 0.62)
        cx, cy = entry + u * (target - entry)
        w = rng.uniform(14.0, 26.0)
        h = rng.uniform(18.0, 34.0)
        jitter = rng.uniform(-6.0, 6.0, size=2)
        cx += jitter[0]
        cy += jitter[1]
        poly = ((cx - w / 2, cy - h / 2), (cx + w / 2, cy - h / 2),
                (cx + w / 2, cy + h / 2), (cx - w / 2, cy + h / 2))
        occs.append(Occluder(polygon=poly, attenuation=float(rng.uniform(0.30, 0.50))))
    if heavy:
        u = rng.uniform(0.45, 0.70)
        cx, cy = entry + u * (target - entry)
        w = rng.uniform(20.0, 30.0)
        top = max(cy - rng.uniform(30.0, 50.0), 0.0)
        bot = min(cy + rng.uniform(30.0, 50.0), 255.0)
        poly = ((cx - w / 2, top), (cx + w / 2, top),
                (cx + w / 2, bot), (cx - w / 2, bot))
        occs.append(Occluder(
            polygon=poly,
            attenuation=float(rng.uniform(0.78, 0.86)),
            osc_amplitude_px=float(rng.uniform(45.0, 65.0)),
            osc_period_s=float(rng.uniform(3.0, 5.0)),
            osc_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        ))
    return occs


def make_scenario(seed: int, mode: str, occlusion: str = "light",
                  name: str = "") -> InsertionScenario:
    """Seeded random trial: layered phantom, on-ray target, path occluders.

    occlusion "light" places mild static occluders only; "heavy" adds a
    strong oscillating shadow band across the mid-path.
    """
    if occlusion not in ("none", "light", "heavy"):
        raise ConfigError(f"unknown occlusion level {occlusion!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    entry, theta, target = _ray_target(rng, 256)
    b1 = int(rng.integers(26, 42))
    b2 = int(rng.integers(110, 132))
    b3 = int(rng.integers(190, 214))
    layers = (
        TissueLayer(0, b1, float(rng.uniform(0.40, 0.50))),
        TissueLayer(b1, b2, float(rng.uniform(0.26, 0.34))),
        TissueLayer(b2, b3, float(rng.uniform(0.34, 0.42))),
        TissueLayer(b3, 256, float(rng.uniform(0.22, 0.30))),
    )
    occs = [] if occlusion == "none" else _path_occluders(
        rng, entry, target, heavy=(occlusion == "heavy"))
    phantom = PhantomConfig(layers=layers, occluders=tuple(occs),
                            target_px=(float(target[0]), float(target[1])),
                            seed=seed)
    return InsertionScenario(phantom=phantom,
                             entry_px=(float(entry[0]), float(entry[1])),
                             theta0_deg=float(theta), mode=mode,
                             name=name or f"scn{seed}-{mode}")
