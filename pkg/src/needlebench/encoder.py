"""Frozen patch-transformer encoder over a joint token sequence.

The encoder embeds a template crop, a search crop, and a row of trainable
register tokens into one sequence [template | search | register], runs a
stack of pre-norm attention blocks with frozen random (orthogonal) weights,
and exposes two intermediate block outputs: a shallow tap and a deep tap.
Only the register tokens ever receive gradient updates; the backbone stays
fixed for the life of the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Parameter, Tensor


@dataclass
class EncoderConfig:
    search_side: int = 64
    template_side: int = 32
    patch_side: int = 8
    depth: int = 6
    dim: int = 128
    num_heads: int = 4
    mlp_hidden: int = 256
    shallow_tap: int = 1
    deep_tap: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.search_side % self.patch_side or self.template_side % self.patch_side:
            raise ConfigError(
                f"crop sides ({self.search_side}, {self.template_side}) must be "
                f"divisible by patch side {self.patch_side}")
        if not (0 <= self.shallow_tap < self.deep_tap < self.depth):
            raise ConfigError(
                f"taps must satisfy 0 <= shallow ({self.shallow_tap}) < deep "
                f"({self.deep_tap}) < depth ({self.depth})")
        if self.dim % self.num_heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.num_heads} heads")

    @property
    def search_tokens(self) -> int:
        return (self.search_side // self.patch_side) ** 2

    @property
    def template_tokens(self) -> int:
        return (self.template_side // self.patch_side) ** 2

    @property
    def search_grid(self) -> int:
        return self.search_side // self.patch_side


def orthogonal(rng: np.random.Generator, rows: int, cols: int,
               gain: float = 1.0) -> np.ndarray:
    """Orthogonal (rows, cols) matrix from a QR of gaussian noise."""
    big = max(rows, cols)
    a = rng.standard_normal((big, min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q[:rows, :cols] if rows >= cols else q[:cols, :rows].T
    return gain * q


@dataclass
class TraConRegister:
    """Trainable register tokens appended after the image tokens."""

    length: int
    dim: int
    tokens: Parameter = field(init=False)
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        init = 0.02 * rng.standard_normal((self.length, self.dim))
        self.tokens = Parameter(init, trainable=True)

    def parameters(self) -> dict[str, Parameter]:
        return {"register/tokens": self.tokens} if self.length else {}


@dataclass
class EncodedObservation:
    """Shallow/deep tap slices of the joint sequence, plus bookkeeping.

    Leading batch dims are preserved: each field is (..., L_section, dim).
    """

    shallow_z: Tensor
    shallow_x: Tensor
    deep_z: Tensor
    deep_x: Tensor
    register: Tensor  # deep-tap register slice, (..., L_r, dim)
    frame_id: int = -1
    timestamp: float = 0.0


class VisionEncoder:
    """Frozen ViT-style backbone; see module docstring."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p2 = cfg.patch_side ** 2
        d = cfg.dim
        self._params: dict[str, Parameter] = {}

        def frz(name: str, arr: np.ndarray) -> Parameter:
            p = Parameter(arr, trainable=False)
            self._params[name] = p
            return p

        self.patch_w = frz("encoder/patch_w", orthogonal(rng, p2, d))
        self.patch_b = frz("encoder/patch_b", np.zeros(d))
        self.pos_search = frz("encoder/pos_search",
                              0.02 * rng.standard_normal((cfg.search_tokens, d)))
        self.pos_template = frz("encoder/pos_template",
                                0.02 * rng.standard_normal((cfg.template_tokens, d)))
        self.blocks = []
        for i in range(cfg.depth):
            blk = {
                "ln1_g": frz(f"encoder/b{i}/ln1_g", np.ones(d)),
                "ln1_b": frz(f"encoder/b{i}/ln1_b", np.zeros(d)),
                "wq": frz(f"encoder/b{i}/wq", orthogonal(rng, d, d)),
                "bq": frz(f"encoder/b{i}/bq", np.zeros(d)),
                "wk": frz(f"encoder/b{i}/wk", orthogonal(rng, d, d)),
                "bk": frz(f"encoder/b{i}/bk", np.zeros(d)),
                "wv": frz(f"encoder/b{i}/wv", orthogonal(rng, d, d)),
                "bv": frz(f"encoder/b{i}/bv", np.zeros(d)),
                "wo": frz(f"encoder/b{i}/wo", orthogonal(rng, d, d, gain=0.5)),
                "bo": frz(f"encoder/b{i}/bo", np.zeros(d)),
                "ln2_g": frz(f"encoder/b{i}/ln2_g", np.ones(d)),
                "ln2_b": frz(f"encoder/b{i}/ln2_b", np.zeros(d)),
                "w1": frz(f"encoder/b{i}/w1", orthogonal(rng, d, cfg.mlp_hidden)),
                "b1": frz(f"encoder/b{i}/b1", np.zeros(cfg.mlp_hidden)),
                "w2": frz(f"encoder/b{i}/w2",
                          orthogonal(rng, cfg.mlp_hidden, d, gain=0.5)),
                "b2": frz(f"encoder/b{i}/b2", np.zeros(d)),
            }
            self.blocks.append(blk)

    def parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    # -- forward ---------------------------------------------------------

    def patchify(self, img: np.ndarray, which: str) -> np.ndarray:
        """(..., S, S) grayscale in [0,1] -> (..., n_patches, patch^2)."""
        side = self.cfg.search_side if which == "search" else self.cfg.template_side
        if img.shape[-2:] != (side, side):
            raise ConfigError(f"{which} crop must be {side}x{side}, got {img.shape}")
        p = self.cfg.patch_side
        g = side // p
        lead = img.shape[:-2]
        x = img.reshape(lead + (g, p, g, p))
        x = np.moveaxis(x, -2, -3)  # (..., g, g, p, p)
        return x.reshape(lead + (g * g, p * p))

    def _attend(self, x: Tensor, blk: dict) -> Tensor:
        """Full self-attention over (..., L, d) with num_heads heads."""
        cfg = self.cfg
        h = cfg.num_heads
        dh = cfg.dim // h
        lead = x.shape[:-2]
        L = x.shape[-2]
        q = T.linear(x, blk["wq"], blk["bq"])
        k = T.linear(x, blk["wk"], blk["bk"])
        v = T.linear(x, blk["wv"], blk["bv"])

        def heads(t: Tensor) -> Tensor:
            t = T.reshape(t, lead + (L, h, dh))
            axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
            return T.transpose(t, axes)  # (..., h, L, dh)

        q, k, v = heads(q), heads(k), heads(v)
        scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(dh))
        att = T.matmul(T.softmax(scores, axis=-1), v)  # (..., h, L, dh)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        att = T.transpose(att, axes)  # (..., L, h, dh)
        att = T.reshape(att, lead + (L, cfg.dim))
        return T.linear(att, blk["wo"], blk["bo"])

    def _block(self, x: Tensor, blk: dict) -> Tensor:
        h = T.add(x, self._attend(T.layer_norm(x, blk["ln1_g"], blk["ln1_b"]), blk))
        m = T.mlp(T.layer_norm(h, blk["ln2_g"], blk["ln2_b"]),
                  blk["w1"], blk["b1"], blk["w2"], blk["b2"])
        return T.add(h, m)

    def encode(self, template: np.ndarray, search: np.ndarray,
               register: TraConRegister | None = None,
               frame_id: int = -1, timestamp: float = 0.0) -> EncodedObservation:
        """Joint forward pass.  Crops may carry one leading batch dim."""
        cfg = self.cfg
        batched = template.ndim == 3
        z = Tensor(self.patchify(np.asarray(template, dtype=np.float64), "template"))
        x = Tensor(self.patchify(np.asarray(search, dtype=np.float64), "search"))
        z = T.add(T.linear(z, self.patch_w, self.patch_b), self.pos_template)
        x = T.add(T.linear(x, self.patch_w, self.patch_b), self.pos_search)
        lz, lx = cfg.template_tokens, cfg.search_tokens
        lr = register.length if register is not None else 0
        parts = [z, x]
        if lr:
            r = register.tokens
            if batched:
                r = T.expand_leading(r, template.shape[0])
            parts.append(r)
        seq = T.concat(parts, axis=-2)
        shallow = deep = None
        for i, blk in enumerate(self.blocks):
            seq = self._block(seq, blk)
            if i == cfg.shallow_tap:
                shallow = seq
            if i == cfg.deep_tap:
                deep = seq
        assert shallow is not None and deep is not None
        ax = seq.ndim - 2
        return EncodedObservation(
            shallow_z=T.narrow(shallow, ax, 0, lz),
            shallow_x=T.narrow(shallow, ax, lz, lx),
            deep_z=T.narrow(deep, ax, 0, lz),
            deep_x=T.narrow(deep, ax, lz, lx),
            register=T.narrow(deep, ax, lz + lx, lr),
            frame_id=frame_id,
            timestamp=timestamp,
        )
