"""Encoder: shapes, freeze contract, register gradient flow."""

import numpy as np
import pytest

from needlebench import tensor as T
from needlebench.encoder import (EncodedObservation, EncoderConfig,
                                 TraConRegister, VisionEncoder, orthogonal)
from needlebench.optim import AdamW
from needlebench.tensor import ConfigError


TINY = EncoderConfig(search_side=16, template_side=8, patch_side=4,
                     depth=3, dim=16, num_heads=2, mlp_hidden=32,
                     shallow_tap=0, deep_tap=2, seed=7)


def crops(cfg, seed=0, batch=None):
    r = np.random.default_rng(seed)
    shape_t = (cfg.template_side, cfg.template_side)
    shape_s = (cfg.search_side, cfg.search_side)
    if batch:
        shape_t = (batch,) + shape_t
        shape_s = (batch,) + shape_s
    return r.uniform(0, 1, shape_t), r.uniform(0, 1, shape_s)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(search_side=60, patch_side=8)
    with pytest.raises(ConfigError):
        EncoderConfig(shallow_tap=5, deep_tap=5)
    with pytest.raises(ConfigError):
        EncoderConfig(dim=130, num_heads=4)


def test_orthogonal_init_is_orthogonal():
    r = np.random.default_rng(0)
    q = orthogonal(r, 8, 8)
    assert np.allclose(q @ q.T, np.eye(8), atol=1e-10)
    tall = orthogonal(r, 12, 4)
    assert np.allclose(tall.T @ tall, np.eye(4), atol=1e-10)
    wide = orthogonal(r, 4, 12)
    assert np.allclose(wide @ wide.T, np.eye(4), atol=1e-10)


def test_sequence_layout_and_shapes():
    cfg = TINY
    enc = VisionEncoder(cfg)
    reg = TraConRegister(length=4, dim=cfg.dim, seed=1)
    t, s = crops(cfg)
    obs = enc.encode(t, s, reg)
    lz, lx = cfg.template_tokens, cfg.search_tokens
    assert obs.shallow_z.shape == (lz, cfg.dim)
    assert obs.shallow_x.shape == (lx, cfg.dim)
    assert obs.deep_z.shape == (lz, cfg.dim)
    assert obs.deep_x.shape == (lx, cfg.dim)
    assert obs.register.shape == (4, cfg.dim)


def test_zero_length_register():
    cfg = TINY
    enc = VisionEncoder(cfg)
    t, s = crops(cfg)
    obs = enc.encode(t, s, None)
    assert obs.register.shape == (0, cfg.dim)
    reg0 = TraConRegister(length=0, dim=cfg.dim)
    obs0 = enc.encode(t, s, reg0)
    assert obs0.register.shape == (0, cfg.dim)
    assert reg0.parameters() == {}


def test_encode_is_deterministic():
    cfg = TINY
    t, s = crops(cfg, seed=3)
    a = VisionEncoder(cfg).encode(t, s, TraConRegister(4, cfg.dim, seed=1))
    b = VisionEncoder(cfg).encode(t, s, TraConRegister(4, cfg.dim, seed=1))
    assert np.array_equal(a.deep_x.data, b.deep_x.data)
    assert np.array_equal(a.shallow_z.data, b.shallow_z.data)


def test_batched_matches_unbatched():
    cfg = TINY
    enc = VisionEncoder(cfg)
    reg = TraConRegister(4, cfg.dim, seed=1)
    t, s = crops(cfg, seed=5, batch=3)
    single = enc.encode(t[1], s[1], reg)
    batched = enc.encode(t, s, reg)
    assert batched.deep_x.shape == (3, cfg.search_tokens, cfg.dim)
    assert np.allclose(batched.deep_x.data[1], single.deep_x.data, atol=1e-12)
    assert np.allclose(batched.register.data[1], single.register.data, atol=1e-12)


def test_register_gets_grad_backbone_stays_frozen():
    cfg = TINY
    enc = VisionEncoder(cfg)
    reg = TraConRegister(4, cfg.dim, seed=1)
    before = {k: p.data.copy() for k, p in enc.parameters().items()}
    t, s = crops(cfg)
    obs = enc.encode(t, s, reg)
    loss = T.mean(T.mul(obs.deep_x, obs.deep_x))
    loss.backward()
    assert reg.tokens.grad is not None
    assert np.abs(reg.tokens.grad).max() > 0.0
    opt = AdamW(list(enc.parameters().values()) + [reg.tokens], lr=1e-2)
    opt.step()
    for k, p in enc.parameters().items():
        assert np.array_equal(p.data, before[k]), f"{k} moved"
    assert not np.array_equal(reg.tokens.data,
                              TraConRegister(4, cfg.dim, seed=1).tokens.data)


def test_register_perturbation_changes_encoding():
    cfg = TINY
    enc = VisionEncoder(cfg)
    t, s = crops(cfg)
    reg = TraConRegister(4, cfg.dim, seed=1)
    base = enc.encode(t, s, reg).register.data.copy()
    reg.tokens.data += 0.5
    moved = enc.encode(t, s, reg).register.data
    assert np.abs(moved - base).max() > 1e-6


def test_wrong_crop_size_rejected():
    cfg = TINY
    enc = VisionEncoder(cfg)
    t, s = crops(cfg)
    with pytest.raises(ConfigError):
        enc.encode(s, s, None)  # template of search size
