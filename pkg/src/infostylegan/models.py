"""Toy-scale style-based generator and a discriminator whose trunk also feeds the Q head.

Generator: encoding -> mapping MLP -> style w; a learned 4x4 constant is
refined by one block per scale (4, 8, 16, 32 px): upsample, 3x3 conv, noise
injection, per-channel affine modulation from w, leaky ReLU. A per-pixel
linear projection and a sigmoid produce a 1x32x32 image. With styles disabled
the encoding feeds a linear projection onto the 4x4 base and blocks are not
modulated.

Discriminator: the mirror conv trunk (32 -> 16 -> 8 -> 4), a dense layer,
and two heads on the dense features: the real/fake logit and the Q head.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .archive import ArchiveError, read_archive, write_archive
from .latent import LatentSample, LatentSpec, QPosterior

RESOLUTIONS = (4, 8, 16, 32)
IMAGE_SHAPE = (1, 32, 32)


@dataclass(frozen=True)
class ModelConfig:
    spec: LatentSpec = field(default_factory=LatentSpec.default)
    style_enabled: bool = True
    mapping_layers: int = 4
    w_dim: int = 64
    g_channels: tuple = (64, 32, 16, 8)  # at 4, 8, 16, 32 px
    d_channels: tuple = (16, 32, 64, 64)  # at 32, 16, 8, 4 px
    dense_width: int = 64
    noise_init: float = 0.1
    style_gain: float = 0.25

    @property
    def conv_feature_dim(self) -> int:
        return self.d_channels[-1] * 16


def _fan_in_normal(rng, shape, fan_in, gain=np.sqrt(2.0)):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


@dataclass
class Models:
    config: ModelConfig
    generator: T.ParameterStore
    discriminator: T.ParameterStore
    q_head: T.ParameterStore

    def stores(self) -> Dict[str, T.ParameterStore]:
        return {"G": self.generator, "D": self.discriminator, "Q": self.q_head}

    def copy(self) -> "Models":
        return Models(self.config, self.generator.copy(), self.discriminator.copy(), self.q_head.copy())


def init_models(config: ModelConfig, seed: int = 0, zero_q_head: bool = False) -> Models:
    rng = np.random.default_rng(seed)
    spec = config.spec
    g = T.ParameterStore()
    width_in = spec.encoding_width
    for i in range(config.mapping_layers):
        g.add(f"mapping.{i}.weight", _fan_in_normal(rng, (width_in, config.w_dim), width_in))
        g.add(f"mapping.{i}.bias", np.zeros(config.w_dim))
        width_in = config.w_dim
    c0 = config.g_channels[0]
    g.add("synthesis.const", rng.standard_normal((c0, 4, 4)))
    g.add("synthesis.input.weight", _fan_in_normal(rng, (spec.encoding_width, c0 * 16), spec.encoding_width, 1.0))
    g.add("synthesis.input.bias", np.zeros(c0 * 16))
    c_in = c0
    for res, c_out in zip(RESOLUTIONS, config.g_channels):
        p = f"block{res}"
        g.add(f"{p}.conv", _fan_in_normal(rng, (c_out, c_in, 3, 3), c_in * 9))
        g.add(f"{p}.bias", np.zeros(c_out))
        g.add(f"{p}.noise_strength", np.full(c_out, config.noise_init))
        g.add(f"{p}.style_scale.weight", _fan_in_normal(rng, (config.w_dim, c_out), config.w_dim, config.style_gain))
        g.add(f"{p}.style_scale.bias", np.ones(c_out))
        g.add(f"{p}.style_bias.weight", _fan_in_normal(rng, (config.w_dim, c_out), config.w_dim, config.style_gain))
        g.add(f"{p}.style_bias.bias", np.zeros(c_out))
        c_in = c_out
    g.add("to_image.weight", _fan_in_normal(rng, (c_in,), c_in, 1.0))
    g.add("to_image.bias", np.zeros(1))

    d = T.ParameterStore()
    c_in = IMAGE_SHAPE[0]
    for res, c_out in zip(reversed(RESOLUTIONS), config.d_channels):
        d.add(f"conv{res}.weight", _fan_in_normal(rng, (c_out, c_in, 3, 3), c_in * 9))
        d.add(f"conv{res}.bias", np.zeros(c_out))
        c_in = c_out
    feat = config.conv_feature_dim
    d.add("dense.weight", _fan_in_normal(rng, (feat, config.dense_width), feat))
    d.add("dense.bias", np.zeros(config.dense_width))
    d.add("adv.weight", _fan_in_normal(rng, (config.dense_width, 1), config.dense_width, 1.0))
    d.add("adv.bias", np.zeros(1))

    q = T.ParameterStore()
    q_shape = (config.dense_width, spec.q_width)
    q.add("q.weight", np.zeros(q_shape) if zero_q_head else _fan_in_normal(rng, q_shape, config.dense_width, 1.0))
    q.add("q.bias", np.zeros(spec.q_width))
    return Models(config, g, d, q)


# ---------------------------------------------------------------------------
# graph builders


def make_noise_maps(n: int, rng: np.random.Generator) -> List[np.ndarray]:
    return [rng.standard_normal((n, 1, r, r)) for r in RESOLUTIONS]


def mapping_forward(config: ModelConfig, gp: Dict[str, T.Tensor], encoding) -> T.Tensor:
    h = encoding
    for i in range(config.mapping_layers):
        h = T.matmul(h, gp[f"mapping.{i}.weight"]) + gp[f"mapping.{i}.bias"]
        if i < config.mapping_layers - 1:
            h = T.leaky_relu(h)
    return h


def synthesis_forward(config: ModelConfig, gp: Dict[str, T.Tensor], n: int,
                      noise_maps: Sequence[np.ndarray], w: Optional[T.Tensor] = None,
                      encoding=None) -> T.Tensor:
    c0 = config.g_channels[0]
    if w is not None:
        graph = w.graph
        x = T.mul(gp["synthesis.const"], graph.constant(np.ones((n, 1, 1, 1))))
    else:
        x = T.matmul(encoding, gp["synthesis.input.weight"]) + gp["synthesis.input.bias"]
        x = T.reshape(x, (n, c0, 4, 4))
    for res, c_out, noise in zip(RESOLUTIONS, config.g_channels, noise_maps):
        p = f"block{res}"
        if res != RESOLUTIONS[0]:
            x = T.upsample2x(x)
        x = T.conv2d(x, gp[f"{p}.conv"]) + T.reshape(gp[f"{p}.bias"], (1, c_out, 1, 1))
        x = x + T.reshape(gp[f"{p}.noise_strength"], (1, c_out, 1, 1)) * noise
        if w is not None:
            scale = T.matmul(w, gp[f"{p}.style_scale.weight"]) + gp[f"{p}.style_scale.bias"]
            shift = T.matmul(w, gp[f"{p}.style_bias.weight"]) + gp[f"{p}.style_bias.bias"]
            x = T.channel_affine(x, scale, shift)
        x = T.leaky_relu(x)
    c_last = config.g_channels[-1]
    proj = T.sum(x * T.reshape(gp["to_image.weight"], (1, c_last, 1, 1)), axis=1, keepdims=True)
    return T.sigmoid(proj + gp["to_image.bias"])


def generator_forward(config: ModelConfig, gp: Dict[str, T.Tensor], encoding: T.Tensor,
                      noise_maps: Sequence[np.ndarray]) -> T.Tensor:
    n = encoding.shape[0]
    if config.style_enabled:
        w = mapping_forward(config, gp, encoding)
        return synthesis_forward(config, gp, n, noise_maps, w=w)
    return synthesis_forward(config, gp, n, noise_maps, encoding=encoding)


def discriminator_forward(config: ModelConfig, dp: Dict[str, T.Tensor], images):
    """Returns (logit (N,1), conv_features (N,C*16), dense_features (N,dense))."""
    x = images
    n = x.shape[0]
    for i, res in enumerate(reversed(RESOLUTIONS)):
        if i:
            x = T.downsample2x(x)
        c = dp[f"conv{res}.weight"].shape[0]
        x = T.conv2d(x, dp[f"conv{res}.weight"]) + T.reshape(dp[f"conv{res}.bias"], (1, c, 1, 1))
        x = T.leaky_relu(x)
    conv_features = T.reshape(x, (n, config.conv_feature_dim))
    dense = T.leaky_relu(T.matmul(conv_features, dp["dense.weight"]) + dp["dense.bias"])
    logit = T.matmul(dense, dp["adv.weight"]) + dp["adv.bias"]
    return logit, conv_features, dense


def q_forward(qp: Dict[str, T.Tensor], dense_features: T.Tensor) -> T.Tensor:
    return T.matmul(dense_features, qp["q.weight"]) + qp["q.bias"]


# ---------------------------------------------------------------------------
# inference API (numpy in, numpy out)

_CHUNK = 256


def _check_images(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
        raise T.ShapeError(f"discriminate: expected images of shape (N,{','.join(map(str, IMAGE_SHAPE))}), "
                           f"got {images.shape}")
    return images


def map_latent(models: Models, sample: LatentSample) -> np.ndarray:
    """Style vectors w for a batch of latent samples (one w per sample, all scales)."""
    enc = np.atleast_2d(sample.encoding)
    if enc.shape[1] != models.config.spec.encoding_width:
        raise T.ShapeError(f"map_latent: encoding width {enc.shape[1]} != "
                           f"{models.config.spec.encoding_width}")
    g = T.Graph()
    gp = models.generator.bind(g, models.generator.names("mapping."), trainable=False)
    return mapping_forward(models.config, gp, g.constant(enc)).data


def synthesize(models: Models, w: np.ndarray, noise_maps=None, rng=None) -> np.ndarray:
    """Render images from style vectors. Fresh noise is drawn from ``rng`` unless maps are given."""
    w = np.atleast_2d(w)
    n = w.shape[0]
    if noise_maps is None:
        noise_maps = make_noise_maps(n, rng if rng is not None else np.random.default_rng())
    g = T.Graph()
    gp = models.generator.bind(g, trainable=False)
    return synthesis_forward(models.config, gp, n, noise_maps, w=g.constant(w)).data


def generate(models: Models, sample: LatentSample, noise_maps=None, rng=None) -> np.ndarray:
    """Images for latent samples; honours ``style_enabled``."""
    enc = np.atleast_2d(sample.encoding)
    n = enc.shape[0]
    if noise_maps is None:
        noise_maps = make_noise_maps(n, rng if rng is not None else np.random.default_rng())
    out = []
    for s in range(0, n, _CHUNK):
        g = T.Graph()
        gp = models.generator.bind(g, trainable=False)
        maps = [m[s:s + _CHUNK] for m in noise_maps]
        out.append(generator_forward(models.config, gp, g.constant(enc[s:s + _CHUNK]), maps).data)
    return np.concatenate(out, axis=0)


def discriminate(models: Models, images):
    """(logit, conv_features, dense_features) from one forward pass per chunk."""
    images = _check_images(images)
    logits, convs, denses = [], [], []
    for s in range(0, len(images), _CHUNK):
        g = T.Graph()
        dp = models.discriminator.bind(g, trainable=False)
        logit, conv, dense = discriminator_forward(models.config, dp, g.constant(images[s:s + _CHUNK]))
        logits.append(logit.data[:, 0])
        convs.append(conv.data)
        denses.append(dense.data)
    return np.concatenate(logits), np.concatenate(convs), np.concatenate(denses)


def q_infer(models: Models, images) -> QPosterior:
    _, _, dense = discriminate(models, images)
    qp = models.q_head.params
    return QPosterior(models.config.spec, dense @ qp["q.weight"] + qp["q.bias"])


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_tensors(models: Models) -> Dict[str, np.ndarray]:
    out = {}
    for prefix, store in models.stores().items():
        for name in store:
            out[f"{prefix}/{name}"] = store.params[name]
        for name in store:
            out[f"{prefix}/adam.m/{name}"] = store.m[name]
            out[f"{prefix}/adam.v/{name}"] = store.v[name]
        out[f"{prefix}/adam.step"] = np.array(float(store.step))
    return out


def save_checkpoint(models: Models, path) -> None:
    write_archive(path, checkpoint_tensors(models))


def load_checkpoint(path, models: Models) -> Models:
    """Load a checkpoint into ``models`` (which fixes the expected names and shapes)."""
    tensors = read_archive(path)
    expected = checkpoint_tensors(models)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ArchiveError(f"{path}: missing tensor {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise ArchiveError(f"{path}: unexpected tensor {extra[0]!r}")
    for key, arr in tensors.items():
        if arr.shape != expected[key].shape:
            raise T.ShapeError(f"{path}: tensor {key!r} has shape {arr.shape}, model expects {expected[key].shape}")
    for prefix, store in models.stores().items():
        for name in store:
            store.params[name] = tensors[f"{prefix}/{name}"].copy()
            store.m[name] = tensors[f"{prefix}/adam.m/{name}"].copy()
            store.v[name] = tensors[f"{prefix}/adam.v/{name}"].copy()
        store.step = int(tensors[f"{prefix}/adam.step"])
    return models
