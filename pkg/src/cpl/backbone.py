"""Small prompted encoder-decoder: ``restored = degraded + head(decode(encode(degraded), prompt))``.

Images are N x C x H x W (a bare C x H x W is accepted and returned as such).
Decoder stage s (from ``depth`` down to 1) upsamples, convolves, adds the
encoder skip at that scale, then applies the prompt as a per-channel affine
``h * (1 + gamma(p)) + beta(p)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class BackboneConfig:
    base_channels: int = 16
    depth: int = 2
    prompt_dim: int = 32
    image_channels: int = 3

    def validate(self, n_experts: int | None = None) -> None:
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.image_channels < 1:
            raise ValueError(f"image_channels must be >= 1, got {self.image_channels}")
        if n_experts is not None and self.prompt_dim < n_experts:
            raise ValueError(f"prompt_dim ({self.prompt_dim}) must be >= number of experts ({n_experts})")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    @property
    def feature_dim(self) -> int:
        """Length of the pooled bottleneck vector fed to the gate."""
        return self.channels(self.depth)

    def to_json(self) -> dict:
        return asdict(self)


def _he(rng, shape, fan_in, dtype):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(config: BackboneConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(101,)))
    p: dict[str, np.ndarray] = {}
    C = config.channels
    ic, dp = config.image_channels, config.prompt_dim

    def conv(name, cout, cin):
        p[f"{name}.w"] = _he(rng, (cout, cin, 3, 3), cin * 9, dtype)
        p[f"{name}.b"] = np.zeros(cout, dtype)

    conv("enc.stem", C(0), ic)
    for s in range(1, config.depth + 1):
        conv(f"enc.{s}.down", C(s), C(s - 1))
        conv(f"enc.{s}.conv", C(s), C(s))
    for s in range(config.depth, 0, -1):
        conv(f"dec.{s}.up", C(s - 1), C(s))
        conv(f"dec.{s}.conv", C(s - 1), C(s - 1))
        for kind in ("gamma", "beta"):
            p[f"dec.{s}.{kind}.w"] = (rng.normal(size=(dp, C(s - 1))) / np.sqrt(dp)).astype(dtype)
            p[f"dec.{s}.{kind}.b"] = np.zeros(C(s - 1), dtype)
    p["head.w"] = np.zeros((ic, C(0), 3, 3), dtype)
    p["head.b"] = np.zeros(ic, dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _batched(img: Tensor):
    if img.ndim == 3:
        return nx.reshape(img, (1,) + img.shape), True
    if img.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W image, got {img.shape}")
    return img, False


def _conv_relu(h, params, name, stride=1):
    return nx.relu(nx.conv2d(h, params[f"{name}.w"], params[f"{name}.b"], stride=stride))


def _linear(p: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = nx.matmul(p, w)
    return nx.add(out, nx.broadcast_to(b, out.shape))


def modulate(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``h * (1 + gamma) + beta`` with gamma, beta of shape N x C."""
    N, C, H, W = h.shape
    g = nx.broadcast_to(nx.reshape(nx.add(gamma, 1.0), (N, C, 1, 1)), h.shape)
    b = nx.broadcast_to(nx.reshape(beta, (N, C, 1, 1)), h.shape)
    return nx.add(nx.mul(h, g), b)


class Backbone:
    def __init__(self, config: BackboneConfig | None = None, seed: int = 0, dtype=np.float32, params=None):
        self.config = config or BackboneConfig()
        self.config.validate()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = params if params is not None else init_params(self.config, seed, self.dtype)

    def encode(self, img: Tensor) -> tuple[list[Tensor], Tensor]:
        """Skip features per scale and the pooled bottleneck vector ``x``."""
        x, squeeze = _batched(img)
        N, C, H, W = x.shape
        if C != self.config.image_channels:
            raise ShapeError(f"expected {self.config.image_channels} image channels, got {C}")
        f = 2**self.config.depth
        if H % f or W % f:
            raise ShapeError(f"spatial size {H}x{W} is not divisible by 2**depth = {f}")
        P = self.params
        h = _conv_relu(x, P, "enc.stem")
        feats = [h]
        for s in range(1, self.config.depth + 1):
            h = _conv_relu(h, P, f"enc.{s}.down", stride=2)
            h = _conv_relu(h, P, f"enc.{s}.conv")
            feats.append(h)
        pooled = nx.global_avg_pool(h)
        if squeeze:
            pooled = nx.reshape(pooled, (pooled.shape[1],))
        return feats, pooled

    def decode(self, feats: list[Tensor], prompt: Tensor, rows=None) -> Tensor:
        """Residual predicted from encoder features and a prompt batch.

        ``rows`` selects, for each prompt row, which encoded image it applies
        to, so one encoding can be decoded under several prompts.
        """
        P = self.params
        if prompt.ndim == 1:
            prompt = nx.reshape(prompt, (1, prompt.shape[0]))
        if prompt.shape[1] != self.config.prompt_dim:
            raise ShapeError(f"prompt dimension {prompt.shape[1]} != prompt_dim {self.config.prompt_dim}")
        if rows is not None:
            feats = [nx.take(f, rows, axis=0) for f in feats]
        if feats[0].shape[0] != prompt.shape[0]:
            raise ShapeError(f"{prompt.shape[0]} prompts for {feats[0].shape[0]} images")
        h = feats[-1]
        for s in range(self.config.depth, 0, -1):
            h = nx.upsample2(h)
            h = nx.add(nx.conv2d(h, P[f"dec.{s}.up.w"], P[f"dec.{s}.up.b"]), feats[s - 1])
            gamma = _linear(prompt, P[f"dec.{s}.gamma.w"], P[f"dec.{s}.gamma.b"])
            beta = _linear(prompt, P[f"dec.{s}.beta.w"], P[f"dec.{s}.beta.b"])
            h = nx.relu(modulate(h, gamma, beta))
            h = _conv_relu(h, P, f"dec.{s}.conv")
        return nx.conv2d(h, P["head.w"], P["head.b"])

    def restore(self, img: Tensor, prompt: Tensor) -> Tensor:
        x, squeeze = _batched(img)
        feats, _ = self.encode(x)
        if prompt.ndim == 1 and x.shape[0] > 1:
            raise ShapeError("a single prompt vector needs a single image")
        out = nx.add(x, self.decode(feats, prompt))
        return nx.reshape(out, out.shape[1:]) if squeeze else out

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())
