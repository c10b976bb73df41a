"""Three-block convolutional feature extractor.

Each block is conv3x3 -> batch norm -> ReLU -> 4x4 max pool; the final
feature map is flattened into the embedding.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, MaxPool4, Parameter, ReLU, check_finite


class BackboneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    input_shape: tuple[int, int] = (160, 128)  # (T, F); time is the image height
    channels: tuple[int, int, int] = (64, 64, 64)
    in_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != 3:
            raise BackboneConfigError(f"exactly 3 blocks required, got {len(self.channels)} channel widths")
        T, F = self.input_shape
        if T < 64 or F < 64:
            raise BackboneConfigError(f"input must be at least 64x64 for three 4x pools, got {T}x{F}")
        if min(self.channels) < 1 or self.in_channels < 1:
            raise BackboneConfigError(f"channel widths must be positive, got {self.channels}")

    @property
    def output_grid(self) -> tuple[int, int]:
        T, F = self.input_shape
        for _ in range(3):
            T, F = T // 4, F // 4
        return T, F

    @property
    def embedding_dim(self) -> int:
        t, f = self.output_grid
        return self.channels[-1] * t * f

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()


class Backbone:
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32, name=""):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        prefix = f"{name}." if name else ""
        self.layers = []
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.channels, start=1):
            self.layers += [
                Conv2d(c_in, c_out, f"{prefix}block{i}.conv", rng, dtype, input_grad=i > 1),
                BatchNorm2d(c_out, f"{prefix}block{i}.bn", dtype),
                ReLU(),
                MaxPool4(),
            ]
            c_in = c_out
        self._pooled_shape = None
        self.eval()

    def train(self):
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        for layer in self.layers:
            layer.training = False
        return self

    @property
    def training(self) -> bool:
        return self.layers[0].training

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """(B, T, F) spectrograms -> (B, embedding_dim) embeddings."""
        if x.ndim != 3 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ValueError(f"expected input of shape (B, {self.spec.input_shape[0]}, "
                             f"{self.spec.input_shape[1]}), got {x.shape}")
        h = x[:, None, :, :].astype(self.dtype, copy=False)
        for layer in self.layers:
            h = layer.forward(h)
        if self.training:
            self._pooled_shape = h.shape
        return check_finite(h.reshape(h.shape[0], -1), "backbone embedding")

    __call__ = forward

    def backward(self, d_embed: np.ndarray) -> None:
        """Accumulate parameter gradients from d(loss)/d(embedding)."""
        g = d_embed.reshape(self._pooled_shape).astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def init_backbone(spec: BackboneSpec, seed: int | np.random.SeedSequence, dtype=np.float32, name="") -> Backbone:
    """Seeded Kaiming-normal initialisation of a fresh backbone."""
    return Backbone(spec, np.random.default_rng(seed), dtype, name)


def embed(x: np.ndarray, backbone: Backbone, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    (backbone.train() if mode == "train" else backbone.eval())
    return backbone.forward(x)


def param_count(params) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    if isinstance(params, Backbone):
        params = params.parameters()
    elif hasattr(params, "parameters"):
        params = params.parameters()
    return int(sum(p.size for p in params))
