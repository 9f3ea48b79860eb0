"""Teacher and student encoders with an optional classifier head.

The encoder is a stack of strided 1-D convolutions over time, followed by
framewise dense layers and a linear projection to the latent size, then a
mean over the remaining frames. Layout inside the network is
``(batch, time, channels)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import MelSpectrogram
from .errors import ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    conv_layers: tuple[tuple[int, int, int], ...] = ((3, 32, 2), (3, 32, 2))  # (kernel, out_channels, stride)
    ff_layers: tuple[int, ...] = (64,)
    latent_dim: int = 32
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        object.__setattr__(self, "ff_layers", tuple(int(v) for v in self.ff_layers))
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.latent_dim < 1 or self.n_mels < 1:
            raise ValueError("latent_dim and n_mels must be positive")
        for k, c, s in self.conv_layers:
            if k < 1 or c < 1 or s < 1:
                raise ValueError(f"bad conv layer spec {(k, c, s)}")

    def output_frames(self, frames: int) -> int:
        for k, _, s in self.conv_layers:
            if frames < k:
                raise ShapeError(f"input of {frames} frames is shorter than conv kernel {k}")
            frames = (frames - k) // s + 1
        return frames


@dataclass
class Layer:
    name: str
    kind: str  # "conv1d" or "dense"
    weight: Tensor
    bias: Tensor
    stride: int = 1

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[:-1]))


@dataclass
class ModelGraph:
    config: EncoderConfig
    layers: list[Layer]
    head: Layer | None = None
    role: str = "student"

    def __post_init__(self):
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {self.role!r}")
        if self.role == "student" and self.head is None:
            raise ValueError("a student model requires a classifier head")
        if self.role == "teacher":
            for t in self.parameters().values():
                t.requires_grad = False

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def n_classes(self) -> int:
        return 0 if self.head is None else self.head.weight.shape[1]

    def all_layers(self) -> list[Layer]:
        return self.layers + ([self.head] if self.head is not None else [])

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.all_layers():
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def as_teacher(self) -> "ModelGraph":
        m = self.clone()
        m.role = "teacher"
        for t in m.parameters().values():
            t.requires_grad = False
            t.grad = None
        return m

    def astype(self, dtype) -> "ModelGraph":
        m = self.clone()
        for t in m.parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return m

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None


@dataclass(frozen=True)
class InitMode:
    variant: str = "random"  # "random" | "pretrained"
    checkpoint: "str | Path | ModelGraph | None" = None

    def __post_init__(self):
        if self.variant not in ("random", "pretrained"):
            raise ValueError(f"unknown init variant {self.variant!r}")
        if self.variant == "pretrained" and self.checkpoint is None:
            raise ValueError("pretrained init needs a checkpoint")


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _random_layers(cfg: EncoderConfig, rng, dtype) -> list[Layer]:
    layers = []
    c_in = cfg.n_mels
    for i, (k, c_out, s) in enumerate(cfg.conv_layers):
        w = _kaiming(rng, (k, c_in, c_out), k * c_in, dtype)
        layers.append(Layer(f"conv{i}", "conv1d", w, Tensor(np.zeros(c_out, dtype), True), s))
        c_in = c_out
    widths = list(cfg.ff_layers) + [cfg.latent_dim]
    for i, width in enumerate(widths):
        name = "latent" if i == len(widths) - 1 else f"ff{i}"
        w = _kaiming(rng, (c_in, width), c_in, dtype)
        layers.append(Layer(name, "dense", w, Tensor(np.zeros(width, dtype), True)))
        c_in = width
    return layers


def _head(cfg: EncoderConfig, n_classes: int, rng, dtype) -> Layer:
    w = _kaiming(rng, (cfg.latent_dim, n_classes), cfg.latent_dim, dtype)
    return Layer("head", "dense", w, Tensor(np.zeros(n_classes, dtype), True))


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator used for every seeded draw in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


def initialize(
    cfg: EncoderConfig,
    mode: InitMode | None = None,
    seed: int = 0,
    n_classes: int = 4,
    dtype=np.float32,
) -> ModelGraph:
    """Build a trainable student. Pretrained mode copies encoder tensors from a checkpoint."""
    mode = mode or InitMode()
    rng = rng_for(seed)
    layers = _random_layers(cfg, rng, dtype)
    head = _head(cfg, n_classes, rng, dtype)
    if mode.variant == "pretrained":
        src = mode.checkpoint
        if not isinstance(src, ModelGraph):
            from .modelio import load_checkpoint

            src = load_checkpoint(src)
        if len(src.layers) != len(layers):
            raise ShapeError(
                f"checkpoint has {len(src.layers)} encoder layers, config expects {len(layers)}"
            )
        for mine, theirs in zip(layers, src.layers):
            if (
                mine.name != theirs.name
                or mine.kind != theirs.kind
                or mine.stride != theirs.stride
                or mine.weight.shape != theirs.weight.shape
                or mine.bias.shape != theirs.bias.shape
            ):
                raise ShapeError(
                    f"checkpoint layer {theirs.name} ({theirs.kind}, {theirs.weight.shape}, "
                    f"stride {theirs.stride}) does not match {mine.name} "
                    f"({mine.kind}, {mine.weight.shape}, stride {mine.stride})"
                )
            mine.weight = Tensor(theirs.weight.data.astype(dtype), requires_grad=True)
            mine.bias = Tensor(theirs.bias.data.astype(dtype), requires_grad=True)
    return ModelGraph(cfg, layers, head, "student")


def project_teacher(teacher: ModelGraph, cfg: EncoderConfig) -> ModelGraph:
    """Width-truncate a wider model onto ``cfg`` for use as a pretrained checkpoint.

    Keeps the leading input/output channels of every layer and rescales each
    weight by the fraction of input channels dropped, so pre-activation
    magnitudes stay comparable.
    """
    t_layers = teacher.layers
    s_layers = _random_layers(cfg, rng_for(0), teacher.dtype)
    if len(t_layers) != len(s_layers):
        raise ShapeError("teacher and student encoders have different depths")
    out = []
    for t, s in zip(t_layers, s_layers):
        if t.kind != s.kind or t.stride != s.stride:
            raise ShapeError(f"layer {s.name}: kind/stride differ between teacher and student")
        ws = s.weight.shape
        if t.kind == "conv1d":
            if t.weight.shape[0] != ws[0]:
                raise ShapeError(f"layer {s.name}: kernel sizes differ")
            w = t.weight.data[:, : ws[1], : ws[2]] * (t.weight.shape[1] / ws[1])
        else:
            w = t.weight.data[: ws[0], : ws[1]] * (t.weight.shape[0] / ws[0])
        if any(a < b for a, b in zip(t.weight.shape, ws)):
            raise ShapeError(f"layer {s.name}: teacher is narrower than student")
        b = t.bias.data[: s.bias.shape[0]]
        out.append(Layer(s.name, s.kind, Tensor(w), Tensor(b), s.stride))
    return ModelGraph(cfg, out, None, "teacher")


def _as_input(model: ModelGraph, x) -> tuple[Tensor, bool]:
    if isinstance(x, MelSpectrogram):
        arr, single = x.values.T, True
    elif isinstance(x, Tensor):
        arr, single = x.data, x.data.ndim == 2
    else:
        arr = np.asarray(x)
        single = arr.ndim == 2
    if arr.shape[-1] != model.config.n_mels:
        raise ShapeError(
            f"input has {arr.shape[-1]} mel channels, model expects {model.config.n_mels}"
        )
    if single:
        arr = arr[None]
    return Tensor._wrap(np.ascontiguousarray(arr, dtype=model.dtype)), single


def _act(cfg: EncoderConfig, h: Tensor) -> Tensor:
    return ad.gelu(h) if cfg.activation == "gelu" else ad.relu(h)


def _encode(model: ModelGraph, x: Tensor, weights: Mapping[str, Tensor] | None) -> Tensor:
    weights = weights or {}
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        w = weights.get(f"{layer.name}.weight", layer.weight)
        b = weights.get(f"{layer.name}.bias", layer.bias)
        if layer.kind == "conv1d":
            h = ad.add(ad.conv1d(h, w, layer.stride), b)
        else:
            h = ad.add(ad.matmul(h, w), b)
        if i != last:
            h = _act(model.config, h)
    return ad.mean_pool_time(h)


def forward_features(model: ModelGraph, x, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    """Latent vector(s) ``z``: shape ``(latent_dim,)`` for one spectrogram, ``(B, latent_dim)`` for a batch.

    ``x`` is a :class:`MelSpectrogram` or an array laid out ``(batch, frames, n_mels)``.
    ``weights`` overrides parameters by name (used to run on reconstructed weights).
    """
    xt, single = _as_input(model, x)
    z = _encode(model, xt, weights)
    if single:
        return Tensor._wrap(z.data[0]) if not z.requires_grad else _squeeze0(z)
    return z


def _squeeze0(z: Tensor) -> Tensor:
    # row 0 of a (1, n) batch via a one-hot matmul, keeping it on the tape
    one = Tensor._wrap(np.ones((1,), dtype=z.dtype))
    return ad.matmul(one, z)


def head_logits(model: ModelGraph, z: Tensor, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    weights = weights or {}
    w = weights.get("head.weight", model.head.weight)
    b = weights.get("head.bias", model.head.bias)
    return ad.add(ad.matmul(z, w), b)


def forward_logits(student: ModelGraph, x, weights: Mapping[str, Tensor] | None = None) -> Tensor:
    """Unnormalized class scores; softmax is applied inside the cross-entropy."""
    if student.role != "student" or student.head is None:
        raise ValueError("forward_logits needs a student model with a classifier head")
    return head_logits(student, forward_features(student, x, weights), weights)


def predict(model: ModelGraph, features: np.ndarray, weights=None, batch_size: int = 256) -> np.ndarray:
    """Argmax class per example, evaluated without a tape."""
    preds = []
    for start in range(0, len(features), batch_size):
        z = forward_features(model, features[start : start + batch_size], weights)
        logits = head_logits(model, z, weights)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def encode_batch(model: ModelGraph, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_features(model, features[s : s + batch_size]).data for s in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.latent_dim), model.dtype)
