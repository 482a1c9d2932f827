"""Desk-scale architectures: a small MLP and ``conv3s``, a quarter-width Conv-3.

Both end in a linear head. For ``conv3s`` the head reads the global average of
the last feature map, so the convolutional trunk accepts any input size large
enough to survive the three 2x2 pools.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .tensor import (
    ConfigError,
    Tensor,
    batch_norm,
    conv2d,
    global_avg_pool,
    matmul,
    max_pool2d,
    no_grad,
    relu,
    reshape,
)

ARCHS = ("mlp", "conv3s")
KINDS = ("conv", "linear", "bias", "norm")
INIT_SCHEME = "xavier_uniform"


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "conv3s"
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 16, 16)
    norm: str = "none"  # "none" | "batch"
    kernel_size: int = 3
    # subtracted from every input pixel; [0, 1] images are otherwise all-positive and stall plain ReLU convs
    input_shift: float = 0.5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unsupported arch {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if len(self.input_shape) != 3 or any(d <= 0 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        if self.norm not in ("none", "batch"):
            raise ConfigError(f"norm must be 'none' or 'batch', got {self.norm!r}")
        if self.norm == "batch" and self.arch != "conv3s":
            raise ConfigError("batch norm is only available for conv3s")

    @classmethod
    def mlp(cls, num_classes: int, input_shape=(1, 16, 16), widths=(256, 128)) -> "ModelSpec":
        return cls(arch="mlp", widths=tuple(widths), num_classes=num_classes, input_shape=tuple(input_shape))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


class ParameterSet(Mapping):
    """Ordered named tensors, their frozen initial values and per-tensor kind tags."""

    def __init__(self, tensors: dict[str, Tensor], kinds: dict[str, str], head: tuple[str, ...],
                 initial: dict[str, np.ndarray] | None = None):
        if set(kinds) != set(tensors):
            raise ValueError("kinds must tag every tensor")
        for name, kind in kinds.items():
            if kind not in KINDS:
                raise ValueError(f"unknown kind {kind!r} for {name!r}")
        self.tensors = dict(tensors)
        self.kinds = dict(kinds)
        self.head = tuple(head)
        if initial is None:
            initial = {name: t.data.copy() for name, t in self.tensors.items()}
        self.initial = {}
        for name, t in self.tensors.items():
            snap = np.array(initial[name], dtype=t.data.dtype, copy=True)
            if snap.shape != t.shape:
                raise ValueError(f"snapshot shape {snap.shape} != tensor shape {t.shape} for {name!r}")
            snap.flags.writeable = False
            self.initial[name] = snap

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def head_weight(self) -> str:
        return self.head[0]

    def is_head(self, name: str) -> bool:
        return name in self.head

    def values_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParameterSet":
        tensors = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype, name=n)
                   for n, t in self.tensors.items()}
        return ParameterSet(tensors, self.kinds, self.head, self.initial)

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self.tensors[name]
            if np.shape(arr) != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {np.shape(arr)} vs {t.shape}")
            t.data[...] = arr

    def reset_to_initial(self) -> None:
        for name, t in self.tensors.items():
            t.data[...] = self.initial[name]


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_layers(spec: ModelSpec) -> list[tuple[int, int]]:
    c_in = spec.input_shape[0]
    layers = []
    for w in spec.widths:
        layers.append((c_in, w))
        c_in = w
    return layers


def _mlp_layers(spec: ModelSpec) -> list[tuple[int, int]]:
    d_in = int(np.prod(spec.input_shape))
    layers = []
    for w in spec.widths:
        layers.append((d_in, w))
        d_in = w
    return layers


def init_parameters(spec: ModelSpec, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    k = spec.kernel_size
    if spec.arch == "conv3s":
        for i, (c_in, c_out) in enumerate(_conv_layers(spec), start=1):
            tensors[f"conv{i}.weight"] = xavier_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
            kinds[f"conv{i}.weight"] = "conv"
            tensors[f"conv{i}.bias"] = np.zeros(c_out, dtype=np.float32)
            kinds[f"conv{i}.bias"] = "bias"
            if spec.norm == "batch":
                tensors[f"bn{i}.gamma"] = np.ones(c_out, dtype=np.float32)
                tensors[f"bn{i}.beta"] = np.zeros(c_out, dtype=np.float32)
                kinds[f"bn{i}.gamma"] = kinds[f"bn{i}.beta"] = "norm"
    else:
        for i, (d_in, d_out) in enumerate(_mlp_layers(spec), start=1):
            tensors[f"fc{i}.weight"] = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
            kinds[f"fc{i}.weight"] = "linear"
            tensors[f"fc{i}.bias"] = np.zeros(d_out, dtype=np.float32)
            kinds[f"fc{i}.bias"] = "bias"
    tensors["head.weight"] = xavier_uniform(rng, (spec.feature_dim, spec.num_classes), spec.feature_dim, spec.num_classes)
    kinds["head.weight"] = "linear"
    tensors["head.bias"] = np.zeros(spec.num_classes, dtype=np.float32)
    kinds["head.bias"] = "bias"
    params = {n: Tensor(a, requires_grad=True, name=n) for n, a in tensors.items()}
    return ParameterSet(params, kinds, head=("head.weight", "head.bias"))


def replace_head(params: ParameterSet, new_num_classes: int, seed: int) -> ParameterSet:
    """Return a copy of ``params`` with a freshly initialised output layer.

    The new head's snapshot is its fresh initialisation; every other tensor and
    snapshot is copied unchanged.
    """
    if new_num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {new_num_classes}")
    w_name, b_name = params.head
    feature_dim = params[w_name].shape[0]
    rng = np.random.default_rng(seed)
    new_w = xavier_uniform(rng, (feature_dim, new_num_classes), feature_dim, new_num_classes)
    new_b = np.zeros(new_num_classes, dtype=np.float32)
    tensors = {}
    initial = {}
    for name, t in params.items():
        if name == w_name:
            arr, snap = new_w, new_w
        elif name == b_name:
            arr, snap = new_b, new_b
        else:
            arr, snap = t.data.copy(), params.initial[name]
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
        initial[name] = snap
    return ParameterSet(tensors, params.kinds, params.head, initial)


@dataclass
class Model:
    spec: ModelSpec
    params: ParameterSet
    init_seed: int = 0
    provenance: dict = field(default_factory=dict)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if self.spec.input_shift:
            x = Tensor(x.data - np.asarray(self.spec.input_shift, dtype=x.data.dtype), dtype=x.data.dtype)
        p = self.params
        if self.spec.arch == "conv3s":
            h = x
            pad = self.spec.kernel_size // 2
            for i in range(1, len(self.spec.widths) + 1):
                h = conv2d(h, p[f"conv{i}.weight"], stride=1, padding=pad)
                h = h + reshape(p[f"conv{i}.bias"], (1, -1, 1, 1))
                if self.spec.norm == "batch":
                    h = batch_norm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"])
                h = max_pool2d(relu(h), 2)
            feats = global_avg_pool(h)
        else:
            h = reshape(x, (x.shape[0], -1))
            for i in range(1, len(self.spec.widths) + 1):
                h = relu(matmul(h, p[f"fc{i}.weight"]) + p[f"fc{i}.bias"])
            feats = h
        return matmul(feats, p["head.weight"]) + p["head.bias"]

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(Tensor(images[start:start + batch_size])).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def replace_head(self, new_num_classes: int, seed: int) -> "Model":
        params = replace_head(self.params, new_num_classes, seed)
        return Model(replace(self.spec, num_classes=new_num_classes), params, self.init_seed,
                     {**self.provenance, "head_seed": seed})


def build_model(spec: ModelSpec, seed: int) -> Model:
    params = init_parameters(spec, seed)
    return Model(spec, params, seed, {"init": INIT_SCHEME, "seed": seed})


def trunk_signature(params: ParameterSet) -> dict[str, tuple[int, ...]]:
    """Shapes of every non-head tensor; two models can share tickets iff these agree."""
    return {n: t.shape for n, t in params.items() if not params.is_head(n)}
