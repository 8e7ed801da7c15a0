"""Encoder-decoder deblurring network assembled from the autograd layer set.

The network maps the two sub-aperture views (a 6-channel input cube) to a
3-channel sharp image. Structure: ``depth`` encoder blocks of
[conv3x3-relu, conv3x3-relu, maxpool2x2], a two-conv bottleneck, mirrored
decoder blocks of [upconv2x, skip concat, conv3x3-relu, conv3x3-relu], and a
1x1 conv + sigmoid output head. Dropout sits before the last encoder pool
and at the end of the bottleneck. Channel widths double per encoder block
starting at ``base_filters``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .autograd import (GradTape, ShapeError, Tensor4, activation, concat_channels,
                       conv2d, dropout, he_init, maxpool2x2, upconv2x)
from .container import read_container, write_container

VARIANT_CHANNELS = {"dual": 6, "single": 3, "triple": 9}

CHECKPOINT_KIND = "model-checkpoint"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings; parameter shapes are a pure function of these."""

    input_variant: str = "dual"  # dual | single | triple
    base_filters: int = 64
    depth: int = 4
    dropout_rate: float = 0.4
    patch_size: int = 512

    def __post_init__(self):
        if self.input_variant not in VARIANT_CHANNELS:
            raise ValueError(f"unknown input variant {self.input_variant!r}")
        if self.base_filters < 1 or self.depth < 1:
            raise ValueError("base_filters and depth must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.patch_size % (2 ** self.depth):
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by 2^depth = {2 ** self.depth}")

    @property
    def in_channels(self) -> int:
        return VARIANT_CHANNELS[self.input_variant]

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.depth

    def encoder_filters(self) -> list[int]:
        return [self.base_filters * (2 ** i) for i in range(self.depth)]

    def bottleneck_filters(self) -> int:
        return self.base_filters * (2 ** self.depth)


def _layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every weight/bias in the network."""
    enc = config.encoder_filters()
    mid = config.bottleneck_filters()
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, k, cin, cout):
        shapes.append((f"{name}.w", (k, k, cin, cout)))
        shapes.append((f"{name}.b", (cout,)))

    cin = config.in_channels
    for i, f in enumerate(enc, start=1):
        conv(f"enc{i}.conv1", 3, cin, f)
        conv(f"enc{i}.conv2", 3, f, f)
        cin = f
    conv("mid.conv1", 3, enc[-1], mid)
    conv("mid.conv2", 3, mid, mid)
    prev = mid
    for i in range(config.depth, 0, -1):
        f = enc[i - 1]
        conv(f"dec{i}.up", 2, prev, f)
        conv(f"dec{i}.conv1", 3, 2 * f, f)
        conv(f"dec{i}.conv2", 3, f, f)
        prev = f
    conv("head", 1, enc[0], 3)
    return shapes


def build(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """He-initialize the full parameter set (biases zero), deterministically."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(config):
        params[name] = he_init(shape, seed=int(rng.integers(2 ** 63)))
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _layer_shapes(config))


def forward(params: dict[str, np.ndarray], config: ModelConfig, inputs: Tensor4,
            training: bool = False, seed: int = 0,
            tape: GradTape | None = None) -> Tensor4:
    """Run the network; output is in (0, 1) with the input's spatial dims.

    Fully convolutional: any input whose spatial dims are divisible by
    2^depth is accepted regardless of the configured patch size.
    """
    b, h, w, c = inputs.shape
    if c != config.in_channels:
        raise ShapeError(
            f"{config.input_variant} variant expects {config.in_channels} input channels, "
            f"got shape {inputs.shape}")
    factor = config.downsample_factor
    if h % factor or w % factor:
        raise ShapeError(
            f"input spatial dims {h}x{w} must be divisible by {factor}; "
            f"pad to {-(-h // factor) * factor}x{-(-w // factor) * factor}")
    drop_rng = np.random.default_rng(seed)
    drop_seeds = [int(drop_rng.integers(2 ** 63)) for _ in range(2)]

    def conv_relu(name, t):
        return activation(conv2d(t, params[f"{name}.w"], params[f"{name}.b"], tape=tape),
                          "relu", tape=tape)

    x = inputs
    skips = []
    for i in range(1, config.depth + 1):
        x = conv_relu(f"enc{i}.conv1", x)
        x = conv_relu(f"enc{i}.conv2", x)
        if i == config.depth:
            x = dropout(x, config.dropout_rate, drop_seeds[0], training, tape=tape)
        skips.append(x)
        x = maxpool2x2(x, tape=tape)
    x = conv_relu("mid.conv1", x)
    x = conv_relu("mid.conv2", x)
    x = dropout(x, config.dropout_rate, drop_seeds[1], training, tape=tape)
    for i in range(config.depth, 0, -1):
        x = upconv2x(x, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"], tape=tape)
        x = concat_channels(x, skips[i - 1], tape=tape)
        x = conv_relu(f"dec{i}.conv1", x)
        x = conv_relu(f"dec{i}.conv2", x)
    x = conv2d(x, params["head.w"], params["head.b"], tape=tape)
    return activation(x, "sigmoid", tape=tape)


def adapt_input(frame, variant: str) -> Tensor4:
    """Stack a frame's views into the network input cube for ``variant``.

    dual -> (left.rgb, right.rgb); triple -> (left, right, blurred);
    single -> (blurred,). Single-channel views (smartphone green-channel
    data) are replicated to 3 channels first.
    """
    if variant not in VARIANT_CHANNELS:
        raise ValueError(f"unknown input variant {variant!r}")
    views = {"dual": ("left", "right"), "triple": ("left", "right", "blurred"),
             "single": ("blurred",)}[variant]
    planes = []
    for name in views:
        img = getattr(frame, name, None)
        if img is None:
            raise ValueError(f"{variant} variant requires the {name!r} view")
        img = np.asarray(img)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if img.shape[2] != 3:
            raise ShapeError(f"view {name!r} must have 1 or 3 channels, got {img.shape}")
        planes.append(img)
    return Tensor4(np.concatenate(planes, axis=2)[None])


def save_checkpoint(params: dict[str, np.ndarray], config: ModelConfig, path,
                    epoch: int = 0, extra: dict | None = None,
                    opt_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Persist params (+ optional optimizer tensors) with config and checksum."""
    meta = {"config": asdict(config), "epoch": int(epoch), "extra": extra or {}}
    tensors = {f"param.{k}": np.asarray(v, dtype=np.float32) for k, v in params.items()}
    for k, v in (opt_tensors or {}).items():
        tensors[f"opt.{k}"] = np.asarray(v, dtype=np.float32)
    write_container(path, CHECKPOINT_KIND, meta, tensors)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    """Load a checkpoint; returns (params, config, meta).

    ``meta`` carries ``epoch``, ``extra``, and any optimizer tensors under
    ``meta["opt"]``. Parameter shapes are validated against the stored
    config so a tampered or mismatched file fails loudly.
    """
    meta, tensors = read_container(path, expect_kind=CHECKPOINT_KIND)
    config = ModelConfig(**meta["config"])
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    opt = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
    expected = dict(_layer_shapes(config))
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        surplus = sorted(set(params) - set(expected))
        raise ShapeError(f"checkpoint parameters do not match config: "
                         f"missing {missing}, unexpected {surplus}")
    for name, arr in params.items():
        if arr.shape != expected[name]:
            raise ShapeError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                             f"config requires {expected[name]}")
    meta = dict(meta)
    meta["opt"] = opt
    return params, config, meta
