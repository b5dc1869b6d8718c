"""
Staged bottleneck encoder, spatial decoder, projection heads and the
online/offline model state.

Parameters live in flat dictionaries keyed by dotted names such as
`encoder.stage2.block0.conv2.weight`. Online parameters are `Tensor`s that
require gradients; offline parameters are plain arrays updated only by the
exponential moving average.
"""

import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from library.exceptions import DimensionError, FormatError, ParameterError
from library.tensor import (
    Tensor,
    add,
    avg_pool_all,
    batch_norm,
    bilinear_resize,
    conv2d,
    linear,
    relu,
)
from library.types import NormMode

CHECKPOINT_MAGIC = b"DPCK"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    sdm_blocks: int = 2
    bottleneck_ratio: float = 1 / 8
    lateral_layers: int = 1
    proj_hidden: int = 64
    proj_dim: int = 32
    topdown: bool = True
    lateral: bool = True
    init_seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.sdm_blocks < len(self.widths):
            raise ParameterError(
                f"sdm_blocks must be in [1, {len(self.widths) - 1}], got {self.sdm_blocks}."
            )
        if self.lateral_layers not in (1, 2):
            raise ParameterError(f"lateral_layers must be 1 or 2, got {self.lateral_layers}.")

    @property
    def dilated(self) -> bool:
        """
        Without top-down and lateral paths the decoder is dropped and the last two
        stages keep resolution through dilation.
        """

        return not self.topdown and not self.lateral

    @property
    def stage_strides(self) -> list[int]:
        strides = [2] * len(self.widths)
        if self.dilated:
            strides[-2:] = [1, 1]
        return strides

    @property
    def stage_dilations(self) -> list[int]:
        dilations = [1] * len(self.widths)
        if self.dilated:
            dilations[-2:] = [2, 4]
        return dilations

    @property
    def decoder_width(self) -> int:
        return self.widths[-1]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)


@dataclass
class Weights:

    """
    One branch's view of the model: parameters, normalization buffers and the
    normalization mode.
    """

    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    mode: NormMode


@dataclass
class ModelState:
    config: ModelConfig
    online: dict[str, Tensor]
    offline: dict[str, np.ndarray]
    online_buffers: dict[str, np.ndarray]
    offline_buffers: dict[str, np.ndarray]
    step: int = 0
    momentum: float = 0.996

    def online_weights(self, mode: NormMode = "train") -> Weights:
        return Weights(self.online, self.online_buffers, mode)

    def offline_weights(self) -> Weights:
        params = {name: Tensor(value) for name, value in self.offline.items()}
        return Weights(params, self.offline_buffers, "eval")

    def zero_grad(self) -> None:
        for tensor in self.online.values():
            tensor.zero_grad()


# ----------------------------------------------------------------------------------------
# Parameter construction


class _Builder:
    def __init__(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def conv(self, name: str, c_in: int, c_out: int, k: int, bias: bool = False) -> None:
        std = math.sqrt(2.0 / (c_in * k * k))
        self.params[f"{name}.weight"] = self.rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32)
        if bias:
            self.params[f"{name}.bias"] = np.zeros(c_out, dtype=np.float32)

    def linear(self, name: str, c_in: int, c_out: int, bias: bool = False) -> None:
        std = math.sqrt(2.0 / c_in)
        self.params[f"{name}.weight"] = self.rng.normal(0.0, std, (c_out, c_in)).astype(np.float32)
        if bias:
            self.params[f"{name}.bias"] = np.zeros(c_out, dtype=np.float32)

    def norm(self, name: str, channels: int) -> None:
        self.params[f"{name}.gamma"] = np.ones(channels, dtype=np.float32)
        self.params[f"{name}.beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=np.float32)

    def bottleneck(self, name: str, c_in: int, c_out: int, mid: int, shortcut: bool) -> None:
        self.conv(f"{name}.conv1", c_in, mid, 1)
        self.norm(f"{name}.bn1", mid)
        self.conv(f"{name}.conv2", mid, mid, 3)
        self.norm(f"{name}.bn2", mid)
        self.conv(f"{name}.conv3", mid, c_out, 1)
        self.norm(f"{name}.bn3", c_out)
        if shortcut:
            self.conv(f"{name}.shortcut", c_in, c_out, 1)
            self.norm(f"{name}.shortcut_bn", c_out)

    def head(self, name: str, c_in: int, hidden: int, c_out: int, dense: bool) -> None:
        layer = (lambda n, i, o, bias=False: self.conv(n, i, o, 1, bias)) if dense else self.linear
        layer(f"{name}.fc1", c_in, hidden)
        self.norm(f"{name}.bn1", hidden)
        layer(f"{name}.fc2", hidden, c_out, bias=True)


def stage_mid_width(c_out: int) -> int:
    return max(c_out // 4, 8)


def build_parameters(config: ModelConfig) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """
    Initialize every online parameter and normalization buffer. Convolutions use
    He-normal weights. Convolutions followed by normalization carry no bias.
    """

    builder = _Builder(config.init_seed)

    c_in = 3
    for stage, c_out in enumerate(config.widths, start=1):
        for block in range(config.blocks_per_stage):
            first = block == 0
            builder.bottleneck(
                f"encoder.stage{stage}.block{block}",
                c_in if first else c_out,
                c_out,
                stage_mid_width(c_out),
                shortcut=first,
            )
        c_in = c_out

    width = config.decoder_width
    if not config.dilated:
        for block in range(config.sdm_blocks):
            name = f"sdm.block{block}"
            if config.topdown:
                builder.bottleneck(
                    f"{name}.g", width, width, max(int(width * config.bottleneck_ratio), 1), shortcut=False
                )
            if config.lateral:
                source = config.widths[len(config.widths) - 2 - block]
                if config.lateral_layers == 1:
                    builder.conv(f"{name}.lateral", source, width, 1, bias=True)
                else:
                    builder.conv(f"{name}.lateral.conv1", source, width, 1)
                    builder.norm(f"{name}.lateral.bn1", width)
                    builder.conv(f"{name}.lateral.conv2", width, width, 1, bias=True)

    builder.head("projector.dense", width, config.proj_hidden, config.proj_dim, dense=True)
    builder.head("predictor.dense", config.proj_dim, config.proj_hidden, config.proj_dim, dense=True)
    builder.head("projector.pool", config.widths[-1], config.proj_hidden, config.proj_dim, dense=False)
    builder.head("predictor.pool", config.proj_dim, config.proj_hidden, config.proj_dim, dense=False)

    return builder.params, builder.buffers


def is_shared(name: str) -> bool:
    """
    Offline weights mirror every online parameter except the predictors.
    """

    return not name.startswith("predictor.")


def init_state(config: ModelConfig, base_momentum: float = 0.996) -> ModelState:
    params, buffers = build_parameters(config)

    return ModelState(
        config=config,
        online={name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()},
        offline={name: value.copy() for name, value in params.items() if is_shared(name)},
        online_buffers=buffers,
        offline_buffers={name: value.copy() for name, value in buffers.items()},
        momentum=base_momentum,
    )


# ----------------------------------------------------------------------------------------
# Forward passes


def _zeros_bias(weights: Weights, name: str, channels: int) -> Tensor:
    bias = weights.params.get(f"{name}.bias")
    return bias if bias is not None else Tensor(np.zeros(channels, dtype=np.float32))


def _conv(
    weights: Weights, name: str, x: Tensor, stride: int = 1, pad: int = 0, dilation: int = 1
) -> Tensor:
    weight = weights.params[f"{name}.weight"]
    return conv2d(x, weight, _zeros_bias(weights, name, weight.shape[0]), stride, pad, dilation)


def _linear(weights: Weights, name: str, x: Tensor) -> Tensor:
    weight = weights.params[f"{name}.weight"]
    return linear(x, weight, _zeros_bias(weights, name, weight.shape[0]))


def _norm(
    weights: Weights, name: str, x: Tensor, mode: Optional[NormMode] = None, mask: Optional[np.ndarray] = None
) -> Tensor:
    return batch_norm(
        x,
        weights.params[f"{name}.gamma"],
        weights.params[f"{name}.beta"],
        running_mean=weights.buffers[f"{name}.running_mean"],
        running_var=weights.buffers[f"{name}.running_var"],
        mode=mode or weights.mode,
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
        mask=mask,
    )


def bottleneck(
    weights: Weights, name: str, x: Tensor, stride: int = 1, dilation: int = 1
) -> Tensor:
    out = relu(_norm(weights, f"{name}.bn1", _conv(weights, f"{name}.conv1", x)))
    out = relu(
        _norm(
            weights,
            f"{name}.bn2",
            _conv(weights, f"{name}.conv2", out, stride=stride, pad=dilation, dilation=dilation),
        )
    )
    out = _norm(weights, f"{name}.bn3", _conv(weights, f"{name}.conv3", out))

    if f"{name}.shortcut.weight" in weights.params:
        shortcut = _norm(weights, f"{name}.shortcut_bn", _conv(weights, f"{name}.shortcut", x, stride=stride))
    else:
        shortcut = x

    return relu(add(out, shortcut))


def encode(config: ModelConfig, weights: Weights, images: Tensor) -> list[Tensor]:
    """
    Run the encoder.

    Parameters
    ----------
    - `config` : ModelConfig
    - `weights` : Weights
    - `images` : Tensor
        A `(n, 3, h, w)` batch with `h` and `w` divisible by `config.downsample`.

    Returns
    -------
    `list[Tensor]` :
        One feature map per stage. Stage `l` has spatial dims `h / 2^l` (the last
        two stages stay at `h / 4` in the dilated trunk).
    """

    n, c, h, w = images.shape
    if c != 3:
        raise DimensionError("channels", 3, c)
    if h % config.downsample or w % config.downsample:
        raise DimensionError("spatial", f"multiple of {config.downsample}", (h, w))

    pyramid = []
    x = images
    for stage, (stride, dilation) in enumerate(zip(config.stage_strides, config.stage_dilations), start=1):
        for block in range(config.blocks_per_stage):
            x = bottleneck(
                weights,
                f"encoder.stage{stage}.block{block}",
                x,
                stride=stride if block == 0 else 1,
                dilation=dilation,
            )
        pyramid.append(x)

    return pyramid


def lateral(config: ModelConfig, weights: Weights, block: int, source: Tensor) -> Tensor:
    name = f"sdm.block{block}.lateral"
    if config.lateral_layers == 1:
        return _conv(weights, name, source)

    hidden = relu(_norm(weights, f"{name}.bn1", _conv(weights, f"{name}.conv1", source)))
    return _conv(weights, f"{name}.conv2", hidden)


def sdm_forward(config: ModelConfig, weights: Weights, pyramid: list[Tensor]) -> Tensor:
    """
    Top-down decoding: every block computes `g(upsample(z)) + lateral(z_j)`, where
    `z_j` is the encoder stage with the spatial dims of the block output. With
    the default two blocks the output is at 1/4 of the input resolution.
    """

    if len(pyramid) != len(config.widths):
        raise DimensionError("pyramid", len(config.widths), len(pyramid), hint="Pass the full output of encode.")

    if config.dilated:
        return pyramid[-1]

    x = pyramid[-1]
    for block in range(config.sdm_blocks):
        source = pyramid[len(pyramid) - 2 - block]
        up = bilinear_resize(x, source.shape[2], source.shape[3])
        topdown = bottleneck(weights, f"sdm.block{block}.g", up) if config.topdown else up
        x = add(topdown, lateral(config, weights, block, source)) if config.lateral else topdown

    return x


def head(weights: Weights, name: str, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Two-layer head with normalization and rectification in between. Maps use
    1x1 convolutions and vectors use linear layers. A single vector falls back to
    eval-mode normalization.

    `mask` restricts the normalization statistics of a map to masked-in pixels.
    Fewer than two of them fall back to eval mode as well.
    """

    mode: Optional[NormMode] = "eval" if x.ndim == 2 and x.shape[0] < 2 else None
    if mask is not None and int(mask.sum()) < 2:
        mode, mask = "eval", None

    if x.ndim == 4:
        hidden = relu(_norm(weights, f"{name}.bn1", _conv(weights, f"{name}.fc1", x), mode, mask))
        return _conv(weights, f"{name}.fc2", hidden)

    hidden = relu(_norm(weights, f"{name}.bn1", _linear(weights, f"{name}.fc1", x), mode))
    return _linear(weights, f"{name}.fc2", hidden)


def project_dense(weights: Weights, features: Tensor) -> Tensor:
    return head(weights, "projector.dense", features)


def project_pool(weights: Weights, features: Tensor) -> Tensor:
    return head(weights, "projector.pool", avg_pool_all(features) if features.ndim == 4 else features)


def predict(weights: Weights, projection: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    return head(weights, "predictor.dense" if projection.ndim == 4 else "predictor.pool", projection, mask)


def dense_features(config: ModelConfig, weights: Weights, images: Tensor) -> tuple[Tensor, list[Tensor]]:
    pyramid = encode(config, weights, images)
    return sdm_forward(config, weights, pyramid), pyramid


# ----------------------------------------------------------------------------------------
# Exponential moving average


def momentum_at(step: int, total_steps: int, base: float = 0.996) -> float:
    """
    Cosine schedule from `base` at step 0 to 1 at `total_steps`.
    """

    if total_steps <= 0:
        return 1.0

    progress = min(max(step / total_steps, 0.0), 1.0)
    return 1 - (1 - base) * (math.cos(math.pi * progress) + 1) / 2


def ema_update(state: ModelState, step: int, total_steps: int) -> float:
    """
    Move every offline parameter toward its online counterpart,
    `xi <- m * xi + (1 - m) * theta`, and copy the online running statistics to
    the offline branch.

    Returns
    -------
    `float` :
        The momentum used.
    """

    if not 0 <= step <= total_steps:
        raise ParameterError(f"EMA step {step} outside [0, {total_steps}].")

    m = momentum_at(step, total_steps, state.momentum)
    rate = np.float32(1 - m)
    for name, offline in state.offline.items():
        offline += rate * (state.online[name].data - offline)

    for name, buffer in state.online_buffers.items():
        state.offline_buffers[name][...] = buffer

    return m


# ----------------------------------------------------------------------------------------
# Checkpoints


def state_arrays(state: ModelState) -> dict[str, np.ndarray]:
    arrays = {}
    arrays.update({f"online/{name}": tensor.data for name, tensor in state.online.items()})
    arrays.update({f"offline/{name}": value for name, value in state.offline.items()})
    arrays.update({f"online_buffers/{name}": value for name, value in state.online_buffers.items()})
    arrays.update({f"offline_buffers/{name}": value for name, value in state.offline_buffers.items()})
    return arrays


def state_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray], step: int) -> ModelState:
    state = init_state(config)

    def section(prefix: str) -> dict[str, np.ndarray]:
        return {name[len(prefix) :]: value for name, value in arrays.items() if name.startswith(prefix)}

    online = section("online/")
    if set(online) != set(state.online):
        missing = sorted(set(state.online) ^ set(online))
        raise FormatError(f"Checkpoint parameters do not match the model config: {missing[:5]}")

    for name, value in online.items():
        if value.shape != state.online[name].shape:
            raise DimensionError(name, state.online[name].shape, value.shape)
        state.online[name].data = value.copy()

    state.offline = {name: value.copy() for name, value in section("offline/").items()}
    state.online_buffers = {name: value.copy() for name, value in section("online_buffers/").items()}
    state.offline_buffers = {name: value.copy() for name, value in section("offline_buffers/").items()}
    state.step = step

    return state


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], digest: str, step: int) -> None:
    """
    Binary layout: magic `DPCK`, uint32 version, 32-byte config digest, uint64
    step, uint32 record count, then per record uint32 name length, UTF-8 name,
    uint32 ndim, uint32 dims and little-endian float32 payload.
    """

    digest_bytes = bytes.fromhex(digest)
    if len(digest_bytes) != 32:
        raise ParameterError("Config digest must be a sha256 hex string.")

    with open(path, "wb") as file:
        file.write(CHECKPOINT_MAGIC)
        file.write(struct.pack("<I", CHECKPOINT_VERSION))
        file.write(digest_bytes)
        file.write(struct.pack("<QI", step, len(arrays)))

        for name, value in arrays.items():
            encoded = name.encode("utf-8")
            file.write(struct.pack("<I", len(encoded)))
            file.write(encoded)
            file.write(struct.pack("<I", value.ndim))
            file.write(struct.pack(f"<{value.ndim}I", *value.shape))
            file.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], str, int]:
    """
    Returns
    -------
    `tuple[dict[str, np.ndarray], str, int]` :
        The named arrays, the config digest as hex and the step.
    """

    with open(path, "rb") as file:
        raw = file.read()

    offset = 0

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise FormatError(f"Checkpoint '{path}' is truncated", offset=offset)
        chunk = raw[offset : offset + count]
        offset += count
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"'{path}' is not a checkpoint", offset=0)

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", offset=4)

    digest = take(32).hex()
    step, count = struct.unpack("<QI", take(12))

    arrays = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", take(4))
        name = take(length).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * size)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)

    return arrays, digest, step
