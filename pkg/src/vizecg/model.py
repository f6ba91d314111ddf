"""Two-stream signal/image classifier with cross-modal and self-modal attention.

Data flow of a training forward pass:

.. code-block::

    12 leads ──f (shared)──> mean over leads ──pool──> z_s (L×C) ──┐        ┌── SMAM ── head_s ──> p_s
                                                                  ├─ CMAM ─┤
    image ─────g──────────────────────────────pool──> z_i (L×C) ──┘        └── SMAM ── head_i ──> p_i

Both extractors are miniature residual networks: a strided stem followed by 4 stages of one residual block each,
stage widths `(*widths, C)`. Feature maps are adaptively mean-pooled to a common number of tokens `L` so the
cross-modal attention product is defined for both directions.

At inference only the image is available: CMAM is bypassed as identity and the image features go straight
to the image SMAM and head (:py:func:`~vizecg.model.forward_infer`).

Checkpoint format (integers little-endian):

.. code-block::

    offset  size  field
    0       4     magic b"VZCK"
    4       4     u32 version = 1
    8       4     u32 config length N
    12      N     UTF-8 JSON {"model": ModelConfig, "layout": LayoutSpec, "modules": {"enable_cmam", "enable_smam"}}
    12+N    4     u32 number of parameter tensors
    16+N    ...   parameters as f64, in ModelState.params order, each tensor row-major

"""

import json
import struct
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field, fields, replace
from math import sqrt
from pathlib import Path
from typing import Any, NamedTuple, TypeAlias

import numpy as np

from vizecg.data import N_CLASSES, N_LEADS, EcgRecord
from vizecg.errors import CheckpointError, ConfigurationError, ContractError, DimensionError
from vizecg.raster import EcgImage, LayoutSpec
from vizecg.tensor import (
    Tensor,
    adaptive_avg_pool_tokens,
    add,
    channel_norm,
    conv1d,
    conv2d,
    detach,
    global_avg_pool,
    matmul,
    mean_over_axis,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    transpose2d,
)

__all__ = [
    "FeatureMap",
    "ModelConfig",
    "AttentionParams",
    "HeadParams",
    "ModelState",
    "init_model",
    "signal_stream_forward",
    "image_stream_forward",
    "attention_matrix",
    "cmam_forward",
    "smam_forward",
    "head_forward",
    "forward_train",
    "forward_distill",
    "forward_infer",
    "save_model",
    "load_model",
]

FeatureMap: TypeAlias = Tensor  #: L×C token matrix

MAGIC = b"VZCK"
VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    channels: int = 64  #: C, shared by both streams and the attention modules
    tokens: int = 16  #: L, tokens per stream after adaptive pooling
    widths: tuple[int, int, int] = (16, 32, 64)  #: widths of the stem and of the first 3 stages
    head_hidden: int = 64
    signal_length: int = 4096
    image_height: int = 512
    image_width: int = 512
    signal_stem_kernel: int = 8
    signal_stem_stride: int = 4
    signal_strides: tuple[int, int, int, int] = (2, 2, 2, 2)
    image_stem_kernel: int = 4
    image_stem_stride: int = 4
    image_strides: tuple[int, int, int, int] = (2, 2, 2, 2)
    scale_attention: bool = False  #: divide attention logits by sqrt(C)
    n_classes: int = N_CLASSES

    def __post_init__(self):
        for name in ("widths", "signal_strides", "image_strides"):
            object.__setattr__(self, name, tuple(int(value) for value in getattr(self, name)))
        if len(self.widths) != 3 or len(self.signal_strides) != 4 or len(self.image_strides) != 4:
            raise ConfigurationError("Model needs 3 widths and 4 stage strides per stream.")
        values = (
            self.channels,
            self.tokens,
            self.head_hidden,
            self.signal_stem_kernel,
            self.signal_stem_stride,
            self.image_stem_kernel,
            self.image_stem_stride,
            *self.widths,
            *self.signal_strides,
            *self.image_strides,
        )
        if min(values) < 1:
            raise ConfigurationError(f"Model sizes, kernels and strides must be positive: {self}")
        if self.n_classes != N_CLASSES:
            raise ConfigurationError(f"Number of classes must be {N_CLASSES}.")

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest sensible configuration, used for end-to-end gradient checks."""
        return cls(
            channels=8,
            tokens=4,
            widths=(4, 4, 8),
            head_hidden=8,
            signal_length=64,
            image_height=16,
            image_width=16,
            signal_stem_kernel=4,
            signal_stem_stride=2,
            signal_strides=(1, 2, 1, 2),
            image_stem_kernel=2,
            image_stem_stride=2,
            image_strides=(1, 2, 1, 1),
        )

    @classmethod
    def paper(cls) -> "ModelConfig":
        """Full width configuration with 512 channels."""
        return cls(channels=512, widths=(64, 128, 256), head_hidden=256)

    @classmethod
    def from_dict(cls, settings: dict[str, Any], /) -> "ModelConfig":
        settings = dict(settings)
        preset = settings.pop("preset", None)
        base = {"desk": cls.desk, "tiny": cls.tiny, "paper": cls.paper}
        if preset is not None and preset not in base:
            raise ConfigurationError(f"Unknown model preset: {preset}\n\nFix: Use one of {', '.join(base)}.")
        known = {_field.name for _field in fields(cls)}
        unknown = set(settings) - known
        if unknown:
            raise ConfigurationError(
                f"Unknown model settings: {', '.join(sorted(unknown))}\n\nFix: Use ModelConfig field names.",
                keys=sorted(unknown),
            )
        return replace(base[preset or "desk"](), **settings)

    def json_repr(self) -> dict[str, Any]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        return self.widths[0], self.widths[1], self.widths[2], self.channels

    @staticmethod
    def _padding(kernel: int, stride: int) -> int:
        return max(kernel - stride, 0) // 2

    def feature_size(self, size: int, stem_kernel: int, stem_stride: int, strides: tuple[int, ...]) -> int:
        """Length of one spatial axis after the stem and all stages, 0 if the input is too small."""
        padding = self._padding(stem_kernel, stem_stride)
        if stem_kernel > size + 2 * padding:
            return 0
        size = (size + 2 * padding - stem_kernel) // stem_stride + 1
        for stride in strides:
            size = (size - 1) // stride + 1
        return size

    def min_input_size(self, stem_kernel: int, stem_stride: int, strides: tuple[int, ...]) -> int:
        size = 1
        while self.feature_size(size, stem_kernel, stem_stride, strides) < 1:
            size += 1
        return size

    def min_image_size(self) -> int:
        return self.min_input_size(self.image_stem_kernel, self.image_stem_stride, self.image_strides)

    def min_signal_length(self) -> int:
        return self.min_input_size(self.signal_stem_kernel, self.signal_stem_stride, self.signal_strides)


class AttentionParams(NamedTuple):
    """Projection matrices of one attention module, each C×d with d = C."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


class HeadParams(NamedTuple):
    """Two-layer MLP head: linear, relu, linear."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


ATTENTION_MODULES = ("cmam_s", "cmam_i", "smam_s", "smam_i")
HEADS = ("head_s", "head_i")


@dataclass
class ModelState:
    """All learnable parameters with their architecture.

    Parameters are stored in a flat ordered dict with dotted names. The signal extractor exists once
    (`signal.*`) and is applied to all 12 leads.

    `enable_cmam` and `enable_smam` record the attention modules the weights were trained with. Forward passes
    use them unless told otherwise, a disabled module keeps its untrained weights and must stay bypassed.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    layout: LayoutSpec = field(default_factory=LayoutSpec)
    enable_cmam: bool = True
    enable_smam: bool = True

    @property
    def modules(self) -> dict[str, bool]:
        return {"enable_cmam": self.enable_cmam, "enable_smam": self.enable_smam}

    def attention(self, name: str, /) -> AttentionParams:
        return AttentionParams(*(self.params[f"{name}.{key}"] for key in AttentionParams._fields))

    def head(self, name: str, /) -> HeadParams:
        return HeadParams(*(self.params[f"{name}.{key}"] for key in HeadParams._fields))

    def census(self, prefix: str = "") -> int:
        """Number of scalar parameters whose name starts with `prefix`."""
        return sum(param.size for name, param in self.params.items() if name.startswith(prefix))

    def trainable(self, *, enable_cmam: bool = True, enable_smam: bool = True) -> dict[str, Tensor]:
        """Parameters that take part in a training forward pass with the given modules."""
        skip = (() if enable_cmam else ("cmam_",)) + (() if enable_smam else ("smam_",))
        return {name: param for name, param in self.params.items() if not name.startswith(skip)}

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def copy(self) -> "ModelState":
        params = {name: Tensor(param.data.copy(), requires_grad=True, name=name) for name, param in self.params.items()}
        return ModelState(self.config, params, self.layout, **self.modules)

    def iter_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, param in self.params.items():
            yield name, param.data


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Parameter names, shapes and fan-in (0 for norm gains and biases) in checkpoint order."""
    shapes: list[tuple[str, tuple[int, ...], int]] = []

    def norm(prefix: str, channels: int) -> None:
        shapes.append((f"{prefix}.gain", (channels,), 0))
        shapes.append((f"{prefix}.bias", (channels,), 0))

    for stream, spatial, stem_kernel, strides in (
        ("signal", 1, config.signal_stem_kernel, config.signal_strides),
        ("image", 2, config.image_stem_kernel, config.image_strides),
    ):
        widths = config.stage_widths
        shapes.append((f"{stream}.stem.w", (widths[0], 1) + (stem_kernel,) * spatial, stem_kernel**spatial))
        norm(f"{stream}.stem.norm", widths[0])
        in_channels = widths[0]
        for idx, (out_channels, stride) in enumerate(zip(widths, strides), start=1):
            prefix = f"{stream}.stage{idx}"
            kernel = (3,) * spatial
            shapes.append((f"{prefix}.conv1.w", (out_channels, in_channels, *kernel), in_channels * 3**spatial))
            norm(f"{prefix}.norm1", out_channels)
            shapes.append((f"{prefix}.conv2.w", (out_channels, out_channels, *kernel), out_channels * 3**spatial))
            norm(f"{prefix}.norm2", out_channels)
            if stride != 1 or in_channels != out_channels:
                shapes.append((f"{prefix}.proj.w", (out_channels, in_channels) + (1,) * spatial, in_channels))
                norm(f"{prefix}.proj.norm", out_channels)
            in_channels = out_channels

    c = config.channels
    for module in ATTENTION_MODULES:
        for key in AttentionParams._fields:
            shapes.append((f"{module}.{key}", (c, c), c))
    for head in HEADS:
        shapes.append((f"{head}.w1", (c, config.head_hidden), c))
        shapes.append((f"{head}.b1", (config.head_hidden,), 0))
        shapes.append((f"{head}.w2", (config.head_hidden, config.n_classes), config.head_hidden))
        shapes.append((f"{head}.b2", (config.n_classes,), 0))
    return shapes


def init_model(config: ModelConfig, seed: int = 0, layout: LayoutSpec | None = None) -> ModelState:
    """Create a model with fan-in scaled uniform weights, unit norm gains and zero biases.

    >>> state = init_model(ModelConfig.tiny(), seed=1)
    >>> state.params['signal.stem.w'].shape
    (4, 1, 4)
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in _param_shapes(config):
        if fan_in:
            bound = 1.0 / sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return ModelState(config, params, layout or LayoutSpec())


def _norm(state: ModelState, prefix: str, x: Tensor, spatial: int) -> Tensor:
    return channel_norm(x, state.params[f"{prefix}.gain"], state.params[f"{prefix}.bias"], spatial_dims=spatial)


def _extract(state: ModelState, stream: str, x: Tensor) -> Tensor:
    """Residual extractor shared by both streams, `x` is N×1×T for signals and 1×H×W for images."""
    config = state.config
    if stream == "signal":
        conv, spatial = conv1d, 1
        stem_kernel, stem_stride, strides = config.signal_stem_kernel, config.signal_stem_stride, config.signal_strides
    else:
        conv, spatial = conv2d, 2
        stem_kernel, stem_stride, strides = config.image_stem_kernel, config.image_stem_stride, config.image_strides
    p = state.params
    padding = ModelConfig._padding(stem_kernel, stem_stride)
    x = relu(_norm(state, f"{stream}.stem.norm", conv(x, p[f"{stream}.stem.w"], stem_stride, padding), spatial))
    for idx, stride in enumerate(strides, start=1):
        prefix = f"{stream}.stage{idx}"
        h = relu(_norm(state, f"{prefix}.norm1", conv(x, p[f"{prefix}.conv1.w"], stride, 1), spatial))
        h = _norm(state, f"{prefix}.norm2", conv(h, p[f"{prefix}.conv2.w"], 1, 1), spatial)
        if f"{prefix}.proj.w" in p:
            shortcut = _norm(state, f"{prefix}.proj.norm", conv(x, p[f"{prefix}.proj.w"], stride, 0), spatial)
        else:
            shortcut = x
        x = relu(add(h, shortcut))
    return x


def _signal_array(signals: EcgRecord | np.ndarray) -> np.ndarray:
    leads = signals.leads if isinstance(signals, EcgRecord) else np.asarray(signals, dtype=np.float64)
    if leads.ndim != 2 or leads.shape[0] != N_LEADS:
        raise ContractError(f"Signal stream expects 12 leads, got shape {leads.shape}.", shape=list(leads.shape))
    return leads


def signal_stream_forward(state: ModelState, signals: EcgRecord | np.ndarray) -> FeatureMap:
    """Apply the shared 1D extractor to every lead, average the 12 feature maps and pool to L×C tokens.

    :raises ContractError: if the lead count is not 12
    """
    leads = _signal_array(signals)
    x = Tensor(leads.reshape(N_LEADS, 1, leads.shape[1]))
    features = mean_over_axis(_extract(state, "signal", x), 0)
    return adaptive_avg_pool_tokens(features, state.config.tokens)


def _image_array(image: EcgImage | np.ndarray) -> np.ndarray:
    return image.pixels if isinstance(image, EcgImage) else np.asarray(image, dtype=np.float64)


def image_stream_forward(state: ModelState, image: EcgImage | np.ndarray) -> FeatureMap:
    """Apply the 2D extractor to the ink density `1 − pixel` and pool to L×C tokens.

    :raises DimensionError: if the image is smaller than the extractor minimum
    """
    pixels = _image_array(image)
    min_size = state.config.min_image_size()
    if pixels.ndim != 2 or min(pixels.shape) < min_size:
        raise DimensionError(
            f"Image of shape {pixels.shape} is too small, the minimum size is {min_size}x{min_size}.",
            shape=list(pixels.shape),
            min_size=min_size,
        )
    x = Tensor((1.0 - pixels)[None, :, :])
    features = _extract(state, "image", x)
    channels = features.shape[0]
    return adaptive_avg_pool_tokens(reshape(features, (channels, features.size // channels)), state.config.tokens)


def attention_matrix(z: FeatureMap, params: AttentionParams, *, scale_attention: bool = False) -> Tensor:
    """Row-stochastic L×L matrix `softmax(Q·Kᵀ)` with queries and keys projected from `z`."""
    scores = matmul(matmul(z, params.w_q), transpose2d(matmul(z, params.w_k)))
    if scale_attention:
        scores = scale(scores, 1.0 / sqrt(params.w_k.shape[1]))
    return softmax_rows(scores)


def cmam_forward(
    z_m: FeatureMap, z_n: FeatureMap, params: AttentionParams, *, scale_attention: bool = False
) -> FeatureMap:
    """Cross-modal attention `softmax(Q_n·K_nᵀ)·V_m` producing modality m features attended by modality n.

    :raises ContractError: if the token maps differ in shape
    """
    if z_m.shape != z_n.shape:
        raise ContractError(
            f"Cross-modal attention needs equal token maps, got {z_m.shape} and {z_n.shape}.",
            left=list(z_m.shape),
            right=list(z_n.shape),
        )
    return matmul(attention_matrix(z_n, params, scale_attention=scale_attention), matmul(z_m, params.w_v))


def smam_forward(z: FeatureMap, params: AttentionParams, *, scale_attention: bool = False) -> FeatureMap:
    return matmul(attention_matrix(z, params, scale_attention=scale_attention), matmul(z, params.w_v))


def head_forward(z: FeatureMap, params: HeadParams) -> Tensor:
    """Class probabilities `sigmoid(MLP(GAP(z)))`."""
    pooled = reshape(global_avg_pool(transpose2d(z)), (1, z.shape[1]))
    hidden = relu(add(matmul(pooled, params.w1), params.b1))
    logits = add(matmul(hidden, params.w2), params.b2)
    return sigmoid(reshape(logits, (params.b2.shape[0],)))


def _branch(
    state: ModelState, z: FeatureMap, z_other: FeatureMap | None, side: str, *, enable_cmam: bool, enable_smam: bool
) -> Tensor:
    scale_attention = state.config.scale_attention
    if enable_cmam:
        z = cmam_forward(z, z_other, state.attention(f"cmam_{side}"), scale_attention=scale_attention)
    if enable_smam:
        z = smam_forward(z, state.attention(f"smam_{side}"), scale_attention=scale_attention)
    return head_forward(z, state.head(f"head_{side}"))


def forward_train(
    state: ModelState,
    record: EcgRecord | np.ndarray,
    image: EcgImage | np.ndarray,
    *,
    enable_cmam: bool | None = None,
    enable_smam: bool | None = None,
) -> tuple[Tensor, Tensor]:
    """Two-stream pass returning `(p_s, p_i)`, disabled attention modules act as identity.

    Module switches default to the ones stored in `state`.
    """
    modules = _modules(state, enable_cmam, enable_smam)
    z_s = signal_stream_forward(state, record)
    z_i = image_stream_forward(state, image)
    return _branch(state, z_s, z_i, "s", **modules), _branch(state, z_i, z_s, "i", **modules)


def forward_distill(
    state: ModelState,
    record: EcgRecord | np.ndarray,
    image: EcgImage | np.ndarray,
    *,
    enable_cmam: bool | None = None,
    enable_smam: bool | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """`(p_s, p_i, p_i_student)` where `p_i_student` is the image prediction with the signal tokens detached.

    `p_i_student` has the values of `p_i`, but its cross-modal attention reads the signal tokens as constants,
    so a loss on `(detach(p_s), p_i_student)` sends no gradient to any signal-stream parameter. The extractors
    run once.
    """
    modules = _modules(state, enable_cmam, enable_smam)
    z_s = signal_stream_forward(state, record)
    z_i = image_stream_forward(state, image)
    p_s = _branch(state, z_s, z_i, "s", **modules)
    p_i = _branch(state, z_i, z_s, "i", **modules)
    if not modules["enable_cmam"]:
        return p_s, p_i, p_i
    return p_s, p_i, _branch(state, z_i, detach(z_s), "i", **modules)


def forward_infer(state: ModelState, image: EcgImage | np.ndarray, *, enable_smam: bool | None = None) -> Tensor:
    """Image-only prediction, cross-modal attention is bypassed."""
    enable_smam = _modules(state, None, enable_smam)["enable_smam"]
    return _branch(state, image_stream_forward(state, image), None, "i", enable_cmam=False, enable_smam=enable_smam)


def _modules(state: ModelState, enable_cmam: bool | None, enable_smam: bool | None) -> dict[str, bool]:
    return {
        "enable_cmam": state.enable_cmam if enable_cmam is None else enable_cmam,
        "enable_smam": state.enable_smam if enable_smam is None else enable_smam,
    }


def _config_diff(expected: dict[str, Any], actual: dict[str, Any]) -> list[str]:
    return sorted(key for key in expected.keys() | actual.keys() if expected.get(key) != actual.get(key))


def save_model(state: ModelState, path: str | Path, /) -> None:
    config = json.dumps(
        {"model": state.config.json_repr(), "layout": state.layout.json_repr(), "modules": state.modules},
        sort_keys=True,
    )
    config_bytes = config.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(state.params)))
        for _, data in state.iter_arrays():
            f.write(data.astype("<f8").tobytes())


def load_model(path: str | Path, /, expected: ModelConfig | None = None) -> ModelState:
    """Load a checkpoint.

    :param expected: architecture the caller wants, a different stored architecture is an error
    :raises CheckpointError: on wrong magic or version, truncation or architecture mismatch
    """
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"Invalid checkpoint magic {data[:4]!r}, expected {MAGIC!r}.", offset=0)
    if len(data) < 12:
        raise CheckpointError("Checkpoint header is truncated.", expected=12, actual=len(data))
    version, config_length = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {VERSION}.", version=version)
    offset = 12 + config_length
    if len(data) < offset + 4:
        raise CheckpointError("Checkpoint config block is truncated.", expected=offset + 4, actual=len(data))
    try:
        stored = json.loads(data[12:offset].decode("utf-8"))
        config = ModelConfig.from_dict(stored["model"])
        layout = LayoutSpec.from_dict(stored["layout"])
        modules = {key: bool(stored["modules"][key]) for key in ("enable_cmam", "enable_smam")}
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointError(f"Invalid checkpoint config block: {exc}") from exc
    if expected is not None and expected != config:
        diff = _config_diff(expected.json_repr(), config.json_repr())
        raise CheckpointError(
            f"Checkpoint architecture does not match the requested one, differing fields: {', '.join(diff)}.\n\n"
            "Fix: Use the model settings the checkpoint was trained with or retrain the model.",
            fields=diff,
        )
    (n_params,) = struct.unpack_from("<I", data, offset)
    offset += 4
    shapes = _param_shapes(config)
    total = sum(int(np.prod(shape)) for _, shape, _ in shapes)
    if n_params != len(shapes) or len(data) != offset + total * 8:
        raise CheckpointError(
            "Checkpoint parameter block does not match its architecture.",
            expected=offset + total * 8,
            actual=len(data),
            tensors=n_params,
        )
    params = {}
    for name, shape, _ in shapes:
        count = int(np.prod(shape))
        array = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        params[name] = Tensor(array, requires_grad=True, name=name)
        offset += count * 8
    return ModelState(config, params, layout, **modules)
