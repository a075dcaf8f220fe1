"""Fixed random-weight convolutional extractor with per-layer taps."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conv import conv2d, same_output_size, uniform_init
from .errors import BadConfig, FormatError, SizeMismatch
from .fileio import read_bytes, write_bytes

WEIGHTS_MAGIC = b"GPRW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    kernel: int = 3
    stride: int = 2


DEFAULT_LAYERS = tuple(LayerSpec(n) for n in (8, 16, 16, 32, 32))


@dataclass(frozen=True)
class ExtractorConfig:
    layers: tuple[LayerSpec, ...] = DEFAULT_LAYERS
    taps: tuple[int, ...] | None = None  # None taps every layer
    weight_seed: int = 0
    input_height: int = 64
    input_width: int = 32
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        taps = range(len(self.layers)) if self.taps is None else self.taps
        object.__setattr__(self, "taps", tuple(int(t) for t in taps))

    @property
    def tap_indices(self) -> tuple[int, ...]:
        return self.taps

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """(filters, height, width) of every layer output at the declared input size."""
        h, w = self.input_height, self.input_width
        shapes = []
        for spec in self.layers:
            h, w = same_output_size(h, spec.stride), same_output_size(w, spec.stride)
            shapes.append((spec.filters, h, w))
        return shapes

    def tap_shapes(self) -> list[tuple[int, int]]:
        """(N_l, M_l) per tapped layer."""
        shapes = self.layer_shapes()
        return [(shapes[i][0], shapes[i][1] * shapes[i][2]) for i in self.tap_indices]

    def validate(self) -> None:
        if not self.layers:
            raise BadConfig("extractor needs at least one layer")
        if self.input_height < 1 or self.input_width < 1 or self.in_channels < 1:
            raise BadConfig("input size must be positive")
        for i, spec in enumerate(self.layers):
            if spec.filters < 1 or spec.kernel < 1 or spec.stride < 1:
                raise BadConfig(f"layer {i}: every size (filters/kernel/stride) must be >= 1")
        taps = self.tap_indices
        if not taps:
            raise BadConfig("at least one tap is required")
        if len(set(taps)) != len(taps) or any(not 0 <= t < len(self.layers) for t in taps):
            raise BadConfig(f"bad tap indices {taps}")
        for l, (n, m) in zip(taps, self.tap_shapes()):
            if n < 1 or m < 1:
                raise BadConfig(f"layer {l} would produce N={n}, M={m}")


@dataclass(frozen=True)
class FeatureMaps:
    """Activations per tapped layer, each an (N_l, M_l) row-major matrix."""

    layers: tuple[int, ...]
    maps: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.maps[i]

    def shapes(self) -> list[tuple[int, int]]:
        return [m.shape for m in self.maps]


@dataclass(frozen=True, eq=False)
class Extractor:
    config: ExtractorConfig
    kernels: tuple[np.ndarray, ...] = field(repr=False)
    biases: tuple[np.ndarray, ...] = field(repr=False)

    def same_weights(self, other: "Extractor") -> bool:
        return self.config == other.config and all(
            np.array_equal(a, b) for a, b in zip(self.kernels + self.biases, other.kernels + other.biases))

    def forward_batch(self, x: np.ndarray) -> list[np.ndarray]:
        """Tapped activations for a float batch (B, C, H, W); each (B, N_l, M_l)."""
        cfg = self.config
        if x.shape[1:] != (cfg.in_channels, cfg.input_height, cfg.input_width):
            raise SizeMismatch(f"input {x.shape[1:]} != declared "
                               f"{(cfg.in_channels, cfg.input_height, cfg.input_width)}")
        taps = set(cfg.tap_indices)
        out = {}
        for i, (spec, k, b) in enumerate(zip(cfg.layers, self.kernels, self.biases)):
            x, _ = conv2d(x, k, b, spec.stride)
            np.maximum(x, 0.0, out=x)
            if i in taps:
                out[i] = x.reshape(x.shape[0], x.shape[1], -1)
            if i >= max(taps):
                break
        return [out[i] for i in cfg.tap_indices]


def init_extractor(config: ExtractorConfig = ExtractorConfig()) -> Extractor:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, rounded to float32."""
    config.validate()
    rng = np.random.default_rng(config.weight_seed)
    kernels, biases = [], []
    cin = config.in_channels
    for spec in config.layers:
        fan_in = cin * spec.kernel * spec.kernel
        k = uniform_init(rng, (spec.filters, cin, spec.kernel, spec.kernel), fan_in)
        b = uniform_init(rng, (spec.filters,), fan_in)
        # float32-representable so the weights file round-trips bit-exactly
        kernels.append(k.astype(np.float32).astype(np.float64))
        biases.append(b.astype(np.float32).astype(np.float64))
        cin = spec.filters
    return Extractor(config, tuple(kernels), tuple(biases))


def images_to_batch(images: Sequence) -> np.ndarray:
    """Stack :class:`Image` objects into a [0, 1] float batch (B, 3, H, W)."""
    arr = np.stack([im.pixels for im in images]).astype(np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def extract(extractor: Extractor, image) -> FeatureMaps:
    cfg = extractor.config
    if (image.height, image.width) != (cfg.input_height, cfg.input_width):
        raise SizeMismatch(f"image {image.height}x{image.width} != extractor input "
                           f"{cfg.input_height}x{cfg.input_width}")
    maps = extractor.forward_batch(images_to_batch([image]))
    return FeatureMaps(cfg.tap_indices, tuple(m[0] for m in maps))


def extract_batch(extractor: Extractor, images: Sequence) -> list[np.ndarray]:
    cfg = extractor.config
    for im in images:
        if (im.height, im.width) != (cfg.input_height, cfg.input_width):
            raise SizeMismatch(f"image {im.height}x{im.width} != extractor input "
                               f"{cfg.input_height}x{cfg.input_width}")
    return extractor.forward_batch(images_to_batch(images))


def dumps_weights(extractor: Extractor) -> bytes:
    cfg = extractor.config
    taps = cfg.tap_indices
    parts = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION),
             struct.pack("<IIIIIQ", cfg.input_height, cfg.input_width, cfg.in_channels,
                         len(cfg.layers), len(taps), cfg.weight_seed),
             struct.pack(f"<{len(taps)}I", *taps)]
    for spec, k, b in zip(cfg.layers, extractor.kernels, extractor.biases):
        parts.append(struct.pack("<IIIII", spec.filters, k.shape[1], spec.kernel, spec.kernel, spec.stride))
        parts.append(k.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("unexpected end of stream")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.read(4 * count), dtype="<f4").astype(np.float64)


def loads_weights(data: bytes) -> Extractor:
    r = _Reader(data)
    magic = r.read(4)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    height, width, channels, nlayers, ntaps, seed = r.unpack("<IIIIIQ")
    taps = r.unpack(f"<{ntaps}I")
    layers, kernels, biases = [], [], []
    cin = channels
    for i in range(nlayers):
        filters, kin, kh, kw, stride = r.unpack("<IIIII")
        if kin != cin or kh != kw:
            raise FormatError(f"layer {i}: bad kernel shape {(filters, kin, kh, kw)}")
        kernels.append(r.floats(filters * kin * kh * kw).reshape(filters, kin, kh, kw))
        biases.append(r.floats(filters))
        layers.append(LayerSpec(filters, kh, stride))
        cin = filters
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after weights")
    config = ExtractorConfig(tuple(layers), tuple(taps), seed, height, width, channels)
    try:
        config.validate()
    except BadConfig as err:
        raise FormatError(f"bad shape header: {err}") from None
    return Extractor(config, tuple(kernels), tuple(biases))


def persist_weights(extractor: Extractor, path) -> None:
    write_bytes(path, dumps_weights(extractor))


def load_weights(path) -> Extractor:
    return loads_weights(read_bytes(path))
