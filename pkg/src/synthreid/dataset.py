"""Factorial attribute space, manifest generation, slicing and persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import BadConfig, EmptyAttributeSet, FormatError
from .fileio import read_text, write_text

DIMENSIONS = ("background", "weather", "illumination", "viewpoint")

MANIFEST_HEADER = "gpr-manifest v1"
CONFIG_PREFIX = "# config "

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class AttributeSchema:
    backgrounds: tuple[str, ...]
    weathers: tuple[str, ...]
    illumination_bands: tuple[str, ...]
    viewpoints: tuple[int, ...]

    def __post_init__(self):
        expected = {"backgrounds": 9, "weathers": 7, "illumination_bands": 8, "viewpoints": 12}
        for name, n in expected.items():
            values = getattr(self, name)
            if len(values) != n:
                raise BadConfig(f"{name}: expected {n} values, got {len(values)}")
            if len(set(values)) != len(values):
                raise BadConfig(f"{name}: labels must be unique")
        for angle in self.viewpoints:
            if angle % 30 or not 0 <= angle <= 330:
                raise BadConfig(f"viewpoint {angle} is not a multiple of 30 in [0, 330]")

    def values(self, dimension: str) -> tuple:
        try:
            attr = {
                "background": "backgrounds",
                "weather": "weathers",
                "illumination": "illumination_bands",
                "viewpoint": "viewpoints",
            }[dimension]
        except KeyError:
            raise BadConfig(f"unknown attribute dimension {dimension!r}") from None
        return getattr(self, attr)

    def cardinality(self, dimension: str) -> int:
        return len(self.values(dimension))

    def combinations(self) -> int:
        return int(np.prod([self.cardinality(d) for d in DIMENSIONS]))

    def index(self, dimension: str, value) -> int:
        values = self.values(dimension)
        if dimension == "viewpoint":
            value = parse_viewpoint(value)
        try:
            return values.index(value)
        except ValueError:
            raise BadConfig(f"{dimension}: unknown value {value!r}") from None

    def indices(self, dimension: str, values: Iterable) -> tuple[int, ...]:
        """Schema indices of ``values``, deduplicated and in schema order."""
        return tuple(sorted({self.index(dimension, v) for v in values}))


def parse_viewpoint(value) -> int:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    text = str(value).strip().rstrip("°")
    try:
        return int(text)
    except ValueError:
        raise BadConfig(f"viewpoint: not an angle: {value!r}") from None


def default_schema() -> AttributeSchema:
    return AttributeSchema(
        backgrounds=tuple(f"#{i}" for i in range(1, 10)),
        weathers=("clear", "clouds", "overcast", "foggy", "neutral", "rainy", "blizzard"),
        illumination_bands=tuple(f"{h:02d}~{h + 3:02d}" for h in range(0, 24, 3)),
        viewpoints=tuple(range(0, 360, 30)),
    )


SCHEMA = default_schema()


def illumination_range(start_hour: int, end_hour: int) -> tuple[str, ...]:
    """Bands covering ``start_hour~end_hour``, e.g. (6, 18) -> four bands."""
    if start_hour % 3 or end_hour % 3 or not 0 <= start_hour < end_hour <= 24:
        raise BadConfig(f"illumination range {start_hour}~{end_hour} is not band aligned")
    return tuple(f"{h:02d}~{h + 3:02d}" for h in range(start_hour, end_hour, 3))


@dataclass(frozen=True)
class GeneratorConfig:
    num_identities: int
    backgrounds: tuple[str, ...] = SCHEMA.backgrounds
    weathers: tuple[str, ...] = SCHEMA.weathers
    illuminations: tuple[str, ...] = SCHEMA.illumination_bands
    viewpoints: tuple[int, ...] = SCHEMA.viewpoints
    image_width: int = 32
    image_height: int = 64
    master_seed: int = 0

    def selected(self, dimension: str) -> tuple:
        return {
            "background": self.backgrounds,
            "weather": self.weathers,
            "illumination": self.illuminations,
            "viewpoint": self.viewpoints,
        }[dimension]

    def with_selected(self, dimension: str, values: tuple) -> "GeneratorConfig":
        name = {"background": "backgrounds", "weather": "weathers",
                "illumination": "illuminations", "viewpoint": "viewpoints"}[dimension]
        return replace(self, **{name: tuple(values)})

    def validate(self, schema: AttributeSchema = SCHEMA, allow_empty: bool = False) -> None:
        if self.num_identities < 1 and not allow_empty:
            raise BadConfig("num_identities must be >= 1")
        if self.image_width < 16 or self.image_height < 16:
            raise BadConfig("image width and height must be >= 16")
        if not 0 <= self.master_seed <= _MASK64:
            raise BadConfig("master_seed must fit in 64 bits")
        for dim in DIMENSIONS:
            values = self.selected(dim)
            if not values and not allow_empty:
                raise EmptyAttributeSet(f"no {dim} values selected")
            schema.indices(dim, values)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key in ("backgrounds", "weathers", "illuminations", "viewpoints"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown generator config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("backgrounds", "weathers", "illuminations"):
            if key in kwargs:
                kwargs[key] = tuple(str(v) for v in kwargs[key])
        if "viewpoints" in kwargs:
            kwargs["viewpoints"] = tuple(parse_viewpoint(v) for v in kwargs["viewpoints"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ImageRecord:
    identity_id: int
    background: str
    weather: str
    illumination: str
    viewpoint: int
    camera_id: int
    render_seed: int

    def key(self) -> tuple:
        return (self.identity_id, self.background, self.weather, self.illumination, self.viewpoint)


def camera_for_background(background_index: int) -> int:
    """Camera ids are the 1-based background number (#6 -> camera 6)."""
    return int(background_index) + 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def record_seeds(master_seed: int, identity: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Render seeds as a pure function of the master seed and the record key.

    ``codes`` holds schema indices, so a record keeps its seed when the
    manifest around it is sliced or generated with a narrower selection.
    """
    identity = np.asarray(identity, dtype=np.uint64)
    codes = np.asarray(codes, dtype=np.uint64).reshape(-1, len(DIMENSIONS))
    key = identity
    with np.errstate(over="ignore"):
        for dim, col in zip(DIMENSIONS, codes.T):
            key = key * np.uint64(SCHEMA.cardinality(dim)) + col
    base = _splitmix64(np.array([master_seed], dtype=np.uint64))
    return _splitmix64(base ^ _splitmix64(key))


class DatasetManifest:
    """Immutable column store of image records.

    Records are kept as numpy columns so million-record manifests stay cheap;
    ``records`` / iteration materialise :class:`ImageRecord` objects on demand.
    """

    def __init__(self, schema: AttributeSchema, generator_config: GeneratorConfig,
                 identity: np.ndarray, codes: np.ndarray, render_seed: np.ndarray):
        self.schema = schema
        self.generator_config = generator_config
        self.identity = np.ascontiguousarray(identity, dtype=np.int64)
        self.codes = np.ascontiguousarray(codes, dtype=np.int16).reshape(-1, len(DIMENSIONS))
        self.render_seed = np.ascontiguousarray(render_seed, dtype=np.uint64)
        if not (len(self.identity) == len(self.codes) == len(self.render_seed)):
            raise BadConfig("manifest columns have different lengths")
        for arr in (self.identity, self.codes, self.render_seed):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.identity)

    def column(self, dimension: str) -> np.ndarray:
        return self.codes[:, DIMENSIONS.index(dimension)]

    @property
    def camera(self) -> np.ndarray:
        return self.column("background").astype(np.int64) + 1

    def record(self, i: int) -> ImageRecord:
        bg, w, il, v = (int(c) for c in self.codes[i])
        s = self.schema
        return ImageRecord(
            identity_id=int(self.identity[i]),
            background=s.backgrounds[bg],
            weather=s.weathers[w],
            illumination=s.illumination_bands[il],
            viewpoint=s.viewpoints[v],
            camera_id=camera_for_background(bg),
            render_seed=int(self.render_seed[i]),
        )

    def __getitem__(self, i: int) -> ImageRecord:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        return self.record(i % len(self))

    def __iter__(self) -> Iterator[ImageRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def records(self) -> list[ImageRecord]:
        return list(self)

    def identities(self) -> np.ndarray:
        """Distinct identity ids in order of first appearance."""
        _, first = np.unique(self.identity, return_index=True)
        return self.identity[np.sort(first)]

    def take(self, index: np.ndarray, generator_config: GeneratorConfig | None = None) -> "DatasetManifest":
        return DatasetManifest(self.schema, generator_config or self.generator_config,
                               self.identity[index], self.codes[index], self.render_seed[index])

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.schema == other.schema
                and self.generator_config == other.generator_config
                and np.array_equal(self.identity, other.identity)
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.render_seed, other.render_seed))

    def __repr__(self) -> str:
        return f"DatasetManifest({len(self)} records, {len(self.identities())} identities)"


def generate_manifest(config: GeneratorConfig, schema: AttributeSchema = SCHEMA) -> DatasetManifest:
    config.validate(schema)
    axes = [np.arange(config.num_identities, dtype=np.int64)]
    axes += [np.array(schema.indices(d, config.selected(d)), dtype=np.int64) for d in DIMENSIONS]
    grids = np.meshgrid(*axes, indexing="ij")
    identity = grids[0].ravel()
    codes = np.stack([g.ravel() for g in grids[1:]], axis=1)
    seeds = record_seeds(config.master_seed, identity, codes)
    # normalise the stored selection to schema order so equal selections compare equal
    for d in DIMENSIONS:
        config = config.with_selected(d, tuple(schema.values(d)[i] for i in schema.indices(d, config.selected(d))))
    return DatasetManifest(schema, config, identity, codes, seeds)


Filter = Mapping[str, Iterable]


def slice_manifest(manifest: DatasetManifest, filter: Filter | None = None,
                   id_limit: int | None = None) -> DatasetManifest:
    """Records matching every per-dimension value set, order preserved.

    ``id_limit`` keeps the first ``id_limit`` identities in manifest order.
    """
    schema = manifest.schema
    mask = np.ones(len(manifest), dtype=bool)
    config = manifest.generator_config
    for dim, values in (filter or {}).items():
        values = list(values)
        if not values:
            raise EmptyAttributeSet(f"filter for {dim} is empty")
        wanted = schema.indices(dim, values)
        mask &= np.isin(manifest.column(dim), wanted)
        kept = set(wanted)
        current = schema.indices(dim, config.selected(dim))
        config = config.with_selected(dim, tuple(schema.values(dim)[i] for i in current if i in kept))
    if id_limit is not None:
        ids = manifest.identities()
        if id_limit < 0 or id_limit > len(ids):
            raise BadConfig(f"id_limit {id_limit} exceeds {len(ids)} identities")
        mask &= np.isin(manifest.identity, ids[:id_limit])
        config = replace(config, num_identities=min(config.num_identities, id_limit))
    return manifest.take(np.flatnonzero(mask), config)


def _record_line(schema: AttributeSchema, identity: int, codes: Sequence[int], seed: int) -> str:
    bg, w, il, v = codes
    return (f"{identity},{schema.backgrounds[bg]},{schema.weathers[w]},"
            f"{schema.illumination_bands[il]},{schema.viewpoints[v]},"
            f"{camera_for_background(bg)},{seed}")


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = [MANIFEST_HEADER,
             CONFIG_PREFIX + json.dumps(manifest.generator_config.to_dict(), sort_keys=True,
                                        separators=(",", ":"))]
    schema = manifest.schema
    for identity, codes, seed in zip(manifest.identity.tolist(), manifest.codes.tolist(),
                                     manifest.render_seed.tolist()):
        lines.append(_record_line(schema, identity, codes, seed))
    return "\n".join(lines) + "\n"


def persist_manifest(manifest: DatasetManifest, path) -> None:
    write_text(path, dumps_manifest(manifest))


_FIELDS = ("identity", "background", "weather", "illumination", "viewpoint", "camera", "render_seed")


def loads_manifest(text: str, schema: AttributeSchema = SCHEMA) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise FormatError("line 1: missing header")
    if lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"line 1: bad header {lines[0]!r}, expected {MANIFEST_HEADER!r}")
    if len(lines) < 2 or not lines[1].startswith(CONFIG_PREFIX):
        raise FormatError("line 2: missing config")
    try:
        config = GeneratorConfig.from_dict(json.loads(lines[1][len(CONFIG_PREFIX):]))
        config.validate(schema, allow_empty=True)
    except (ValueError, TypeError) as err:
        raise FormatError(f"line 2: field 'config': {err}") from None

    lookups = {d: {str(v): i for i, v in enumerate(schema.values(d))} for d in DIMENSIONS}
    identity, codes, seeds = [], [], []
    seen = set()
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(_FIELDS):
            raise FormatError(f"line {lineno}: expected {len(_FIELDS)} fields, got {len(parts)}")
        try:
            ident = int(parts[0])
        except ValueError:
            raise FormatError(f"line {lineno}: field 'identity': not an integer: {parts[0]!r}") from None
        if ident < 0:
            raise FormatError(f"line {lineno}: field 'identity': negative id {ident}")
        row = []
        for dim, token in zip(DIMENSIONS, parts[1:5]):
            try:
                row.append(lookups[dim][token])
            except KeyError:
                raise FormatError(f"line {lineno}: field {dim!r}: unknown label {token!r}") from None
        if parts[5] != str(camera_for_background(row[0])):
            raise FormatError(f"line {lineno}: field 'camera': {parts[5]!r} does not match background {parts[1]}")
        try:
            seed = int(parts[6])
        except ValueError:
            raise FormatError(f"line {lineno}: field 'render_seed': not an integer: {parts[6]!r}") from None
        if not 0 <= seed <= _MASK64:
            raise FormatError(f"line {lineno}: field 'render_seed': out of 64-bit range")
        key = (ident, *row)
        if key in seen:
            raise FormatError(f"line {lineno}: duplicate record key {line!r}")
        seen.add(key)
        identity.append(ident)
        codes.append(row)
        seeds.append(seed)
    return DatasetManifest(schema, config, np.array(identity, dtype=np.int64),
                           np.array(codes, dtype=np.int16).reshape(-1, len(DIMENSIONS)),
                           np.array(seeds, dtype=np.uint64))


def load_manifest(path, schema: AttributeSchema = SCHEMA) -> DatasetManifest:
    try:
        text = read_text(path)
    except UnicodeDecodeError as err:
        raise FormatError(f"not UTF-8: {err}") from None
    return loads_manifest(text, schema)
