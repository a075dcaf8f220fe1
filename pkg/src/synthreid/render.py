"""Procedural stand-in renderer.

Every attribute maps to a deterministic pixel effect:

* background   -> a textured scene with its own pattern, orientation, scale and hues
* weather      -> an overlay (shadows, haze, streaks, speckles, colour casts)
* illumination -> a brightness curve peaking at noon plus a colour temperature
* viewpoint    -> yaw-like squash/shear of the person glyph and front/back cues
* identity     -> the glyph palette (drawn from the master seed)

The scene layers depend on attribute values only; ``render_seed`` drives the
small per-record jitter of the glyph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dataset import SCHEMA, GeneratorConfig, ImageRecord
from .errors import FormatError
from .fileio import read_bytes, write_bytes


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major 8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixel buffer must be uint8 ({self.height}, {self.width}, 3)")

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.pixels, other.pixels)

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


def write_ppm(image: Image, path) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    write_bytes(path, header + image.tobytes())


def read_ppm(path) -> Image:
    data = read_bytes(path)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("unexpected end of stream in PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError("only binary 8-bit PPM (P6, maxval 255) is supported")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise FormatError(f"bad PPM size {tokens[1]!r} x {tokens[2]!r}") from None
    body = data[pos:pos + width * height * 3]
    if len(body) != width * height * 3:
        raise FormatError("unexpected end of stream in PPM pixels")
    return Image(width, height, np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy())


# background: (pattern, orientation deg, cycles per image height, mean hue, modulation hue)
# factors are assigned by independent permutations so no two scenes share any of them
_BACKGROUNDS = (
    ("stripes", 0.0, 5.0, 0.60, 0.10),
    ("blobs", 100.0, 3.0, 0.30, 0.85),
    ("bricks", 0.0, 8.0, 0.05, 0.55),
    ("checker", 60.0, 4.0, 0.12, 0.35),
    ("stripes", 140.0, 9.0, 0.55, 0.20),
    ("grid", 20.0, 6.0, 0.95, 0.65),
    ("waves", 80.0, 7.0, 0.45, 0.00),
    ("dots", 40.0, 10.0, 0.80, 0.45),
    ("rings", 120.0, 3.5, 0.20, 0.75),
)
_BACKGROUND_LUMA = 0.5
_BACKGROUND_CONTRAST = 0.16  # pixel std of every background texture
_BACKGROUND_CHROMA = 0.10

# illumination: colour temperature multipliers per three-hour band
_TINTS = (
    (0.75, 0.85, 1.40),
    (0.85, 0.92, 1.20),
    (1.25, 1.00, 0.70),
    (1.06, 1.00, 0.90),
    (0.94, 1.00, 1.10),
    (1.35, 0.95, 0.62),
    (1.30, 0.82, 0.95),
    (0.80, 0.80, 1.30),
)

_LUMA = np.array([0.299, 0.587, 0.114])
_FOG = np.array([0.60, 0.62, 0.64])
BRIGHTNESS_SLOPE = 0.035


def band_midpoint(band: str) -> float:
    start, end = (int(t) for t in band.split("~"))
    return (start + end) / 2.0


def band_brightness(band: str) -> float:
    """Brightness factor, decreasing linearly with distance from noon."""
    return 1.0 - BRIGHTNESS_SLOPE * abs(band_midpoint(band) - 12.0)


def _grid(height: int, width: int, dy: float = 0.0, dx: float = 0.0):
    """Pixel-centre coordinates in image-height units, optionally shifted."""
    y = (np.arange(height) + 0.5) / height + dy
    x = (np.arange(width) + 0.5) / height + dx
    return np.meshgrid(y, x, indexing="ij")


def _scene_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([0x5CE7E, *key])


def _hue_direction(hue: float) -> np.ndarray:
    """Unit-norm, zero-luma colour direction at ``hue`` (fraction of a turn)."""
    c = _hsv(hue, 1.0, 1.0)
    c = c - (c @ _LUMA)
    return c / np.linalg.norm(c)


def _pattern(kind: str, yy: np.ndarray, xx: np.ndarray, angle: float, freq: float) -> np.ndarray:
    theta = math.radians(angle)
    a = yy * math.cos(theta) + xx * math.sin(theta)
    b = -yy * math.sin(theta) + xx * math.cos(theta)
    if kind == "stripes":
        return np.sin(2 * np.pi * freq * a)
    if kind == "checker":
        return ((np.floor(a * freq) + np.floor(b * freq)) % 2).astype(float)
    if kind == "bricks":
        row = np.floor(a * freq)
        col = b * freq / 2 + 0.5 * (row % 2)
        return ((a * freq % 1 < 0.18) | (col % 1 < 0.1)).astype(float)
    if kind == "grid":
        return (((a * freq) % 1 < 0.2) | ((b * freq) % 1 < 0.2)).astype(float)
    if kind == "dots":
        return ((((a * freq) % 1 - 0.5) ** 2 + ((b * freq) % 1 - 0.5) ** 2) < 0.07).astype(float)
    if kind == "waves":
        return np.sin(2 * np.pi * freq * (a + 0.08 * np.sin(2 * np.pi * 2.0 * b)))
    if kind == "rings":
        return np.sin(2 * np.pi * freq * np.hypot(a - 0.5, b - 0.25))
    # blobs
    return (np.sin(2 * np.pi * freq * a + 1.3) * np.sin(2 * np.pi * freq * 1.7 * b)
            + np.sin(2 * np.pi * freq * 1.9 * (a + b)))


def _background_layer(bg: int, scene: tuple, height: int, width: int) -> np.ndarray:
    kind, angle, freq, hue_mean, hue_mod = _BACKGROUNDS[bg]
    rng = _scene_rng(1, *scene, height, width)
    # capture-to-capture camera jitter: the texture phase depends on the scene, not the person
    yy, xx = _grid(height, width, *rng.uniform(0, 1, size=2))
    t = _pattern(kind, yy, xx, angle, freq)
    t = (t - t.mean()) / max(t.std(), 1e-6)
    mean = _BACKGROUND_LUMA + _BACKGROUND_CHROMA * _hue_direction(hue_mean)
    # modulation mixes luminance with a scene-specific chroma axis
    axis = 0.8 * np.ones(3) + 0.6 * _hue_direction(hue_mod)
    img = mean + _BACKGROUND_CONTRAST * t[..., None] * axis
    return img + _scene_rng(2, bg, height, width).normal(0, 0.02, size=(height, width, 1))


def _apply_weather(img: np.ndarray, weather: int, scene: tuple) -> np.ndarray:
    """Weather as a structured overlay; each keeps the image energy roughly unchanged."""
    name = SCHEMA.weathers[weather]
    h, w, _ = img.shape
    if name == "clear":
        return img
    rng = _scene_rng(3, *scene, h, w)
    yy, xx = _grid(h, w, *rng.uniform(0, 1, size=2))
    if name == "clouds":  # drifting soft shadows, mean one
        shade = np.sin(2 * np.pi * 1.3 * yy) * np.cos(2 * np.pi * 2.2 * xx)
        return img * (1.0 + 0.3 * shade)[..., None]
    if name == "rainy":  # thin diagonal streaks, zero mean
        f = ((((yy * 3.0 - xx * 9.0) * 6.0) % 1.0 < 0.15) & (rng.random((h, w)) < 0.75)).astype(float)
        return img + (0.3 * (f - f.mean()))[..., None]
    if name == "blizzard":  # bright speckles, zero mean
        f = (rng.random((h, w)) < 0.15).astype(float)
        return img + (0.3 * (f - f.mean()))[..., None]
    # sky effects follow the frame geometry, not the texture jitter
    sky = ((np.arange(h) + 0.5) / h)[:, None, None]
    if name == "overcast":  # washed-out colour under a grey-blue sky gradient
        gray = (img @ _LUMA)[..., None]
        out = 0.5 * img + 0.5 * gray
        return out + 0.12 * (0.5 - sky) * np.array([0.9, 1.0, 1.2])
    if name == "foggy":  # haze thickening with distance (towards the top)
        haze = 0.55 - 0.35 * sky
        return img * (1 - haze) + haze * _FOG
    # neutral: a warm cast with faint horizontal heat shimmer
    cast = np.array([1.08, 1.0, 0.86])
    shimmer = 0.04 * np.sin(2 * np.pi * 14.0 * yy)
    return img * (cast / (cast @ _LUMA)) + shimmer[..., None]


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


_SKINS = ((0.96, 0.80, 0.69), (0.87, 0.68, 0.53), (0.70, 0.50, 0.36), (0.45, 0.30, 0.20))


@dataclass(frozen=True)
class Palette:
    shirt: tuple
    pants: tuple
    skin: tuple
    hair: tuple
    accent: tuple
    stripes: int
    build: float


@lru_cache(maxsize=4096)
def identity_palette(master_seed: int, identity: int) -> Palette:
    rng = np.random.default_rng([master_seed & 0xFFFFFFFF, master_seed >> 32, identity, 0x1D])
    shirt = _hsv(rng.random(), rng.uniform(0.45, 1.0), rng.uniform(0.45, 1.0))
    pants = _hsv(rng.random(), rng.uniform(0.2, 0.9), rng.uniform(0.15, 0.8))
    hair = _hsv(rng.uniform(0.0, 0.15), rng.uniform(0.3, 0.8), rng.uniform(0.08, 0.5))
    accent = _hsv(rng.random(), rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.0))
    return Palette(
        shirt=tuple(shirt), pants=tuple(pants), skin=_SKINS[int(rng.integers(len(_SKINS)))],
        hair=tuple(hair), accent=tuple(accent), stripes=int(rng.integers(0, 4)),
        build=float(rng.uniform(0.85, 1.15)),
    )


# gait pose captured at each viewpoint: (left arm, right arm, left leg, right leg) degrees
_POSES = (
    (30, -25, 18, -20), (-40, 15, -25, 15), (5, 45, 28, -5), (-20, -45, -10, 30),
    (45, 35, -22, -25), (-35, 0, 12, 28), (15, -50, -28, 10), (-5, 25, 30, 18),
    (50, -15, 0, -30), (-25, -35, 22, -15), (20, 50, -15, 0), (-50, -5, 5, 28),
)


def _segment(uu, vv, u0, v0, angle_deg, length, half_width):
    a = math.radians(angle_deg)
    du, dv = math.sin(a), math.cos(a)
    pu, pv = uu - u0, vv - v0
    along = pu * du + pv * dv
    across = np.abs(pu * dv - pv * du)
    return (along >= 0) & (along <= length) & (across <= half_width)


def _draw_glyph(img: np.ndarray, palette: Palette, viewpoint: int, rng: np.random.Generator) -> None:
    h, w, _ = img.shape
    yy, xx = _grid(h, w)
    theta = math.radians(viewpoint)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx = w / (2 * h) + rng.uniform(-0.02, 0.02)
    top = 0.08 + rng.uniform(-0.015, 0.015)
    span = 0.86 + rng.uniform(-0.02, 0.0)
    squash = (0.6 + 0.4 * abs(cos_t)) * palette.build
    lean = 0.10 * sin_t

    v = (yy - top) / span
    u = (xx - cx - lean * (v - 0.5)) / squash
    pose = _POSES[SCHEMA.viewpoints.index(viewpoint)]

    head = (u / 0.07) ** 2 + ((v - 0.085) / 0.08) ** 2 <= 1
    torso = (v >= 0.17) & (v < 0.56) & (np.abs(u) <= 0.12 - 0.02 * (v - 0.17))
    arm_l = _segment(u, v, -0.13, 0.19, pose[0], 0.34, 0.032)
    arm_r = _segment(u, v, 0.13, 0.19, pose[1], 0.34, 0.032)
    leg_l = _segment(u, v, -0.055, 0.55, pose[2], 0.44, 0.05)
    leg_r = _segment(u, v, 0.055, 0.55, pose[3], 0.44, 0.05)

    shirt = np.asarray(palette.shirt)
    img[arm_l | arm_r] = 0.8 * shirt
    img[leg_l | leg_r] = palette.pants
    if palette.stripes:
        band = (np.floor((v - 0.17) * 12 * palette.stripes) % 2 == 1)[..., None]
        shirt_px = np.where(band, np.asarray(palette.accent), shirt)
        img[torso] = shirt_px[torso]
    else:
        img[torso] = shirt

    # head: face for frontal views, hair for rear views, split for profiles
    hair_cap = head & (v < 0.06)
    if cos_t < -0.2:
        hair_cap = head
    elif cos_t <= 0.2:
        hair_cap = head & ((u * np.sign(sin_t)) < 0)
    img[head] = palette.skin
    img[hair_cap] = palette.hair

    if cos_t < -0.2:  # backpack
        img[(v >= 0.20) & (v < 0.47) & (np.abs(u) <= 0.09)] = (0.16, 0.13, 0.10)
    elif cos_t > 0.2:  # collar and belt seen from the front
        img[(v >= 0.17) & (v < 0.21) & (np.abs(u) <= 0.04)] = palette.skin
        img[(v >= 0.53) & (v < 0.56) & (np.abs(u) <= 0.11)] = (0.12, 0.10, 0.08)

    body = head | torso | arm_l | arm_r | leg_l | leg_r
    img[body] += rng.normal(0, 0.015, size=(int(body.sum()), 3))


def render_image(record: ImageRecord, config: GeneratorConfig) -> Image:
    h, w = config.image_height, config.image_width
    bg = SCHEMA.index("background", record.background)
    weather = SCHEMA.index("weather", record.weather)
    band = SCHEMA.index("illumination", record.illumination)
    view = SCHEMA.index("viewpoint", record.viewpoint)
    scene = (bg, weather, band, view)
    img = _background_layer(bg, scene, h, w)
    rng = np.random.default_rng(record.render_seed)
    _draw_glyph(img, identity_palette(config.master_seed, record.identity_id), record.viewpoint, rng)
    img = _apply_weather(img, weather, scene)
    tint = np.asarray(_TINTS[band])
    tint = tint / (tint @ _LUMA)
    img = img * (band_brightness(record.illumination) * tint)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return Image(w, h, pixels)
