"""Small embedding network trained with ID (cross-entropy) and batch-hard triplet losses."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conv import conv2d, conv2d_backward, uniform_init
from .errors import BadConfig, BadLabel, DegenerateBatch, FormatError, NonFiniteLoss, SizeMismatch
from .fileio import read_bytes, write_bytes

MODEL_MAGIC = b"GPRM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_identities: int
    embedding_dim: int = 64
    channels: tuple[int, ...] = (16, 32, 32, 64)
    input_height: int = 128
    input_width: int = 64
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def validate(self) -> None:
        if self.embedding_dim < 2:
            raise BadConfig(f"embedding dimension must be >= 2, got {self.embedding_dim}")
        if self.num_identities < 2:
            raise BadConfig(f"need at least 2 identities, got {self.num_identities}")
        if not self.channels or any(c < 1 for c in self.channels):
            raise BadConfig(f"bad trunk channels {self.channels}")
        if self.input_height < 1 or self.input_width < 1:
            raise BadConfig("input size must be positive")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        cin = 3
        for i, c in enumerate(self.channels):
            shapes.append((f"conv{i}.w", (c, cin, 3, 3)))
            shapes.append((f"bn{i}.gamma", (c,)))
            shapes.append((f"bn{i}.beta", (c,)))
            cin = c
        shapes += [("embed.w", (self.embedding_dim, cin)), ("embed.b", (self.embedding_dim,)),
                   ("cls.w", (self.num_identities, self.embedding_dim)),
                   ("cls.b", (self.num_identities,))]
        return shapes

    def buffer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Batch-norm running statistics: state, but not trained by SGD."""
        out = []
        for i, c in enumerate(self.channels):
            out += [(f"bn{i}.mean", (c,)), (f"bn{i}.var", (c,))]
        return out


@dataclass(eq=False)
class EmbeddingModel:
    """Conv trunk (3x3, stride 2, batch norm, ReLU) -> global average pool -> embedding -> classifier."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)
    buffers: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.config, {k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()})

    def same_weights(self, other: "EmbeddingModel") -> bool:
        mine, theirs = {**self.params, **self.buffers}, {**other.params, **other.buffers}
        return self.config == other.config and all(
            np.array_equal(v, theirs[k]) for k, v in mine.items())


def init_model(config: ModelConfig) -> EmbeddingModel:
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for name, shape in config.param_shapes():
        if name.startswith("conv"):
            # He-uniform bound sqrt(6 / fan_in) for the ReLU trunk
            params[name] = uniform_init(rng, shape, int(np.prod(shape[1:]))) * math.sqrt(6.0)
        elif name.endswith(".w"):
            params[name] = uniform_init(rng, shape, shape[1])
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {name: (np.ones(shape) if name.endswith(".var") else np.zeros(shape))
               for name, shape in config.buffer_shapes()}
    return EmbeddingModel(config, params, buffers)


BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def forward_batch(model: EmbeddingModel, x: np.ndarray, train_mode: bool = False):
    """Return (embeddings (B, D), logits (B, P_s), cache) for a batch (B, 3, H, W).

    In train mode batch norm uses batch statistics and the running statistics are
    updated in place; otherwise the running statistics are used.
    """
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != (3, cfg.input_height, cfg.input_width):
        raise SizeMismatch(f"input {x.shape[1:]} != model input {(3, cfg.input_height, cfg.input_width)}")
    p, buf = model.params, model.buffers
    caches = []
    h = x
    for i, c in enumerate(cfg.channels):
        h, conv_cache = conv2d(h, p[f"conv{i}.w"], np.zeros(c), 2)
        if train_mode:
            mu = h.mean(axis=(0, 2, 3))
            var = h.var(axis=(0, 2, 3))
            n = h.shape[0] * h.shape[2] * h.shape[3]
            buf[f"bn{i}.mean"] = (1 - BN_MOMENTUM) * buf[f"bn{i}.mean"] + BN_MOMENTUM * mu
            buf[f"bn{i}.var"] = ((1 - BN_MOMENTUM) * buf[f"bn{i}.var"]
                                 + BN_MOMENTUM * var * n / max(n - 1, 1))
        else:
            mu, var = buf[f"bn{i}.mean"], buf[f"bn{i}.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (h - mu[:, None, None]) * inv_std[:, None, None]
        h = np.maximum(xhat * p[f"bn{i}.gamma"][:, None, None] + p[f"bn{i}.beta"][:, None, None], 0.0)
        caches.append((conv_cache, xhat, inv_std, h))
    pooled = h.mean(axis=(2, 3))
    emb = pooled @ p["embed.w"].T + p["embed.b"]
    logits = emb @ p["cls.w"].T + p["cls.b"]
    return emb, logits, (caches, pooled, emb, train_mode)


def backward_batch(model: EmbeddingModel, cache, grad_emb: np.ndarray, grad_logits: np.ndarray):
    """Parameter gradients given upstream gradients on embeddings and logits."""
    p = model.params
    caches, pooled, emb, train_mode = cache
    grads = {"cls.w": grad_logits.T @ emb, "cls.b": grad_logits.sum(axis=0)}
    g_emb = grad_emb + grad_logits @ p["cls.w"]
    grads["embed.w"] = g_emb.T @ pooled
    grads["embed.b"] = g_emb.sum(axis=0)
    g_pool = g_emb @ p["embed.w"]
    last = caches[-1][3]
    g = np.broadcast_to(g_pool[:, :, None, None] / (last.shape[2] * last.shape[3]), last.shape)
    for i in reversed(range(len(caches))):
        conv_cache, xhat, inv_std, out = caches[i]
        g = np.where(out > 0.0, g, 0.0)
        grads[f"bn{i}.gamma"] = (g * xhat).sum(axis=(0, 2, 3))
        grads[f"bn{i}.beta"] = g.sum(axis=(0, 2, 3))
        g_hat = g * p[f"bn{i}.gamma"][:, None, None]
        if train_mode:
            g_hat = g_hat - g_hat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (
                g_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        g = g_hat * inv_std[:, None, None]
        g, gw, _ = conv2d_backward(g, conv_cache)
        grads[f"conv{i}.w"] = gw
    return grads


def forward(model: EmbeddingModel, tensor: np.ndarray):
    """Single (3, H, W) tensor -> (D-vector, P_s logits)."""
    emb, logits, _ = forward_batch(model, np.asarray(tensor, dtype=np.float64)[None])
    return emb[0], logits[0]


def embed(model: EmbeddingModel, tensors: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [forward_batch(model, tensors[s:s + batch])[0] for s in range(0, len(tensors), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.config.embedding_dim))


# -- losses -------------------------------------------------------------------------------

def id_loss(logits: np.ndarray, label: int):
    """Cross-entropy ``-log softmax(logits)[label]`` and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise BadLabel(f"label {label} outside [0, {logits.shape[-1]})")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return float(max(loss, 0.0)), grad


def batch_id_loss(logits: np.ndarray, labels: Sequence[int]):
    """Mean cross-entropy over a batch; gradient already divided by the batch size."""
    b = len(labels)
    total, grad = 0.0, np.empty_like(logits, dtype=np.float64)
    for i, y in enumerate(labels):
        loss, grad[i] = id_loss(logits[i], int(y))
        total += loss
    return total / b, grad / b


def batch_hard_triplet(embeddings: np.ndarray, labels: Sequence, margin: float = 0.3):
    """Mean over anchors of ``max(0, m + max_p d(a,p) - min_n d(a,n))`` with Euclidean d.

    Ties in the hardest positive or negative go to the earliest batch index. The
    gradient of ``d`` at zero distance is taken as zero.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    flat = x.ndim == 1
    if flat:
        x = x[:, None]
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise DegenerateBatch("batch-hard triplet needs at least two identities")
    if counts.min() < 2:
        raise DegenerateBatch(f"label {uniq[counts.argmin()]!r} has a single instance")
    b = len(x)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    hardest_p = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hardest_n = np.argmin(np.where(same, np.inf, dist), axis=1)
    rows = np.arange(b)
    hinge = margin + dist[rows, hardest_p] - dist[rows, hardest_n]
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())
    grad = np.zeros_like(x)
    for a in np.flatnonzero(active):
        for j, sign in ((hardest_p[a], 1.0), (hardest_n[a], -1.0)):
            d = dist[a, j]
            if d > 0:
                u = sign * diff[a, j] / (d * b)
                grad[a] += u
                grad[j] -= u
    return loss, grad[:, 0] if flat else grad


# -- preprocessing --------------------------------------------------------------------------

@dataclass(frozen=True)
class ErasingParams:
    probability: float = 0.5
    area: tuple[float, float] = (0.02, 0.4)
    aspect: tuple[float, float] = (0.3, 3.3)


def letterbox(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Scale (H, W, 3) [0, 1] pixels to fit (height, width), bilinear, zero-padded bands."""
    h, w = pixels.shape[:2]
    scale = min(height / h, width / w)
    nh = min(height, max(1, int(round(h * scale))))
    nw = min(width, max(1, int(round(w * scale))))
    # sample at pixel centres of the resized grid
    ys = np.clip((np.arange(nh) + 0.5) * (h / nh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * (w / nw) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    top = pixels[y0][:, x0] * (1 - fx) + pixels[y0][:, x1] * fx
    bot = pixels[y1][:, x0] * (1 - fx) + pixels[y1][:, x1] * fx
    out = np.zeros((height, width, 3))
    oy, ox = (height - nh) // 2, (width - nw) // 2
    out[oy:oy + nh, ox:ox + nw] = top * (1 - fy) + bot * fy
    return out


def random_erase(tensor: np.ndarray, params: ErasingParams, rng: np.random.Generator,
                 attempts: int = 100) -> tuple[np.ndarray, tuple[int, int, int, int] | None]:
    """Replace one random rectangle of a (3, H, W) tensor by its per-channel mean.

    Returns the new tensor and the erased box ``(top, left, height, width)``, or
    ``None`` when nothing was erased.
    """
    if rng.random() >= params.probability:
        return tensor, None
    _, h, w = tensor.shape
    for _ in range(attempts):
        target = rng.uniform(*params.area) * h * w
        ratio = rng.uniform(*params.aspect)
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out = tensor.copy()
            out[:, top:top + eh, left:left + ew] = tensor.mean(axis=(1, 2))[:, None, None]
            return out, (top, left, eh, ew)
    return tensor, None


def preprocess(image, height: int = 128, width: int = 64, train_mode: bool = False,
               erasing: ErasingParams | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Image -> (3, height, width) tensor in [0, 1]; random erasing only in train mode."""
    t = letterbox(image.as_float(), height, width).transpose(2, 0, 1)
    t = np.ascontiguousarray(t)
    if train_mode:
        if rng is None:
            raise BadConfig("train-mode preprocessing needs an rng")
        t, _ = random_erase(t, erasing or ErasingParams(), rng)
    return t


# -- optimisation ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    p: int = 4
    k: int = 4
    margin: float = 0.3
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    erasing: ErasingParams = ErasingParams()
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2 or self.p < 2:
            raise BadConfig(f"PK batches need P >= 2 and K >= 2, got P={self.p}, K={self.k}")
        if self.margin < 0:
            raise BadConfig("margin must be >= 0")
        if self.epochs < 0 or self.lr < 0:
            raise BadConfig("epochs and learning rate must be >= 0")


class SGD:
    """Momentum SGD with L2 weight decay: ``g += wd*w; v = mu*v + g; w -= lr*v``."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, w in self.params.items():
            g = grads[name] + self.weight_decay * w
            v = self.velocity[name]
            v *= self.momentum
            v += g
            w -= self.lr * v


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    HEADER = "epoch,id_loss,triplet_loss,total"

    def to_csv(self) -> str:
        lines = [self.HEADER] + [f"{e},{a!r},{b!r},{c!r}" for e, a, b, c in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != cls.HEADER:
            raise FormatError("line 1: missing train log header")
        rows = []
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"line {n}: expected 4 fields")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
        return cls(rows)


def pk_batches(identity_images: dict[int, np.ndarray], p: int, k: int, rng: np.random.Generator):
    """One epoch of PK batches: shuffled identities in groups of P, K images each."""
    ids = np.array(sorted(identity_images))
    order = rng.permutation(len(ids))
    for s in range(0, len(ids) - p + 1, p):
        batch, labels = [], []
        for i in ids[order[s:s + p]]:
            members = identity_images[int(i)]
            picked = rng.choice(members, size=k, replace=False)
            batch.extend(int(x) for x in picked)
            labels.extend([int(i)] * k)
        yield batch, labels


def train_step(model: EmbeddingModel, opt: SGD, x: np.ndarray, labels: Sequence[int],
               class_index: Sequence[int], margin: float):
    emb, logits, cache = forward_batch(model, x, train_mode=True)
    id_val, g_logits = batch_id_loss(logits, class_index)
    tri_val, g_emb = batch_hard_triplet(emb, labels, margin)
    if not (math.isfinite(id_val) and math.isfinite(tri_val)):
        raise NonFiniteLoss(f"non-finite loss: id={id_val}, triplet={tri_val}")
    opt.step(backward_batch(model, cache, g_emb, g_logits))
    return id_val, tri_val


def train(model: EmbeddingModel, manifest, config: TrainConfig,
          loader: Callable[[int], object] | None = None) -> tuple[EmbeddingModel, TrainLog]:
    """Train a copy of ``model`` on ``manifest``; ``loader(i)`` returns the image of record i."""
    config.validate()
    model = model.copy()
    log = TrainLog()
    if config.epochs == 0:
        return model, log
    if loader is None:
        from .render import render_image
        gen = manifest.generator_config
        cache: dict[int, object] = {}

        def loader(i):
            if i not in cache:
                cache[i] = render_image(manifest.record(i), gen)
            return cache[i]

    ident = np.asarray(manifest.identity)
    ids = manifest.identities()
    if len(ids) < config.p:
        raise DegenerateBatch(f"{len(ids)} identities < P={config.p}")
    if len(ids) > model.config.num_identities:
        raise BadConfig(f"{len(ids)} identities exceed classifier size {model.config.num_identities}")
    groups = {int(i): np.flatnonzero(ident == i) for i in ids}
    short = [i for i, g in groups.items() if len(g) < config.k]
    if short:
        raise DegenerateBatch(f"identity {short[0]} has fewer than K={config.k} images")
    class_of = {int(i): c for c, i in enumerate(ids)}
    rng = np.random.default_rng(config.seed)
    opt = SGD(model.params, config.lr, config.momentum, config.weight_decay)
    h, w = model.config.input_height, model.config.input_width
    for epoch in range(config.epochs):
        sums, steps = np.zeros(2), 0
        for batch, labels in pk_batches(groups, config.p, config.k, rng):
            x = np.stack([preprocess(loader(i), h, w, True, config.erasing, rng) for i in batch])
            try:
                vals = train_step(model, opt, x, labels, [class_of[y] for y in labels], config.margin)
            except NonFiniteLoss as err:
                raise NonFiniteLoss(f"epoch {epoch}, step {steps}: {err}") from None
            sums += vals
            steps += 1
        id_mean, tri_mean = sums / max(steps, 1)
        log.rows.append((epoch, float(id_mean), float(tri_mean), float(id_mean + tri_mean)))
    return model, log


# -- checkpoint -----------------------------------------------------------------------------

def dumps_model(model: EmbeddingModel) -> bytes:
    cfg = model.config
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
             struct.pack("<IIIIIQ", cfg.num_identities, cfg.embedding_dim, cfg.input_height,
                         cfg.input_width, len(cfg.channels), cfg.init_seed),
             struct.pack(f"<{len(cfg.channels)}I", *cfg.channels)]
    for name, _ in cfg.param_shapes():
        parts.append(model.params[name].astype("<f4").tobytes())
    for name, _ in cfg.buffer_shapes():
        parts.append(model.buffers[name].astype("<f4").tobytes())
    return b"".join(parts)


def loads_model(data: bytes) -> EmbeddingModel:
    from .features import _Reader
    r = _Reader(data)
    magic = r.read(4)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    ids, dim, height, width, nconv, seed = r.unpack("<IIIIIQ")
    channels = r.unpack(f"<{nconv}I")
    cfg = ModelConfig(ids, dim, channels, height, width, seed)
    try:
        cfg.validate()
    except BadConfig as err:
        raise FormatError(f"bad model header: {err}") from None
    params = {name: r.floats(int(np.prod(shape))).reshape(shape) for name, shape in cfg.param_shapes()}
    buffers = {name: r.floats(int(np.prod(shape))).reshape(shape) for name, shape in cfg.buffer_shapes()}
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after model")
    return EmbeddingModel(cfg, params, buffers)


def persist_model(model: EmbeddingModel, path) -> None:
    write_bytes(path, dumps_model(model))


def load_model(path) -> EmbeddingModel:
    return loads_model(read_bytes(path))
