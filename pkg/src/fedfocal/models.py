"""Tiny Vision Transformer and MLP classifiers built on the tensor core.

Both models expose the same surface to the training layer: an ordered,
named parameter list plus a batch logits function, so federation code never
branches on the architecture.

The transformer follows the classic encoder recipe: patch embedding with a
class token and additive positional encoding, stacked post-norm blocks
(LayerNorm applied after each residual sum), scaled dot-product multi-head
attention, and a two-layer ReLU feed-forward network. Attention maps are
returned so saliency rollout can consume them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AggregationError, ConfigError, IngestionError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 32
    num_heads: int = 4
    head_dim: int = 8
    ffn_dim: int = 64
    num_layers: int = 2
    num_classes: int = 5
    layer_norm_eps: float = 1e-5
    learned_positions: bool = False

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim,
               self.num_heads, self.head_dim, self.ffn_dim, self.num_layers,
               self.num_classes) < 1:
            raise ConfigError("all ViT dimensions must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by "
                              f"patch size {self.patch_size}")
        if self.embed_dim != self.num_heads * self.head_dim:
            raise ConfigError(f"embed_dim {self.embed_dim} must equal "
                              f"num_heads*head_dim {self.num_heads * self.head_dim}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_classes) < 1:
            raise ConfigError("all MLP dimensions must be >= 1")


class ModelParams:
    """Ordered list of named parameter tensors; the unit of aggregation."""

    def __init__(self, items: list[tuple[str, Tensor]]):
        self._names = [name for name, _ in items]
        self._by_name = dict(items)
        if len(self._by_name) != len(self._names):
            raise ConfigError("duplicate parameter names")

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        for name in self._names:
            yield name, self._by_name[name]

    def tensors(self) -> list[Tensor]:
        return [self._by_name[n] for n in self._names]

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, self._by_name[n].shape) for n in self._names]

    def clone(self) -> "ModelParams":
        return ModelParams([(n, Tensor(t.data.copy(), requires_grad=True))
                            for n, t in self])

    def zero_grads(self) -> None:
        for _, t in self:
            t.grad = None

    def total_scalars(self) -> int:
        return sum(t.data.size for _, t in self)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self._by_name[n].data.reshape(-1) for n in self._names])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        if vec.size != self.total_scalars():
            raise ShapeError(f"flat vector has {vec.size} scalars, model needs "
                             f"{self.total_scalars()}")
        items = []
        offset = 0
        for name in self._names:
            t = self._by_name[name]
            n = t.data.size
            chunk = vec[offset:offset + n].reshape(t.shape).astype(t.dtype)
            items.append((name, Tensor(chunk.copy(), requires_grad=True)))
            offset += n
        return ModelParams(items)


def check_manifests_match(params_list: list[ModelParams]) -> None:
    """All participants must expose the same names and shapes, in order."""
    ref = params_list[0].manifest()
    for k, other in enumerate(params_list[1:], start=1):
        m = other.manifest()
        if m != ref:
            for (n0, s0), (n1, s1) in zip(ref, m):
                if (n0, s0) != (n1, s1):
                    raise AggregationError(
                        f"parameter manifest mismatch at entry {n0!r} "
                        f"{s0} vs {n1!r} {s1} (participant {k})")
            raise AggregationError(
                f"parameter manifest length differs: {len(ref)} vs {len(m)} "
                f"(participant {k})")


def sinusoidal_positions(n: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Classic fixed sin/cos positional table, one row per sequence slot."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / dim)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# ViT


def patchify(image, cfg: ViTConfig) -> Tensor:
    """Cut a CxHxW image into N flattened patches, raster order.

    Row k of the result is patch (k // grid, k % grid) flattened
    channel-major, so reassembling rows in the same order reproduces the
    image exactly.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3:
        raise ShapeError(f"expected channels x height x width image, got {data.shape}")
    ch, h, w = data.shape
    if h != w or h != cfg.image_size or ch != cfg.channels:
        raise ConfigError(f"image shape {data.shape} does not match config "
                          f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    p = cfg.patch_size
    g = cfg.grid
    rows = np.empty((cfg.num_patches, cfg.patch_dim), dtype=data.dtype)
    for gy in range(g):
        for gx in range(g):
            rows[gy * g + gx] = data[:, gy * p:(gy + 1) * p, gx * p:(gx + 1) * p].reshape(-1)
    return T.constant(rows)


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32,
                    gamma_init: float | None = None) -> ModelParams:
    """Fresh parameter set. Weight matrices are uniform in +-1/sqrt(fan_in);
    the class token (and learned positions, if enabled) are Gaussian with
    std 0.02; affine norms start at identity."""
    d, dff, c = cfg.embed_dim, cfg.ffn_dim, cfg.num_classes
    items: list[tuple[str, Tensor]] = []

    def param(name, arr):
        items.append((name, T.parameter(arr, dtype=dtype)))

    param("patch_embed", _uniform_fan_in(rng, cfg.patch_dim, (cfg.patch_dim, d), dtype))
    param("class_token", (rng.normal(0.0, 0.02, size=(1, d))).astype(dtype))
    if cfg.learned_positions:
        param("pos_embed", (rng.normal(0.0, 0.02, size=(cfg.num_patches + 1, d))).astype(dtype))
    for i in range(cfg.num_layers):
        for w in ("wq", "wk", "wv", "wo"):
            param(f"layers.{i}.attn.{w}", _uniform_fan_in(rng, d, (d, d), dtype))
        param(f"layers.{i}.norm1.gain", np.ones(d, dtype=dtype))
        param(f"layers.{i}.norm1.bias", np.zeros(d, dtype=dtype))
        param(f"layers.{i}.ffn.w1", _uniform_fan_in(rng, d, (d, dff), dtype))
        param(f"layers.{i}.ffn.b1", np.zeros(dff, dtype=dtype))
        param(f"layers.{i}.ffn.w2", _uniform_fan_in(rng, dff, (dff, d), dtype))
        param(f"layers.{i}.ffn.b2", np.zeros(d, dtype=dtype))
        param(f"layers.{i}.norm2.gain", np.ones(d, dtype=dtype))
        param(f"layers.{i}.norm2.bias", np.zeros(d, dtype=dtype))
    param("head.weight", _uniform_fan_in(rng, d, (d, c), dtype))
    param("head.bias", np.zeros(c, dtype=dtype))
    if gamma_init is not None:
        param("loss.gamma", np.asarray(gamma_init, dtype=dtype))
    return ModelParams(items)


def vit_param_count(cfg: ViTConfig, with_gamma: bool = False) -> int:
    d, dff, c = cfg.embed_dim, cfg.ffn_dim, cfg.num_classes
    count = cfg.patch_dim * d + d
    if cfg.learned_positions:
        count += (cfg.num_patches + 1) * d
    count += cfg.num_layers * (4 * d * d + 4 * d + d * dff + dff + dff * d + d)
    count += d * c + c
    if with_gamma:
        count += 1
    return count


def embed(patches: Tensor, params: ModelParams, cfg: ViTConfig,
          positions: np.ndarray | None = None) -> Tensor:
    """Project patches, prepend the class token, add positional rows."""
    if patches.shape != (cfg.num_patches, cfg.patch_dim):
        raise ShapeError(f"patches shape {patches.shape} does not match "
                         f"({cfg.num_patches}, {cfg.patch_dim})")
    projected = T.matmul(patches, params["patch_embed"])
    seq = T.concat([params["class_token"], projected], axis=0)
    if cfg.learned_positions:
        pos = params["pos_embed"]
        if pos.shape[0] != cfg.num_patches + 1:
            raise ShapeError(f"positional table has {pos.shape[0]} rows, "
                             f"sequence needs {cfg.num_patches + 1}")
        return T.add(seq, pos)
    table = positions if positions is not None else sinusoidal_positions(
        cfg.num_patches + 1, cfg.embed_dim, dtype=patches.dtype)
    if table.shape[0] != cfg.num_patches + 1:
        raise ShapeError(f"positional table has {table.shape[0]} rows, "
                         f"sequence needs {cfg.num_patches + 1}")
    return T.add(seq, T.constant(table))


def multi_head_attention(z: Tensor, params: ModelParams, layer: int,
                         cfg: ViTConfig) -> tuple[Tensor, list[Tensor]]:
    """Scaled dot-product attention; returns output and per-head maps."""
    prefix = f"layers.{layer}.attn"
    q = T.matmul(z, params[f"{prefix}.wq"])
    k = T.matmul(z, params[f"{prefix}.wk"])
    v = T.matmul(z, params[f"{prefix}.wv"])
    dk = cfg.head_dim
    heads = []
    maps = []
    for h in range(cfg.num_heads):
        lo, hi = h * dk, (h + 1) * dk
        qh = T.slice_axis(q, 1, lo, hi)
        kh = T.slice_axis(k, 1, lo, hi)
        vh = T.slice_axis(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk))
        attn = T.softmax(scores, axis=1)
        maps.append(attn)
        heads.append(T.matmul(attn, vh))
    joined = T.concat(heads, axis=1)
    return T.matmul(joined, params[f"{prefix}.wo"]), maps


def feed_forward(z: Tensor, params: ModelParams, layer: int) -> Tensor:
    prefix = f"layers.{layer}.ffn"
    hidden = T.relu(T.add(T.matmul(z, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def encoder_layer(z: Tensor, params: ModelParams, layer: int,
                  cfg: ViTConfig) -> tuple[Tensor, list[Tensor]]:
    """Post-norm residual block: normalize after each residual sum."""
    attended, maps = multi_head_attention(z, params, layer, cfg)
    z1 = T.layer_norm(T.add(z, attended),
                      params[f"layers.{layer}.norm1.gain"],
                      params[f"layers.{layer}.norm1.bias"], cfg.layer_norm_eps)
    z2 = T.layer_norm(T.add(z1, feed_forward(z1, params, layer)),
                      params[f"layers.{layer}.norm2.gain"],
                      params[f"layers.{layer}.norm2.bias"], cfg.layer_norm_eps)
    return z2, maps


def vit_forward(image, params: ModelParams, cfg: ViTConfig,
                positions: np.ndarray | None = None) -> tuple[Tensor, list[list[Tensor]]]:
    """Run one image through the encoder; logits come from the class token."""
    patches = patchify(image, cfg)
    z = embed(patches, params, cfg, positions=positions)
    stack: list[list[Tensor]] = []
    for i in range(cfg.num_layers):
        z, maps = encoder_layer(z, params, i, cfg)
        stack.append(maps)
    cls_row = T.slice_axis(z, 0, 0, 1)
    logits = T.add(T.matmul(cls_row, params["head.weight"]),
                   T.reshape(params["head.bias"], (1, cfg.num_classes)))
    return T.reshape(logits, (cfg.num_classes,)), stack


# ---------------------------------------------------------------------------
# MLP baseline


def init_mlp_params(cfg: MlpConfig, rng: np.random.Generator, dtype=np.float32,
                    gamma_init: float | None = None) -> ModelParams:
    items = [
        ("mlp.w1", T.parameter(_uniform_fan_in(rng, cfg.input_dim,
                                               (cfg.input_dim, cfg.hidden_dim), dtype))),
        ("mlp.b1", T.parameter(np.zeros(cfg.hidden_dim, dtype=dtype))),
        ("mlp.w2", T.parameter(_uniform_fan_in(rng, cfg.hidden_dim,
                                               (cfg.hidden_dim, cfg.num_classes), dtype))),
        ("mlp.b2", T.parameter(np.zeros(cfg.num_classes, dtype=dtype))),
    ]
    if gamma_init is not None:
        items.append(("loss.gamma", T.parameter(np.asarray(gamma_init, dtype=dtype))))
    return ModelParams(items)


def mlp_param_count(cfg: MlpConfig, with_gamma: bool = False) -> int:
    count = (cfg.input_dim * cfg.hidden_dim + cfg.hidden_dim
             + cfg.hidden_dim * cfg.num_classes + cfg.num_classes)
    return count + (1 if with_gamma else 0)


def mlp_forward(features: Tensor, params: ModelParams) -> Tensor:
    """One hidden ReLU layer; accepts a [B, F] batch."""
    hidden = T.relu(T.add(T.matmul(features, params["mlp.w1"]), params["mlp.b1"]))
    return T.add(T.matmul(hidden, params["mlp.w2"]), params["mlp.b2"])


# ---------------------------------------------------------------------------
# uniform classifier facade used by the training loop


class MlpClassifier:
    kind = "mlp"

    def __init__(self, cfg: MlpConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def init_params(self, rng: np.random.Generator,
                    gamma_init: float | None = None) -> ModelParams:
        return init_mlp_params(self.cfg, rng, dtype=self.dtype, gamma_init=gamma_init)

    def batch_logits(self, params: ModelParams, features: np.ndarray) -> Tensor:
        x = T.constant(np.asarray(features, dtype=self.dtype))
        if x.data.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ShapeError(f"feature batch shape {x.shape} does not match "
                             f"input dim {self.cfg.input_dim}")
        return mlp_forward(x, params)

    def param_count(self, with_gamma: bool = False) -> int:
        return mlp_param_count(self.cfg, with_gamma)


class ViTClassifier:
    kind = "vit"

    def __init__(self, cfg: ViTConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self._positions = None if cfg.learned_positions else sinusoidal_positions(
            cfg.num_patches + 1, cfg.embed_dim, dtype=self.dtype)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def init_params(self, rng: np.random.Generator,
                    gamma_init: float | None = None) -> ModelParams:
        return init_vit_params(self.cfg, rng, dtype=self.dtype, gamma_init=gamma_init)

    def forward_single(self, params: ModelParams, image) -> tuple[Tensor, list[list[Tensor]]]:
        image = np.asarray(image, dtype=self.dtype)
        return vit_forward(image, params, self.cfg, positions=self._positions)

    def batch_logits(self, params: ModelParams, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim != 4:
            raise ShapeError(f"expected [B, C, H, W] image batch, got {images.shape}")
        rows = []
        for b in range(images.shape[0]):
            logits, _ = vit_forward(images[b], params, self.cfg, positions=self._positions)
            rows.append(T.reshape(logits, (1, self.cfg.num_classes)))
        return T.concat(rows, axis=0)

    def param_count(self, with_gamma: bool = False) -> int:
        return vit_param_count(self.cfg, with_gamma)


# ---------------------------------------------------------------------------
# checkpoint io: a name manifest followed by the tensors in the same order


_CKPT_MAGIC = "fedfocal-params 1"


def save_params(path, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        names = params.names
        fh.write(f"{_CKPT_MAGIC}\n{len(names)}\n".encode("ascii"))
        for name in names:
            fh.write(f"{name}\n".encode("ascii"))
        for name in names:
            T.write_array(fh, params[name].data)


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != _CKPT_MAGIC:
            raise IngestionError(f"{path}: not a parameter checkpoint (header {magic!r})")
        try:
            count = int(fh.readline().decode("ascii").strip())
        except ValueError as exc:
            raise IngestionError(f"{path}: malformed tensor count") from exc
        names = [fh.readline().decode("ascii").rstrip("\n") for _ in range(count)]
        if any(not n for n in names):
            raise IngestionError(f"{path}: manifest shorter than declared count {count}")
        items = [(name, T.parameter(T.read_array(fh))) for name in names]
    return ModelParams(items)
