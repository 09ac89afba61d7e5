"""Small pre-norm Vision Transformer with optional adapter hooks.

The forward pass is written against a backend object (:class:`~arclab.autodiff.Tape`
for training, :class:`~arclab.autodiff.Eager` for plain evaluation) so the
recorded and unrecorded paths execute the same kernel calls in the same
order. Weights are named tensors; the mapping passed to ``forward`` resolves
each name to a backend value.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import adapters
from .errors import ConfigError, ShapeError
from .kernel import Rng

HEAD_NAMES = ("head.weight", "head.bias")


@dataclass(frozen=True)
class BackboneConfig:
    """Shape parameters of the backbone.

    ``image_size`` is the side of the square input; ``layers`` may be zero
    for the degenerate embed-then-classify model used in tests.
    """

    image_size: int
    patch_size: int
    channels: int
    embed_dim: int
    layers: int
    heads: int
    classes: int
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        positive = {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "classes": self.classes,
            "mlp_ratio": self.mlp_ratio,
        }
        for name, value in positive.items():
            if int(value) != value or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")

    @property
    def tokens(self) -> int:
        """Patch count N = (H/P)^2; the sequence adds one class token."""
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def weight_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, int]]:
    """Name -> shape table for every backbone tensor (vectors as single rows)."""
    d, k = cfg.embed_dim, cfg.classes
    shapes: dict[str, tuple[int, int]] = {
        "patch.weight": (cfg.patch_dim, d),
        "patch.bias": (1, d),
        "cls": (1, d),
        "pos": (cfg.tokens + 1, d),
        "final_ln.gamma": (1, d),
        "final_ln.beta": (1, d),
        "head.weight": (d, k),
        "head.bias": (1, k),
    }
    for layer in range(1, cfg.layers + 1):
        p = f"enc.{layer}"
        shapes[f"{p}.ln1.gamma"] = (1, d)
        shapes[f"{p}.ln1.beta"] = (1, d)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{proj}"] = (d, d)
            shapes[f"{p}.attn.b{proj}"] = (1, d)
        shapes[f"{p}.ln2.gamma"] = (1, d)
        shapes[f"{p}.ln2.beta"] = (1, d)
        shapes[f"{p}.ffn.w1"] = (d, cfg.hidden_dim)
        shapes[f"{p}.ffn.b1"] = (1, cfg.hidden_dim)
        shapes[f"{p}.ffn.w2"] = (cfg.hidden_dim, d)
        shapes[f"{p}.ffn.b2"] = (1, d)
    return shapes


def init_backbone(cfg: BackboneConfig, rng: Rng, scale: float = 0.02) -> dict[str, np.ndarray]:
    """Random stand-in for a pretrained backbone: N(0, scale^2) weights,
    zero biases, unit LayerNorm gains."""
    weights: dict[str, np.ndarray] = {}
    for name, shape in weight_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            weights[name] = np.ones(shape)
        elif leaf.startswith("b"):  # beta, bias, bq/bk/bv/bo, b1/b2
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normals(shape, scale)
    return weights


def validate_weights(cfg: BackboneConfig, weights) -> None:
    expected = weight_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    extra = sorted(set(weights) - set(expected))
    if missing or extra:
        raise ShapeError(f"weight set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {weights[name].shape}")


def checksum(weights, exclude_head: bool = False) -> str:
    """SHA-256 over names, shapes and raw little-endian bytes of the tensors."""
    h = hashlib.sha256()
    for name in sorted(weights):
        if exclude_head and name in HEAD_NAMES:
            continue
        arr = np.ascontiguousarray(weights[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()


def frozen_checksum(weights) -> str:
    """Checksum of everything that must stay bit-identical during training
    (all backbone tensors except the classification head)."""
    return checksum(weights, exclude_head=True)


def extract_patches(image: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """Split an H x W x C image into N rows of flattened P x P x C patches.

    Patches are taken in row-major grid order; each patch flattens row-major
    over (pixel-row, pixel-col, channel). This order is load-bearing for
    bit-exact checkpoints.
    """
    image = np.asarray(image, dtype=np.float64)
    h = w = cfg.image_size
    if image.shape != (h, w, cfg.channels):
        raise ShapeError(f"image shape {image.shape} does not match {(h, w, cfg.channels)}")
    p = cfg.patch_size
    grid = h // p
    return (
        image.reshape(grid, p, grid, p, cfg.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid * grid, cfg.patch_dim)
    )


def patch_embed(ops, cfg: BackboneConfig, v, patches):
    """[cls; patches @ W + b] + pos, as backend values."""
    proj = ops.add(ops.matmul(patches, v["patch.weight"]), v["patch.bias"])
    return ops.add(ops.concat_rows([v["cls"], proj]), v["pos"])


def mha(ops, cfg: BackboneConfig, v, x_norm, layer: int):
    """Multi-head attention over one normalized token matrix.

    The D x D projections are column-partitioned into head blocks; per head:
    softmax(Q K^T / sqrt(D_h)) V, heads concatenated, then the output
    projection.
    """
    p = f"enc.{layer}.attn"
    q = ops.add(ops.matmul(x_norm, v[f"{p}.wq"]), v[f"{p}.bq"])
    k = ops.add(ops.matmul(x_norm, v[f"{p}.wk"]), v[f"{p}.bk"])
    val = ops.add(ops.matmul(x_norm, v[f"{p}.wv"]), v[f"{p}.bv"])
    dh = cfg.head_dim
    heads = []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ops.slice_cols(q, lo, hi)
        kh = ops.slice_cols(k, lo, hi)
        vh = ops.slice_cols(val, lo, hi)
        scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), 1.0 / np.sqrt(dh))
        heads.append(ops.matmul(ops.softmax_rows(scores), vh))
    merged = ops.concat_cols(heads) if len(heads) > 1 else heads[0]
    return ops.add(ops.matmul(merged, v[f"{p}.wo"]), v[f"{p}.bo"])


def ffn(ops, cfg: BackboneConfig, v, x_norm, layer: int):
    """GELU(x W1 + b1) W2 + b2."""
    p = f"enc.{layer}.ffn"
    hidden = ops.gelu(ops.add(ops.matmul(x_norm, v[f"{p}.w1"]), v[f"{p}.b1"]))
    return ops.add(ops.matmul(hidden, v[f"{p}.w2"]), v[f"{p}.b2"])


def forward_tokens(ops, cfg: BackboneConfig, v, x_emb, hooks=None, mode="eval",
                   rng=None, dropout_rate=None):
    """Run the encoder stack and head on an embedded token matrix."""
    x = x_emb
    for layer in range(1, cfg.layers + 1):
        z1 = ops.layernorm(x, v[f"enc.{layer}.ln1.gamma"], v[f"enc.{layer}.ln1.beta"], cfg.ln_eps)
        z1 = adapters.apply_site(ops, hooks, layer, "before_mha", z1, v, mode, rng, dropout_rate)
        attn = mha(ops, cfg, v, z1, layer)
        attn = adapters.apply_site(ops, hooks, layer, "after_mha", attn, v, mode, rng, dropout_rate)
        x = ops.add(x, attn)
        z2 = ops.layernorm(x, v[f"enc.{layer}.ln2.gamma"], v[f"enc.{layer}.ln2.beta"], cfg.ln_eps)
        z2 = adapters.apply_site(ops, hooks, layer, "before_ffn", z2, v, mode, rng, dropout_rate)
        mlp = ffn(ops, cfg, v, z2, layer)
        mlp = adapters.apply_site(ops, hooks, layer, "after_ffn", mlp, v, mode, rng, dropout_rate)
        x = ops.add(x, mlp)
    cls_row = ops.slice_rows(x, 0, 1)
    cls_row = ops.layernorm(cls_row, v["final_ln.gamma"], v["final_ln.beta"], cfg.ln_eps)
    return ops.add(ops.matmul(cls_row, v["head.weight"]), v["head.bias"])


def forward(ops, cfg: BackboneConfig, v, image, hooks=None, mode="eval",
            rng=None, dropout_rate=None):
    """Logits (1 x classes) for one image; ``hooks`` wires the adapter bank in."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x_emb = patch_embed(ops, cfg, v, ops.constant(extract_patches(image, cfg)))
    return forward_tokens(ops, cfg, v, x_emb, hooks, mode, rng, dropout_rate)
