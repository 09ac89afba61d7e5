"""Lossless folding of trained adapters into the frozen backbone weights.

Every adapter sits strictly between a LayerNorm output and the block's
first linear map (before_* sites), or strictly after the block's last
linear map (after_* sites). An adapter is the affine map
``x -> x (P + I) + 1 b^T``, so it folds into the adjacent matrix on the
matching side, leaving a network that runs the plain forward path with
zero extra inference cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .adapters import AdapterBank, composite_matrix, resolve_hooks
from .errors import ConfigError
from .kernel import Rng
from .autodiff import Eager

# weight names each site folds into, and on which side of the matrix
_SITE_TARGETS = {
    "before_mha": (("attn.wq", "attn.bq"), ("attn.wk", "attn.bk"), ("attn.wv", "attn.bv")),
    "before_ffn": (("ffn.w1", "ffn.b1"),),
    "after_mha": (("attn.wo", "attn.bo"),),
    "after_ffn": (("ffn.w2", "ffn.b2"),),
}


@dataclass
class FusedWeights:
    """Backbone-shaped tensors with adapter effects folded in."""

    tensors: dict[str, np.ndarray]
    config_digest: str = ""
    source_checkpoint: str = ""
    max_verified_deviation: float | None = None
    sites_fused: int = 0


def fuse(weights, bank: AdapterBank, backbone_cfg, mode: str = "eval") -> FusedWeights:
    """Fold the bank into a copy of ``weights``.

    before_* sites left-multiply the downstream matrices by (P + I) and add
    ``b W`` to their biases; after_* sites right-multiply the upstream
    matrix and map its bias through the adapter. A bank whose P and b are
    exactly zero leaves the weights bitwise untouched.
    """
    if mode != "eval":
        raise ConfigError("fusion requires an eval-mode bank: dropout must be inactive")
    table = resolve_hooks(bank.config, backbone_cfg)
    fused = {name: arr.copy() for name, arr in weights.items()}
    sites = 0
    for (layer, site), group in sorted(table.entries.items()):
        p, b = composite_matrix(bank, group, layer)
        if not p.any() and not b.any():
            continue  # exact identity adapter: skip to keep weights bit-identical
        sites += 1
        m = p + np.eye(p.shape[0])
        for w_name, b_name in _SITE_TARGETS[site]:
            wk = f"enc.{layer}.{w_name}"
            bk = f"enc.{layer}.{b_name}"
            if site.startswith("before"):
                fused[bk] = fused[bk] + b @ fused[wk]
                fused[wk] = m @ fused[wk]
            else:
                fused[wk] = fused[wk] @ m
                fused[bk] = fused[bk] @ m + b
    return FusedWeights(tensors=fused, sites_fused=sites)


def verify_fusion(weights, bank: AdapterBank, backbone_cfg, fused: FusedWeights,
                  trials: int = 32, rng: Rng | None = None) -> float:
    """Max absolute logit deviation between the adapted-unfused forward and
    the plain forward over the fused weights, across random images."""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rng = rng or Rng(0)
    table = resolve_hooks(bank.config, backbone_cfg)
    values = dict(weights)
    values.update(bank.tensors)
    ops = Eager()
    shape = (backbone_cfg.image_size, backbone_cfg.image_size, backbone_cfg.channels)
    worst = 0.0
    for _ in range(trials):
        img = rng.normals(shape)
        adapted = model.forward(ops, backbone_cfg, values, img, hooks=table)
        plain = model.forward(ops, backbone_cfg, fused.tensors, img)
        worst = max(worst, float(np.abs(adapted - plain).max()))
    return worst
