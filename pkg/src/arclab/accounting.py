"""Closed-form trainable-parameter counts for adapter-style tuning methods.

Counts cover the adaptation parameters only; classification-head
parameters vary per task and are reported separately via
:func:`head_count`. The re-composing adapter's fine-tuning cost is
``2 (D D' + (D' + D) L)``: the projection term is paid once, so the
marginal cost of one more layer is ``2 (D' + D)`` rather than growing
with the projection size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .adapters import ArcConfig, resolved_layers
from .errors import ConfigError

METHODS = ("adapter", "vpt_shallow", "vpt_deep", "lora", "ssf", "arc", "arc_att")

# knob name -> (attribute, methods that require it)
_KNOBS = {
    "bottleneck": ("adapter", "lora", "arc", "arc_att"),
    "prompts": ("vpt_shallow", "vpt_deep"),
    "attn_matrices": ("lora",),
    "operations": ("ssf",),
}

DEFAULT_BACKBONES = (("ViT-B", 768, 12), ("ViT-L", 1024, 24), ("ViT-H", 1280, 32))


@dataclass(frozen=True)
class MethodSpec:
    """One method plus exactly the knobs it uses.

    ``bottleneck`` is the projection hidden width D', ``prompts`` the
    prompt-token count m, ``attn_matrices`` the number of adapted attention
    matrices w, ``operations`` the number of modulated operations o.
    """

    method: str
    bottleneck: int | None = None
    prompts: int | None = None
    attn_matrices: int | None = None
    operations: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for knob, needed_by in _KNOBS.items():
            value = getattr(self, knob)
            if self.method in needed_by:
                if value is None:
                    raise ConfigError(f"method {self.method!r} needs knob {knob!r}")
                if value < 1:
                    raise ConfigError(f"knob {knob!r} must be >= 1, got {value}")
            elif value is not None:
                raise ConfigError(f"method {self.method!r} does not take knob {knob!r}")


def _check_dims(d: int, layers: int) -> None:
    if d < 1 or layers < 1:
        raise ConfigError(f"D and L must be positive, got D={d}, L={layers}")


def count_finetune(spec: MethodSpec, d: int, layers: int) -> int:
    """Extra trainable parameters during fine-tuning (head excluded)."""
    _check_dims(d, layers)
    dp, m, w, o = spec.bottleneck, spec.prompts, spec.attn_matrices, spec.operations
    if spec.method == "adapter":
        return 2 * d * dp * layers
    if spec.method == "vpt_shallow":
        return m * d
    if spec.method == "vpt_deep":
        return m * d * layers
    if spec.method == "lora":
        return 2 * w * d * dp * layers
    if spec.method == "ssf":
        return 2 * o * d * layers
    if spec.method == "arc":
        return 2 * (d * dp + (dp + d) * layers)
    return d * dp + (dp + d) * layers  # arc_att: attention side only


def count_inference(spec: MethodSpec, d: int, layers: int) -> int:
    """Extra parameters carried into inference: zero for the linear,
    re-parameterizable methods; unchanged for the rest."""
    _check_dims(d, layers)
    if spec.method in ("lora", "ssf", "arc", "arc_att"):
        return 0
    return count_finetune(spec, d, layers)


def head_count(d: int, classes: int) -> int:
    """Task-head parameters: D x K weights plus K biases."""
    if d < 1 or classes < 1:
        raise ConfigError(f"D and classes must be positive, got {d}, {classes}")
    return d * classes + classes


def count_arc_config(config: ArcConfig, d: int, layers: int) -> int:
    """Closed-form count for an arbitrary adapter configuration.

    Derived from structure: per active position group, the (possibly
    shared) projections, plus per inserted layer a D'-dim coefficient
    vector and a D-dim bias. Must equal the bank census exactly.
    """
    _check_dims(d, layers)
    n_ins = len(resolved_layers(config, layers))
    groups = len(config.groups)
    if config.variant == "full_rank":
        return groups * n_ins * d * d
    dp = config.bottleneck
    per_layer = groups * (dp + d) * n_ins
    if config.sharing == "intra_inter":
        proj = groups * d * dp
    elif config.sharing == "intra_inter_star":
        proj = d * dp
    elif config.sharing == "non_intra_inter":
        proj = groups * 2 * d * dp
    else:  # non_intra_non_inter
        proj = groups * 2 * d * dp * n_ins
    return proj + per_layer


@dataclass(frozen=True)
class ScalingRow:
    label: str
    embed_dim: int
    layers: int
    finetune: int
    inference: int


def scaling_table(spec: MethodSpec, layer_range=None, backbones=None,
                  embed_dim: int | None = None) -> list[ScalingRow]:
    """Counts over a range of depths (fixed D) or a list of backbone shapes."""
    if (layer_range is None) == (backbones is None):
        raise ConfigError("pass exactly one of layer_range or backbones")
    rows = []
    if layer_range is not None:
        if embed_dim is None:
            raise ConfigError("layer sweep needs embed_dim")
        for layers in layer_range:
            rows.append(ScalingRow(f"L={layers}", embed_dim, layers,
                                   count_finetune(spec, embed_dim, layers),
                                   count_inference(spec, embed_dim, layers)))
    else:
        for label, d, layers in backbones:
            rows.append(ScalingRow(label, d, layers,
                                   count_finetune(spec, d, layers),
                                   count_inference(spec, d, layers)))
    return rows


def format_rows(rows: list[ScalingRow], method: str) -> str:
    """Aligned text table with a fixed column order."""
    header = ("method", "label", "D", "L", "finetune", "inference")
    table = [header] + [
        (method, r.label, str(r.embed_dim), str(r.layers), str(r.finetune), str(r.inference))
        for r in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in table)


def write_rows_csv(rows: list[ScalingRow], method: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "label", "D", "L", "finetune", "inference"])
        for r in rows:
            writer.writerow([method, r.label, r.embed_dim, r.layers, r.finetune, r.inference])
