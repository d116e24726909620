"""
Generator layer registry and analytical parameter accounting.

A GeneratorSpec lists every weight-bearing synthesis layer of a style-based
generator (feature convolutions and toRGB convolutions) with its kernel,
channel dims, coarse/medium/fine group and kind. The same table drives the
toy generator, the set of layers a hypernetwork refines and the closed-form
parameter counts of each hypernetwork variant.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from APP.helpers.config_manager import HEAD_VARIANTS, LAYER_POLICIES, HyperNetConfig
from APP.helpers.errors import ConfigError, SpecMismatchError

logger = logging.getLogger("GenSpec")

GROUPS = ("coarse", "medium", "fine")
KINDS = ("conv", "toRGB")

STYLEGAN2_1024 = "stylegan2-1024"
BUILTIN_SPECS = (STYLEGAN2_1024,)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    name: str
    kernel: int
    c_in: int
    c_out: int
    group: str
    kind: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise SpecMismatchError(f"Layer {self.index}: unknown group {self.group!r}")
        if self.kind not in KINDS:
            raise SpecMismatchError(f"Layer {self.index}: unknown kind {self.kind!r}")
        if min(self.index, self.kernel, self.c_in, self.c_out) < 1:
            raise SpecMismatchError(f"Layer {self.index}: index, kernel and channels must be >= 1")
        if self.kind == "toRGB" and (self.kernel != 1 or self.c_out != 3):
            raise SpecMismatchError(f"Layer {self.index}: toRGB layers are 1x1 with 3 output channels")

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        """Weight shape k x k x C_in x C_out."""
        return (self.kernel, self.kernel, self.c_in, self.c_out)

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv"

    def describe(self) -> str:
        k, _, cin, cout = self.shape
        return f"{k}x{k}x{cin}x{cout}"


@dataclass(frozen=True)
class GeneratorSpec:
    layers: Tuple[LayerSpec, ...]
    latent_dim: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise SpecMismatchError("A generator spec needs at least one layer")
        indices = [layer.index for layer in self.layers]
        if indices != list(range(1, len(self.layers) + 1)):
            raise SpecMismatchError(f"Layer indices must be unique and consecutive from 1, got {indices}")
        if self.latent_dim < 1:
            raise SpecMismatchError("latent_dim must be >= 1")

    def layer(self, index: int) -> LayerSpec:
        if not 1 <= index <= len(self.layers):
            raise SpecMismatchError(f"Layer {index} is not part of spec '{self.name}'")
        return self.layers[index - 1]

    @property
    def conv_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.is_conv]

    def blocks(self) -> List[Tuple[List[LayerSpec], LayerSpec]]:
        """Split the table into synthesis blocks: (feature convs, closing toRGB)."""
        blocks, convs = [], []
        for layer in self.layers:
            if layer.is_conv:
                convs.append(layer)
            else:
                blocks.append((convs, layer))
                convs = []
        if convs:
            raise SpecMismatchError(f"Spec '{self.name}' ends with convs that no toRGB layer closes")
        return blocks

    @property
    def resolution(self) -> int:
        """Output resolution: 4x4 constant input doubled once per block after the first."""
        return 4 * 2 ** (len(self.blocks()) - 1)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "latent_dim": self.latent_dim,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        try:
            layers = tuple(LayerSpec(**layer) for layer in data["layers"])
            return cls(layers=layers, latent_dim=int(data["latent_dim"]), name=str(data.get("name", "custom")))
        except (KeyError, TypeError) as e:
            raise SpecMismatchError(f"Malformed generator spec document: {e}") from e

    def save(self, path: str) -> str:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: str) -> "GeneratorSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise SpecMismatchError(f"Could not read generator spec {path}: {e}") from e
        return cls.from_dict(data)


def full_stylegan2_spec() -> GeneratorSpec:
    """The 1024px StyleGAN2 synthesis layer table (17 convs, 9 toRGB)."""
    rows = [
        # (name, kernel, c_in, c_out, group)
        ("Conv 1", 3, 512, 512, "coarse"),
        ("toRGB 1", 1, 512, 3, "coarse"),
        ("Conv 2", 3, 512, 512, "coarse"),
        ("Conv 3", 3, 512, 512, "coarse"),
        ("toRGB 2", 1, 512, 3, "coarse"),
        ("Conv 4", 3, 512, 512, "medium"),
        ("Conv 5", 3, 512, 512, "medium"),
        ("toRGB 3", 1, 512, 3, "medium"),
        ("Conv 6", 3, 512, 512, "medium"),
        ("Conv 7", 3, 512, 512, "medium"),
        ("toRGB 4", 1, 512, 3, "medium"),
        ("Conv 8", 3, 512, 512, "fine"),
        ("Conv 9", 3, 512, 512, "fine"),
        ("toRGB 5", 1, 512, 3, "fine"),
        ("Conv 10", 3, 512, 256, "fine"),
        ("Conv 11", 3, 256, 256, "fine"),
        ("toRGB 6", 1, 256, 3, "fine"),
        ("Conv 12", 3, 256, 128, "fine"),
        ("Conv 13", 3, 128, 128, "fine"),
        ("toRGB 7", 1, 128, 3, "fine"),
        ("Conv 14", 3, 128, 64, "fine"),
        ("Conv 15", 3, 64, 64, "fine"),
        ("toRGB 8", 1, 64, 3, "fine"),
        ("Conv 16", 3, 64, 32, "fine"),
        ("Conv 17", 3, 32, 32, "fine"),
        ("toRGB 9", 1, 32, 3, "fine"),
    ]
    layers = tuple(
        LayerSpec(index=i, name=name, kernel=k, c_in=cin, c_out=cout, group=group,
                  kind="toRGB" if name.startswith("toRGB") else "conv")
        for i, (name, k, cin, cout, group) in enumerate(rows, start=1)
    )
    return GeneratorSpec(layers=layers, latent_dim=512, name=STYLEGAN2_1024)


def toy_channels(resolution: int, base_channels: int) -> int:
    """Feature width at a resolution: base_channels up to 16px, then halving (floor 4)."""
    return max(4, min(base_channels, base_channels * 16 // resolution))


def toy_spec(max_resolution: int, base_channels: int, latent_dim: Optional[int] = None) -> GeneratorSpec:
    """
    Scaled-down layer table with the same block pattern and grouping as the 1024px table

    Block 0 (4x4) holds one conv and a toRGB; every later block holds an upsampling
    conv, a conv and a toRGB. Coarse and medium each take round(2B/9) blocks (at
    least one), fine takes the rest. With only two blocks, block 0 is coarse and
    block 1 is split: its first conv is medium, the rest fine.

    Args:
        max_resolution (int): Output resolution, a power of two >= 8
        base_channels (int): Widest feature width, >= 4
        latent_dim (int, optional): Dimension of w (default: base_channels)

    Returns:
        GeneratorSpec: The toy table
    """
    if max_resolution < 8 or max_resolution & (max_resolution - 1):
        raise ConfigError(f"max_resolution must be a power of two >= 8 (got {max_resolution})")
    if base_channels < 4:
        raise ConfigError(f"base_channels must be >= 4 (got {base_channels})")

    n_blocks = int(math.log2(max_resolution)) - 1
    n_coarse = max(1, round(2 * n_blocks / 9))
    n_medium = max(1, round(2 * n_blocks / 9))
    if n_blocks == 2:
        n_coarse, n_medium = 1, 0

    def block_group(b):
        if b < n_coarse:
            return "coarse"
        if b < n_coarse + n_medium:
            return "medium"
        return "fine"

    rows = []
    n_conv = n_rgb = 0
    for b in range(n_blocks):
        res = 4 * 2 ** b
        width = toy_channels(res, base_channels)
        group = block_group(b)
        if b == 0:
            convs = [(width, width)]
        else:
            convs = [(toy_channels(res // 2, base_channels), width), (width, width)]
        for j, (cin, cout) in enumerate(convs):
            n_conv += 1
            conv_group = "medium" if (n_blocks == 2 and b == 1 and j == 0) else group
            rows.append((f"Conv {n_conv}", 3, cin, cout, conv_group, "conv"))
        n_rgb += 1
        rows.append((f"toRGB {n_rgb}", 1, width, 3, group, "toRGB"))

    layers = tuple(
        LayerSpec(index=i, name=name, kernel=k, c_in=cin, c_out=cout, group=group, kind=kind)
        for i, (name, k, cin, cout, group, kind) in enumerate(rows, start=1)
    )
    return GeneratorSpec(layers=layers, latent_dim=latent_dim or base_channels,
                         name=f"toy-{max_resolution}-{base_channels}")


def resolve_spec(name_or_path: str) -> GeneratorSpec:
    """Load a builtin spec by name or a spec JSON document by path."""
    if name_or_path == STYLEGAN2_1024:
        return full_stylegan2_spec()
    if name_or_path.startswith("toy-"):
        try:
            _, res, base = name_or_path.split("-")
            return toy_spec(int(res), int(base))
        except ValueError as e:
            raise ConfigError(f"Toy spec names look like toy-<resolution>-<channels>, got {name_or_path!r}") from e
    return GeneratorSpec.load(name_or_path)


def select_refined_layers(spec: GeneratorSpec, policy: str) -> List[int]:
    """Indices (ascending) of the layers a hypernetwork refines under a policy."""
    if policy not in LAYER_POLICIES:
        raise ConfigError(f"Unknown layer policy {policy!r}")
    if policy == "none":
        return []
    if policy == "all_including_torgb":
        return [layer.index for layer in spec.layers]
    if policy == "all_conv":
        return [layer.index for layer in spec.layers if layer.is_conv]
    return [layer.index for layer in spec.layers if layer.is_conv and layer.group in ("medium", "fine")]


def uses_shared_block(layer: LayerSpec, config: HyperNetConfig) -> bool:
    """Shared-mix heads serve exactly the square convs as wide as the shared FC."""
    return (config.head_variant == "per_channel_shared_mix" and layer.is_conv
            and layer.c_in == layer.c_out == config.shared_fc_dim)


# ---- closed-form arithmetic -------------------------------------------------

def conv_params(kernel: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return kernel * kernel * c_in * c_out + (c_out if bias else 0)


def linear_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def _log2_floor(n: int) -> int:
    return max(0, n.bit_length() - 1)


def standard_head_convs(channels: int, height: int) -> List[Tuple[int, int, int]]:
    """(c_in, c_out, stride) of the down-sampling convs of a standard Refinement Block.

    log2(h) - 1 stride-2 convs (at least one) taking C -> C/2 -> ... -> C/2 -> C;
    adaptive pooling collapses what is left to 1x1.
    """
    n = max(1, _log2_floor(height) - 1)
    if n == 1:
        return [(channels, channels, 2)]
    half = max(1, channels // 2)
    return [(channels, half, 2)] + [(half, half, 2)] * (n - 2) + [(half, channels, 2)]


def shared_head_convs(channels: int, height: int, shared_dim: int) -> List[Tuple[int, int, int]]:
    """(c_in, c_out, stride) of the slim convs of a shared-mix head.

    One stride-1 conv C -> C/4, then log2(h) stride-2 convs (at least one)
    ending at the shared width.
    """
    quarter = max(1, channels // 4)
    n = max(1, _log2_floor(height))
    return [(channels, quarter, 1)] + [(quarter, quarter, 2)] * (n - 1) + [(quarter, shared_dim, 2)]


def head_output_size(layer: LayerSpec, variant: str) -> int:
    """Output width of a head's final fully-connected layer."""
    k, _, cin, cout = layer.shape
    if variant == "per_parameter_naive":
        return k * k * cin * cout
    if variant == "separable":
        return k * k * cin + k * k * cout
    return cin * cout


def backbone_params(widths: Sequence[int], blocks: Sequence[int], in_channels: int = 6) -> int:
    """ResNet34-shaped backbone: 7x7 stem (no bias) + BN + PReLU, then BasicBlock stages."""
    total = conv_params(7, in_channels, widths[0], bias=False) + 2 * widths[0] + widths[0]
    prev = widths[0]
    for stage, (width, n_blocks) in enumerate(zip(widths, blocks)):
        for b in range(n_blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            total += conv_params(3, prev, width, bias=False) + 2 * width
            total += conv_params(3, width, width, bias=False) + 2 * width
            if stride != 1 or prev != width:
                total += conv_params(1, prev, width, bias=False) + 2 * width
            prev = width
    return total


@dataclass
class ParamReport:
    backbone_params: int
    per_head_params: Dict[int, int]
    shared_params: int
    head_kinds: Dict[int, str] = field(default_factory=dict)
    final_fc_params: Dict[int, int] = field(default_factory=dict)
    layer_names: Dict[int, str] = field(default_factory=dict)
    layer_shapes: Dict[int, str] = field(default_factory=dict)
    total: int = field(init=False)

    def __post_init__(self):
        self.total = self.backbone_params + self.shared_params + sum(self.per_head_params.values())

    def to_dict(self) -> dict:
        return {
            "backbone_params": self.backbone_params,
            "per_head_params": {str(k): v for k, v in self.per_head_params.items()},
            "shared_params": self.shared_params,
            "total": self.total,
            "heads": [
                {
                    "index": index,
                    "name": self.layer_names.get(index, ""),
                    "shape": self.layer_shapes.get(index, ""),
                    "head": self.head_kinds.get(index, ""),
                    "params": params,
                    "final_fc_params": self.final_fc_params.get(index, 0),
                }
                for index, params in self.per_head_params.items()
            ],
        }

    def to_table(self) -> str:
        """Aligned plain-text table: one row per head, then the summary rows."""
        rows = [("layer", "name", "shape", "head", "params")]
        for index, params in self.per_head_params.items():
            rows.append((str(index), self.layer_names.get(index, ""), self.layer_shapes.get(index, ""),
                         self.head_kinds.get(index, ""), f"{params:,}"))
        rows.append(("", "backbone", "", "", f"{self.backbone_params:,}"))
        rows.append(("", "shared", "", "", f"{self.shared_params:,}"))
        rows.append(("", "total", "", "", f"{self.total:,}"))
        widths = [max(len(row[i]) for row in rows) for i in range(5)]
        lines = []
        for n, row in enumerate(rows):
            cells = [cell.ljust(w) for cell, w in zip(row[:4], widths[:4])] + [row[4].rjust(widths[4])]
            lines.append("  ".join(cells).rstrip())
            if n == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines)


def count_hypernet_params(spec: GeneratorSpec, config: HyperNetConfig) -> ParamReport:
    """
    Count the parameters of a hypernetwork configuration without building it

    Args:
        spec (GeneratorSpec): Generator layer table
        config (HyperNetConfig): Head variant, layer policy and backbone shape

    Returns:
        ParamReport: Backbone, per-head and shared counts
    """
    if config.head_variant not in HEAD_VARIANTS:
        raise ConfigError(f"Unknown head variant {config.head_variant!r}")
    height, _, channels = config.backbone_feature_shape
    shared_dim = config.shared_fc_dim

    per_head, kinds, fcs, names, shapes = {}, {}, {}, {}, {}
    any_shared = False
    for index in select_refined_layers(spec, config.layer_policy):
        layer = spec.layer(index)
        names[index] = layer.name
        shapes[index] = layer.describe()
        if uses_shared_block(layer, config):
            any_shared = True
            convs = shared_head_convs(channels, height, shared_dim)
            fc = linear_params(shared_dim, shared_dim)
            kinds[index] = "shared"
        else:
            convs = standard_head_convs(channels, height)
            fc = linear_params(channels, head_output_size(layer, config.head_variant))
            kinds[index] = config.head_variant.replace("per_channel_shared_mix", "per_channel_standard")
        per_head[index] = sum(conv_params(3, cin, cout) for cin, cout, _ in convs) + fc
        fcs[index] = fc

    shared = 0
    if any_shared:
        # D -> D*D mixing layer and the per-channel D -> D layer, counted once
        shared = linear_params(shared_dim, shared_dim * shared_dim) + linear_params(shared_dim, shared_dim)

    return ParamReport(
        backbone_params=backbone_params(config.backbone_widths, config.backbone_blocks, in_channels=6),
        per_head_params=per_head,
        shared_params=shared,
        head_kinds=kinds,
        final_fc_params=fcs,
        layer_names=names,
        layer_shapes=shapes,
    )


COMPARED_VARIANTS = ("per_parameter_naive", "per_channel_standard", "per_channel_shared_mix", "separable")


def variant_report(spec: GeneratorSpec, config: HyperNetConfig,
                  variants: Iterable[str] = COMPARED_VARIANTS) -> List[dict]:
    """Totals of each head variant under one layer policy, with the saving versus the naive head."""
    totals = {variant: count_hypernet_params(spec, config.replace(head_variant=variant)).total
              for variant in variants}
    naive = totals.get("per_parameter_naive")
    rows = []
    for variant, total in totals.items():
        saving = (1.0 - total / naive) * 100.0 if naive else None
        rows.append({"head_variant": variant, "total": total, "saving_vs_naive_pct": saving})
    return rows


def format_variant_table(rows: List[dict]) -> str:
    width = max(len(row["head_variant"]) for row in rows)
    lines = [f"{'head variant'.ljust(width)}  {'parameters':>15}  {'vs naive':>9}"]
    for row in rows:
        saving = row["saving_vs_naive_pct"]
        saving_text = f"{saving:8.1f}%" if saving is not None else "        -"
        lines.append(f"{row['head_variant'].ljust(width)}  {row['total']:>15,}  {saving_text}")
    return "\n".join(lines)
