"""Declarative CNN descriptions and their on-disk YAML format.

A network file looks like::

    name: toy6
    input_shape: [3, 16, 16]      # channels, height, width
    output_classes: 10
    training: {epochs_warmup: 12} # optional SearchConfig defaults
    layers:
      - {id: c0, kind: conv2d, c_out: 16, kx: 3, ky: 3, padding: 1}
      - {id: b0, kind: batchnorm}
      ...

``inputs`` defaults to the previous layer (the network input for the first
one).  ``c_in`` may be omitted and is inferred from the producer; layers that
do not change the channel count may omit ``c_out`` as well.  Producers that
feed one ``add`` must resolve to the same ``mask_group``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .tensor import conv_output_size

LAYER_KINDS = (
    "conv2d",
    "dw_conv2d",
    "dense",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "global_avgpool",
    "add",
    "flatten",
)
CONV_KINDS = ("conv2d", "dw_conv2d")
SPATIAL_KINDS = ("conv2d", "dw_conv2d", "maxpool", "avgpool")
INPUT = "input"


class SpecError(ValueError):
    """Invalid network description; the message names the layer or field."""


@dataclass
class LayerSpec:
    id: str
    kind: str
    c_in: int
    c_out: int
    kx: int = 1
    ky: int = 1
    sx: int = 1
    sy: int = 1
    padding: tuple[int, int] = (0, 0)  # (py, px)
    inputs: tuple[str, ...] = ()
    mask_group: str | None = None

    @property
    def searchable(self) -> bool:
        return self.kind == "conv2d"

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"id": self.id, "kind": self.kind, "c_in": self.c_in, "c_out": self.c_out}
        if self.kind in SPATIAL_KINDS:
            d.update(kx=self.kx, ky=self.ky, sx=self.sx, sy=self.sy)
            py, px = self.padding
            d["padding"] = py if py == px else [py, px]
        d["inputs"] = list(self.inputs)
        if self.mask_group is not None:
            d["mask_group"] = self.mask_group
        return d


@dataclass
class NetworkSpec:
    """A validated, topologically ordered layer graph.

    Construction resolves every layer's output shape (``shapes``), the mask
    group that controls each activation's channels (``sources``) and the
    channel count of every group (``groups``).
    """

    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    output_classes: int
    training: dict = field(default_factory=dict)
    shapes: dict[str, tuple[int, ...]] = field(init=False, repr=False)
    sources: dict[str, str | None] = field(init=False, repr=False)
    groups: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self._resolve()

    def layer(self, layer_id: str) -> LayerSpec:
        for lay in self.layers:
            if lay.id == layer_id:
                return lay
        raise KeyError(layer_id)

    def conv_layers(self) -> list[LayerSpec]:
        return [lay for lay in self.layers if lay.kind in CONV_KINDS]

    def output_area(self, layer_id: str) -> int:
        shape = self.shapes[layer_id]
        return shape[1] * shape[2]

    def input_source(self, lay: LayerSpec) -> str | None:
        """Mask group governing the channels that ``lay`` consumes."""
        return self.sources[lay.inputs[0]]

    def group_of(self, lay: LayerSpec) -> str:
        return lay.mask_group or lay.id

    # -------------------------------------------------------------- resolve

    def _resolve(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"{self.name}: input_shape must be 3 positive integers, got {self.input_shape}")
        if not self.layers:
            raise SpecError(f"{self.name}: no layers")
        shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        sources: dict[str, str | None] = {INPUT: None}
        groups: dict[str, int] = {}
        for idx, lay in enumerate(self.layers):
            where = f"layer {lay.id!r}"
            if lay.kind not in LAYER_KINDS:
                raise SpecError(f"{where}: unknown kind {lay.kind!r}")
            if lay.id in shapes:
                raise SpecError(f"{where}: duplicate id")
            if not lay.inputs:
                raise SpecError(f"{where}: no inputs")
            for src in lay.inputs:
                if src not in shapes:
                    raise SpecError(f"{where}: input {src!r} is not defined before this layer")
            if lay.kind == "add":
                if len(lay.inputs) < 2:
                    raise SpecError(f"{where}: add needs at least two inputs")
            elif len(lay.inputs) != 1:
                raise SpecError(f"{where}: {lay.kind} takes exactly one input")
            for name in ("c_in", "c_out", "kx", "ky", "sx", "sy"):
                if getattr(lay, name) < 1:
                    raise SpecError(f"{where}: {name} must be positive")
            if min(lay.padding) < 0:
                raise SpecError(f"{where}: padding must be non-negative")

            in_shape = shapes[lay.inputs[0]]
            in_src = sources[lay.inputs[0]]
            if lay.kind == "dense":
                if idx != len(self.layers) - 1:
                    raise SpecError(f"{where}: dense is only allowed as the final layer")
                if len(in_shape) != 1:
                    raise SpecError(f"{where}: dense input must be flattened, got shape {in_shape}")
                if lay.c_in != in_shape[0]:
                    raise SpecError(f"{where}: c_in={lay.c_in} but input provides {in_shape[0]} features")
                if lay.c_out != self.output_classes:
                    raise SpecError(f"{where}: c_out={lay.c_out} but output_classes={self.output_classes}")
                shapes[lay.id] = (lay.c_out,)
                sources[lay.id] = None
                continue
            if len(in_shape) != 3:
                raise SpecError(f"{where}: expects a C,H,W feature map, got shape {in_shape}")
            c, h, w = in_shape
            if lay.c_in != c:
                raise SpecError(f"{where}: c_in={lay.c_in} but input {lay.inputs[0]!r} has {c} channels")
            if lay.kind in SPATIAL_KINDS:
                oh = conv_output_size(h, lay.ky, lay.sy, lay.padding[0])
                ow = conv_output_size(w, lay.kx, lay.sx, lay.padding[1])
                if oh < 1 or ow < 1:
                    raise SpecError(f"{where}: non-positive output size {oh}x{ow}")
            else:
                oh, ow = h, w
            if lay.kind == "conv2d":
                gid = self.group_of(lay)
                if gid in groups and groups[gid] != lay.c_out:
                    raise SpecError(
                        f"{where}: mask_group {gid!r} has {groups[gid]} channels, layer has {lay.c_out}"
                    )
                groups[gid] = lay.c_out
                shapes[lay.id] = (lay.c_out, oh, ow)
                sources[lay.id] = gid
            elif lay.kind == "add":
                for src in lay.inputs[1:]:
                    if shapes[src] != in_shape:
                        raise SpecError(
                            f"{where}: input shapes differ ({lay.inputs[0]}: {in_shape}, {src}: {shapes[src]})"
                        )
                    if sources[src] != in_src:
                        raise SpecError(
                            f"{where}: producers belong to different mask groups "
                            f"({in_src!r} vs {sources[src]!r}); give them a shared mask_group"
                        )
                if lay.c_out != c:
                    raise SpecError(f"{where}: c_out must equal c_in for add")
                shapes[lay.id] = in_shape
                sources[lay.id] = in_src
            elif lay.kind == "flatten":
                if lay.c_out != c * h * w:
                    raise SpecError(f"{where}: flatten c_out must be {c * h * w}, got {lay.c_out}")
                shapes[lay.id] = (c * h * w,)
                sources[lay.id] = in_src
            elif lay.kind == "global_avgpool":
                if lay.c_out != c:
                    raise SpecError(f"{where}: c_out must equal c_in for global_avgpool")
                shapes[lay.id] = (c,)
                sources[lay.id] = in_src
            else:  # dw_conv2d, batchnorm, relu, pools keep the channel count
                if lay.c_out != c:
                    raise SpecError(f"{where}: c_out must equal c_in for {lay.kind}")
                shapes[lay.id] = (c, oh, ow)
                sources[lay.id] = in_src
            if lay.mask_group is not None and lay.kind != "conv2d":
                raise SpecError(f"{where}: mask_group is only valid on conv2d layers")
        last = self.layers[-1]
        if last.kind != "dense":
            raise SpecError(f"{self.name}: the final layer must be the dense classifier, got {last.kind}")
        del shapes[INPUT]
        self.shapes = shapes
        self.sources = sources
        self.groups = groups

    # ------------------------------------------------------------ serialize

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_classes": self.output_classes,
        }
        if self.training:
            d["training"] = dict(self.training)
        d["layers"] = [lay.to_dict() for lay in self.layers]
        return d

    def dump(self, path: str | Path, extra: dict | None = None) -> None:
        data = self.to_dict()
        if extra:
            data.update(extra)
        Path(path).write_text(dump_yaml(data))


def dump_yaml(data: dict) -> str:
    class _Dumper(yaml.SafeDumper):
        pass

    def _seq(dumper, seq):
        flow = all(not isinstance(v, (dict, list)) for v in seq)
        return dumper.represent_sequence("tag:yaml.org,2002:seq", seq, flow_style=flow)

    def _map(dumper, m):
        flow = all(not isinstance(v, (dict, list)) or (isinstance(v, list) and len(v) <= 3) for v in m.values()) and "layers" not in m
        return dumper.represent_mapping("tag:yaml.org,2002:map", m.items(), flow_style=flow and "id" in m)

    _Dumper.add_representer(list, _seq)
    _Dumper.add_representer(dict, _map)
    return yaml.dump(data, Dumper=_Dumper, sort_keys=False, width=120)


# ----------------------------------------------------------------- loading


_LAYER_FIELDS = {f.name for f in dataclasses.fields(LayerSpec)}


def _node_to_py(node):
    """Convert a composed YAML node to Python, keeping mapping line numbers."""
    if isinstance(node, yaml.MappingNode):
        out = _LineDict()
        out.line = node.start_mark.line + 1
        out.key_lines = {}
        for k, v in node.value:
            key = _node_to_py(k)
            out[key] = _node_to_py(v)
            out.key_lines[key] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_py(v) for v in node.value]
    return _scalar(node)


def _scalar(node: yaml.ScalarNode):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


class _LineDict(dict):
    line: int = 0
    key_lines: dict = {}


def _int_field(raw: dict, key: str, where: str, loc, default=None, minimum: int = 1) -> int:
    if key not in raw:
        if default is None:
            raise SpecError(f"{loc(raw, key)}{where}: missing field {key!r}")
        return default
    val = raw[key]
    if isinstance(val, bool) or not isinstance(val, int) or val < minimum:
        bound = "positive" if minimum >= 1 else "non-negative"
        raise SpecError(f"{loc(raw, key)}{where}: field {key!r} must be a {bound} integer, got {val!r}")
    return val


def spec_from_dict(data: dict, origin: str = "<dict>") -> NetworkSpec:
    """Build a :class:`NetworkSpec` from parsed YAML/JSON, validating types."""

    def loc(raw, key=None):
        lines = getattr(raw, "key_lines", {}) or {}
        line = lines.get(key) if key is not None else None
        line = line or getattr(raw, "line", 0)
        return f"{origin}:{line}: " if line else f"{origin}: "

    if not isinstance(data, dict):
        raise SpecError(f"{origin}: top level must be a mapping")
    for key in ("name", "input_shape", "output_classes", "layers"):
        if key not in data:
            raise SpecError(f"{loc(data)}missing top-level field {key!r}")
    name = data["name"]
    if not isinstance(name, str):
        raise SpecError(f"{loc(data, 'name')}field 'name' must be a string, got {name!r}")
    ishape = data["input_shape"]
    if (
        not isinstance(ishape, list)
        or len(ishape) != 3
        or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in ishape)
    ):
        raise SpecError(f"{loc(data, 'input_shape')}field 'input_shape' must be 3 positive integers, got {ishape!r}")
    classes = _int_field(data, "output_classes", "top level", loc)
    training = data.get("training") or {}
    if not isinstance(training, dict):
        raise SpecError(f"{loc(data, 'training')}field 'training' must be a mapping")
    raw_layers = data["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SpecError(f"{loc(data, 'layers')}field 'layers' must be a non-empty list")

    dims: dict[str, tuple[int, ...]] = {INPUT: tuple(ishape)}
    layers: list[LayerSpec] = []
    prev = INPUT
    for i, raw in enumerate(raw_layers):
        if not isinstance(raw, dict):
            raise SpecError(f"{origin}: layers[{i}] must be a mapping")
        unknown = set(raw) - _LAYER_FIELDS
        if unknown:
            key = sorted(unknown)[0]
            raise SpecError(f"{loc(raw, key)}layers[{i}]: unknown field {key!r}")
        lid = raw.get("id")
        if not isinstance(lid, str) or not lid:
            raise SpecError(f"{loc(raw, 'id')}layers[{i}]: field 'id' must be a non-empty string, got {lid!r}")
        where = f"layer {lid!r}"
        kind = raw.get("kind")
        if kind not in LAYER_KINDS:
            raise SpecError(f"{loc(raw, 'kind')}{where}: field 'kind' must be one of {LAYER_KINDS}, got {kind!r}")
        inputs = raw.get("inputs", [prev])
        if isinstance(inputs, str):
            inputs = [inputs]
        if not isinstance(inputs, list) or not all(isinstance(s, str) for s in inputs):
            raise SpecError(f"{loc(raw, 'inputs')}{where}: field 'inputs' must be a list of layer ids")
        if not inputs:
            inputs = [INPUT]
        for src in inputs:
            if src not in dims:
                raise SpecError(f"{loc(raw, 'inputs')}{where}: input {src!r} is not defined before this layer")
        in_dims = dims[inputs[0]]
        c_in = _int_field(raw, "c_in", where, loc, default=in_dims[0])
        spatial = kind in ("maxpool", "avgpool")
        kx = _int_field(raw, "kx", where, loc, default=1)
        ky = _int_field(raw, "ky", where, loc, default=kx)
        sx = _int_field(raw, "sx", where, loc, default=kx if spatial else 1)
        sy = _int_field(raw, "sy", where, loc, default=ky if spatial else sx)
        pad = raw.get("padding", 0)
        if isinstance(pad, list) and len(pad) == 2:
            padding = tuple(pad)
        elif isinstance(pad, int) and not isinstance(pad, bool):
            padding = (pad, pad)
        else:
            raise SpecError(f"{loc(raw, 'padding')}{where}: field 'padding' must be an integer or [py, px], got {pad!r}")
        if any(isinstance(p, bool) or not isinstance(p, int) or p < 0 for p in padding):
            raise SpecError(f"{loc(raw, 'padding')}{where}: field 'padding' must be non-negative integers, got {pad!r}")
        out_dims = _out_dims(kind, in_dims, c_in, kx, ky, sx, sy, padding)
        if kind in ("conv2d", "dense"):
            c_out = _int_field(raw, "c_out", where, loc)
        else:
            c_out = _int_field(raw, "c_out", where, loc, default=out_dims[0])
        if kind in ("conv2d", "dense"):
            out_dims = (c_out,) + out_dims[1:]
        group = raw.get("mask_group")
        if group is not None and not isinstance(group, str):
            raise SpecError(f"{loc(raw, 'mask_group')}{where}: field 'mask_group' must be a string, got {group!r}")
        layers.append(LayerSpec(lid, kind, c_in, c_out, kx, ky, sx, sy, padding, tuple(inputs), group))
        dims[lid] = out_dims
        prev = lid
    try:
        return NetworkSpec(name, tuple(ishape), layers, classes, dict(training))
    except SpecError as exc:
        bad = next((r for r, lay in zip(raw_layers, layers) if f"'{lay.id}'" in str(exc)), None)
        prefix = loc(bad) if bad is not None else f"{origin}: "
        raise SpecError(f"{prefix}{exc}") from None


def _out_dims(kind, in_dims, c_in, kx, ky, sx, sy, padding) -> tuple[int, ...]:
    """Best-effort output dims used only to infer defaults while parsing."""
    if len(in_dims) != 3:
        return in_dims
    c, h, w = in_dims
    if kind in SPATIAL_KINDS:
        h = conv_output_size(h, ky, sy, padding[0])
        w = conv_output_size(w, kx, sx, padding[1])
    if kind == "flatten":
        return (c * h * w,)
    if kind == "global_avgpool":
        return (c,)
    return (c, h, w)


def zoo_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("chandnas.zoo").iterdir() if p.name.endswith(".yaml"))


def _read_source(path: str | Path) -> tuple[str, str]:
    p = str(path)
    if p.startswith("zoo:"):
        name = p[4:]
        res = resources.files("chandnas.zoo") / f"{name}.yaml"
        if not res.is_file():
            raise SpecError(f"unknown zoo network {name!r}; available: {', '.join(zoo_names())}")
        return res.read_text(), p
    return Path(p).read_text(), p


def load_network_spec(path: str | Path) -> NetworkSpec:
    """Load a network description from a YAML file or a ``zoo:<name>`` entry."""
    text, origin = _read_source(path)
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise SpecError(f"{origin}: malformed YAML: {exc}") from None
    if node is None:
        raise SpecError(f"{origin}: empty file")
    return spec_from_dict(_node_to_py(node), origin)


def load_yaml_with_lines(path: str | Path) -> dict:
    text, origin = _read_source(path)
    node = yaml.compose(text, Loader=yaml.SafeLoader)
    if node is None:
        raise SpecError(f"{origin}: empty file")
    return _node_to_py(node)
