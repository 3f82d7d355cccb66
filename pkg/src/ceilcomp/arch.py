"""Text architecture descriptions and the built-in shape catalog.

One layer per line::

    Kind name key=value ... [in=producer1,producer2]

Header lines: ``arch <name>``, ``input CxHxW`` (or ``input N`` for vectors),
``params <count>`` (declared pre-trained parameter count). ``#`` starts a
comment. A layer with no ``in=`` reads the previous layer's output; the
network input is called ``input``.
"""
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ArchitectureLookupError, ConfigurationError, DimensionError

CONV = "Conv2d"
RELU = "ReLU"
POOL2 = "MaxPool2x2"
POOL = "MaxPool"  # general k/stride/pad window; not fusable
DENSE = "Dense"
ADD = "ResidualAdd"
GAP = "GlobalAvgPool"
FLATTEN = "Flatten"
XENT = "SoftmaxXent"
PROJ = "Projection"

KINDS = (CONV, RELU, POOL2, POOL, DENSE, ADD, GAP, FLATTEN, XENT, PROJ)
POST_ACTIVATION = (RELU, POOL2, POOL, ADD)

INPUT = "input"

_DEFAULTS = {
    CONV: {"k": 1, "stride": 1, "pad": 0, "groups": 1, "bias": 1, "bn": 0, "lift": 0},
    DENSE: {"bias": 1},
    POOL: {"k": 2, "stride": 2, "pad": 0},
    PROJ: {"folded": 0},
}
_REQUIRED = {CONV: ("out",), DENSE: ("out",), PROJ: ("k",)}


@dataclass
class LayerSpec:
    kind: str
    name: str
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r} for layer {self.name!r}")
        merged = dict(_DEFAULTS.get(self.kind, {}))
        merged.update(self.attrs)
        self.attrs = merged
        for key in _REQUIRED.get(self.kind, ()):
            if key not in self.attrs:
                raise ConfigurationError(f"layer {self.name!r} ({self.kind}) needs attribute {key!r}")
        for key, val in self.attrs.items():
            minimum = 0 if key in ("pad", "bias", "bn", "folded", "lift") else 1
            if not isinstance(val, int) or val < minimum:
                raise ConfigurationError(f"layer {self.name!r}: attribute {key}={val!r} must be an int >= {minimum}")

    def __getitem__(self, key):
        return self.attrs[key]


@dataclass
class ArchDescription:
    name: str
    input_shape: tuple
    layers: list
    edges: dict  # layer name -> tuple of producer names
    declared_params: int = None

    def __post_init__(self):
        seen = set()
        for layer in self.layers:
            if layer.name in seen or layer.name == INPUT:
                raise ConfigurationError(f"duplicate layer name {layer.name!r}")
            for src in self.edges[layer.name]:
                if src != INPUT and src not in seen:
                    raise ConfigurationError(
                        f"layer {layer.name!r} reads {src!r}, which is not an earlier layer"
                    )
            seen.add(layer.name)

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigurationError(f"no layer named {name!r}")

    def consumers(self, name):
        return [layer.name for layer in self.layers if name in self.edges[layer.name]]

    def output_name(self):
        last = self.layers[-1]
        return self.edges[last.name][0] if last.kind == XENT else last.name


def parse_arch(text, name=None):
    arch_name = name
    input_shape = None
    declared = None
    layers, edges = [], {}
    prev = INPUT
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "arch":
            arch_name = tokens[1]
            continue
        if head == "input":
            input_shape = tuple(int(t) for t in tokens[1].lower().split("x"))
            continue
        if head == "params":
            declared = int(tokens[1])
            continue
        if len(tokens) < 2:
            raise ConfigurationError(f"line {lineno}: expected 'Kind name [key=value ...]'")
        attrs, inputs = {}, None
        for tok in tokens[2:]:
            key, sep, val = tok.partition("=")
            if not sep:
                raise ConfigurationError(f"line {lineno}: bad attribute {tok!r}")
            if key == "in":
                inputs = tuple(val.split(","))
            else:
                try:
                    attrs[key] = int(val)
                except ValueError:
                    raise ConfigurationError(f"line {lineno}: attribute {key} must be an integer") from None
        layer = LayerSpec(head, tokens[1], attrs)
        if layer.name in edges:
            raise ConfigurationError(f"line {lineno}: duplicate layer name {layer.name!r}")
        layers.append(layer)
        edges[layer.name] = inputs if inputs is not None else (prev,)
        prev = layer.name
    if input_shape is None:
        raise ConfigurationError("architecture description has no 'input' line")
    return ArchDescription(arch_name or "custom", input_shape, layers, edges, declared)


def format_arch(arch):
    lines = [f"arch {arch.name}", "input " + "x".join(str(d) for d in arch.input_shape)]
    if arch.declared_params is not None:
        lines.append(f"params {arch.declared_params}")
    prev = INPUT
    for layer in arch.layers:
        defaults = _DEFAULTS.get(layer.kind, {})
        parts = [layer.kind, layer.name]
        parts += [f"{k}={v}" for k, v in layer.attrs.items() if defaults.get(k) != v]
        ins = arch.edges[layer.name]
        if ins != (prev,):
            parts.append("in=" + ",".join(ins))
        lines.append(" ".join(parts))
        prev = layer.name
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- shapes and counts


def _conv_out(size, k, stride, pad, layer, axis):
    # floor division, as frameworks size strided stems; execution is stricter
    span = size + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"layer {layer!r}: kernel {k} larger than padded {axis} extent {size + 2 * pad}")
    return span // stride + 1


def infer_shapes(arch):
    """Map layer name -> output shape (without batch axis)."""
    shapes = {INPUT: tuple(arch.input_shape)}
    for layer in arch.layers:
        ins = [shapes[s] for s in arch.edges[layer.name]]
        shapes[layer.name] = _layer_shape(layer, ins)
    return shapes


def _need_map(layer, x):
    if len(x) != 3:
        raise DimensionError(f"edge into {layer.name!r}: expected a [c,h,w] feature map, got shape {x}")


def _layer_shape(layer, ins):
    kind, a = layer.kind, layer.attrs
    if kind != ADD and len(ins) != 1:
        raise DimensionError(f"layer {layer.name!r} takes one input, got {len(ins)}")
    x = ins[0]
    if kind == CONV:
        _need_map(layer, x)
        c, h, w = x
        if c % a["groups"] or a["out"] % a["groups"]:
            raise ConfigurationError(f"layer {layer.name!r}: groups={a['groups']} must divide channels")
        return (
            a["out"],
            _conv_out(h, a["k"], a["stride"], a["pad"], layer.name, "h"),
            _conv_out(w, a["k"], a["stride"], a["pad"], layer.name, "w"),
        )
    if kind == POOL2:
        _need_map(layer, x)
        c, h, w = x
        if h % 2 or w % 2:
            raise ConfigurationError(f"layer {layer.name!r}: MaxPool2x2 needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)
    if kind == POOL:
        _need_map(layer, x)
        c, h, w = x
        return (
            c,
            _conv_out(h, a["k"], a["stride"], a["pad"], layer.name, "h"),
            _conv_out(w, a["k"], a["stride"], a["pad"], layer.name, "w"),
        )
    if kind in (RELU, XENT):
        return x
    if kind == DENSE:
        if len(x) != 1:
            raise DimensionError(f"edge into Dense {layer.name!r}: expected a vector, got shape {x} (missing Flatten?)")
        return (a["out"],)
    if kind == FLATTEN:
        n = 1
        for d in x:
            n *= d
        return (n,)
    if kind == GAP:
        _need_map(layer, x)
        return (x[0],)
    if kind == ADD:
        if len(ins) != 2 or ins[0] != ins[1]:
            raise DimensionError(f"ResidualAdd {layer.name!r}: operand shapes differ or count != 2: {ins}")
        return x
    if kind == PROJ:
        _need_map(layer, x)
        c = x[0]
        if not 1 <= a["k"] < c:
            raise DimensionError(f"Projection {layer.name!r}: k={a['k']} must satisfy 1 <= k < c={c}")
        return (a["k"], x[1], x[2]) if a["folded"] else x
    raise ConfigurationError(f"no shape rule for {kind}")  # pragma: no cover


def layer_param_shapes(layer, in_shape):
    """Parameter tensor shapes of one layer as executed (BN already folded into a bias)."""
    a = layer.attrs
    if layer.kind == CONV:
        c_i = in_shape[0]
        shapes = {"w": (a["out"], c_i // a["groups"], a["k"], a["k"])}
        if a["bias"] or a["bn"]:
            shapes["b"] = (a["out"],)
        return shapes
    if layer.kind == DENSE:
        shapes = {"w": (a["out"], in_shape[0])}
        if a["bias"]:
            shapes["b"] = (a["out"],)
        return shapes
    if layer.kind == PROJ:
        c = in_shape[0]
        shapes = {"s1": (a["k"], c)}
        if not a["folded"]:
            shapes["s2"] = (c, a["k"])
        return shapes
    return {}


def count_params(arch, pretrained=True):
    """Parameter element count. ``pretrained`` counts BN scale/shift as two per channel
    (as a checkpoint with un-folded BN stores them) instead of one folded bias."""
    shapes = infer_shapes(arch)
    total = 0
    for layer in arch.layers:
        in_shape = shapes[arch.edges[layer.name][0]]
        for shp in layer_param_shapes(layer, in_shape).values():
            n = 1
            for d in shp:
                n *= d
            total += n
        if pretrained and layer.kind == CONV and layer.attrs["bn"]:
            total += 2 * layer.attrs["out"] - (0 if layer.attrs["bias"] else layer.attrs["out"])
    return total


# ---------------------------------------------------------------- catalog

CATALOG = ("vgg16", "vgg19", "resnet18", "mobilenetv2", "mnist_convnet")


def catalog_names():
    return CATALOG


def load_arch(name_or_path):
    """Resolve a catalog name, or read a description file when the argument is a path."""
    key = str(name_or_path)
    path = Path(key)
    if path.suffix == ".arch" or path.exists():
        if not path.exists():
            raise ArchitectureLookupError(f"architecture file not found: {key}")
        return parse_arch(path.read_text(), name=path.stem)
    lookup = key.lower().replace("-", "").replace("_", "")
    for name in CATALOG:
        if name.replace("_", "") == lookup:
            text = resources.files("ceilcomp.archs").joinpath(f"{name}.arch").read_text()
            return parse_arch(text, name=name)
    raise ArchitectureLookupError(f"unknown architecture {key!r}; catalog has {', '.join(CATALOG)}")


def with_input(arch, input_shape):
    return ArchDescription(arch.name, tuple(input_shape), arch.layers, arch.edges, arch.declared_params)
