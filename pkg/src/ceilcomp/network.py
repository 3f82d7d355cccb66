"""Layer-graph execution: forward, backward, loss, and storage classification."""
import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import (
    ADD, CONV, DENSE, FLATTEN, GAP, INPUT, POOL, POOL2, PROJ, RELU, XENT,
    ArchDescription, LayerSpec, infer_shapes, layer_param_shapes,
)
from .errors import ConfigurationError, DimensionError, ParameterError, StateError

STORED = "Stored"
FUSED = "Fused"


@dataclass
class ParamEntry:
    tensors: dict  # tensor name ("w", "b", "s1", "s2") -> float32 array
    trainable: bool = True


@dataclass
class NetworkGraph(ArchDescription):
    params: dict = field(default_factory=dict)  # layer name -> ParamEntry
    revision: int = 0

    @classmethod
    def from_arch(cls, arch, seed=0):
        """Instantiate ``arch`` with He-normal weights and zero biases."""
        net = cls(arch.name, tuple(arch.input_shape), list(arch.layers), dict(arch.edges), arch.declared_params)
        rng = np.random.default_rng(seed)
        shapes = net.shapes()
        for layer in net.layers:
            pshapes = layer_param_shapes(layer, shapes[net.edges[layer.name][0]])
            if not pshapes:
                continue
            tensors = {}
            for tname, shp in pshapes.items():
                if tname == "b":
                    tensors[tname] = np.zeros(shp, dtype=T.DTYPE)
                else:
                    fan_in = int(np.prod(shp[1:]))
                    tensors[tname] = (rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)).astype(T.DTYPE)
            net.params[layer.name] = ParamEntry(tensors, True)
        return net

    def arch(self):
        return ArchDescription(self.name, self.input_shape, list(self.layers), dict(self.edges), self.declared_params)

    def shapes(self):
        return infer_shapes(self)

    def copy(self):
        return copy.deepcopy(self)

    def freeze(self, keep_projections=True):
        """Mark every non-projection parameter frozen."""
        for lname, entry in self.params.items():
            entry.trainable = keep_projections and self.layer(lname).kind == PROJ

    def trainable_keys(self):
        return sorted(
            f"{lname}.{t}" for lname, e in self.params.items() if e.trainable for t in e.tensors
        )

    def get(self, key):
        lname, tname = key.rsplit(".", 1)
        return self.params[lname].tensors[tname]

    def named_tensors(self):
        for lname in sorted(self.params):
            for tname in sorted(self.params[lname].tensors):
                yield f"{lname}.{tname}", self.params[lname].tensors[tname]

    def num_param_elements(self):
        return int(sum(t.size for _, t in self.named_tensors()))

    def touch(self):
        self.revision += 1


def fold_batchnorm(w, b, gamma, beta, mean, var, eps=1e-5):
    """Fold a frozen BN (applied after the conv) into the conv's weight and bias."""
    scale = np.asarray(gamma, np.float64) / np.sqrt(np.asarray(var, np.float64) + eps)
    bias = np.zeros_like(scale) if b is None else np.asarray(b, np.float64)
    w_f = np.asarray(w, np.float64) * scale[:, None, None, None]
    b_f = (bias - mean) * scale + beta
    return T.as_tensor(w_f), T.as_tensor(b_f)


# ---------------------------------------------------------------- forward / backward


@dataclass
class Cache:
    net_id: int
    revision: int
    acts: dict        # tensor name -> retained output
    argmax: dict      # pool layer -> argmax indices
    in_shapes: dict   # layer -> input shape (with batch)


def _check_batch(net, batch):
    expect = tuple(net.input_shape)
    if batch.ndim != len(expect) + 1 or tuple(batch.shape[1:]) != expect:
        raise DimensionError(
            f"edge input -> {net.layers[0].name}: batch shape {batch.shape} does not match declared input {expect}"
        )


def _layer_forward(net, layer, ins, cache):
    kind, a = layer.kind, layer.attrs
    p = net.params.get(layer.name)
    x = ins[0]
    if kind == CONV:
        if a["groups"] != 1:
            raise ConfigurationError(f"layer {layer.name!r}: grouped convolution is shape-only")
        return T.conv2d_forward(x, p.tensors["w"], p.tensors.get("b"), a["stride"], a["pad"])
    if kind == RELU:
        return T.relu_forward(x)
    if kind == POOL2:
        out, idx = T.maxpool2x2_forward(x)
        cache.argmax[layer.name] = idx
        return out
    if kind == POOL:
        out, idx = T.maxpool_forward(x, a["k"], a["stride"], a["pad"])
        cache.argmax[layer.name] = idx
        return out
    if kind == DENSE:
        out = x @ p.tensors["w"].T
        if "b" in p.tensors:
            out = out + p.tensors["b"]
        return out
    if kind == FLATTEN:
        return x.reshape(x.shape[0], -1)
    if kind == GAP:
        return x.mean(axis=(2, 3), dtype=T.DTYPE)
    if kind == ADD:
        return ins[0] + ins[1]
    if kind == XENT:
        return x
    if kind == PROJ:
        y = T.channel_mix(x, p.tensors["s1"])
        return y if a["folded"] else T.channel_mix(y, p.tensors["s2"])
    raise ConfigurationError(f"cannot execute layer kind {kind}")  # pragma: no cover


def forward(net, batch, keep_cache=True):
    """Run ``batch`` through ``net``; returns ``(logits, cache)`` (cache is None unless kept)."""
    batch = T.as_tensor(batch)
    _check_batch(net, batch)
    cache = Cache(id(net), net.revision, {}, {}, {})
    vals = {INPUT: batch}
    out_name = net.output_name()
    remaining = {}
    for layer in net.layers:
        for src in net.edges[layer.name]:
            remaining[src] = remaining.get(src, 0) + 1
    for layer in net.layers:
        ins = [vals[s] for s in net.edges[layer.name]]
        cache.in_shapes[layer.name] = ins[0].shape
        try:
            out = _layer_forward(net, layer, ins, cache)
        except DimensionError as exc:
            raise DimensionError(f"edge {net.edges[layer.name]} -> {layer.name}: {exc}") from None
        vals[layer.name] = out
        if not keep_cache:
            for src in net.edges[layer.name]:
                remaining[src] -= 1
                if remaining[src] == 0 and src not in (INPUT, out_name):
                    del vals[src]
    logits = vals[out_name]
    if not keep_cache:
        return logits, None
    cache.acts = vals
    return logits, cache


def _requires_grad(net):
    req = {INPUT: False}
    for layer in net.layers:
        own = layer.name in net.params and net.params[layer.name].trainable
        req[layer.name] = own or any(req[s] for s in net.edges[layer.name])
    return req


def backward(net, cache, loss_grad):
    """Gradient map ``"layer.tensor" -> array`` for trainable parameters only."""
    if cache is None or cache.net_id != id(net) or cache.revision != net.revision or not cache.acts:
        raise StateError("backward needs the cache of a forward(keep_cache=True) call on this network state")
    req = _requires_grad(net)
    acts = cache.acts
    out_name = net.output_name()
    loss_grad = T.as_tensor(loss_grad)
    if loss_grad.shape != acts[out_name].shape:
        raise DimensionError(f"loss_grad shape {loss_grad.shape} != logits shape {acts[out_name].shape}")
    grads = {out_name: loss_grad}
    pgrads = {}
    for layer in reversed(net.layers):
        if layer.kind == XENT or layer.name not in grads:
            continue
        g = grads.pop(layer.name)
        srcs = net.edges[layer.name]
        need_in = [req[s] for s in srcs]
        entry = net.params.get(layer.name)
        train = entry is not None and entry.trainable
        if not train and not any(need_in):
            continue
        in_grads = _layer_backward(net, layer, g, acts, cache, need_in[0], train, pgrads)
        for src, need, gin in zip(srcs, need_in, in_grads):
            if need and gin is not None:
                grads[src] = grads[src] + gin if src in grads else gin
    return {k: pgrads[k] for k in sorted(pgrads)}


def _layer_backward(net, layer, g, acts, cache, need_x, train, pgrads):
    kind, a, name = layer.kind, layer.attrs, layer.name
    srcs = net.edges[name]
    x = acts.get(srcs[0])
    p = net.params.get(name)
    if kind == CONV:
        gx, gw, gb = T.conv2d_backward(g, x, p.tensors["w"], a["stride"], a["pad"], need_x=need_x, need_w=train)
        if train:
            pgrads[f"{name}.w"] = gw
            if "b" in p.tensors:
                pgrads[f"{name}.b"] = gb
        return [gx]
    if kind == RELU:
        return [T.relu_backward(g, acts[name])]
    if kind == POOL2:
        return [T.maxpool2x2_backward(g, cache.argmax[name])]
    if kind == POOL:
        return [T.maxpool_backward(g, cache.argmax[name], cache.in_shapes[name], a["k"], a["stride"], a["pad"])]
    if kind == DENSE:
        if train:
            pgrads[f"{name}.w"] = g.T @ x
            if "b" in p.tensors:
                pgrads[f"{name}.b"] = g.sum(axis=0)
        return [g @ p.tensors["w"] if need_x else None]
    if kind == FLATTEN:
        return [g.reshape(cache.in_shapes[name])]
    if kind == GAP:
        b, c, h, w = cache.in_shapes[name]
        return [np.broadcast_to((g / (h * w))[:, :, None, None], (b, c, h, w)).astype(T.DTYPE)]
    if kind == ADD:
        return [g, g]
    if kind == PROJ:
        s1 = p.tensors["s1"]
        b, c, h, w = x.shape
        xf = x.reshape(b, c, h * w)
        y = s1 @ xf
        gf = g.reshape(b, g.shape[1], h * w)
        if a["folded"]:
            gy = gf
        else:
            s2 = p.tensors["s2"]
            if train:
                pgrads[f"{name}.s2"] = np.einsum("bcs,bks->ck", gf, y, dtype=T.DTYPE)
            gy = s2.T @ gf
        if train:
            pgrads[f"{name}.s1"] = np.einsum("bks,bcs->kc", gy, xf, dtype=T.DTYPE)
        return [(s1.T @ gy).reshape(b, c, h, w) if need_x else None]
    raise ConfigurationError(f"no backward rule for {kind}")  # pragma: no cover


def softmax_xent(logits, labels):
    """Mean cross-entropy of softmax(logits); returns ``(loss, dloss/dlogits)``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    b, n_cls = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ParameterError(f"labels must lie in [0, {n_cls}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean(dtype=np.float64))
    grad = e / s
    grad[rows, labels] -= 1.0
    return loss, (grad / b).astype(T.DTYPE)


def predict(net, images, batch_size=1000):
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(net, images[i:i + batch_size], keep_cache=False)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- storage classes


@dataclass(frozen=True)
class ActivationRecord:
    producer: str
    shape: tuple
    storage_class: str
    site: str  # name of the layer heading the fused group this tensor belongs to


def classify_storage(net):
    """Classify every materialisable tensor as Stored or Fused.

    A group starts at any non-elementwise layer and absorbs, through
    single-consumer edges, a following ReLU, a ResidualAdd (when the group's
    tensor is the add's first operand) and one MaxPool2x2. A Projection's input
    is fused into its producer group and the compressed output is stored.
    Flatten and SoftmaxXent alias their input and produce no record.
    """
    shapes = infer_shapes(net)
    kinds = {layer.name: layer.kind for layer in net.layers}
    cons = {layer.name: [] for layer in net.layers}
    for layer in net.layers:
        for src in net.edges[layer.name]:
            if src != INPUT:
                cons[src].append(layer.name)
    group_of = {}
    seen = {RELU: set(), POOL2: set(), ADD: set()}
    for layer in net.layers:
        name, kind = layer.name, layer.kind
        if kind in (FLATTEN, XENT):
            continue
        head = name
        src = net.edges[name][0]
        if src != INPUT and len(cons[src]) == 1 and src in group_of:
            g = group_of[src]
            if kind == PROJ:
                head = g
            elif kind in seen and g not in seen[kind] and not (kind == ADD and g in seen[POOL2]):
                head = g
                seen[kind].add(g)
        group_of[name] = head
    out = []
    for name, head in group_of.items():
        downstream = cons[name]
        fused = len(downstream) == 1 and group_of.get(downstream[0]) == head
        # an explicit lift is recomputed inside each consumer, never materialised
        fused = fused or (kinds[name] == CONV and net.layer(name)["lift"] == 1)
        out.append(ActivationRecord(name, tuple(shapes[name]), FUSED if fused else STORED, head))
    return out


def stored_records(net):
    return [r for r in classify_storage(net) if r.storage_class == STORED]
