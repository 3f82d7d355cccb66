"""Channel projection pairs: initialisation, insertion into a graph, and folding.

A pair compresses a stored feature map ``x`` [c, m, n] to ``y = S1 x`` with
``k < c`` channels and lifts it back with ``S2 y``. Folding moves ``S2`` into
the next convolution, ``w~[o, j] = sum_c w[o, c] * S2[c, j]``, so at inference
only ``S1`` and the smaller kernel are kept.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arch import CONV, POST_ACTIVATION, PROJ, LayerSpec
from .errors import ConfigurationError, DimensionError, ParameterError
from .network import STORED, ParamEntry, classify_storage


@dataclass(frozen=True)
class ProjectionPair:
    s1: np.ndarray  # [k, c] compress
    s2: np.ndarray  # [c, k] lift
    site: str = None

    def __post_init__(self):
        s1, s2 = np.asarray(self.s1), np.asarray(self.s2)
        if s1.ndim != 2 or s2.ndim != 2 or s1.shape != s2.shape[::-1]:
            raise DimensionError(f"S1 {s1.shape} and S2 {s2.shape} must be [k,c] and [c,k]")
        k, c = s1.shape
        if not 1 <= k < c:
            raise ParameterError(f"rank k={k} must satisfy 1 <= k < c={c}")

    @property
    def k(self):
        return self.s1.shape[0]

    @property
    def c(self):
        return self.s1.shape[1]


@dataclass(frozen=True)
class FoldResult:
    w_tilde: np.ndarray  # [c_o, k, p, p]
    s1_kept: np.ndarray  # [k, c]
    param_delta: int


def _check_rank(k, c):
    if not isinstance(k, (int, np.integer)) or not 1 <= k < c:
        raise ParameterError(f"rank k={k} must satisfy 1 <= k < c={c}")


def weight_matrix(w):
    """Reshape a kernel [c_o, c_i, p, p] to the [p*p*c_o, c_i] matrix it multiplies channels by."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise DimensionError(f"expected a [c_o,c_i,p,p] kernel, got shape {w.shape}")
    return w.transpose(0, 2, 3, 1).reshape(-1, w.shape[1])


def svd_init(w_next, k, site=None):
    """Pair from the top-``k`` right singular vectors of the next layer's weight matrix."""
    what = weight_matrix(w_next)
    rows, c = what.shape
    _check_rank(k, c)
    if rows < k:
        # fewer rows than the rank: zero rows keep V and make it complete
        what = np.vstack([what, np.zeros((c - rows, c), what.dtype)])
    v = T.truncated_svd(what, k).v
    return ProjectionPair(s1=T.as_tensor(v.T), s2=T.as_tensor(v), site=site)


def pca_init(sample_maps, k, site=None):
    """Pair from the top-``k`` eigenvectors of the uncentred channel covariance of the samples."""
    maps = [np.asarray(x) for x in sample_maps]
    if not maps:
        raise ParameterError("pca_init needs at least one sample feature map")
    c = maps[0].shape[0]
    if any(x.ndim != 3 or x.shape[0] != c for x in maps):
        raise DimensionError(f"all samples must be [c,m,n] with c={c}")
    _check_rank(k, c)
    xhat = np.concatenate([T.reshape_fm(x) for x in maps], axis=1)
    if xhat.shape[1] < k:
        xhat = np.hstack([xhat, np.zeros((c, c - xhat.shape[1]), xhat.dtype)])
    u = T.truncated_svd(xhat, k).u
    return ProjectionPair(s1=T.as_tensor(u.T), s2=T.as_tensor(u), site=site)


def random_init(c, k, seed=0, site=None):
    """Pair from a random orthonormal basis (ablation baseline)."""
    _check_rank(k, c)
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((c, k)))
    q = q * np.sign(np.diag(r))
    return ProjectionPair(s1=T.as_tensor(q.T), s2=T.as_tensor(q), site=site)


# ---------------------------------------------------------------- graph surgery


def projection_name(site):
    return f"proj.{site}"


def resolve_site(net, site):
    """Return the producer layer of the stored tensor for ``site`` (group head or producer name)."""
    for rec in classify_storage(net):
        if rec.storage_class == STORED and (rec.site == site or rec.producer == site):
            return rec
    raise ConfigurationError(f"no stored activation for site {site!r}")


def site_consumers(net, producer):
    return [net.layer(name) for name in net.consumers(producer)]


def insert_projection(net, pair, trainable=True):
    """Return a copy of ``net`` computing ``S2 S1 x`` at the pair's site."""
    if pair.site is None:
        raise ConfigurationError("projection pair has no site")
    pname = projection_name(pair.site)
    if any(layer.name == pname for layer in net.layers):
        raise ConfigurationError(f"site {pair.site!r} already carries a projection")
    rec = resolve_site(net, pair.site)
    producer = net.layer(rec.producer)
    if producer.kind == PROJ:
        raise ConfigurationError(f"site {pair.site!r} already carries a projection")
    if producer.kind not in POST_ACTIVATION:
        raise ConfigurationError(
            f"site {pair.site!r}: projections attach after an activation, not after {producer.kind}"
        )
    if len(rec.shape) != 3 or rec.shape[0] != pair.c:
        raise DimensionError(f"site {pair.site!r} has shape {rec.shape}, pair expects {pair.c} channels")
    new = net.copy()
    for layer in new.layers:
        new.edges[layer.name] = tuple(pname if s == rec.producer else s for s in new.edges[layer.name])
    pos = [layer.name for layer in new.layers].index(rec.producer) + 1
    new.layers.insert(pos, LayerSpec(PROJ, pname, {"k": pair.k}))
    new.edges[pname] = (rec.producer,)
    new.params[pname] = ParamEntry({"s1": T.as_tensor(pair.s1).copy(), "s2": T.as_tensor(pair.s2).copy()}, trainable)
    new.touch()
    return new


def remove_projection(net, site):
    pname = projection_name(site)
    if not any(layer.name == pname and layer.kind == PROJ for layer in net.layers):
        raise ConfigurationError(f"no projection at site {site!r}")
    (src,) = net.edges[pname]
    new = net.copy()
    new.layers = [lay for lay in new.layers if lay.name != pname]
    del new.edges[pname]
    del new.params[pname]
    for lay in new.layers:
        new.edges[lay.name] = tuple(src if s == pname else s for s in new.edges[lay.name])
    new.touch()
    return new


def projections(net):
    """Map site -> ProjectionPair for every (unfolded) projection in ``net``."""
    out = {}
    for layer in net.layers:
        if layer.kind == PROJ and not layer["folded"]:
            t = net.params[layer.name].tensors
            site = layer.name[len("proj."):]
            out[site] = ProjectionPair(t["s1"], t["s2"], site)
    return out


# ---------------------------------------------------------------- folding


def fold_lift(w_next, pair):
    w_next = T.as_tensor(w_next)
    if w_next.ndim != 4 or w_next.shape[1] != pair.c:
        raise DimensionError(
            f"lift has {pair.c} rows but the next kernel has shape {w_next.shape} (axis 1 = input channels)"
        )
    c_o, c, p, _ = w_next.shape
    w_tilde = np.einsum("ocij,ck->okij", w_next, T.as_tensor(pair.s2), dtype=T.DTYPE)
    k = pair.k
    delta = k * (p * p * c_o + c) - p * p * c_o * c
    return FoldResult(np.ascontiguousarray(w_tilde), T.as_tensor(pair.s1), delta)


def overhead_check(p, c_o, c_i, k):
    """True when folded kernel plus S1 hold fewer elements than the original kernel."""
    return k * (p * p * c_o + c_i) < p * p * c_o * c_i


def foldable(layer):
    return layer.kind == CONV and layer["groups"] == 1


def fold_network(net, explicit_lift=False):
    """Fold every projection's lift into its consumer convolutions.

    Consumers that are not plain convolutions read an explicit 1x1 lift layer
    when ``explicit_lift`` is set; otherwise they are a configuration error.
    """
    new = net.copy()
    for layer in list(new.layers):
        if layer.kind != PROJ or layer["folded"]:
            continue
        pname = layer.name
        entry = new.params[pname]
        s1, s2 = entry.tensors["s1"], entry.tensors["s2"]
        pair = ProjectionPair(s1, s2, pname)
        consumers = site_consumers(new, pname)
        lift_name = None
        for cons in consumers:
            if foldable(cons):
                cp = new.params[cons.name]
                cp.tensors["w"] = fold_lift(cp.tensors["w"], pair).w_tilde
                continue
            if not explicit_lift:
                raise ConfigurationError(
                    f"projection {pname!r} feeds {cons.kind} {cons.name!r}, which cannot absorb the lift; "
                    "enable the explicit lift"
                )
            if lift_name is None:
                lift_name = f"{pname}.lift"
                pos = [lay.name for lay in new.layers].index(pname) + 1
                new.layers.insert(pos, LayerSpec(CONV, lift_name, {"out": pair.c, "k": 1, "bias": 0, "lift": 1}))
                new.edges[lift_name] = (pname,)
                new.params[lift_name] = ParamEntry({"w": s2.reshape(pair.c, pair.k, 1, 1).copy()}, entry.trainable)
            new.edges[cons.name] = tuple(lift_name if s == pname else s for s in new.edges[cons.name])
        idx = [lay.name for lay in new.layers].index(pname)
        new.layers[idx] = LayerSpec(PROJ, pname, {"k": pair.k, "folded": 1})
        del entry.tensors["s2"]
    new.touch()
    return new


def lift_consumer_report(net, producer):
    """For a stored tensor: ``[(consumer name, foldable, p, c_o)]``."""
    out = []
    for cons in site_consumers(net, producer):
        if foldable(cons):
            out.append((cons.name, True, cons["k"], cons["out"]))
        else:
            out.append((cons.name, False, None, None))
    return out
