"""Layer records and their forward/backward rules.

A layer is a :class:`LayerSpec` holding its hyperparameters and parameter
arrays. Execution is a plain interpreter over ordered layer lists; residual
and dense connectivity is expressed with ``mark`` (stash the running tensor
under a tag) and ``merge`` (add or concatenate the stashed tensor back), so
a high-level block is nothing more than a nested list of low-level layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from splitcomp import kernels
from splitcomp.errors import ShapeError

KINDS = (
    "conv",
    "deconv",
    "batch_norm",
    "relu",
    "pool",
    "avg_pool",
    "fully_connected",
    "block",
    "mark",
    "merge",
)

Shape = tuple[int, ...]


@dataclass(eq=False)
class LayerSpec:
    id: int
    kind: str
    hyperparams: dict[str, Any] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    buffers: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    children: list["LayerSpec"] = field(default_factory=list)
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def iter_layers(self):
        """This layer followed by every nested child, depth first."""
        yield self
        for child in self.children:
            yield from child.iter_layers()

    def num_params(self) -> int:
        return sum(int(p.size) for layer in self.iter_layers() for p in layer.params.values())

    def describe(self) -> dict:
        out = {"id": self.id, "kind": self.kind, "hyperparams": dict(self.hyperparams)}
        if self.children:
            out["children"] = [c.describe() for c in self.children]
        return out


# --------------------------------------------------------------------------
# constructors
# --------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, dtype):
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)); generalises noticeably better than
    # He-normal on the small benchmarks used here
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv(cin, cout, kernel, stride=1, padding=0, *, bias=False, rng=None, dtype=np.float32, id=0):
    rng = rng or np.random.default_rng(0)
    fan_in = cin * kernel * kernel
    params = {"weight": _uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype)}
    if bias:
        params["bias"] = _uniform(rng, (cout,), fan_in, dtype)
    hp = dict(in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, padding=padding, bias=bias)
    return LayerSpec(id, "conv", hp, params)


def deconv(cin, cout, kernel, stride=1, padding=0, *, bias=False, rng=None, dtype=np.float32, id=0):
    rng = rng or np.random.default_rng(0)
    fan_in = cout * kernel * kernel
    params = {"weight": _uniform(rng, (cin, cout, kernel, kernel), fan_in, dtype)}
    if bias:
        params["bias"] = _uniform(rng, (cout,), fan_in, dtype)
    hp = dict(in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, padding=padding, bias=bias)
    return LayerSpec(id, "deconv", hp, params)


def batch_norm(channels, *, eps=1e-5, momentum=0.1, dtype=np.float32, id=0):
    params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
    buffers = {"running_mean": np.zeros(channels, dtype=dtype), "running_var": np.ones(channels, dtype=dtype)}
    return LayerSpec(id, "batch_norm", dict(channels=channels, eps=eps, momentum=momentum), params, buffers)


def relu(id=0):
    return LayerSpec(id, "relu")


def max_pool(kernel, stride=None, padding=0, id=0):
    return LayerSpec(id, "pool", dict(kernel=kernel, stride=stride or kernel, padding=padding))


def avg_pool(kernel=None, stride=None, id=0):
    """``kernel=None`` means global average pooling to (C, 1, 1)."""
    return LayerSpec(id, "avg_pool", dict(kernel=kernel, stride=stride or kernel))


def fully_connected(fin, fout, *, rng=None, dtype=np.float32, id=0):
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / np.sqrt(fin)
    params = {
        "weight": rng.uniform(-bound, bound, (fout, fin)).astype(dtype),
        "bias": rng.uniform(-bound, bound, fout).astype(dtype),
    }
    return LayerSpec(id, "fully_connected", dict(in_features=fin, out_features=fout), params)


def mark(tag, id=0):
    return LayerSpec(id, "mark", dict(tag=tag))


def merge(tag, mode, projection=(), id=0):
    if mode not in ("add", "concat"):
        raise ValueError(f"merge mode must be add or concat, got {mode!r}")
    return LayerSpec(id, "merge", dict(tag=tag, mode=mode), children=list(projection))


def block(block_type, children, id=0, **extra):
    for i, child in enumerate(children, start=1):
        child.id = i
    return LayerSpec(id, "block", dict(block_type=block_type, **extra), children=list(children))


# --------------------------------------------------------------------------
# shape inference
# --------------------------------------------------------------------------


def _conv_hw(h, w, hp):
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    return kernels.conv_out_size(h, k, s, p), kernels.conv_out_size(w, k, s, p)


def infer_shape(layer: LayerSpec, shape: Shape, marks: dict | None = None) -> Shape:
    """Output shape (without batch dim) of ``layer`` given its input shape."""
    hp = layer.hyperparams
    kind = layer.kind
    marks = {} if marks is None else marks
    if kind in ("conv", "pool", "deconv", "batch_norm", "avg_pool") and len(shape) != 3:
        raise ShapeError(f"layer {layer.id} ({kind}) expects (C, H, W) input, got {shape}")
    if kind == "conv":
        c, h, w = shape
        if c != hp["in_channels"]:
            raise ShapeError(f"layer {layer.id} conv expects {hp['in_channels']} channels, got {c}")
        ho, wo = _conv_hw(h, w, hp)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {layer.id} conv collapses spatial dims of {shape}")
        return (hp["out_channels"], ho, wo)
    if kind == "deconv":
        c, h, w = shape
        if c != hp["in_channels"]:
            raise ShapeError(f"layer {layer.id} deconv expects {hp['in_channels']} channels, got {c}")
        k, s, p = hp["kernel"], hp["stride"], hp["padding"]
        return (hp["out_channels"], (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)
    if kind == "batch_norm":
        if shape[0] != hp["channels"]:
            raise ShapeError(f"layer {layer.id} batch_norm expects {hp['channels']} channels, got {shape[0]}")
        return shape
    if kind == "relu":
        return shape
    if kind == "pool":
        c, h, w = shape
        ho, wo = _conv_hw(h, w, hp)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {layer.id} pool collapses spatial dims of {shape}")
        return (c, ho, wo)
    if kind == "avg_pool":
        c, h, w = shape
        if hp["kernel"] is None:
            return (c, 1, 1)
        k, s = hp["kernel"], hp["stride"]
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if kind == "fully_connected":
        n = int(np.prod(shape))
        if n != hp["in_features"]:
            raise ShapeError(f"layer {layer.id} fully_connected expects {hp['in_features']} features, got {n}")
        return (hp["out_features"],)
    if kind == "block":
        return infer_sequence(layer.children, shape)[-1]
    if kind == "mark":
        marks[hp["tag"]] = shape
        return shape
    if kind == "merge":
        if hp["tag"] not in marks:
            raise ShapeError(f"merge layer {layer.id} references unknown tag {hp['tag']!r}")
        saved = marks[hp["tag"]]
        if hp["mode"] == "add":
            proj = infer_sequence(layer.children, saved)[-1] if layer.children else saved
            if proj != shape:
                raise ShapeError(f"merge layer {layer.id}: shortcut shape {proj} != main shape {shape}")
            return shape
        if saved[1:] != shape[1:]:
            raise ShapeError(f"merge layer {layer.id}: cannot concat {saved} with {shape}")
        return (saved[0] + shape[0],) + tuple(shape[1:])
    raise ShapeError(f"unknown kind {kind}")


def infer_sequence(layers, shape: Shape) -> list[Shape]:
    """Shapes ``[input, out_1, ..., out_L]`` for a layer list."""
    marks: dict = {}
    shapes = [tuple(shape)]
    for layer in layers:
        shapes.append(infer_shape(layer, shapes[-1], marks))
    return shapes


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _conv_fwd(layer, x):
    hp, W = layer.hyperparams, layer.params["weight"]
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    n = x.shape[0]
    if k == 1 and p == 0:
        xs = x[:, :, ::s, ::s] if s > 1 else x
        ho, wo = xs.shape[2], xs.shape[3]
        cols = np.ascontiguousarray(xs.transpose(1, 0, 2, 3)).reshape(xs.shape[1], -1)
    else:
        ho, wo = _conv_hw(x.shape[2], x.shape[3], hp)
        cols = kernels.im2col(x, k, k, (s, s), (p, p))
    out = W.reshape(W.shape[0], -1) @ cols
    if "bias" in layer.params:
        out += layer.params["bias"][:, None]
    y = np.ascontiguousarray(out.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))
    return y, (cols, x.shape)


def _conv_bwd(layer, cache, dy, want_grads):
    cols, x_shape = cache
    hp, W = layer.hyperparams, layer.params["weight"]
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    o = W.shape[0]
    dyt = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(o, -1)
    if want_grads:
        _acc(layer, "weight", (dyt @ cols.T).reshape(W.shape))
        if "bias" in layer.params:
            _acc(layer, "bias", dyt.sum(axis=1))
    dcols = W.reshape(o, -1).T @ dyt
    if k == 1 and p == 0:
        n, c, h, w = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        d = dcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
        if s == 1:
            return np.ascontiguousarray(d)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, ::s, ::s] = d
        return dx
    return kernels.col2im(dcols, x_shape, k, k, (s, s), (p, p))


def _deconv_fwd(layer, x):
    hp, W = layer.hyperparams, layer.params["weight"]
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    n, cin, h, w = x.shape
    cout = hp["out_channels"]
    ho, wo = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(cin, -1)
    cols = W.reshape(cin, -1).T @ xt
    y = kernels.col2im(cols, (n, cout, ho, wo), k, k, (s, s), (p, p))
    if "bias" in layer.params:
        y += layer.params["bias"].reshape(1, -1, 1, 1)
    return y, (xt, x.shape)


def _deconv_bwd(layer, cache, dy, want_grads):
    xt, x_shape = cache
    hp, W = layer.hyperparams, layer.params["weight"]
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    n, cin, h, w = x_shape
    dcols = kernels.im2col(dy, k, k, (s, s), (p, p))
    if want_grads:
        _acc(layer, "weight", (xt @ dcols.T).reshape(W.shape))
        if "bias" in layer.params:
            _acc(layer, "bias", dy.sum(axis=(0, 2, 3)))
    dxt = W.reshape(cin, -1) @ dcols
    return np.ascontiguousarray(dxt.reshape(cin, n, h, w).transpose(1, 0, 2, 3))


def _bn_fwd(layer, x, train):
    hp = layer.hyperparams
    gamma, beta = layer.params["gamma"], layer.params["beta"]
    eps = hp["eps"]
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = hp["momentum"]
        count = x.shape[0] * x.shape[2] * x.shape[3]
        rm, rv = layer.buffers["running_mean"], layer.buffers["running_var"]
        rm *= 1 - m
        rm += m * mean
        rv *= 1 - m
        rv += m * var * (count / max(count - 1, 1))
    else:
        mean = layer.buffers["running_mean"]
        var = layer.buffers["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return y.astype(x.dtype, copy=False), (xhat, inv_std, train)


def _bn_bwd(layer, cache, dy, want_grads):
    xhat, inv_std, train = cache
    gamma = layer.params["gamma"]
    if want_grads:
        _acc(layer, "gamma", (dy * xhat).sum(axis=(0, 2, 3)))
        _acc(layer, "beta", dy.sum(axis=(0, 2, 3)))
    g = (gamma * inv_std).reshape(1, -1, 1, 1)
    if not train:
        return (dy * g).astype(dy.dtype, copy=False)
    count = dy.shape[0] * dy.shape[2] * dy.shape[3]
    mean_dy = dy.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) / count
    mean_dy_xhat = (dy * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) / count
    return (g * (dy - mean_dy - xhat * mean_dy_xhat)).astype(dy.dtype, copy=False)


def _pool_fwd(layer, x):
    hp = layer.hyperparams
    out, arg = kernels.maxpool_forward(x, hp["kernel"], hp["stride"], hp["padding"])
    return out, (arg, x.shape)


def _avg_fwd(layer, x):
    hp = layer.hyperparams
    if hp["kernel"] is None:
        return x.mean(axis=(2, 3), keepdims=True), x.shape
    n, c, h, w = x.shape
    k, s = hp["kernel"], hp["stride"]
    cols = kernels.im2col(x.reshape(n * c, 1, h, w), k, k, (s, s), (0, 0))
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    return cols.mean(axis=0).reshape(n, c, ho, wo), x.shape


def _avg_bwd(layer, x_shape, dy):
    hp = layer.hyperparams
    n, c, h, w = x_shape
    if hp["kernel"] is None:
        return np.broadcast_to(dy / (h * w), x_shape).astype(dy.dtype)
    k, s = hp["kernel"], hp["stride"]
    dcols = np.repeat(dy.reshape(1, -1) / (k * k), k * k, axis=0).astype(dy.dtype)
    return kernels.col2im(dcols, (n * c, 1, h, w), k, k, (s, s), (0, 0)).reshape(x_shape)


def _acc(layer, name, g):
    if name in layer.grads:
        layer.grads[name] += g
    else:
        layer.grads[name] = np.array(g, dtype=layer.params[name].dtype)


def forward_layer(layer: LayerSpec, x, train: bool, saved: dict):
    """Apply one layer. Returns ``(y, cache)``; ``saved`` carries mark tensors."""
    kind = layer.kind
    if kind == "conv":
        return _conv_fwd(layer, x)
    if kind == "deconv":
        return _deconv_fwd(layer, x)
    if kind == "batch_norm":
        return _bn_fwd(layer, x, train)
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "pool":
        return _pool_fwd(layer, x)
    if kind == "avg_pool":
        return _avg_fwd(layer, x)
    if kind == "fully_connected":
        xf = x.reshape(x.shape[0], -1)
        y = xf @ layer.params["weight"].T + layer.params["bias"]
        return y, (xf, x.shape)
    if kind == "block":
        return forward_sequence(layer.children, x, train)
    if kind == "mark":
        saved[layer.hyperparams["tag"]] = x
        return x, None
    if kind == "merge":
        s = saved[layer.hyperparams["tag"]]
        if layer.hyperparams["mode"] == "add":
            if layer.children:
                s, pc = forward_sequence(layer.children, s, train)
            else:
                pc = None
            return x + s, pc
        return np.concatenate([s, x], axis=1), s.shape[1]
    raise ValueError(kind)


def backward_layer(layer: LayerSpec, cache, dy, want_grads: bool, saved_grads: dict):
    """Gradient w.r.t. the layer input; parameter grads accumulate in ``layer.grads``."""
    kind = layer.kind
    if kind == "conv":
        return _conv_bwd(layer, cache, dy, want_grads)
    if kind == "deconv":
        return _deconv_bwd(layer, cache, dy, want_grads)
    if kind == "batch_norm":
        return _bn_bwd(layer, cache, dy, want_grads)
    if kind == "relu":
        return dy * cache
    if kind == "pool":
        arg, x_shape = cache
        return kernels.maxpool_backward(dy, arg, x_shape)
    if kind == "avg_pool":
        return _avg_bwd(layer, cache, dy)
    if kind == "fully_connected":
        xf, x_shape = cache
        if want_grads:
            _acc(layer, "weight", dy.T @ xf)
            _acc(layer, "bias", dy.sum(axis=0))
        return (dy @ layer.params["weight"]).reshape(x_shape)
    if kind == "block":
        return backward_sequence(layer.children, cache, dy, want_grads)
    tag = layer.hyperparams.get("tag")
    if kind == "mark":
        extra = saved_grads.pop(tag, None)
        return dy if extra is None else dy + extra
    if kind == "merge":
        if layer.hyperparams["mode"] == "add":
            ds = backward_sequence(layer.children, cache, dy, want_grads) if layer.children else dy
            main = dy
        else:
            ds, main = dy[:, :cache], dy[:, cache:]
        saved_grads[tag] = ds if tag not in saved_grads else saved_grads[tag] + ds
        return main
    raise ValueError(kind)


def forward_sequence(layers, x, train=False):
    saved: dict = {}
    caches = []
    for layer in layers:
        x, cache = forward_layer(layer, x, train, saved)
        caches.append(cache)
    return x, caches


def backward_sequence(layers, caches, dy, want_grads=True):
    saved_grads: dict = {}
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dy = backward_layer(layer, cache, dy, want_grads, saved_grads)
    return dy
