"""Ordered layer sequences and their evaluation."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from splitcomp.errors import InvalidLayerId, ShapeError
from splitcomp.model import layers as L
from splitcomp.model.layers import LayerSpec, Shape


@dataclass(eq=False)
class Activation:
    layer_id: int
    tensor: np.ndarray


@dataclass(eq=False)
class ModelGraph:
    """A model as an ordered list of layers, ``o_j = f_j(o_{j-1})``.

    ``num_classes`` is ``None`` for fragments (encoders, decoders) that do not
    end in a classification layer.
    """

    layers: list[LayerSpec]
    input_shape: Shape
    num_classes: int | None = None
    name: str = "model"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.renumber()

    def renumber(self):
        for i, layer in enumerate(self.layers, start=1):
            layer.id = i

    @property
    def depth(self) -> int:
        return len(self.layers)

    def shapes(self) -> list[Shape]:
        """``[input_shape, out_1, ..., out_L]``; raises ShapeError on any mismatch."""
        return L.infer_sequence(self.layers, self.input_shape)

    @property
    def output_shape(self) -> Shape:
        return self.shapes()[-1]

    def validate(self) -> list[Shape]:
        ids = [layer.id for layer in self.layers]
        if ids != list(range(1, len(ids) + 1)):
            raise InvalidLayerId(f"layer ids must be consecutive from 1, got {ids}")
        shapes = self.shapes()
        if self.num_classes is not None and shapes[-1] != (self.num_classes,):
            raise ShapeError(f"{self.name}: output {shapes[-1]} does not match num_classes={self.num_classes}")
        return shapes

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def all_layers(self):
        for layer in self.layers:
            yield from layer.iter_layers()

    def param_items(self):
        """``(qualified_name, layer, param_name)`` for every parameter, stable order."""
        for top in self.layers:
            for path, layer in _walk(top, str(top.id)):
                for pname in layer.params:
                    yield f"{path}.{pname}", layer, pname

    def zero_grads(self):
        for layer in self.all_layers():
            layer.grads.clear()

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        out = self.copy()
        for layer in out.all_layers():
            for d in (layer.params, layer.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
            layer.grads.clear()
        return out

    def state_hash(self) -> str:
        """SHA-256 over all parameters and buffers in a fixed order."""
        h = hashlib.sha256()
        for top in self.layers:
            for path, layer in _walk(top, str(top.id)):
                for d in (layer.params, layer.buffers):
                    for k in sorted(d):
                        h.update(f"{path}.{k}:{d[k].dtype}:{d[k].shape}".encode())
                        h.update(np.ascontiguousarray(d[k]).tobytes())
        return h.hexdigest()

    def __call__(self, x):
        return forward(self, x)[0]


def _walk(layer: LayerSpec, path: str):
    yield path, layer
    for child in layer.children:
        yield from _walk(child, f"{path}.{child.id}")


def check_input(model: ModelGraph, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == model.input_shape:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"{model.name}: input shape {x.shape[1:]} != expected {model.input_shape}")
    return x


def forward(model: ModelGraph, x, capture=(), train: bool = False):
    """Evaluate ``model`` on ``x`` (batched or single sample).

    Returns ``(output, activations)`` where ``activations`` holds one
    :class:`Activation` per requested layer id, in ascending id order.
    """
    x = check_input(model, x)
    capture = set(capture)
    for j in capture:
        if not 1 <= j <= model.depth:
            raise InvalidLayerId(f"{model.name}: capture id {j} outside 1..{model.depth}")
    acts = []
    saved: dict = {}
    for layer in model.layers:
        x, _ = L.forward_layer(layer, x, train, saved)
        if layer.id in capture:
            acts.append(Activation(layer.id, x))
    return x, acts


def forward_train(model: ModelGraph, x, train: bool = True, capture=()):
    """Forward that keeps caches for :func:`backward`. Returns (y, caches, acts)."""
    x = check_input(model, x)
    capture = set(capture)
    acts = {}
    caches = []
    saved: dict = {}
    for layer in model.layers:
        x, cache = L.forward_layer(layer, x, train, saved)
        caches.append(cache)
        if layer.id in capture:
            acts[layer.id] = x
    return x, caches, acts


def backward(model: ModelGraph, caches, dy, want_grads: bool = True, extra_grads=None):
    """Backpropagate ``dy`` through ``model``.

    ``extra_grads`` maps a layer id to an additional gradient injected at that
    layer's output (loss terms on intermediate activations).
    """
    extra_grads = extra_grads or {}
    saved_grads: dict = {}
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        if layer.id in extra_grads:
            g = extra_grads[layer.id]
            dy = g if dy is None else dy + g
        if dy is None:
            continue
        dy = L.backward_layer(layer, cache, dy, want_grads, saved_grads)
    return dy


def run_layers(layer_list, x, train: bool = False):
    """Evaluate a bare list of layers (e.g. the output of decompose_blocks)."""
    return L.forward_sequence(layer_list, x, train)[0]


def decompose_blocks(model: ModelGraph, layer_range: tuple[int, int]) -> list[LayerSpec]:
    """Flatten layers ``first..last`` (inclusive, 1-based) into low-level layers.

    Block layers are replaced by their children in order; residual shortcuts
    survive as explicit ``mark``/``merge`` pairs. Returned layers share their
    parameter arrays with ``model`` and are renumbered from ``first``.
    Evaluating the returned list is bitwise identical to evaluating the range.
    """
    first, last = layer_range
    if not (1 <= first <= last <= model.depth):
        raise InvalidLayerId(f"range {layer_range} invalid for a {model.depth}-layer model")
    flat: list[LayerSpec] = []
    for layer in model.layers[first - 1 : last]:
        if layer.kind == "block":
            flat.extend(_flatten_block(layer, f"b{layer.id}"))
        else:
            flat.append(copy.copy(layer))
    for i, layer in enumerate(flat, start=first):
        layer.id = i
    return flat


def _flatten_block(layer: LayerSpec, prefix: str) -> list[LayerSpec]:
    out = []
    for child in layer.children:
        if child.kind == "block":
            out.extend(_flatten_block(child, f"{prefix}.{child.id}"))
            continue
        c = copy.copy(child)
        if c.kind in ("mark", "merge"):
            # tags are scoped per block; make them unique in the flat list
            c.hyperparams = dict(c.hyperparams, tag=f"{prefix}:{c.hyperparams['tag']}")
        out.append(c)
    return out


def low_level_layers(model: ModelGraph) -> list[LayerSpec]:
    """The whole model decomposed into low-level layers."""
    return decompose_blocks(model, (1, model.depth))
