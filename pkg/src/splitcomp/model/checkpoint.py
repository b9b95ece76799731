"""Checkpoint directories: ``manifest.json`` plus one ``.npz`` blob per layer.

Manifest keys::

    format_version, kind ("teacher" | "bottlenecked"), architecture,
    input_shape, num_classes, components: {name: {layers, shapes, blobs}},
    split (bottlenecked only), meta

Each layer entry is ``LayerSpec.describe()``; each blob file holds that
top-level layer's parameters and buffers under dotted child paths.
"""

from __future__ import annotations

import json
import os

import numpy as np

from splitcomp.errors import MissingConfig
from splitcomp.model.graph import ModelGraph
from splitcomp.model.layers import LayerSpec

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _collect(layer: LayerSpec, path: str, out: dict):
    for k, v in layer.params.items():
        out[f"{path}param.{k}"] = v
    for k, v in layer.buffers.items():
        out[f"{path}buffer.{k}"] = v
    for child in layer.children:
        _collect(child, f"{path}{child.id}.", out)


def _restore(desc: dict, arrays, path: str) -> LayerSpec:
    children = [_restore(c, arrays, f"{path}{c['id']}.") for c in desc.get("children", [])]
    params, buffers = {}, {}
    for key in arrays.files:
        if not key.startswith(path):
            continue
        rest = key[len(path):]
        if rest.startswith("param.") and "." not in rest[6:]:
            params[rest[6:]] = arrays[key]
        elif rest.startswith("buffer.") and "." not in rest[7:]:
            buffers[rest[7:]] = arrays[key]
    hp = dict(desc["hyperparams"])
    return LayerSpec(desc["id"], desc["kind"], hp, params, buffers, children)


def _save_graph(graph: ModelGraph, root: str, prefix: str) -> dict:
    blobs = {}
    for layer in graph.layers:
        arrays: dict = {}
        _collect(layer, "", arrays)
        fname = f"{prefix}layer_{layer.id:03d}.npz"
        np.savez(os.path.join(root, fname), **arrays)
        blobs[str(layer.id)] = fname
    return {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "layers": [layer.describe() for layer in graph.layers],
        "shapes": [list(s) for s in graph.shapes()],
        "blobs": blobs,
    }


def _load_graph(entry: dict, root: str) -> ModelGraph:
    layers = []
    for desc in entry["layers"]:
        path = os.path.join(root, entry["blobs"][str(desc["id"])])
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with np.load(path) as arrays:
            layers.append(_restore(desc, arrays, ""))
    g = ModelGraph(layers, tuple(entry["input_shape"]), entry["num_classes"], name=entry["name"])
    g.validate()
    return g


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    return obj


def save(model, root: str) -> str:
    """Write a teacher ``ModelGraph`` or a ``BottleneckedModel`` to ``root``."""
    from splitcomp.injector import BottleneckedModel

    os.makedirs(root, exist_ok=True)
    if isinstance(model, BottleneckedModel):
        comps = {name: _save_graph(g, root, f"{name}_") for name, g in model.components.items()}
        split = dict(model.config.to_dict())
        split["bottleneck_shape"] = list(model.bottleneck_shape)
        split["n"] = model.n
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": "bottlenecked",
            "architecture": model.meta.get("teacher_arch", model.teacher_ref),
            "teacher_ref": model.teacher_ref,
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "components": comps,
            "split": split,
            "meta": {k: v for k, v in model.meta.items() if k != "train_log"},
        }
    else:
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": "teacher",
            "architecture": model.meta.get("arch", model.name),
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "components": {"model": _save_graph(model, root, "")},
            "meta": model.meta,
        }
    with open(os.path.join(root, MANIFEST), "w") as f:
        json.dump(_jsonable(manifest), f, indent=1, sort_keys=True)
    return root


def read_manifest(root: str) -> dict:
    path = os.path.join(root, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise MissingConfig(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load(root: str):
    """Inverse of :func:`save`."""
    from splitcomp.injector import BottleneckedModel, SplitConfig

    manifest = read_manifest(root)
    comps = {name: _load_graph(entry, root) for name, entry in manifest["components"].items()}
    if manifest["kind"] == "teacher":
        g = comps["model"]
        g.meta = manifest.get("meta", {})
        return g
    split = dict(manifest["split"])
    cfg = SplitConfig(**{k: split[k] for k in SplitConfig.__dataclass_fields__ if k in split})
    return BottleneckedModel(
        comps["encoder"],
        comps["decoder"],
        comps["classifier"],
        manifest.get("teacher_ref", manifest["architecture"]),
        cfg,
        prefix=comps.get("prefix"),
        meta=manifest.get("meta", {}),
    )

