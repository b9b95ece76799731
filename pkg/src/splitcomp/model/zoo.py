"""Desk-scale teacher architectures."""

from __future__ import annotations

import numpy as np

from splitcomp.errors import ShapeError, UnknownArchitecture
from splitcomp.model import layers as L
from splitcomp.model.graph import ModelGraph

ARCHITECTURES = ("small_resnet", "small_densenet")


def _stem(in_ch, out_ch, size, rng):
    # ImageNet-style stem for large inputs, light stem for 32x32-class inputs
    if size >= 64:
        return [L.conv(in_ch, out_ch, 7, 2, 3, rng=rng), L.batch_norm(out_ch), L.relu(), L.max_pool(3, 2, 1)]
    return [L.conv(in_ch, out_ch, 3, 1, 1, rng=rng), L.batch_norm(out_ch), L.relu(), L.max_pool(2, 2, 0)]


def residual_block(cin, cout, stride, rng):
    projection = []
    if stride != 1 or cin != cout:
        projection = [L.conv(cin, cout, 1, stride, 0, rng=rng), L.batch_norm(cout)]
    for i, p in enumerate(projection, start=1):
        p.id = i
    children = [
        L.mark("in"),
        L.conv(cin, cout, 3, stride, 1, rng=rng),
        L.batch_norm(cout),
        L.relu(),
        L.conv(cout, cout, 3, 1, 1, rng=rng),
        L.batch_norm(cout),
        L.merge("in", "add", projection),
        L.relu(),
    ]
    return L.block("residual", children, in_channels=cin, out_channels=cout, stride=stride)


def dense_block(cin, growth, n_layers, rng):
    children = []
    c = cin
    for i in range(n_layers):
        tag = f"d{i}"
        children += [
            L.mark(tag),
            L.batch_norm(c),
            L.relu(),
            L.conv(c, growth, 3, 1, 1, rng=rng),
            L.merge(tag, "concat"),
        ]
        c += growth
    return L.block("dense", children, in_channels=cin, out_channels=c), c


def transition_block(cin, cout, rng):
    children = [L.batch_norm(cin), L.relu(), L.conv(cin, cout, 1, 1, 0, rng=rng), L.avg_pool(2, 2)]
    return L.block("transition", children, in_channels=cin, out_channels=cout)


def build_teacher(
    arch_id: str,
    input_shape=(3, 32, 32),
    num_classes: int = 10,
    *,
    seed: int = 0,
    widths=None,
    blocks=None,
    growth: int = 12,
) -> ModelGraph:
    """Construct a randomly initialised teacher network.

    ``small_resnet`` stacks one residual stage per entry of ``widths``
    (``blocks[i]`` basic blocks each, stride 2 from the second stage on).
    ``small_densenet`` alternates dense blocks and compressing transitions.
    Both expose at least two top-level ``block`` layers; ``meta["block_ids"]``
    lists them. ``meta["split_target"]`` is the id of the layer whose output
    the bottleneck decoder reproduces: the end of the second residual stage,
    or the first transition of the dense net.
    """
    if arch_id not in ARCHITECTURES:
        raise UnknownArchitecture(f"unknown architecture {arch_id!r}; choose from {ARCHITECTURES}")
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or input_shape[0] != 3:
        raise ShapeError(f"teacher input must be (3, H, W), got {input_shape}")
    rng = np.random.default_rng(seed)
    size = min(input_shape[1:])

    if arch_id == "small_resnet":
        widths = tuple(widths or (16, 32, 64, 128))
        blocks = tuple(blocks or (1,) * len(widths))
        layers = _stem(3, widths[0], size, rng)
        c = widths[0]
        stage_ends = []
        for stage, (w, nb) in enumerate(zip(widths, blocks)):
            for b in range(nb):
                stride = 2 if stage > 0 and b == 0 else 1
                layers.append(residual_block(c, w, stride, rng))
                c = w
            stage_ends.append(len(layers))
        split_target = stage_ends[1]
        layers += [L.avg_pool(None), L.fully_connected(c, num_classes, rng=rng)]
        meta = {"arch": arch_id, "widths": list(widths), "blocks": list(blocks), "seed": seed}
    else:
        blocks = tuple(blocks or (3, 3, 3))
        c = 2 * growth
        layers = _stem(3, c, size, rng)
        transitions = []
        for i, nl in enumerate(blocks):
            db, c = dense_block(c, growth, nl, rng)
            layers.append(db)
            if i < len(blocks) - 1:
                layers.append(transition_block(c, c // 2, rng))
                transitions.append(len(layers))
                c //= 2
        split_target = transitions[0]
        layers += [L.batch_norm(c), L.relu(), L.avg_pool(None), L.fully_connected(c, num_classes, rng=rng)]
        meta = {"arch": arch_id, "growth": growth, "blocks": list(blocks), "seed": seed}

    model = ModelGraph(layers, input_shape, num_classes, name=arch_id, meta=meta)
    block_ids = [layer.id for layer in model.layers if layer.kind == "block"]
    model.meta["block_ids"] = block_ids
    model.meta["split_target"] = split_target
    model.validate()
    return model
