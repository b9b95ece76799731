"""Bottleneck injection: replace a teacher prefix with an encoder/decoder pair.

The encoder keeps the teacher's stem convolution and ends in the bottleneck
convolution; the decoder restores the tensor shape the remaining teacher
layers expect. The classifier is the untouched teacher suffix.

Layer numbering inside a :class:`BottleneckedModel` is global: encoder layers
are ``1..k_star``, decoder layers ``k_star+1..l_ed`` and classifier layers
``l_ed+1..n``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from splitcomp.errors import InvalidSplitConfig, ShapeError
from splitcomp.model import layers as L
from splitcomp.model.graph import ModelGraph, decompose_blocks
from splitcomp.model.layers import LayerSpec

SPLIT_POINTS = ("SP1", "SP2")
SHIPPED_CHANNELS = (3, 6, 9, 12)
# (split_point, spatial_factor) pairs shipped with the package
SHIPPED_LAYOUTS = (("SP1", 1), ("SP2", 2))


@dataclass
class SplitConfig:
    split_point: str
    bottleneck_channels: int
    spatial_factor: int = 1
    pooling: bool | None = None
    k_star: int | None = None
    l_ed: int | None = None
    teacher_cut: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.split_point not in SPLIT_POINTS:
            raise InvalidSplitConfig(f"split_point must be one of {SPLIT_POINTS}, got {self.split_point!r}")
        if int(self.bottleneck_channels) < 1:
            raise InvalidSplitConfig("bottleneck_channels must be >= 1")
        if int(self.spatial_factor) < 1:
            raise InvalidSplitConfig("spatial_factor must be >= 1")
        if self.pooling is None:
            self.pooling = self.split_point == "SP1"
        if self.k_star is not None and self.l_ed is not None and self.k_star > self.l_ed:
            raise InvalidSplitConfig(f"k_star={self.k_star} exceeds l_ed={self.l_ed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        return cls(**d)


@dataclass(eq=False)
class BottleneckedModel:
    """Encoder, decoder and classifier fragments of a bottleneck-injected model.

    ``prefix`` is only set for the autoencoder baseline, where an unmodified
    teacher head runs before the encoder.
    """

    encoder: ModelGraph
    decoder: ModelGraph
    classifier: ModelGraph
    teacher_ref: str
    config: SplitConfig
    prefix: ModelGraph | None = None
    meta: dict = field(default_factory=dict)

    @property
    def components(self) -> dict[str, ModelGraph]:
        out = {}
        if self.prefix is not None:
            out["prefix"] = self.prefix
        out["encoder"] = self.encoder
        out["decoder"] = self.decoder
        out["classifier"] = self.classifier
        return out

    @property
    def input_shape(self):
        return (self.prefix or self.encoder).input_shape

    @property
    def num_classes(self):
        return self.classifier.num_classes

    @property
    def n(self) -> int:
        return sum(c.depth for c in self.components.values())

    @property
    def bottleneck_shape(self):
        return self.encoder.output_shape

    def offset(self, component: str) -> int:
        """Global id of the layer just before ``component``'s first layer."""
        off = 0
        for name, comp in self.components.items():
            if name == component:
                return off
            off += comp.depth
        raise KeyError(component)

    def num_params(self) -> int:
        return sum(c.num_params() for c in self.components.values())

    def copy(self) -> "BottleneckedModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "BottleneckedModel":
        out = self.copy()
        for name, comp in out.components.items():
            setattr(out, name, comp.astype(dtype))
        return out

    def state_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, comp in self.components.items():
            h.update(name.encode())
            h.update(comp.state_hash().encode())
        return h.hexdigest()

    def full_graph(self) -> ModelGraph:
        return _concat(list(self.components.values()), f"{self.teacher_ref}-bottlenecked", self.num_classes)

    def __call__(self, x):
        for comp in self.components.values():
            x = comp(x)
        return x


@dataclass(eq=False)
class SplitPair:
    head: ModelGraph
    tail: ModelGraph


def shipped_configs():
    return [SplitConfig(sp, b, sf) for sp, sf in SHIPPED_LAYOUTS for b in SHIPPED_CHANNELS]


def _concat(parts, name, num_classes):
    layers = []
    for part in parts:
        for layer in part.layers:
            layers.append(copy.copy(layer))
    return ModelGraph(layers, parts[0].input_shape, num_classes, name=name)


# --------------------------------------------------------------------------
# design
# --------------------------------------------------------------------------


def _stem_layers(teacher: ModelGraph) -> list[LayerSpec]:
    """Leading conv/bn/relu[/pool] run of the teacher, before the first block."""
    stem = []
    for layer in teacher.layers:
        if layer.kind == "block":
            break
        stem.append(layer)
    if not stem or stem[0].kind != "conv":
        raise InvalidSplitConfig(f"{teacher.name}: teacher must start with a convolution")
    return stem


def _fit_conv(cin, cout, size, target, rng, bias=False):
    diff = size - target
    if diff == 0:
        return L.conv(cin, cout, 3, 1, 1, rng=rng, bias=bias)
    if diff == 1:
        return L.conv(cin, cout, 2, 1, 0, rng=rng, bias=bias)
    if diff == 2:
        return L.conv(cin, cout, 3, 1, 0, rng=rng, bias=bias)
    raise ShapeError(f"decoder cannot restore spatial size {target} from {size}")


def _ends_with_relu(teacher: ModelGraph, cut: int) -> bool:
    flat = decompose_blocks(teacher, (cut, cut))
    return flat[-1].kind == "relu"


def resolve_cut(teacher: ModelGraph, config: SplitConfig) -> int:
    cut = config.teacher_cut if config.teacher_cut is not None else teacher.meta.get("split_target")
    if cut is None:
        blocks = [layer.id for layer in teacher.layers if layer.kind == "block"]
        if len(blocks) < 2:
            raise InvalidSplitConfig(f"{teacher.name}: need two blocks to place a bottleneck")
        cut = blocks[1]
    if not 1 <= cut < teacher.depth:
        raise InvalidSplitConfig(f"teacher_cut={cut} must lie in 1..{teacher.depth - 1}")
    return cut


def design_encoder_decoder(teacher: ModelGraph, config: SplitConfig) -> tuple[ModelGraph, ModelGraph]:
    """Build fresh encoder and decoder fragments for ``config``.

    SP1 turns the teacher's second convolution into the bottleneck; SP2
    inserts a channel-halving convolution and makes the third convolution the
    bottleneck. ``spatial_factor > 1`` strides the bottleneck further and
    starts the decoder with a matching deconvolution.
    """
    shapes = teacher.validate()
    cut = resolve_cut(teacher, config)
    c_t, r_t, r_tw = shapes[cut]
    if r_t != r_tw:
        raise ShapeError("non-square intermediate tensors are not supported")
    rng = np.random.default_rng(config.seed)

    stem = _stem_layers(teacher)
    stem_conv = stem[0]
    enc = [L.conv(**_conv_args(stem_conv), rng=rng)]
    for layer in stem[1:]:
        if layer.kind == "pool" and not config.pooling:
            continue
        if layer.kind == "batch_norm":
            enc.append(L.batch_norm(layer.hyperparams["channels"]))
        elif layer.kind == "relu":
            enc.append(L.relu())
        elif layer.kind == "pool":
            enc.append(L.max_pool(**{k: layer.hyperparams[k] for k in ("kernel", "stride", "padding")}))
        else:
            raise InvalidSplitConfig(f"unsupported stem layer kind {layer.kind!r}")
    c_pre, r_pre, _ = L.infer_sequence(enc, teacher.input_shape)[-1]
    if r_pre % r_t:
        raise ShapeError(f"stem resolution {r_pre} is not a multiple of target resolution {r_t}")
    ratio = r_pre // r_t
    sf = int(config.spatial_factor)
    b = int(config.bottleneck_channels)

    if config.split_point == "SP1":
        stride = ratio * sf
        kernel = stride if stride > 1 else 3
        enc.append(L.conv(c_pre, b, kernel, stride, 1, rng=rng))
    else:
        mid = max(c_pre // 2, 1)
        enc += [L.conv(c_pre, mid, 3, ratio, 1, rng=rng), L.batch_norm(mid), L.relu()]
        if sf > 1:
            enc.append(L.conv(mid, b, sf, sf, 0, rng=rng))
        else:
            enc.append(L.conv(mid, b, 3, 1, 1, rng=rng))
    encoder = ModelGraph(enc, teacher.input_shape, None, name="encoder")
    _, r_b, _ = encoder.output_shape

    relu_out = _ends_with_relu(teacher, cut)
    if sf > 1:
        dec = [L.deconv(b, c_t, sf, sf, 0, rng=rng), L.batch_norm(c_t), L.relu()]
        dec.append(_fit_conv(c_t, c_t, r_b * sf, r_t, rng, bias=not relu_out))
    else:
        dec = [L.batch_norm(b), L.relu(), _fit_conv(b, c_t, r_b, r_t, rng)]
        dec += [L.batch_norm(c_t), L.relu(), L.conv(c_t, c_t, 3, 1, 1, rng=rng, bias=not relu_out)]
    if relu_out:
        dec += [L.batch_norm(c_t), L.relu()]
    decoder = ModelGraph(dec, encoder.output_shape, None, name="decoder")
    if decoder.output_shape != shapes[cut]:
        raise ShapeError(f"decoder output {decoder.output_shape} != teacher shape {shapes[cut]} at layer {cut}")
    return encoder, decoder


def _conv_args(layer):
    hp = layer.hyperparams
    return dict(
        cin=hp["in_channels"],
        cout=hp["out_channels"],
        kernel=hp["kernel"],
        stride=hp["stride"],
        padding=hp["padding"],
        bias=hp.get("bias", False),
    )


def prefix_params(teacher: ModelGraph, cut: int) -> int:
    return sum(layer.num_params() for layer in teacher.layers[:cut])


def inject(teacher: ModelGraph, config: SplitConfig, *, allow_growth: bool = False) -> BottleneckedModel:
    """Replace teacher layers ``1..cut`` by a designed encoder/decoder.

    The returned config has ``k_star``, ``l_ed`` and ``teacher_cut`` filled
    in. Raises :class:`InvalidSplitConfig` when a user-supplied ``k_star`` or
    ``l_ed`` disagrees with the design, and, unless ``allow_growth``, when the
    encoder/decoder pair has more parameters than the prefix it replaces.
    """
    cut = resolve_cut(teacher, config)
    n_cls = teacher.depth - cut
    encoder, decoder = design_encoder_decoder(teacher, config)
    k_star = encoder.depth
    l_ed = k_star + decoder.depth
    n = l_ed + n_cls
    if config.l_ed is not None and not config.l_ed < n:
        raise InvalidSplitConfig(f"l_ed={config.l_ed} must be < n={n} (the classifier cannot be consumed)")
    if config.k_star is not None:
        if not 1 <= config.k_star <= encoder.depth + decoder.depth:
            raise InvalidSplitConfig(f"k_star={config.k_star} outside 1..{l_ed}")
        kind = (encoder.layers + decoder.layers)[config.k_star - 1].kind
        if kind != "conv":
            raise InvalidSplitConfig(f"k_star={config.k_star} points at a {kind} layer, not a convolution")
        if config.k_star != k_star:
            raise InvalidSplitConfig(f"k_star={config.k_star} disagrees with the designed bottleneck at {k_star}")
    if config.l_ed is not None and config.l_ed != l_ed:
        raise InvalidSplitConfig(f"l_ed={config.l_ed} disagrees with the designed encoder/decoder length {l_ed}")

    replaced = prefix_params(teacher, cut)
    grown = encoder.num_params() + decoder.num_params()
    if grown > replaced and not allow_growth:
        raise InvalidSplitConfig(
            f"encoder+decoder has {grown} parameters, more than the {replaced} of the replaced prefix"
        )

    cls_layers = copy.deepcopy(teacher.layers[cut:])
    for layer in cls_layers:
        for sub in layer.iter_layers():
            sub.grads.clear()
    cut_shape = teacher.shapes()[cut]
    classifier = ModelGraph(cls_layers, cut_shape, teacher.num_classes, name="classifier")

    resolved = SplitConfig(**{**config.to_dict(), "k_star": k_star, "l_ed": l_ed, "teacher_cut": cut})
    meta = {
        "teacher_params": teacher.num_params(),
        "replaced_prefix_params": replaced,
        "encoder_decoder_params": grown,
        "teacher_arch": teacher.meta.get("arch", teacher.name),
    }
    return BottleneckedModel(encoder, decoder, classifier, teacher.name, resolved, meta=meta)


def split(bmodel: BottleneckedModel) -> SplitPair:
    """Head = encoder (plus prefix, if any); tail = decoder followed by classifier.

    Layers are shared with ``bmodel``, so ``tail(head(x))`` performs exactly
    the same operations as the full model.
    """
    comps = bmodel.components
    head_parts = [comps[k] for k in ("prefix", "encoder") if k in comps]
    head = _concat(head_parts, f"{bmodel.teacher_ref}-head", None)
    tail = _concat([bmodel.decoder, bmodel.classifier], f"{bmodel.teacher_ref}-tail", bmodel.num_classes)
    head.validate()
    tail.validate()
    return SplitPair(head, tail)
