"""Staged training of bottlenecked models: distillation, fine-tuning and baselines."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from splitcomp import losses as LS
from splitcomp.data import Dataset
from splitcomp.errors import DivergenceError, EmptyDataset, InvalidSplitConfig, UnknownRecipe
from splitcomp.injector import BottleneckedModel, SplitConfig, inject, resolve_cut
from splitcomp.model import layers as L
from splitcomp.model.graph import ModelGraph, backward, forward_train

log = logging.getLogger(__name__)

LOSSES = ("GHND", "HND", "CE", "KD", "AE_RECON")
OPTIMIZERS = ("adam", "sgd")
COMPONENTS = ("prefix", "encoder", "decoder", "classifier")
RECIPES = (
    "bottlefit_ft_fe",
    "bottlefit_kd_fe",
    "bottlefit_ft",
    "bottlefit_kd",
    "baseline_conventional",
    "baseline_kd",
    "baseline_hnd",
    "baseline_autoencoder",
)
DIVERGENCE_LIMIT = 1e6
LOG_FIELDS = ("epoch", "stage", "loss", "lr", "val_top1")


@dataclass
class StageSpec:
    loss: str
    optimizer: str = "adam"
    epochs: int = 10
    initial_lr: float = 1e-3
    lr_decay: tuple = (0.1, 5)
    frozen: frozenset = frozenset()
    kd_alpha: float = 0.5
    kd_tau: float = 1.0
    lambdas: dict = field(default_factory=dict)
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        self.frozen = frozenset(self.frozen)
        self.lr_decay = tuple(self.lr_decay)
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.frozen <= set(COMPONENTS):
            raise ValueError(f"frozen names must be among {COMPONENTS}, got {sorted(self.frozen)}")
        if self.loss in ("GHND", "HND") and "classifier" not in self.frozen:
            raise ValueError(f"{self.loss} requires the classifier to be frozen")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay[1] < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and decay interval >= 1 required")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` within this stage."""
        factor, every = self.lr_decay
        return self.initial_lr * factor ** (epoch // every)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["frozen"] = sorted(self.frozen)
        d["lr_decay"] = list(self.lr_decay)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainingRecipe:
    stages: list
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a recipe needs at least one stage")


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.vel = [np.zeros_like(layer.params[k]) for layer, k in params]

    def step(self, lr):
        for (layer, k), v in zip(self.params, self.vel):
            g = layer.grads.get(k)
            if g is None:
                continue
            p = layer.params[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= (lr * v).astype(p.dtype)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(layer.params[k]) for layer, k in params]
        self.v = [np.zeros_like(layer.params[k]) for layer, k in params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for (layer, k), m, v in zip(self.params, self.m, self.v):
            g = layer.grads.get(k)
            if g is None:
                continue
            p = layer.params[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(stage: StageSpec, params):
    if stage.optimizer == "adam":
        return Adam(params, weight_decay=stage.weight_decay)
    return SGD(params, momentum=stage.momentum, weight_decay=stage.weight_decay)


# --------------------------------------------------------------------------
# component-aware execution
# --------------------------------------------------------------------------


class Runner:
    """Forward/backward over a bottlenecked model, honouring frozen components.

    Frozen components run in inference mode (batch-norm running statistics,
    no parameter gradients), which keeps them bit-identical during a stage.
    """

    def __init__(self, bmodel: BottleneckedModel, frozen=frozenset()):
        self.entries = []  # (global_id, layer, trainable)
        gid = 0
        for name, comp in bmodel.components.items():
            trainable = name not in frozen
            for layer in comp.layers:
                gid += 1
                self.entries.append((gid, layer, trainable))
        trainable_ids = [g for g, _, t in self.entries if t]
        self.first_trainable = trainable_ids[0] if trainable_ids else None

    def params(self):
        out = []
        for _, layer, trainable in self.entries:
            if trainable:
                for sub in layer.iter_layers():
                    out.extend((sub, k) for k in sub.params)
        return out

    def forward(self, x, upto=None, capture=()):
        upto = upto or len(self.entries)
        capture = set(capture)
        saved: dict = {}
        caches, acts = [], {}
        for gid, layer, trainable in self.entries[:upto]:
            x, cache = L.forward_layer(layer, x, trainable, saved)
            caches.append(cache)
            if gid in capture:
                acts[gid] = x
        return x, caches, acts

    def backward(self, caches, dy, extra_grads=None):
        extra_grads = extra_grads or {}
        if self.first_trainable is None:
            return
        saved_grads: dict = {}
        for (gid, layer, trainable), cache in zip(reversed(self.entries[: len(caches)]), reversed(caches)):
            if gid < self.first_trainable:
                break
            if gid in extra_grads:
                dy = extra_grads[gid] if dy is None else dy + extra_grads[gid]
            if dy is None:
                continue
            dy = L.backward_layer(layer, cache, dy, trainable, saved_grads)


def _teacher_forward(teacher: ModelGraph, x, upto, capture):
    saved: dict = {}
    acts = {}
    for layer in teacher.layers[:upto]:
        x, _ = L.forward_layer(layer, x, False, saved)
        if layer.id in capture:
            acts[layer.id] = x
    return x, acts


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def _stage_hooks(bmodel, stage):
    hooks = LS.default_hooks(bmodel)
    if stage.loss in ("HND", "AE_RECON"):
        hooks = [h for h in hooks if h.name == "ed"]
    return hooks


def _batch_step(runner, bmodel, teacher, stage, hooks, xb, yb):
    """One forward/backward pass; returns the batch loss."""
    if stage.loss in ("GHND", "HND"):
        upto_s = max(h.student_layer for h in hooks)
        upto_t = max(h.teacher_layer for h in hooks)
        _, t_acts = _teacher_forward(teacher, xb, upto_t, {h.teacher_layer for h in hooks})
        _, caches, s_acts = runner.forward(xb, upto_s, {h.student_layer for h in hooks})
        total, _, grads = LS.ghnd_terms(
            {h.name: t_acts[h.teacher_layer] for h in hooks},
            {h.name: s_acts[h.student_layer] for h in hooks},
            hooks,
            stage.lambdas,
        )
        extra = {}
        for h in hooks:
            g = grads[h.name].astype(xb.dtype)
            extra[h.student_layer] = extra[h.student_layer] + g if h.student_layer in extra else g
        runner.backward(caches, None, extra)
        return total
    if stage.loss == "AE_RECON":
        tgt_id = bmodel.offset("encoder")
        out_id = bmodel.offset("classifier")
        _, caches, acts = runner.forward(xb, out_id, {tgt_id, out_id})
        loss, g = LS.sse_grad(acts[tgt_id], acts[out_id])
        runner.backward(caches, g.astype(xb.dtype))
        return loss
    out, caches, _ = runner.forward(xb)
    if stage.loss == "CE":
        loss, g = LS.ce_loss_grad(out, yb)
    else:
        t_logits, _ = _teacher_forward(teacher, xb, None, ())
        loss, g = LS.kd_loss_grad(out, t_logits, yb, stage.kd_alpha, stage.kd_tau)
    runner.backward(caches, g.astype(xb.dtype))
    return loss


def run_stage(
    model: BottleneckedModel,
    teacher: ModelGraph,
    data: Dataset,
    stage: StageSpec,
    *,
    seed: int = 0,
    stage_index: int = 1,
    epoch_offset: int = 0,
    val: Dataset | None = None,
    log_rows: list | None = None,
) -> BottleneckedModel:
    """Train a copy of ``model`` for one stage and return it.

    Batches are drawn in a fixed order derived from ``seed`` and
    ``stage_index``. One row per epoch is appended to ``log_rows``. Raises
    :class:`DivergenceError` when the loss becomes non-finite or exceeds
    ``DIVERGENCE_LIMIT``.
    """
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    model = model.copy()
    if stage.epochs == 0:
        return model
    runner = Runner(model, stage.frozen)
    params = runner.params()
    opt = make_optimizer(stage, params)
    hooks = _stage_hooks(model, stage)
    rng = np.random.default_rng([seed, stage_index])
    for epoch in range(stage.epochs):
        lr = stage.lr_at(epoch)
        total, count = 0.0, 0
        for step, (xb, yb) in enumerate(data.batches(stage.batch_size, rng)):
            for layer, _ in params:
                layer.grads.clear()
            loss = _batch_step(runner, model, teacher, stage, hooks, xb, yb)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"stage {stage_index} ({stage.loss}) diverged at epoch {epoch + 1}, step {step}: loss={loss}",
                    stage=stage_index,
                    epoch=epoch + 1,
                    step=step,
                    loss=loss,
                )
            opt.step(lr)
            total += loss * len(yb)
            count += len(yb)
        for layer, _ in params:
            layer.grads.clear()
        row = {
            "epoch": epoch_offset + epoch + 1,
            "stage": stage_index,
            "loss": total / count,
            "lr": lr,
            "val_top1": evaluate_accuracy(model, val) if val is not None else "",
        }
        log.info("stage %d epoch %d loss %.6g lr %g", stage_index, epoch + 1, row["loss"], lr)
        if log_rows is not None:
            log_rows.append(row)
    return model


# --------------------------------------------------------------------------
# recipes
# --------------------------------------------------------------------------


def expand_recipe(name: str, epochs=(10, 10), *, lr: float = 1e-3, decay=(0.1, 5), batch_size: int = 64,
                  kd_alpha: float = 0.5, kd_tau: float = 1.0, seed: int = 0, lambdas=None) -> TrainingRecipe:
    """Stage list for a named recipe.

    ``epochs`` gives the two stage lengths of the distillation recipes;
    single-stage baselines train for their sum, with the learning rate decayed
    at the same epochs as the two-stage schedule.
    """
    if name not in RECIPES:
        raise UnknownRecipe(f"unknown recipe {name!r}; choose from {RECIPES}")
    e1, e2 = (int(e) for e in epochs)
    total = e1 + e2
    lambdas = dict(lambdas or {})
    common = dict(initial_lr=lr, batch_size=batch_size)
    kd = dict(kd_alpha=kd_alpha, kd_tau=kd_tau)
    single_decay = (decay[0], max(e1, 1))
    if name.startswith("bottlefit_"):
        second_loss = "KD" if "_kd" in name else "CE"
        frozen2 = {"encoder"} if name.endswith("_fe") else set()
        stages = [
            StageSpec("GHND", "adam", e1, lr_decay=decay, frozen={"classifier"}, lambdas=lambdas, **common),
            StageSpec(second_loss, "sgd", e2, lr_decay=decay, frozen=frozen2, **kd, **common),
        ]
    elif name == "baseline_conventional":
        stages = [StageSpec("CE", "adam", total, lr_decay=single_decay, **common)]
    elif name == "baseline_kd":
        stages = [StageSpec("KD", "adam", total, lr_decay=single_decay, **kd, **common)]
    elif name == "baseline_hnd":
        stages = [StageSpec("HND", "adam", total, lr_decay=single_decay, frozen={"classifier"}, lambdas=lambdas, **common)]
    else:
        stages = [
            StageSpec(
                "AE_RECON", "adam", total, initial_lr=lr, lr_decay=decay, batch_size=32,
                frozen={"prefix", "classifier"},
            )
        ]
    return TrainingRecipe(stages, seed=seed, name=name)


def autoencoder_model(teacher: ModelGraph, config: SplitConfig, *, seed: int = 0) -> BottleneckedModel:
    """Teacher with a 4-conv / 4-deconv autoencoder inserted at its split target.

    The teacher layers before and after the insertion point are deep copies and
    stay frozen; only the autoencoder trains.
    """
    cut = resolve_cut(teacher, config)
    shapes = teacher.validate()
    c_t = shapes[cut][0]
    b = int(config.bottleneck_channels)
    rng = np.random.default_rng(seed)
    chans = [c_t, c_t, c_t // 2, c_t // 2, b]
    enc, dec = [], []
    for i in range(4):
        enc.append(L.conv(chans[i], chans[i + 1], 3, 1, 1, rng=rng))
        if i < 3:
            enc += [L.batch_norm(chans[i + 1]), L.relu()]
    rev = chans[::-1]
    for i in range(4):
        dec.append(L.deconv(rev[i], rev[i + 1], 3, 1, 1, rng=rng, bias=i == 3))
        if i < 3:
            dec += [L.batch_norm(rev[i + 1]), L.relu()]
    prefix = ModelGraph(copy.deepcopy(teacher.layers[:cut]), teacher.input_shape, None, name="prefix")
    encoder = ModelGraph(enc, shapes[cut], None, name="ae_encoder")
    decoder = ModelGraph(dec, encoder.output_shape, None, name="ae_decoder")
    classifier = ModelGraph(copy.deepcopy(teacher.layers[cut:]), shapes[cut], teacher.num_classes, name="classifier")
    for comp in (prefix, classifier):
        comp.zero_grads()
    if decoder.output_shape != shapes[cut]:
        raise InvalidSplitConfig("autoencoder does not restore the split tensor shape")
    k_star = cut + encoder.depth
    cfg = SplitConfig(**{**config.to_dict(), "k_star": k_star, "l_ed": k_star + decoder.depth, "teacher_cut": cut})
    return BottleneckedModel(encoder, decoder, classifier, teacher.name, cfg, prefix=prefix,
                             meta={"autoencoder": True, "teacher_arch": teacher.meta.get("arch", teacher.name)})


def train_recipe(model, teacher, data, recipe: TrainingRecipe, *, val=None, log_rows=None):
    rows = [] if log_rows is None else log_rows
    offset = 0
    for i, stage in enumerate(recipe.stages, start=1):
        model = run_stage(model, teacher, data, stage, seed=recipe.seed, stage_index=i,
                          epoch_offset=offset, val=val, log_rows=rows)
        offset += stage.epochs
    model.meta["train_log"] = rows
    model.meta["recipe"] = recipe.name
    return model


def train_with_recipe(name: str, teacher: ModelGraph, config: SplitConfig, data: Dataset, *,
                      epochs=(10, 10), seed: int = 0, val=None, **recipe_kw) -> BottleneckedModel:
    """Inject (or insert an autoencoder) and train with the named recipe.

    The epoch log is stored in ``model.meta["train_log"]``.
    """
    recipe = expand_recipe(name, epochs, seed=seed, **recipe_kw)
    if name == "baseline_autoencoder":
        model = autoencoder_model(teacher, config, seed=seed)
    else:
        model = inject(teacher, SplitConfig(**{**config.to_dict(), "seed": seed}))
    return train_recipe(model, teacher, data, recipe, val=val)


# --------------------------------------------------------------------------
# evaluation and teacher training
# --------------------------------------------------------------------------


def predict(model, x, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, x.shape[0], batch_size):
        out.append(np.argmax(model(x[i : i + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``model`` (any callable returning logits) on ``dataset``."""
    if dataset is None or len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    pred = predict(model, dataset.x, batch_size)
    return float(np.mean(pred == dataset.y))


def train_teacher(teacher: ModelGraph, data: Dataset, *, epochs: int = 15, lr: float = 1e-3,
                  decay=(0.1, 10), batch_size: int = 64, seed: int = 0, val=None, log_rows=None) -> ModelGraph:
    """Plain cross-entropy training of a full model with Adam (returns a copy)."""
    teacher = teacher.copy()
    teacher.zero_grads()
    params = [(layer, k) for layer in teacher.all_layers() for k in layer.params]
    opt = Adam(params)
    stage = StageSpec("CE", "adam", epochs, lr, decay, batch_size=batch_size)
    rng = np.random.default_rng([seed, 0])
    for epoch in range(epochs):
        lr_e = stage.lr_at(epoch)
        total, count = 0.0, 0
        for step, (xb, yb) in enumerate(data.batches(batch_size, rng)):
            teacher.zero_grads()
            out, caches, _ = forward_train(teacher, xb)
            loss, g = LS.ce_loss_grad(out, yb)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise DivergenceError(f"teacher training diverged at epoch {epoch + 1}, step {step}",
                                      stage=0, epoch=epoch + 1, step=step, loss=loss)
            backward(teacher, caches, g.astype(xb.dtype))
            opt.step(lr_e)
            total += loss * len(yb)
            count += len(yb)
        row = {"epoch": epoch + 1, "stage": 0, "loss": total / count, "lr": lr_e,
               "val_top1": evaluate_accuracy(teacher, val) if val is not None else ""}
        log.info("teacher epoch %d loss %.6g", epoch + 1, row["loss"])
        if log_rows is not None:
            log_rows.append(row)
    teacher.zero_grads()
    return teacher


def write_log(rows, path: str):
    """Write epoch rows as CSV with a fixed column order and float repr."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], r["stage"], repr(float(r["loss"])), repr(float(r["lr"])),
                        "" if r["val_top1"] == "" else repr(float(r["val_top1"]))])
