"""Training losses and their gradients.

All losses accept a single sample (1-D logits, scalar label) or a batch
(2-D logits, label vector) and return the batch mean. The ``*_grad``
variants return ``(loss, dloss/dinput)`` with the same batch averaging.
Computation is done in float64 internally and cast back on return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splitcomp.errors import InvalidLabel, InvalidTemperature, ShapeError


@dataclass(frozen=True)
class HookPoint:
    """A (teacher layer, student layer) pair whose outputs are compared.

    ``student_layer`` uses the global layer numbering of a bottlenecked model.
    The hook named ``"ed"`` pairs the teacher's split target with the decoder
    output.
    """

    name: str
    teacher_layer: int
    student_layer: int


def _batch(logits, labels=None):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    if z.ndim != 2:
        raise ShapeError(f"logits must be 1-D or 2-D, got shape {z.shape}")
    if labels is None:
        return z, None, single
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise ShapeError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InvalidLabel(f"labels must be integers, got {y}")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise InvalidLabel(f"label outside [0, {z.shape[1]})")
    return z, y, single


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def _check_tau(tau):
    if not tau > 0 or not np.isfinite(tau):
        raise InvalidTemperature(f"temperature must be a positive finite number, got {tau}")


def softened_distribution(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax ``exp(z/tau) / sum exp(z/tau)`` along the last axis."""
    _check_tau(tau)
    z, _, single = _batch(logits)
    p = np.exp(_log_softmax(z / tau))
    return p[0] if single else p


def ce_loss_grad(logits, labels):
    z, y, single = _batch(logits, labels)
    logp = _log_softmax(z)
    n = z.shape[0]
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    return float(loss), (g[0] if single else g)


def ce_loss(logits, label) -> float:
    """Cross entropy ``-log softmax(logits)[label]`` (batch mean)."""
    return ce_loss_grad(logits, label)[0]


def kd_loss_grad(student_logits, teacher_logits, labels, alpha: float = 0.5, tau: float = 1.0):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_tau(tau)
    zs, y, single = _batch(student_logits, labels)
    zt, _, _ = _batch(teacher_logits)
    if zt.shape != zs.shape:
        raise ShapeError(f"teacher logits {zt.shape} vs student logits {zs.shape}")
    n = zs.shape[0]
    ce, g_ce = ce_loss_grad(zs, y)
    logq = _log_softmax(zt / tau)
    logp = _log_softmax(zs / tau)
    q = np.exp(logq)
    # KL(q || p) with q the teacher target; 0*log0 contributes nothing
    kl_rows = np.where(q > 0, q * (logq - logp), 0.0).sum(axis=1)
    kl = kl_rows.mean()
    g_kl = (np.exp(logp) - q) / (tau * n)
    loss = alpha * ce + (1.0 - alpha) * tau * tau * kl
    g = alpha * g_ce + (1.0 - alpha) * tau * tau * g_kl
    return float(loss), (g[0] if single else g)


def kd_loss(student_logits, teacher_logits, label, alpha: float = 0.5, tau: float = 1.0) -> float:
    """``alpha * CE + (1 - alpha) * tau^2 * KL(teacher_soft || student_soft)``."""
    return kd_loss_grad(student_logits, teacher_logits, label, alpha, tau)[0]


def sse_grad(target, output):
    """Per-sample sum of squared errors, averaged over the leading batch axis.

    Returns ``(loss, d loss / d output)``.
    """
    t = np.asarray(target, dtype=np.float64)
    o = np.asarray(output, dtype=np.float64)
    if t.shape != o.shape:
        raise ShapeError(f"target shape {t.shape} != output shape {o.shape}")
    n = o.shape[0] if o.ndim > 1 else 1
    d = o - t
    return float((d * d).sum() / n), 2.0 * d / n


def recon_loss(target, output) -> float:
    """Sum-of-squares reconstruction error (batch mean)."""
    return sse_grad(target, output)[0]


def ghnd_terms(teacher_acts: dict, student_acts: dict, hooks, lambdas):
    """Weighted per-hook squared errors and output gradients.

    ``teacher_acts`` and ``student_acts`` map hook names to tensors. Returns
    ``(total, {name: loss}, {name: grad})`` where grads are w.r.t. the
    student tensors and already include the hook weight.
    """
    total = 0.0
    parts, grads = {}, {}
    for hook in hooks:
        lam = float(lambdas.get(hook.name, 1.0))
        if lam < 0:
            raise ValueError(f"hook weight for {hook.name!r} must be >= 0")
        t, s = teacher_acts[hook.name], student_acts[hook.name]
        if t.shape != s.shape:
            raise ShapeError(f"hook {hook.name!r}: teacher {t.shape} vs student {s.shape}")
        loss, g = sse_grad(t, s)
        parts[hook.name] = lam * loss
        grads[hook.name] = lam * g
        total += lam * loss
    return total, parts, grads


def ghnd_loss(teacher, student, x, hooks, lambdas=None) -> float:
    """Generalized head-network distillation loss of ``student`` against ``teacher``.

    Sum over hooks of ``lambda * ||t_j(x) - s_j(x)||^2`` (batch mean). A plain
    head-distillation loss is the special case of a single ``"ed"`` hook.
    """
    from splitcomp.model.graph import forward

    lambdas = lambdas or {}
    hooks = list(hooks)
    if not any(h.name == "ed" for h in hooks):
        raise ValueError('hooks must include the "ed" hook')
    _, t_acts = forward(teacher, x, capture={h.teacher_layer for h in hooks})
    _, s_acts = forward(student.full_graph(), x, capture={h.student_layer for h in hooks})
    t_map = {a.layer_id: a.tensor for a in t_acts}
    s_map = {a.layer_id: a.tensor for a in s_acts}
    total, _, _ = ghnd_terms(
        {h.name: t_map[h.teacher_layer] for h in hooks},
        {h.name: s_map[h.student_layer] for h in hooks},
        hooks,
        lambdas,
    )
    return total


def default_hooks(bmodel) -> list[HookPoint]:
    """``"ed"`` hook plus one hook per top-level block of the classifier."""
    cfg = bmodel.config
    cut = cfg.teacher_cut
    base = bmodel.offset("classifier")
    hooks = [HookPoint("ed", cut, base)]
    for layer in bmodel.classifier.layers:
        if layer.kind == "block":
            hooks.append(HookPoint(f"block{cut + layer.id}", cut + layer.id, base + layer.id))
    return hooks
