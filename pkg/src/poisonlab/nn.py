"""Minimal deterministic dense-network engine.

A model is a rectifier trunk shared across tasks plus one linear output head
per task. Forward and backward passes are written out explicitly against
numpy arrays; there is no autodiff. All parameters are float32 in production,
but every routine follows the dtype of its inputs so the gradient oracle can
run the identical code in float64.

Parameter declaration order (used by the optimizer, the Fisher estimate and
the checkpoint format alike): trunk layer 0 (W, b), trunk layer 1 (W, b), ...,
head 0 (W, b), head 1 (W, b), ...
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError
from .rng import stream

DTYPE = np.float32
HIDDEN_WIDTHS = (128, 128)


@dataclass
class DenseLayer:
    weights: np.ndarray  # [fan_in, fan_out]
    bias: np.ndarray  # [fan_out]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class ModelState:
    """Trunk + per-task heads + the seed that keys every init stream."""

    trunk: list[DenseLayer]
    heads: list[DenseLayer]
    seed: int
    input_width: int


@dataclass
class OptimState:
    lr: float
    momentum: float
    weight_decay: float
    velocity: list[np.ndarray] = field(default_factory=list)


@dataclass
class EwcState:
    """Quadratic-anchor state over the trunk parameters only."""

    anchor: list[np.ndarray]
    fisher: list[np.ndarray]
    merge_coeff: float


def _glorot(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_model(seed: int, input_width: int, hidden=HIDDEN_WIDTHS, dtype=DTYPE) -> ModelState:
    """Fresh trunk with no heads; layer l drawn from stream (seed, 'trunk', l)."""
    trunk = []
    fan_in = input_width
    for idx, width in enumerate(hidden):
        rng = stream(seed, "trunk", idx)
        trunk.append(DenseLayer(_glorot(rng, fan_in, width, dtype), np.zeros(width, dtype=dtype)))
        fan_in = width
    return ModelState(trunk=trunk, heads=[], seed=seed, input_width=input_width)


def add_head(model: ModelState, num_classes: int, rng_salt: int = 0) -> ModelState:
    """New model with one more head; trunk arrays are shared untouched.

    The head weights come from stream (model.seed, 'head', index, rng_salt), so
    repeated calls with the same seeds yield identical heads while calibration
    reruns can vary the salt.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    fan_in = model.trunk[-1].fan_out if model.trunk else model.input_width
    rng = stream(model.seed, "head", len(model.heads), rng_salt)
    dtype = model.trunk[0].weights.dtype if model.trunk else DTYPE
    head = DenseLayer(_glorot(rng, fan_in, num_classes, dtype), np.zeros(num_classes, dtype=dtype))
    return ModelState(trunk=model.trunk, heads=model.heads + [head], seed=model.seed,
                      input_width=model.input_width)


def copy_model(model: ModelState) -> ModelState:
    return ModelState(
        trunk=[DenseLayer(l.weights.copy(), l.bias.copy()) for l in model.trunk],
        heads=[DenseLayer(l.weights.copy(), l.bias.copy()) for l in model.heads],
        seed=model.seed,
        input_width=model.input_width,
    )


def trunk_params(model: ModelState) -> list[np.ndarray]:
    out = []
    for layer in model.trunk:
        out.extend((layer.weights, layer.bias))
    return out


def all_params(model: ModelState) -> list[np.ndarray]:
    out = trunk_params(model)
    for head in model.heads:
        out.extend((head.weights, head.bias))
    return out


def set_all_params(model: ModelState, params: list[np.ndarray]) -> None:
    """Rebind parameter arrays in declaration order (no copies)."""
    expected = 2 * (len(model.trunk) + len(model.heads))
    if len(params) != expected:
        raise DimensionError(f"expected {expected} parameter arrays, got {len(params)}")
    it = iter(params)
    for layer in model.trunk + model.heads:
        layer.weights = next(it)
        layer.bias = next(it)


def forward_features(model: ModelState, batch: np.ndarray):
    """Post-rectifier activations per trunk layer and raw logits per head."""
    if batch.ndim != 2 or batch.shape[1] != model.input_width:
        raise DimensionError(
            f"input: expected batch shape [B, {model.input_width}], got {list(batch.shape)}")
    activations = []
    h = batch
    for idx, layer in enumerate(model.trunk):
        if h.shape[1] != layer.fan_in:
            raise DimensionError(
                f"trunk layer {idx}: expected input width {layer.fan_in}, got {h.shape[1]}")
        h = np.maximum(h @ layer.weights + layer.bias, 0.0)
        activations.append(h)
    logits = []
    for idx, head in enumerate(model.heads):
        if h.shape[1] != head.fan_in:
            raise DimensionError(
                f"head {idx}: expected input width {head.fan_in}, got {h.shape[1]}")
        logits.append(h @ head.weights + head.bias)
    return activations, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax of the true class.

    Returns (loss, grad) with grad rows (softmax - onehot) / B, so each row
    sums to zero.
    """
    labels = np.asarray(labels)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    probs = softmax(logits)
    eps = np.finfo(logits.dtype).tiny
    loss = float(-np.log(np.maximum(probs[np.arange(batch), labels], eps)).mean())
    grad = probs.copy()
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return loss, grad


def _check_head_lists(student_logits, teacher_logits):
    if len(student_logits) != len(teacher_logits):
        raise ValueError(
            f"head count mismatch: student {len(student_logits)} vs teacher {len(teacher_logits)}")
    for idx, (s, t) in enumerate(zip(student_logits, teacher_logits)):
        if s.shape != t.shape:
            raise ValueError(f"head {idx}: logit shapes differ {s.shape} vs {t.shape}")


def lwf_distillation(student_logits, teacher_logits, temperature: float) -> float:
    """Sum over heads of T^2 * mean-batch KL(teacher_T || student_T)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_head_lists(student_logits, teacher_logits)
    total = 0.0
    for s, t in zip(student_logits, teacher_logits):
        ps = softmax(s / temperature)
        pt = softmax(t / temperature)
        eps = np.finfo(ps.dtype).tiny
        kl = (pt * (np.log(np.maximum(pt, eps)) - np.log(np.maximum(ps, eps)))).sum(axis=1)
        total += temperature ** 2 * float(kl.mean())
    return total


def lwf_logit_grads(student_logits, teacher_logits, temperature: float):
    """Distillation value plus its gradient wrt each student head's logits."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_head_lists(student_logits, teacher_logits)
    value = 0.0
    grads = []
    for s, t in zip(student_logits, teacher_logits):
        batch = s.shape[0]
        ps = softmax(s / temperature)
        pt = softmax(t / temperature)
        eps = np.finfo(ps.dtype).tiny
        kl = (pt * (np.log(np.maximum(pt, eps)) - np.log(np.maximum(ps, eps)))).sum(axis=1)
        value += temperature ** 2 * float(kl.mean())
        grads.append((temperature / batch) * (ps - pt))
    return value, grads


def ewc_penalty(params, ewc: EwcState, lam: float) -> float:
    """lam/2 * sum F * (theta - anchor)^2 over the trunk parameters."""
    if len(params) != len(ewc.anchor):
        raise DimensionError(
            f"ewc: {len(params)} parameter arrays vs {len(ewc.anchor)} anchored")
    total = 0.0
    for idx, (p, a, f) in enumerate(zip(params, ewc.anchor, ewc.fisher)):
        if p.shape != a.shape or p.shape != f.shape:
            raise DimensionError(f"ewc: parameter {idx} shape mismatch")
        d = p - a
        total += float((f * d * d).sum())
    return 0.5 * lam * total


def ewc_grads(params, ewc: EwcState, lam: float):
    return [lam * f * (p - a) for p, a, f in zip(params, ewc.anchor, ewc.fisher)]


def backward(model: ModelState, batch: np.ndarray, activations, logit_grads):
    """Gradients in declaration order given per-head logit gradients.

    logit_grads[k] may be None for heads that take no part in the loss; their
    gradient slots come back as None (the optimizer leaves them untouched).
    """
    h_last = activations[-1] if model.trunk else batch
    dh = np.zeros_like(h_last)
    head_grads = []
    for head, g in zip(model.heads, logit_grads):
        if g is None:
            head_grads.extend((None, None))
            continue
        head_grads.extend((h_last.T @ g, g.sum(axis=0)))
        dh = dh + g @ head.weights.T
    grads = head_grads
    for idx in range(len(model.trunk) - 1, -1, -1):
        dz = dh * (activations[idx] > 0)
        inp = activations[idx - 1] if idx > 0 else batch
        grads = [inp.T @ dz, dz.sum(axis=0)] + grads
        if idx > 0:
            dh = dz @ model.trunk[idx].weights.T
    return grads


def sgd_step(params, grads, optim: OptimState):
    """One momentum + weight-decay step: g_eff = g + wd*p; v' = m*v + g_eff;
    p' = p - lr*v'. Entries with grad None pass through frozen.

    Returns (new_params, new_velocity); refuses non-finite gradients.
    """
    if not optim.velocity:
        optim.velocity = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(optim.velocity)):
        raise DimensionError("sgd_step: params/grads/velocity lengths differ")
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, optim.velocity):
        if g is None:
            new_params.append(p)
            new_velocity.append(v)
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, step refused")
        g_eff = g + optim.weight_decay * p
        v_new = optim.momentum * v + g_eff
        new_params.append((p - optim.lr * v_new).astype(p.dtype, copy=False))
        new_velocity.append(v_new.astype(p.dtype, copy=False))
    return new_params, new_velocity


def fisher_diagonal(model: ModelState, inputs: np.ndarray, labels: np.ndarray,
                    head_index: int, seed: int = 0, batch_size: int = 256):
    """Empirical diagonal Fisher: mean over samples of squared per-sample
    gradients of log p(y_true | x) under the given head.

    Per-sample dense-layer gradients factor as outer(input_i, dz_i), so the
    squared mean is (input^2)^T @ (dz^2) / N without looping over samples.
    Returns arrays aligned with trunk params followed by the head's (W, b).
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("fisher_diagonal: empty dataset")
    order = stream(seed, "fisher").permutation(n)
    trunk_acc = [np.zeros_like(p) for p in trunk_params(model)]
    head = model.heads[head_index]
    head_acc = [np.zeros_like(head.weights), np.zeros_like(head.bias)]
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb, yb = inputs[idx], labels[idx]
        activations, logits = forward_features(model, xb)
        dz = softmax(logits[head_index])
        dz[np.arange(len(idx)), yb] -= 1.0  # per-sample grad of -log p
        h_last = activations[-1] if model.trunk else xb
        head_acc[0] += (h_last ** 2).T @ (dz ** 2)
        head_acc[1] += (dz ** 2).sum(axis=0)
        dh = dz @ head.weights.T
        for layer_idx in range(len(model.trunk) - 1, -1, -1):
            dzl = dh * (activations[layer_idx] > 0)
            inp = activations[layer_idx - 1] if layer_idx > 0 else xb
            trunk_acc[2 * layer_idx] += (inp ** 2).T @ (dzl ** 2)
            trunk_acc[2 * layer_idx + 1] += (dzl ** 2).sum(axis=0)
            if layer_idx > 0:
                dh = dzl @ model.trunk[layer_idx].weights.T
    return [a / n for a in trunk_acc + head_acc]


def check_finite(arrays, context: str) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {context}")
