"""Class-incremental training over a task stream.

One engine drives every method: FINETUNE (new head only), LWF (distillation
from the pre-task snapshot into old heads), EWC (quadratic trunk anchor),
REPLAY (class-balanced buffer mixed into each batch), plus a JOINT baseline
trained on the merged stream. Methods reduce into each other exactly: LWF
with lambda 0 and REPLAY with capacity 0 follow the FINETUNE trajectory bit
for bit, which the tests pin down.

Evaluation is task-agnostic: argmax over the concatenated logits of every
head, ties resolved toward the lowest global class index.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import nn
from .attacks import PoisonSpec, poison_task
from .data import TaskDataset
from .errors import NumericError
from .rng import stream, subseed

METHODS = ("FINETUNE", "LWF", "EWC", "REPLAY", "JOINT")

LAMBDA_DEFAULTS = {"LWF": 10.0, "EWC": 5000.0}


@dataclass
class MethodConfig:
    method: str = "LWF"
    lamb: float | None = None  # None -> per-method default
    temperature: float = 2.0
    gamma: float = 0.5
    buffer_capacity: int = 200
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple = (30, 40)
    lr_decay_factor: float = 0.1
    # global L2 gradient-norm cap; the bare rectifier trunk diverges under the
    # distillation force at lr 0.05 without it. Applied to every method so
    # trajectories stay comparable (and the lambda=0 reduction bitwise).
    clip_norm: float = 0.5
    hidden: tuple = nn.HIDDEN_WIDTHS

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.buffer_capacity < 0:
            raise ValueError("buffer capacity must be >= 0")
        if self.lamb is not None and self.lamb < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def resolved_lambda(self) -> float:
        if self.lamb is not None:
            return self.lamb
        return LAMBDA_DEFAULTS.get(self.method, 0.0)


@dataclass
class TrainLog:
    task_id: int
    train_seed: int
    epoch_loss: list = field(default_factory=list)
    epoch_train_acc: list = field(default_factory=list)
    epoch_val_acc: list = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class TaskOutcome:
    model: nn.ModelState
    log: TrainLog
    ewc: nn.EwcState | None
    optim: nn.OptimState


@dataclass
class StreamResult:
    acc_matrix: list  # row i: accuracy per task j <= i after training task i
    checkpoints: list  # serialized pre-task state, one per task
    logs: list
    events: list  # inspector verdict records, empty without an inspector
    model: nn.ModelState
    head_classes: list  # global classes per accepted head


def _local_labels(samples, classes) -> np.ndarray:
    index = {cls: i for i, cls in enumerate(classes)}
    return np.array([index[s.label] for s in samples], dtype=np.int64)


def _sample_matrix(samples) -> np.ndarray:
    return np.stack([s.image.reshape(-1) for s in samples]).astype(np.float32)


def _accuracy(model, x, y_local, head_index) -> float:
    _, logits = nn.forward_features(model, x)
    return float((logits[head_index].argmax(axis=1) == y_local).mean())


def train_task(model: nn.ModelState, task: TaskDataset, cfg: MethodConfig, train_seed: int,
               teacher: nn.ModelState | None = None, ewc: nn.EwcState | None = None,
               buffer=None, class_locator=None, seen_classes=None) -> TaskOutcome:
    """Add a head for the task and run the seeded minibatch SGD schedule.

    teacher: pre-task model copy, required for LWF with old heads present.
    class_locator: global class -> (head index, local index), for replay rows.
    Returns the updated model, the per-epoch log, the (possibly refreshed)
    EWC state and the final optimizer state.
    """
    if seen_classes is not None:
        overlap = set(task.classes) & set(seen_classes)
        if overlap:
            raise ValueError(f"task {task.task_id} repeats already-seen classes {sorted(overlap)}")
    lam = cfg.resolved_lambda
    distill = cfg.method == "LWF" and lam > 0 and len(model.heads) > 0
    if distill and teacher is None:
        raise ValueError("LWF needs a pre-task teacher snapshot once heads exist")
    use_ewc = cfg.method == "EWC" and ewc is not None and lam > 0
    buffer = list(buffer or [])
    if cfg.method != "REPLAY":
        buffer = []

    work = nn.add_head(nn.copy_model(model), len(task.classes), rng_salt=train_seed)
    new_head = len(work.heads) - 1
    x_task = _sample_matrix(task.train)
    y_task = _local_labels(task.train, task.classes)
    n = len(task.train)

    buf_x = buf_heads = buf_local = None
    if buffer:
        buf_x = _sample_matrix(buffer)
        locs = [class_locator[s.label] for s in buffer]
        buf_heads = np.array([h for h, _ in locs], dtype=np.int64)
        buf_local = np.array([l for _, l in locs], dtype=np.int64)

    optim = nn.OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                          velocity=[np.zeros_like(p) for p in nn.all_params(work)])
    log = TrainLog(task_id=task.task_id, train_seed=train_seed)
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            optim.lr *= cfg.lr_decay_factor
        order = stream(train_seed, "shuffle", task.task_id, epoch).permutation(n)
        batch_losses = []
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = x_task[idx]
            rows_by_head = {new_head: (list(range(len(idx))), y_task[idx].tolist())}
            if buffer:
                k = min(len(buffer), cfg.batch_size)
                pick = np.sort(stream(train_seed, "replay", task.task_id, epoch, batch_no).choice(
                    len(buffer), size=k, replace=False))
                xb = np.concatenate([xb, buf_x[pick]])
                for offset, b_idx in enumerate(pick):
                    rows, labels = rows_by_head.setdefault(int(buf_heads[b_idx]), ([], []))
                    rows.append(len(idx) + offset)
                    labels.append(int(buf_local[b_idx]))

            total = len(xb)
            activations, logits = nn.forward_features(work, xb)
            loss = 0.0
            logit_grads = [None] * len(work.heads)
            for head_idx, (rows, labels) in rows_by_head.items():
                rows = np.asarray(rows, dtype=np.int64)
                labels = np.asarray(labels, dtype=np.int64)
                probs = nn.softmax(logits[head_idx][rows])
                eps = np.finfo(probs.dtype).tiny
                loss += float(-np.log(np.maximum(probs[np.arange(len(rows)), labels], eps)).sum()) / total
                g = np.zeros_like(logits[head_idx])
                probs[np.arange(len(rows)), labels] -= 1.0
                g[rows] = probs / total
                logit_grads[head_idx] = g

            if distill:
                _, teacher_logits = nn.forward_features(teacher, xb)
                d_value, d_grads = nn.lwf_logit_grads(logits[:new_head], teacher_logits,
                                                      cfg.temperature)
                loss += lam * d_value
                for head_idx, g in enumerate(d_grads):
                    scaled = lam * g
                    if logit_grads[head_idx] is None:
                        logit_grads[head_idx] = scaled
                    else:
                        logit_grads[head_idx] = logit_grads[head_idx] + scaled

            grads = nn.backward(work, xb, activations, logit_grads)
            if use_ewc:
                loss += nn.ewc_penalty(nn.trunk_params(work), ewc, lam)
                for slot, g in enumerate(nn.ewc_grads(nn.trunk_params(work), ewc, lam)):
                    grads[slot] = grads[slot] + g

            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at task {task.task_id} epoch {epoch}")
            if cfg.clip_norm:
                gnorm = math.sqrt(sum(float((g ** 2).sum()) for g in grads if g is not None))
                if gnorm > cfg.clip_norm:
                    scale = np.float32(cfg.clip_norm / gnorm)
                    grads = [None if g is None else g * scale for g in grads]
            params, velocity = nn.sgd_step(nn.all_params(work), grads, optim)
            nn.set_all_params(work, params)
            optim.velocity = velocity
            batch_losses.append(loss)

        log.epoch_loss.append(float(np.mean(batch_losses)))
        log.epoch_train_acc.append(_accuracy(work, x_task, y_task, new_head))
        if task.val:
            log.epoch_val_acc.append(
                _accuracy(work, _sample_matrix(task.val), _local_labels(task.val, task.classes),
                          new_head))
        else:
            log.epoch_val_acc.append(float("nan"))

    log.wall_time = time.perf_counter() - started

    new_ewc = ewc
    if cfg.method == "EWC":
        fisher = nn.fisher_diagonal(work, x_task, y_task, head_index=new_head, seed=train_seed)
        trunk_fisher = fisher[:2 * len(work.trunk)]
        if ewc is None:
            merged = trunk_fisher
        else:
            merged = [cfg.gamma * old + (1.0 - cfg.gamma) * new
                      for old, new in zip(ewc.fisher, trunk_fisher)]
        new_ewc = nn.EwcState(anchor=[p.copy() for p in nn.trunk_params(work)],
                              fisher=merged, merge_coeff=cfg.gamma)
    return TaskOutcome(model=work, log=log, ewc=new_ewc, optim=optim)


def eval_class_il(model: nn.ModelState, head_classes, test_sets) -> list:
    """Accuracy per test set under task-agnostic argmax over all heads.

    head_classes: global class tuple per head, aligned with model.heads.
    Ties in the concatenated logits go to the lowest global class index.
    """
    global_ids = np.array([c for classes in head_classes for c in classes], dtype=np.int64)
    col_order = np.argsort(global_ids, kind="stable")
    ordered_ids = global_ids[col_order]
    accs = []
    for samples in test_sets:
        if not samples:
            accs.append(float("nan"))
            continue
        if not len(head_classes):  # every task rolled back: nothing predictable
            accs.append(0.0)
            continue
        x = _sample_matrix(samples)
        y = np.array([s.label for s in samples], dtype=np.int64)
        _, logits = nn.forward_features(model, x)
        merged = np.concatenate(logits, axis=1)[:, col_order]
        pred = ordered_ids[merged.argmax(axis=1)]
        accs.append(float((pred == y).mean()))
    return accs


def replay_update(buffer, task: TaskDataset, capacity: int, seed: int) -> list:
    """Class-balanced buffer refresh: largest-remainder quotas over classes
    seen so far, earlier-seen classes first, seeded subsampling per class."""
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    if capacity == 0:
        return []
    seen = []
    for s in buffer:
        if s.label not in seen:
            seen.append(s.label)
    for cls in task.classes:
        if cls not in seen:
            seen.append(cls)
    base, rem = divmod(capacity, len(seen))
    quotas = {cls: base + (1 if i < rem else 0) for i, cls in enumerate(seen)}
    pools = {cls: [s for s in buffer if s.label == cls] for cls in seen}
    for cls in task.classes:
        pools[cls] = pools.get(cls, []) + [s for s in task.train if s.label == cls]
    out = []
    for cls in seen:
        pool = pools[cls]
        take = min(quotas[cls], len(pool))
        if take == 0:
            continue
        pick = stream(seed, "buffer", cls).choice(len(pool), size=take, replace=False)
        out.extend(pool[i] for i in sorted(int(p) for p in pick))
    return out


def run_stream(tasks, cfg: MethodConfig, run_seed: int, attack_plan=None,
               inspector=None) -> StreamResult:
    """Train the stream in order with a pre-task checkpoint before every task.

    attack_plan: optional {task_index: PoisonSpec} applied to train+val.
    inspector: optional callable(task_index, pre_model, outcome, applied_task,
    blob) -> dict; a returned {"rollback": True} restores the checkpoint and
    skips the task. Inspection is read-only, so a never-firing inspector
    leaves the trajectory bitwise unchanged.
    """
    attack_plan = attack_plan or {}
    input_width = tasks[0].train[0].image.size
    model = nn.init_model(run_seed, input_width, hidden=cfg.hidden)
    optim = nn.OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    ewc = None
    buffer = []
    head_classes = []
    class_locator = {}
    seen_classes = set()
    acc_matrix, checkpoints, logs, events = [], [], [], []

    for i, task in enumerate(tasks):
        blob = ckpt.serialize(ckpt.RunState(model=model, optim=optim, ewc=ewc,
                                            buffer=buffer, task_index=i))
        checkpoints.append(blob)
        applied = poison_task(task, attack_plan[i]) if i in attack_plan else task
        pre_model = model
        outcome = train_task(model, applied, cfg, train_seed=subseed(run_seed, "task", i),
                             teacher=pre_model, ewc=ewc, buffer=buffer,
                             class_locator=class_locator, seen_classes=seen_classes)
        verdict = inspector(i, pre_model, outcome, applied, blob) if inspector else None
        if verdict:
            events.append(verdict)
        if verdict and verdict.get("rollback"):
            restored = ckpt.restore(blob)
            model, optim, ewc, buffer = restored.model, restored.optim, restored.ewc, restored.buffer
        else:
            model, optim, ewc = outcome.model, outcome.optim, outcome.ewc
            logs.append(outcome.log)
            head_classes.append(applied.classes)
            seen_classes |= set(applied.classes)
            for local, cls in enumerate(applied.classes):
                class_locator[cls] = (len(model.heads) - 1, local)
            if cfg.method == "REPLAY":
                buffer = replay_update(buffer, applied, cfg.buffer_capacity,
                                       seed=subseed(run_seed, "buffer", i))
        acc_matrix.append(eval_class_il(model, head_classes, [t.test for t in tasks[:i + 1]]))

    return StreamResult(acc_matrix=acc_matrix, checkpoints=checkpoints, logs=logs,
                        events=events, model=model, head_classes=head_classes)


def joint_train(tasks, cfg: MethodConfig, run_seed: int, poison_spec: PoisonSpec | None = None,
                poisoned_index: int | None = None):
    """Single-head training over the merged stream (same trunk and epoch
    budget as one CL task). Returns per-task-group and per-class accuracy."""
    work_tasks = list(tasks)
    if poison_spec is not None:
        if poisoned_index is None or not 0 <= poisoned_index < len(tasks):
            raise ValueError("poisoned task index required and must be in range")
        work_tasks[poisoned_index] = poison_task(tasks[poisoned_index], poison_spec)
    classes = tuple(c for t in work_tasks for c in t.classes)
    samples = [s for t in work_tasks for s in t.train]
    merged = TaskDataset(task_id=0, classes=classes, train=samples, val=[], test=[])
    joint_cfg = replace(cfg, method="FINETUNE", lamb=0.0)
    input_width = samples[0].image.size
    model = nn.init_model(run_seed, input_width, hidden=cfg.hidden)
    outcome = train_task(model, merged, joint_cfg, train_seed=subseed(run_seed, "joint"))
    per_task = eval_class_il(outcome.model, [classes], [t.test for t in tasks])
    per_class = {}
    for t in tasks:
        for cls in t.classes:
            cls_samples = [s for s in t.test if s.label == cls]
            per_class[cls] = eval_class_il(outcome.model, [classes], [cls_samples])[0]
    return {"per_task": per_task, "per_class": per_class, "log": outcome.log,
            "model": outcome.model}


@dataclass
class PhaseReport:
    t_p: float
    before: float | None
    after: float | None = None
    total: float | None = None


@dataclass
class TableReport:
    p: int
    at_poisoning: PhaseReport
    final: PhaseReport


def report_tables(acc_matrix, p: int) -> TableReport:
    """Table-style summary: accuracies at poisoning time (row p) and at the
    end (last row), grouped into T_p / before / after / total."""
    if not 0 <= p < len(acc_matrix):
        raise ValueError(f"poisoned task index {p} outside stream of {len(acc_matrix)} tasks")
    row_p = acc_matrix[p]
    row_final = acc_matrix[-1]
    if len(row_p) != p + 1 or len(row_final) != len(acc_matrix):
        raise ValueError("accuracy matrix rows are incomplete")

    def mean(values):
        return float(np.mean(values)) if values else None

    at = PhaseReport(t_p=row_p[p], before=mean(row_p[:p]))
    final = PhaseReport(t_p=row_final[p], before=mean(row_final[:p]),
                        after=mean(row_final[p + 1:]), total=mean(row_final))
    return TableReport(p=p, at_poisoning=at, final=final)


def report_delta(clean: TableReport, poisoned: TableReport) -> TableReport:
    """Poisoned-minus-clean differences, None where a group is undefined."""
    def sub(a, b):
        return None if a is None or b is None else a - b

    def phase(c: PhaseReport, q: PhaseReport) -> PhaseReport:
        return PhaseReport(t_p=sub(q.t_p, c.t_p), before=sub(q.before, c.before),
                           after=sub(q.after, c.after), total=sub(q.total, c.total))

    return TableReport(p=clean.p, at_poisoning=phase(clean.at_poisoning, poisoned.at_poisoning),
                       final=phase(clean.final, poisoned.final))
