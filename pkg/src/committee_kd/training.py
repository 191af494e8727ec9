"""Training loops: teacher pretraining, the two-phase committee distillation
schedule, the task regularizer, baselines (LD/FD/MT), and evaluation.

Each batch of a committee run is processed in two phases. First
``regularizer_step`` updates only the augmenters: questions are injected into
every teacher, answers are injected into the student's head, and both
resulting predictions are scored against the true labels while the student
and teachers are frozen. Then ``distill_step`` updates only the student, on
the task loss plus the alpha-weighted, importance-weighted divergence between
answers and the student's pre-head state. With alpha = 0 the run degenerates
to plain supervised training, bitwise identical to ``train_teacher`` under
the same seed.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .committee import (AnswerAugmenter, QuestionAugmenter, distill_loss,
                        generate_answers, generate_questions, relative_importance,
                        select_teachers, teacher_importance)
from .data import RatingDataset
from .hashing import derive_seed
from .models import MlpStack, ModelSpec, TapModel, build
from .optim import SGD, Adam, zero_grads
from .tensor import Parameter, Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries diagnostics and the
    last parameter snapshot that was still finite."""

    def __init__(self, message: str, diagnostics: dict, snapshot: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.snapshot = snapshot


@dataclass
class TrainParams:
    """Budget and optimizer settings shared by all run kinds."""

    epochs: int = 3
    steps_per_epoch: int = 150
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"


@dataclass
class TeacherHandle:
    """A pretrained teacher plus its injection/readout stages."""

    model: TapModel
    tap_in: int | None = None
    tap_out: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.tap_in is None:
            self.tap_in = self.model.tap_in
        if self.tap_out is None:
            self.tap_out = self.model.tap_out

    def parameters(self) -> list[Parameter]:
        return self.model.parameters()


@dataclass
class CommitteeConfig:
    """Everything a committee distillation run needs.

    ``augmenter_lr`` lets the regularizer phase run at its own learning rate;
    left as None, both phases share ``train.lr``.
    """

    student: ModelSpec
    teachers: list[TeacherHandle]
    alpha: float = 1.0
    threshold: float | None = None
    train: TrainParams = field(default_factory=TrainParams)
    d_emb: int = 16
    d_m: int = 32
    seed: int = 0
    augmenter_lr: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if not self.teachers:
            raise ValueError("committee must contain at least one teacher")
        if self.threshold is not None and not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie strictly in (0, 1), got {self.threshold}")
        if self.augmenter_lr is not None and self.augmenter_lr <= 0:
            raise ValueError(f"augmenter_lr must be positive, got {self.augmenter_lr}")


@dataclass
class Augmenters:
    question: QuestionAugmenter
    answer: AnswerAugmenter

    def parameters(self) -> list[Parameter]:
        return self.question.parameters() + self.answer.parameters()


def build_augmenters(student: TapModel, teachers: list[TeacherHandle],
                     d_emb: int = 16, d_m: int = 32, seed: int = 0,
                     identity_answers: bool = False) -> Augmenters:
    injection_widths = [t.model.stage_width(t.tap_in) for t in teachers]
    tap_widths = [t.model.stage_width(t.tap_out) for t in teachers]
    d_student = student.hidden_width
    return Augmenters(
        question=QuestionAugmenter(d_student, injection_widths, d_emb=d_emb, d_m=d_m, seed=seed),
        answer=AnswerAugmenter(d_student, tap_widths, seed=seed, identity=identity_answers),
    )


RunState = dict  # accounting dict: invoked / skipped / distill_steps


@dataclass
class RunReport:
    """Everything a run leaves behind.

    ``wall_clock_s`` is kept in memory but nulled in the JSON artifact so
    re-runs stay byte-identical; real timings go to a plain-text sidecar.
    """

    method: str
    seed: int
    alpha: float
    threshold: float | None
    n_teachers: int
    epoch_metrics: list[dict]
    final_metric: float
    teacher_passes: dict
    distill_steps: int
    importance_trace: list[list[float]]
    wall_clock_s: float | None = None
    extra: dict = field(default_factory=dict)
    student: TapModel | None = field(default=None, repr=False, compare=False)
    augmenters: "Augmenters | None" = field(default=None, repr=False, compare=False)

    SCHEMA_VERSION = 1

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "alpha": self.alpha,
            "threshold": self.threshold,
            "n_teachers": self.n_teachers,
            "epoch_metrics": self.epoch_metrics,
            "final_metric": self.final_metric,
            "teacher_passes": self.teacher_passes,
            "distill_steps": self.distill_steps,
            "importance_trace": self.importance_trace,
            "wall_clock_s": None,
            "extra": self.extra,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "RunReport":
        with open(path) as f:
            d = json.load(f)
        if d.get("schema_version") != cls.SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported report schema {d.get('schema_version')}")
        return cls(method=d["method"], seed=d["seed"], alpha=d["alpha"],
                   threshold=d["threshold"], n_teachers=d["n_teachers"],
                   epoch_metrics=d["epoch_metrics"], final_metric=d["final_metric"],
                   teacher_passes=d["teacher_passes"], distill_steps=d["distill_steps"],
                   importance_trace=d["importance_trace"], wall_clock_s=d["wall_clock_s"],
                   extra=d.get("extra", {}))


def write_epoch_csv(report: RunReport, path: str) -> None:
    """Per-epoch metrics as `epoch,split,metric` rows."""
    lines = ["epoch,split,metric"]
    for m in report.epoch_metrics:
        lines.append(f"{m['epoch']},train,{m['train']!r}")
        lines.append(f"{m['epoch']},eval,{m['eval']!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# parameter bookkeeping


def param_checksum(params: list[Parameter]) -> str:
    """Digest of all parameter values; equal iff no value changed."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def snapshot_params(params: list[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def restore_params(params: list[Parameter], snapshot: dict[str, np.ndarray]) -> None:
    for p in params:
        p.data[...] = snapshot[p.name]


@contextlib.contextmanager
def frozen_params(params: list[Parameter]):
    """Freeze parameters for the block, restoring their previous flags after."""
    previous = [p.frozen for p in params]
    for p in params:
        p.set_frozen(True)
    try:
        yield
    finally:
        for p, was in zip(params, previous):
            p.set_frozen(was)


def _assert_frozen_grads_zero(params: list[Parameter]) -> None:
    for p in params:
        if p.tensor.grad is not None and np.any(p.tensor.grad):
            raise AssertionError(f"frozen parameter {p.name} accumulated a nonzero gradient")


def make_optimizer(train: TrainParams, params: list[Parameter]):
    if train.optimizer == "adam":
        return Adam(params, lr=train.lr)
    if train.optimizer == "sgd":
        return SGD(params, lr=train.lr)
    raise ValueError(f"unknown optimizer {train.optimizer!r}; expected adam or sgd")


def _mean_losses(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses)) if len(losses) > 1 else total


# ---------------------------------------------------------------------------
# single steps


def _supervised_step(model: TapModel, batch, opt) -> float:
    with T.new_tape():
        pred, _ = model.forward(batch)
        loss = T.mse_loss(pred, Tensor(batch.ratings))
        zero_grads(model.parameters())
        T.backward(loss)
        opt.step()
    return loss.item()


def distill_step(student: TapModel, config: CommitteeConfig, augmenters: Augmenters,
                 batch, *, student_opt, accounting: RunState | None = None):
    """One optimizer step on the student: task loss + alpha * distillation loss.

    Teacher and augmenter parameters are frozen for the step. Importance
    scores are computed out-of-graph and enter the loss as fixed per-example
    weights: the distillation gradient reaches the student through its own
    state and through the question chain. (If the scores stayed in-graph the
    student could zero the distillation term by deflating every weight
    instead of learning from the answers -- scores collapse to ~1e-3 within
    an epoch and the committee goes silent.) Returns the (task, distill)
    loss values; the distill value is 0.0 when alpha is 0.
    """
    teachers = config.teachers
    other = [p for t in teachers for p in t.parameters()] + augmenters.parameters()
    with frozen_params(other), T.new_tape():
        zero_grads(student.parameters())
        zero_grads(other)
        pred, taps = student.forward(batch)
        h = taps[student.tap_out]
        y = Tensor(batch.ratings)
        task = T.mse_loss(pred, y)
        dist_value = 0.0
        if config.alpha > 0:
            with T.no_tape():
                w = teacher_importance(augmenters.question, h)
            if config.threshold is not None:
                selected = sorted(select_teachers(w, config.threshold))
            else:
                selected = list(range(len(teachers)))
            questions = generate_questions(augmenters.question, h, indices=selected)
            states = []
            for i, q in zip(selected, questions):
                t = teachers[i]
                _, t_taps = t.model.forward_with_injection(q, t.tap_in)
                states.append(t_taps[t.tap_out])
            answers = generate_answers(augmenters.answer, states, indices=selected)
            dist = distill_loss(answers, h, w.subset(selected))
            total = T.add(task, T.scale(dist, config.alpha))
            dist_value = dist.item()
            if accounting is not None:
                accounting["invoked"] += len(selected)
                accounting["skipped"] += len(teachers) - len(selected)
                accounting["distill_steps"] += 1
        else:
            total = task
        T.backward(total)
        _assert_frozen_grads_zero(other)
        student_opt.step()
    return task.item(), dist_value


def regularizer_losses(student: TapModel, teachers: list[TeacherHandle],
                       augmenters: Augmenters, batch):
    """Build the two augmenter-training losses on the current tape.

    ``loss_q`` scores each teacher's prediction from its injected question
    against the labels (plain mean over teachers: every question must work on
    its own).  ``loss_a`` scores the student's prediction from each injected
    answer, weighted per example by the committee's *relative* importance.
    Keeping the weights in-graph is what trains the importance projection: a
    teacher whose answers predict the labels well earns a larger share.  The
    weights are normalized across teachers, so uniformly shrinking every raw
    score -- the one move that would let the loss be gamed without ranking
    teachers -- changes nothing.

    Shared by :func:`regularizer_step` and the finite-difference probes so
    both always see the same objective.
    """
    _, taps = student.forward(batch)
    x = taps[student.tap_out]
    y = Tensor(batch.ratings)
    questions = generate_questions(augmenters.question, x)
    question_losses = []
    states = []
    for t, q in zip(teachers, questions):
        t_pred, t_taps = t.model.forward_with_injection(q, t.tap_in)
        states.append(t_taps[t.tap_out])
        question_losses.append(T.mse_loss(t_pred, y))
    answers = generate_answers(augmenters.answer, states)
    weights = relative_importance(teacher_importance(augmenters.question, x))
    weighted = None
    for a_i, w_i in zip(answers, weights):
        s_pred, _ = student.forward_with_injection(a_i, student.tap_out)
        err = T.sub(s_pred, y)
        term = T.mul(w_i, T.mul(err, err))
        weighted = term if weighted is None else T.add(weighted, term)
    return _mean_losses(question_losses), T.mean_all(weighted)


def regularizer_step(student: TapModel, config: CommitteeConfig, augmenters: Augmenters,
                     batch, *, augmenter_opt):
    """One optimizer step on the augmenters alone.

    Teacher predictions from injected questions and student predictions from
    injected answers are both scored against the true labels (the latter
    weighted by relative importance; see :func:`regularizer_losses`); the
    student and every teacher are frozen and their gradients are verified to
    be exactly zero before the update.
    """
    main = student.parameters() + [p for t in config.teachers for p in t.parameters()]
    with frozen_params(main), T.new_tape():
        zero_grads(main)
        zero_grads(augmenters.parameters())
        loss_q, loss_a = regularizer_losses(student, config.teachers, augmenters, batch)
        T.backward(T.add(loss_q, loss_a))
        _assert_frozen_grads_zero(main)
        augmenter_opt.step()
    return loss_q.item(), loss_a.item()


# ---------------------------------------------------------------------------
# full runs


def evaluate(model: TapModel, data: RatingDataset, split: str = "test",
             chunk_size: int = 1024) -> float:
    """Mean squared error over a split; deterministic chunked pass."""
    indices = data.test_indices if split == "test" else data.train_indices
    if indices.size == 0:
        raise ValueError(f"split {split!r} is empty")
    total = 0.0
    with T.no_tape():
        for start in range(0, indices.size, chunk_size):
            batch = data.batch(indices[start:start + chunk_size])
            pred, _ = model.forward(batch)
            diff = pred.data - batch.ratings
            total += float(np.dot(diff, diff))
    return total / indices.size


def _check_finite(values: dict, epoch: int, step: int, snapshot) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise DivergenceError(
            f"non-finite loss at epoch {epoch} step {step}: {bad}",
            diagnostics={"epoch": epoch, "step": step, "losses": values},
            snapshot=snapshot,
        )


def train_teacher(spec: ModelSpec, data: RatingDataset, train: TrainParams,
                  seed: int = 0) -> TapModel:
    """Plain supervised training of a model from scratch."""
    model = build(spec, data.schema)
    opt = make_optimizer(train, model.parameters())
    stream = data.train_batches(train.batch_size, seed)
    snapshot = snapshot_params(model.parameters())
    for epoch in range(train.epochs):
        for step in range(train.steps_per_epoch):
            loss = _supervised_step(model, next(stream), opt)
            _check_finite({"task": loss}, epoch, step, snapshot)
        snapshot = snapshot_params(model.parameters())
    return model


def _importance_probe(student: TapModel, augmenters: Augmenters, probe_batch) -> list[float]:
    with T.no_tape():
        _, taps = student.forward(probe_batch)
        w = teacher_importance(augmenters.question, taps[student.tap_out])
    return [float(v) for v in w.batch_mean()]


def run_distillation(config: CommitteeConfig, data: RatingDataset) -> RunReport:
    """Full committee run: per batch, regularizer phase then distillation phase.

    With alpha = 0 both phases collapse to plain supervised steps and the
    committee is never consulted. The returned report carries the trained
    student on its (non-serialized) ``student`` field.
    """
    started = time.perf_counter()
    student = build(config.student, data.schema)
    student_opt = make_optimizer(config.train, student.parameters())
    active = config.alpha > 0
    augmenters = None
    augmenter_opt = None
    if active:
        augmenters = build_augmenters(student, config.teachers, d_emb=config.d_emb,
                                      d_m=config.d_m,
                                      seed=derive_seed(config.seed, "augmenters"))
        aug_train = config.train
        if config.augmenter_lr is not None:
            aug_train = replace(config.train, lr=config.augmenter_lr)
        augmenter_opt = make_optimizer(aug_train, augmenters.parameters())
        for t in config.teachers:
            t.model.set_frozen(True)
    stream = data.train_batches(config.train.batch_size, config.seed)
    probe_batch = data.batch(data.test_indices[:min(256, data.test_indices.size)])
    accounting: RunState = {"invoked": 0, "skipped": 0, "distill_steps": 0}
    epoch_metrics = []
    importance_trace = []
    snapshot = snapshot_params(student.parameters())
    for epoch in range(config.train.epochs):
        task_total = 0.0
        dist_total = 0.0
        for step in range(config.train.steps_per_epoch):
            batch = next(stream)
            if active:
                loss_q, loss_a = regularizer_step(student, config, augmenters, batch,
                                                  augmenter_opt=augmenter_opt)
                task, dist = distill_step(student, config, augmenters, batch,
                                          student_opt=student_opt, accounting=accounting)
                _check_finite({"task": task, "distill": dist,
                               "regularizer_q": loss_q, "regularizer_a": loss_a},
                              epoch, step, snapshot)
            else:
                task = _supervised_step(student, batch, student_opt)
                dist = 0.0
                _check_finite({"task": task}, epoch, step, snapshot)
            task_total += task
            dist_total += dist
        metrics = {
            "epoch": epoch,
            "train": task_total / config.train.steps_per_epoch,
            "eval": evaluate(student, data),
        }
        epoch_metrics.append(metrics)
        if active:
            importance_trace.append(_importance_probe(student, augmenters, probe_batch))
        snapshot = snapshot_params(student.parameters())
    report = RunReport(
        method="qa",
        seed=config.seed,
        alpha=config.alpha,
        threshold=config.threshold,
        n_teachers=len(config.teachers),
        epoch_metrics=epoch_metrics,
        final_metric=epoch_metrics[-1]["eval"],
        teacher_passes={"invoked": accounting["invoked"], "skipped": accounting["skipped"]},
        distill_steps=accounting["distill_steps"],
        importance_trace=importance_trace,
        wall_clock_s=time.perf_counter() - started,
        extra={"mean_train_distill_loss": dist_total / config.train.steps_per_epoch},
        student=student,
        augmenters=augmenters,
    )
    return report


# ---------------------------------------------------------------------------
# baselines


def _soft_label_run(student_spec: ModelSpec, teachers: list[TeacherHandle],
                    data: RatingDataset, train: TrainParams, seed: int,
                    alpha: float, method: str) -> RunReport:
    """Shared LD/MT loop: distill toward the (mean) teacher output."""
    for t in teachers:
        if t.model.out_dim != student_spec.out_dim:
            raise ValueError(
                f"output distillation requires matching output spaces: teacher "
                f"{t.name or '?'} outputs {t.model.out_dim} values, student outputs "
                f"{student_spec.out_dim}")
    started = time.perf_counter()
    student = build(student_spec, data.schema)
    opt = make_optimizer(train, student.parameters())
    stream = data.train_batches(train.batch_size, seed)
    snapshot = snapshot_params(student.parameters())
    epoch_metrics = []
    first_distill = None
    dist_total = 0.0
    for epoch in range(train.epochs):
        task_total = 0.0
        dist_total = 0.0
        for step in range(train.steps_per_epoch):
            batch = next(stream)
            if alpha > 0:
                with T.no_tape():
                    outs = [t.model.forward(batch)[0].data for t in teachers]
                soft = np.mean(np.stack(outs, axis=0), axis=0)
            with T.new_tape():
                pred, _ = student.forward(batch)
                task = T.mse_loss(pred, Tensor(batch.ratings))
                if alpha > 0:
                    dist = T.l2_divergence(pred, Tensor(soft))
                    total = T.add(task, T.scale(dist, alpha))
                    dist_value = dist.item()
                else:
                    total = task
                    dist_value = 0.0
                zero_grads(student.parameters())
                T.backward(total)
                opt.step()
            if first_distill is None:
                first_distill = dist_value
            task_total += task.item()
            dist_total += dist_value
            _check_finite({"task": task.item(), "distill": dist_value}, epoch, step, snapshot)
        epoch_metrics.append({"epoch": epoch, "train": task_total / train.steps_per_epoch,
                              "eval": evaluate(student, data)})
        snapshot = snapshot_params(student.parameters())
    steps = train.epochs * train.steps_per_epoch if alpha > 0 else 0
    return RunReport(
        method=method, seed=seed, alpha=alpha, threshold=None, n_teachers=len(teachers),
        epoch_metrics=epoch_metrics, final_metric=epoch_metrics[-1]["eval"],
        teacher_passes={"invoked": len(teachers) * steps, "skipped": 0},
        distill_steps=steps, importance_trace=[],
        wall_clock_s=time.perf_counter() - started,
        extra={"first_distill_loss": first_distill,
               "mean_train_distill_loss": dist_total / train.steps_per_epoch},
        student=student,
    )


def supervised_run(student_spec: ModelSpec, data: RatingDataset, train: TrainParams,
                   seed: int = 0) -> RunReport:
    """Task-loss-only training; the no-distillation baseline."""
    return _soft_label_run(student_spec, [], data, train, seed, 0.0, method="none")


def baseline_ld(student_spec: ModelSpec, teacher: TeacherHandle, data: RatingDataset,
                train: TrainParams, seed: int = 0, alpha: float = 1.0) -> RunReport:
    """Logit distillation: the single teacher's output is the soft target."""
    return _soft_label_run(student_spec, [teacher], data, train, seed, alpha, method="ld")


def baseline_mt(student_spec: ModelSpec, teachers: list[TeacherHandle], data: RatingDataset,
                train: TrainParams, seed: int = 0, alpha: float = 1.0) -> RunReport:
    """Multi-teacher averaging: soft target is the unweighted mean of outputs."""
    if not teachers:
        raise ValueError("mt needs at least one teacher")
    return _soft_label_run(student_spec, teachers, data, train, seed, alpha, method="mt")


def baseline_fd(student_spec: ModelSpec, teacher: TeacherHandle, data: RatingDataset,
                train: TrainParams, seed: int = 0, alpha: float = 1.0) -> RunReport:
    """Feature distillation: match the projected teacher hidden state.

    The projection (teacher tap width -> student width) is a single linear
    layer trained jointly with the student; with equal widths it starts as
    the identity.
    """
    started = time.perf_counter()
    student = build(student_spec, data.schema)
    teacher_width = teacher.model.stage_width(teacher.tap_out)
    proj = MlpStack(np.random.default_rng(derive_seed(seed, "fd-projection")),
                    [teacher_width, student.hidden_width],
                    "fd.proj", identity=(teacher_width == student.hidden_width))
    params = student.parameters() + proj.parameters()
    opt = make_optimizer(train, params)
    stream = data.train_batches(train.batch_size, seed)
    snapshot = snapshot_params(params)
    epoch_metrics = []
    first_distill = None
    dist_total = 0.0
    for epoch in range(train.epochs):
        task_total = 0.0
        dist_total = 0.0
        for step in range(train.steps_per_epoch):
            batch = next(stream)
            if alpha > 0:
                with T.no_tape():
                    _, t_taps = teacher.model.forward(batch)
                    feat = t_taps[teacher.tap_out].data
            with T.new_tape():
                pred, taps = student.forward(batch)
                task = T.mse_loss(pred, Tensor(batch.ratings))
                if alpha > 0:
                    a = proj(Tensor(feat))
                    dist = T.l2_divergence(a, taps[student.tap_out])
                    total = T.add(task, T.scale(dist, alpha))
                    dist_value = dist.item()
                else:
                    total = task
                    dist_value = 0.0
                zero_grads(params)
                T.backward(total)
                opt.step()
            if first_distill is None:
                first_distill = dist_value
            task_total += task.item()
            dist_total += dist_value
            _check_finite({"task": task.item(), "distill": dist_value}, epoch, step, snapshot)
        epoch_metrics.append({"epoch": epoch, "train": task_total / train.steps_per_epoch,
                              "eval": evaluate(student, data)})
        snapshot = snapshot_params(params)
    steps = train.epochs * train.steps_per_epoch if alpha > 0 else 0
    return RunReport(
        method="fd", seed=seed, alpha=alpha, threshold=None, n_teachers=1,
        epoch_metrics=epoch_metrics, final_metric=epoch_metrics[-1]["eval"],
        teacher_passes={"invoked": steps, "skipped": 0}, distill_steps=steps,
        importance_trace=[], wall_clock_s=time.perf_counter() - started,
        extra={"first_distill_loss": first_distill,
               "mean_train_distill_loss": dist_total / train.steps_per_epoch},
        student=student,
    )
