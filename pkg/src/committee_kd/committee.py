"""The distillation module: question generation, teacher importance, answer
projection, the importance-weighted distillation loss, and threshold-based
teacher selection.

The bilinear core is three trainables — per-teacher embeddings E (n x d_emb),
a question projection W_m (d_student x d_m x d_emb), and an importance
projection W_f (d_student x d_emb). From a student hidden state x:

    M    = contract3(x, W_m)                (d_m x d_emb)
    u_i  = M . E[i]                         per-teacher question seed (d_m)
    q_i  = out_mlp_i(u_i)                   question, teacher i's injection width
    w_i  = sigmoid((x . W_f) . E[i])        importance score in (0, 1)

Answers run the other way: teacher i's pre-head hidden state p_i is projected
to student width by in_mlp_i, and the distillation loss is the importance-
weighted sum of per-teacher divergences between answers and the student's own
pre-head state h.

All of these accept a leading batch dimension on x / p_i; scores and losses
are then per-example.
"""

from __future__ import annotations

import csv
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .hashing import derive_seed
from .models import MlpStack
from .tensor import Parameter, Tensor


class ImportanceVector:
    """Per-teacher importance scores; each strictly inside (0, 1).

    Holds one Tensor per teacher (scalar for a single example, shape (B,) for
    a batch) so each score stays differentiable into W_f and E.
    """

    def __init__(self, scores: Sequence[Tensor]):
        self.scores = list(scores)

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, i: int) -> Tensor:
        return self.scores[i]

    def values(self) -> np.ndarray:
        """Raw scores as an array of shape (n,) or (B, n)."""
        return np.stack([s.data for s in self.scores], axis=-1)

    def batch_mean(self) -> np.ndarray:
        """Length-n array of scores averaged over the batch (if any)."""
        v = self.values()
        return v if v.ndim == 1 else v.mean(axis=0)

    def subset(self, indices: Iterable[int]) -> "ImportanceVector":
        return ImportanceVector([self.scores[i] for i in indices])


class QuestionAugmenter:
    """Generates per-teacher questions and importance scores from student state."""

    def __init__(self, d_student: int, teacher_widths: Sequence[int],
                 d_emb: int = 16, d_m: int = 32, seed: int = 0):
        self.n = len(teacher_widths)
        self.d_student = d_student
        self.d_emb = d_emb
        self.d_m = d_m
        rng = np.random.default_rng(derive_seed(seed, "question-augmenter"))
        self.E = Parameter(rng.normal(0.0, 1.0, size=(self.n, d_emb)), "qa.E")
        self.W_m = Parameter(
            rng.normal(0.0, d_student ** -0.5, size=(d_student, d_m, d_emb)), "qa.W_m")
        self.W_f = Parameter(
            rng.normal(0.0, d_student ** -0.5, size=(d_student, d_emb)), "qa.W_f")
        self.out_mlps = [
            MlpStack(rng, [d_m, d_m, w], f"qa.out_mlp{i}")
            for i, w in enumerate(teacher_widths)
        ]

    def parameters(self) -> list[Parameter]:
        params = [self.E, self.W_m, self.W_f]
        for mlp in self.out_mlps:
            params += mlp.parameters()
        return params

    def _check_x(self, x: Tensor) -> None:
        if x.shape[-1] != self.d_student:
            raise T.ShapeMismatchError(
                f"student state width {x.shape[-1]} != expected {self.d_student}")


class AnswerAugmenter:
    """Projects each teacher's pre-head hidden state to student width."""

    def __init__(self, d_student: int, teacher_tap_widths: Sequence[int],
                 seed: int = 0, identity: bool = False):
        self.n = len(teacher_tap_widths)
        self.d_student = d_student
        self.tap_widths = list(teacher_tap_widths)
        rng = np.random.default_rng(derive_seed(seed, "answer-augmenter"))
        self.in_mlps = [
            MlpStack(rng, [w, d_student, d_student], f"aa.in_mlp{i}", identity=identity)
            for i, w in enumerate(teacher_tap_widths)
        ]

    def parameters(self) -> list[Parameter]:
        return [p for mlp in self.in_mlps for p in mlp.parameters()]


def generate_questions(qa: QuestionAugmenter, x: Tensor,
                       indices: Sequence[int] | None = None) -> list[Tensor]:
    """One question per teacher, each at that teacher's injection width.

    ``indices`` restricts generation to a subset of teachers (selection); the
    returned list is aligned with it.
    """
    qa._check_x(x)
    m = T.contract3(x, qa.W_m.tensor)
    questions = []
    for i in (range(qa.n) if indices is None else indices):
        e_i = T.embedding_lookup(qa.E.tensor, i)
        u_i = T.contract_last(m, e_i)
        questions.append(qa.out_mlps[i](u_i))
    return questions


def teacher_importance(qa: QuestionAugmenter, x: Tensor) -> ImportanceVector:
    """Sigmoid-bounded per-teacher scores conditioned on the student state."""
    qa._check_x(x)
    f = T.matmul(x, qa.W_f.tensor)
    scores = []
    for i in range(qa.n):
        e_i = T.embedding_lookup(qa.E.tensor, i)
        scores.append(T.sigmoid(T.contract_last(f, e_i)))
    return ImportanceVector(scores)


def generate_answers(aa: AnswerAugmenter, p: Sequence[Tensor],
                     indices: Sequence[int] | None = None) -> list[Tensor]:
    """Project teacher hidden states p_i to student-width answers a_i.

    With ``indices``, ``p`` holds only the states of those teachers, in order.
    """
    idx = list(range(aa.n)) if indices is None else list(indices)
    if len(p) != len(idx):
        raise T.ShapeMismatchError(f"expected {len(idx)} teacher states, got {len(p)}")
    answers = []
    for i, p_i in zip(idx, p):
        if p_i.shape[-1] != aa.tap_widths[i]:
            raise T.ShapeMismatchError(
                f"teacher {i}: hidden width {p_i.shape[-1]} != expected {aa.tap_widths[i]}")
        answers.append(aa.in_mlps[i](p_i))
    return answers


def distill_loss(a: Sequence[Tensor], h: Tensor, w: ImportanceVector | Sequence[Tensor]) -> Tensor:
    """Importance-weighted divergence between answers and the student state.

    sum_i w_i * L(a_i, h) with L the per-example mean squared difference;
    with batched inputs the result is additionally averaged over the batch.
    Linear in w by construction.
    """
    scores = w.scores if isinstance(w, ImportanceVector) else list(w)
    if len(a) != len(scores):
        raise T.ShapeMismatchError(f"{len(a)} answers but {len(scores)} importance scores")
    if not a:
        raise T.ShapeMismatchError("distill_loss needs at least one answer")
    total = None
    for a_i, w_i in zip(a, scores):
        if a_i.shape != h.shape:
            raise T.ShapeMismatchError(
                f"answer shape {a_i.shape} != student state shape {h.shape}")
        d = T.sub(a_i, h)
        per_example = T.mean_last(T.mul(d, d))
        term = T.mul(w_i, per_example)
        total = term if total is None else T.add(total, term)
    return T.mean_all(total)


def relative_importance(w: ImportanceVector) -> list[Tensor]:
    """Scores rescaled to sum to one across teachers, per example.

    Dividing by the (strictly positive) total makes the weights invariant to
    uniformly inflating or deflating every raw score, so an objective built on
    them can only be improved by changing the *ranking* of teachers.  A
    single-teacher committee always gets weight exactly 1.
    """
    total = w.scores[0]
    for s in w.scores[1:]:
        total = T.add(total, s)
    return [T.div(s, total) for s in w.scores]


def select_teachers(w: ImportanceVector | np.ndarray, threshold: float) -> set[int]:
    """Indices of teachers whose (batch-averaged) score clears the threshold.

    An empty selection falls back to the single highest-scoring teacher,
    lowest index on ties, so the student always receives at least one answer.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie strictly in (0, 1), got {threshold}")
    scores = w.batch_mean() if isinstance(w, ImportanceVector) else np.asarray(w, dtype=np.float64)
    if scores.ndim != 1:
        raise T.ShapeMismatchError(f"selection needs a length-n score vector, got {scores.shape}")
    selected = {int(i) for i in np.nonzero(scores >= threshold)[0]}
    if not selected:
        selected = {int(np.argmax(scores))}
    return selected


def write_importance_csv(path: str, example_ids: Sequence[int], scores: np.ndarray) -> None:
    """Dump per-example scores as `example_id,teacher_0,...,teacher_{n-1}`."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(example_ids) != scores.shape[0]:
        raise ValueError(f"need one score row per example id, got {scores.shape}")
    n = scores.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["example_id"] + [f"teacher_{i}" for i in range(n)])
        for ex_id, row in zip(example_ids, scores):
            writer.writerow([ex_id] + [repr(float(v)) for v in row])
