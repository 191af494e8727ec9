"""Student and teacher networks: embedding tables feeding a ReLU MLP stack.

Hidden states are exposed at numbered stages. Stage 0 is the concatenated
embedding output, stage k is the output of MLP layer k, and the head maps the
last stage to the prediction. ``tap_in`` (stage 0, the post-embedding state)
is where questions are injected into teachers; ``tap_out`` (the last stage,
the pre-head state) is what the answer machinery reads out.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Batch, CATEGORICAL, DatasetSchema, FEATURE_VIEWS, HASHED_TEXT
from .hashing import derive_seed
from .tensor import Parameter, Tensor


class OutOfVocabError(ValueError):
    """A categorical feature index falls outside the model's vocabulary."""


@dataclass
class ModelSpec:
    role: str  # "student" or "teacher"
    hidden_sizes: list[int]
    feature_view: str = CATEGORICAL
    seed: int = 0
    embed_dim: int = 16
    out_dim: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(role=d["role"], hidden_sizes=[int(h) for h in d["hidden_sizes"]],
                   feature_view=d["feature_view"], seed=int(d["seed"]),
                   embed_dim=int(d["embed_dim"]), out_dim=int(d.get("out_dim", 1)))


# The model-size menu. "text" is the heterogeneous-feature surrogate for a
# big pretrained language teacher: it reads the user id plus the item title
# through hashed token buckets instead of the item id.
MENU_HIDDEN_SIZES = {
    "mlp-s": [128, 64],
    "mlp-m": [512, 256],
    "mlp-l": [1024, 512],
}
MENU_VIEWS = {"mlp-s": CATEGORICAL, "mlp-m": CATEGORICAL, "mlp-l": CATEGORICAL,
              "text": HASHED_TEXT}
MENU = tuple(MENU_VIEWS)


def menu_spec(name: str, role: str = "teacher", seed: int = 0,
              embed_dim: int = 16) -> ModelSpec:
    if name not in MENU_VIEWS:
        raise ValueError(f"unknown model menu entry {name!r}; expected one of {sorted(MENU_VIEWS)}")
    hidden = MENU_HIDDEN_SIZES["mlp-m" if name == "text" else name]
    return ModelSpec(role=role, hidden_sizes=list(hidden), feature_view=MENU_VIEWS[name],
                     seed=seed, embed_dim=embed_dim)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


class MlpStack:
    """Dense stack ``sizes[0] -> ... -> sizes[-1]`` with ReLU between layers.

    No activation after the last layer. With ``identity=True`` (all sizes
    equal) weights start at the identity and biases at zero, so the stack is
    the identity map on non-negative inputs.
    """

    def __init__(self, rng: np.random.Generator | None, sizes: list[int], name: str,
                 identity: bool = False):
        if len(sizes) < 2:
            raise ValueError(f"{name}: need at least input and output sizes, got {sizes}")
        if identity and len(set(sizes)) != 1:
            raise ValueError(f"{name}: identity init needs equal sizes, got {sizes}")
        self.sizes = list(sizes)
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (d_in, d_out) in enumerate(zip(sizes, sizes[1:])):
            if identity:
                w = np.eye(d_in, d_out)
            else:
                w = he_uniform(rng, d_in, (d_in, d_out))
            self.layers.append((
                Parameter(w, f"{name}.layer{i}.W"),
                Parameter(np.zeros(d_out), f"{name}.layer{i}.b"),
            ))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, w.tensor), b.tensor)
            if i != last:
                h = T.relu(h)
        return h

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]


class TapModel:
    """Embedding tables + MLP stack with readable/injectable hidden stages."""

    def __init__(self, spec: ModelSpec, schema: DatasetSchema):
        if spec.feature_view not in FEATURE_VIEWS:
            raise ValueError(
                f"unknown feature view {spec.feature_view!r}; expected one of {FEATURE_VIEWS}")
        self.spec = spec
        self.n_users = schema.n_users
        self.n_items = schema.n_items
        self.n_buckets = schema.n_buckets
        rng = np.random.default_rng(derive_seed(spec.seed, "model-init", spec.role))
        e = spec.embed_dim
        self.user_table = Parameter(rng.normal(0.0, 0.1, size=(schema.n_users, e)), "user_table")
        if spec.feature_view == CATEGORICAL:
            second = Parameter(rng.normal(0.0, 0.1, size=(schema.n_items, e)), "item_table")
        else:
            second = Parameter(rng.normal(0.0, 0.1, size=(schema.n_buckets, e)), "bucket_table")
        self.second_table = second
        self.embedding_tables = [self.user_table, self.second_table]
        self.in_width = 2 * e
        widths = [self.in_width] + list(spec.hidden_sizes)
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
            self.layers.append((
                Parameter(he_uniform(rng, d_in, (d_in, d_out)), f"layer{i}.W"),
                Parameter(np.zeros(d_out), f"layer{i}.b"),
            ))
        self.head = (
            Parameter(he_uniform(rng, widths[-1], (widths[-1], spec.out_dim)), "head.W"),
            Parameter(np.zeros(spec.out_dim), "head.b"),
        )
        self.stage_widths = widths  # stage s has width stage_widths[s]
        self.tap_in = 0
        self.tap_out = len(self.layers)
        self.out_dim = spec.out_dim
        self.forward_calls = 0

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = list(self.embedding_tables)
        for w, b in self.layers:
            params += [w, b]
        params += list(self.head)
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.set_frozen(frozen)

    def stage_width(self, stage: int) -> int:
        return self.stage_widths[stage]

    @property
    def hidden_width(self) -> int:
        """Width of the pre-head hidden state (the tap_out stage)."""
        return self.stage_widths[-1]

    # -- forward passes -----------------------------------------------------

    def _embed(self, batch: Batch) -> Tensor:
        if batch.user_idx.size and int(batch.user_idx.max()) >= self.n_users:
            raise OutOfVocabError(
                f"user id {int(batch.user_idx.max())} out of vocabulary "
                f"(model has {self.n_users} users)")
        u = T.embedding_lookup(self.user_table.tensor, batch.user_idx)
        if self.spec.feature_view == CATEGORICAL:
            if batch.item_idx.size and int(batch.item_idx.max()) >= self.n_items:
                raise OutOfVocabError(
                    f"item id {int(batch.item_idx.max())} out of vocabulary "
                    f"(model has {self.n_items} items)")
            v = T.embedding_lookup(self.second_table.tensor, batch.item_idx)
        else:
            if batch.title_tokens.size and int(batch.title_tokens.max()) >= self.n_buckets:
                raise OutOfVocabError(
                    f"token bucket {int(batch.title_tokens.max())} out of range "
                    f"(model has {self.n_buckets} buckets)")
            v = T.embedding_bag_mean(self.second_table.tensor, batch.title_tokens,
                                     batch.title_offsets)
        return T.concat([u, v], axis=-1)

    def _run_stages(self, h: Tensor, from_stage: int, taps: dict[int, Tensor]):
        for j in range(from_stage, len(self.layers)):
            w, b = self.layers[j]
            h = T.relu(T.add(T.matmul(h, w.tensor), b.tensor))
            taps[j + 1] = h
        w, b = self.head
        pred = T.add(T.matmul(h, w.tensor), b.tensor)
        if self.out_dim == 1:
            pred = T.reshape(pred, pred.shape[:-1])
        return pred, taps

    def forward(self, batch: Batch):
        """Run the network on encoded features.

        Returns (prediction, taps) where taps maps stage index to that stage's
        hidden state; prediction has shape (B,) for scalar heads.
        """
        self.forward_calls += 1
        h0 = self._embed(batch)
        return self._run_stages(h0, 0, {0: h0})

    def forward_with_injection(self, injected: Tensor, stage: int):
        """Run from ``stage`` onward with ``injected`` replacing that stage's state.

        No input features are consumed; gradients flow into ``injected`` and
        into parameters at or after ``stage``, never into earlier ones.
        """
        if not (0 <= stage <= len(self.layers)):
            raise T.ShapeMismatchError(
                f"injection stage {stage} outside 0..{len(self.layers)}")
        want = self.stage_widths[stage]
        if injected.shape[-1] != want:
            raise T.ShapeMismatchError(
                f"injected width {injected.shape[-1]} != stage {stage} width {want}")
        self.forward_calls += 1
        return self._run_stages(injected, stage, {stage: injected})


def build(spec: ModelSpec, schema: DatasetSchema) -> TapModel:
    """Construct and initialize a TapModel; deterministic given spec.seed."""
    return TapModel(spec, schema)


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, then raw float64 arrays


_MAGIC = b"CKDM"
_VERSION = 1


def save_checkpoint(model: TapModel, path: str) -> None:
    params = model.parameters()
    header = {
        "format": "committee-kd-checkpoint",
        "version": _VERSION,
        "spec": model.spec.to_dict(),
        "schema": {"n_users": model.n_users, "n_items": model.n_items,
                   "n_buckets": model.n_buckets},
        "seed": model.spec.seed,
        "names": [p.name for p in params],
        "shapes": [list(p.data.shape) for p in params],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> TapModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        schema = DatasetSchema(n_users=header["schema"]["n_users"],
                               n_items=header["schema"]["n_items"],
                               n_buckets=header["schema"]["n_buckets"])
        model = build(spec, schema)
        params = {p.name: p for p in model.parameters()}
        if list(params) != header["names"]:
            raise ValueError(f"{path}: parameter names do not match rebuilt model")
        for name, shape in zip(header["names"], header["shapes"]):
            want = tuple(shape)
            raw = f.read(8 * int(np.prod(want, dtype=np.int64)) if want else 8)
            arr = np.frombuffer(raw, dtype="<f8").reshape(want)
            if params[name].data.shape != want:
                raise ValueError(f"{path}: shape mismatch for {name}")
            params[name].data[...] = arr
    return model
