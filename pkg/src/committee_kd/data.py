"""Rating-prediction datasets: synthetic latent-factor generation, CSV
ingestion, feature encoding for the categorical and hashed-text views, and
deterministic hash-based train/test splits.

The synthetic generator is the desk-scale stand-in for a MovieLens-style
corpus. Ratings follow a latent-factor model (user/item vectors plus biases
plus gaussian noise, clamped to the rating range), and item titles are
synthesized from the item's latent factors so the hashed-text view carries
real signal rather than noise.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .hashing import derive_seed, fnv1a_64

CATEGORICAL = "categorical"
HASHED_TEXT = "hashed-text"
FEATURE_VIEWS = (CATEGORICAL, HASHED_TEXT)

DEFAULT_N_BUCKETS = 4096


@dataclass(frozen=True)
class RatingExample:
    user_id: int
    item_id: int
    item_title: str
    rating: float


@dataclass
class DatasetSchema:
    """Vocabulary sizes and split policy for a rating dataset."""

    n_users: int
    n_items: int
    rating_range: tuple[float, float] = (1.0, 5.0)
    split_seed: int = 0
    n_buckets: int = DEFAULT_N_BUCKETS

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "rating_range": list(self.rating_range),
            "split_seed": self.split_seed,
            "n_buckets": self.n_buckets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(
            n_users=int(d["n_users"]),
            n_items=int(d["n_items"]),
            rating_range=tuple(float(v) for v in d["rating_range"]),
            split_seed=int(d["split_seed"]),
            n_buckets=int(d.get("n_buckets", DEFAULT_N_BUCKETS)),
        )


@dataclass
class Batch:
    """Model-ready arrays for a slice of examples, covering both feature views.

    ``title_tokens`` concatenates the hashed token-bucket indices of every
    example's title; ``title_offsets`` (length B+1) delimits the per-example
    bags.
    """

    user_idx: np.ndarray
    item_idx: np.ndarray
    title_tokens: np.ndarray
    title_offsets: np.ndarray
    ratings: np.ndarray

    def __len__(self) -> int:
        return self.user_idx.shape[0]


def tokenize_title(title: str) -> list[str]:
    return title.split()


def hash_token(token: str, n_buckets: int) -> int:
    return fnv1a_64(token) % n_buckets


def encode(example: RatingExample, view: str, schema: DatasetSchema):
    """Encode one example for a feature view.

    categorical -> (user_idx, item_idx); hashed-text -> (user_idx, tuple of
    token-bucket indices). Raises on ids outside the schema's vocabularies.
    """
    if not (0 <= example.user_id < schema.n_users):
        raise ValueError(
            f"user id {example.user_id} out of vocabulary (n_users={schema.n_users})")
    if view == CATEGORICAL:
        if not (0 <= example.item_id < schema.n_items):
            raise ValueError(
                f"item id {example.item_id} out of vocabulary (n_items={schema.n_items})")
        return example.user_id, example.item_id
    if view == HASHED_TEXT:
        bag = tuple(hash_token(t, schema.n_buckets) for t in tokenize_title(example.item_title))
        return example.user_id, bag
    raise ValueError(f"unknown feature view {view!r}; expected one of {FEATURE_VIEWS}")


class RatingDataset:
    """Immutable rating corpus with precomputed encodings and a stable split.

    The train/test assignment of each example depends only on its index and
    the schema's split seed, so splits are identical across machines and runs.
    """

    def __init__(self, schema: DatasetSchema, examples: list[RatingExample],
                 oracle_predictions: np.ndarray | None = None):
        self.schema = schema
        self.examples = examples
        self.oracle_predictions = oracle_predictions
        n = len(examples)
        self.user_idx = np.array([e.user_id for e in examples], dtype=np.int64)
        self.item_idx = np.array([e.item_id for e in examples], dtype=np.int64)
        self.ratings = np.array([e.rating for e in examples], dtype=np.float64)
        token_lists = [
            [hash_token(t, schema.n_buckets) for t in tokenize_title(e.item_title)]
            for e in examples
        ]
        self.title_offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum([len(ts) for ts in token_lists], out=self.title_offsets[1:])
        self.title_tokens = np.array(
            [tok for ts in token_lists for tok in ts], dtype=np.int64)
        in_train = np.array(
            [fnv1a_64(f"{schema.split_seed}:{i}") % 100 < 80 for i in range(n)], dtype=bool)
        self.train_indices = np.nonzero(in_train)[0]
        self.test_indices = np.nonzero(~in_train)[0]

    def __len__(self) -> int:
        return len(self.examples)

    def batch(self, indices: np.ndarray) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        starts = self.title_offsets[indices]
        ends = self.title_offsets[indices + 1]
        counts = ends - starts
        offsets = np.zeros(indices.size + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        tokens = np.concatenate(
            [self.title_tokens[s:e] for s, e in zip(starts, ends)]
        ) if indices.size else np.zeros(0, dtype=np.int64)
        return Batch(
            user_idx=self.user_idx[indices],
            item_idx=self.item_idx[indices],
            title_tokens=np.asarray(tokens, dtype=np.int64),
            title_offsets=offsets,
            ratings=self.ratings[indices],
        )

    def train_batches(self, batch_size: int, seed: int):
        """Endless stream of shuffled train batches; order depends only on seed."""
        rng = np.random.default_rng(derive_seed(seed, "batches"))
        while True:
            perm = rng.permutation(self.train_indices)
            for start in range(0, perm.size - batch_size + 1, batch_size):
                yield self.batch(perm[start:start + batch_size])


def _title_for_item(v_vec: np.ndarray, v_bias: float, factor_scale: float) -> str:
    """Synthesize a title whose tokens encode the item's latent profile.

    Each factor contributes one token carrying its sign and a coarse magnitude
    level; the item bias contributes one token. The text view therefore sees a
    quantized version of the item — informative, but deliberately coarser than
    the item id.
    """
    tokens = []
    for k, v in enumerate(v_vec):
        z = abs(v) / factor_scale
        level = 0 if z < 0.5 else (1 if z < 1.25 else 2)
        sign = "p" if v >= 0 else "n"
        tokens.append(f"f{k}{sign}{level}")
    bias_level = int(np.clip(round(v_bias / 0.3), -2, 2)) + 2
    tokens.append(f"b{bias_level}")
    return " ".join(tokens)


def generate_synthetic(n_users: int, n_items: int, latent_dim: int, noise_sd: float,
                       n_ratings: int, seed: int,
                       rating_range: tuple[float, float] = (1.0, 5.0),
                       n_buckets: int = DEFAULT_N_BUCKETS) -> RatingDataset:
    """Latent-factor rating generator.

    rating = clamp(mu + user_bias + item_bias + <u_vec, v_vec> + noise). The
    clean clamped mean is kept per example as an oracle prediction so tests
    can check that the generated signal is actually learnable down to the
    noise floor.
    """
    if min(n_users, n_items, latent_dim, n_ratings) <= 0:
        raise ValueError("n_users, n_items, latent_dim and n_ratings must all be positive")
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))
    lo, hi = rating_range
    mu = (lo + hi) / 2.0
    factor_scale = latent_dim ** -0.25
    u_vecs = rng.normal(0.0, factor_scale, size=(n_users, latent_dim))
    v_vecs = rng.normal(0.0, factor_scale, size=(n_items, latent_dim))
    u_bias = rng.normal(0.0, 0.3, size=n_users)
    v_bias = rng.normal(0.0, 0.3, size=n_items)
    users = rng.integers(0, n_users, size=n_ratings)
    items = rng.integers(0, n_items, size=n_ratings)
    clean = mu + u_bias[users] + v_bias[items] + np.einsum(
        "nd,nd->n", u_vecs[users], v_vecs[items])
    noisy = clean + rng.normal(0.0, noise_sd, size=n_ratings)
    ratings = np.clip(noisy, lo, hi)
    titles = [_title_for_item(v_vecs[j], v_bias[j], factor_scale) for j in range(n_items)]
    examples = [
        RatingExample(int(u), int(it), titles[it], float(r))
        for u, it, r in zip(users, items, ratings)
    ]
    schema = DatasetSchema(n_users=n_users, n_items=n_items, rating_range=(float(lo), float(hi)),
                           split_seed=seed, n_buckets=n_buckets)
    return RatingDataset(schema, examples, oracle_predictions=np.clip(clean, lo, hi))


_CSV_HEADER = ["user_id", "item_id", "rating", "title"]


def save_csv(dataset: RatingDataset, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_HEADER)
        for e in dataset.examples:
            writer.writerow([e.user_id, e.item_id, repr(e.rating), e.item_title])


def load_csv(path: str, split_seed: int = 0,
             n_buckets: int = DEFAULT_N_BUCKETS) -> RatingDataset:
    """Read `user_id,item_id,rating[,title]` rows into a dataset.

    User/item ids may be arbitrary strings; they are re-indexed to contiguous
    integers in order of first appearance. Any malformed row aborts the load
    with an error naming its line number.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"rating file not found: {path}")
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    examples: list[RatingExample] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1 and [c.strip() for c in row[:3]] == _CSV_HEADER[:3]:
                continue
            if len(row) < 3:
                raise ValueError(f"{path}: line {line_no}: expected user_id,item_id,rating[,title],"
                                 f" got {len(row)} fields")
            try:
                rating = float(row[2])
            except ValueError:
                raise ValueError(
                    f"{path}: line {line_no}: rating {row[2]!r} is not a number") from None
            uid = users.setdefault(row[0].strip(), len(users))
            iid = items.setdefault(row[1].strip(), len(items))
            title = row[3] if len(row) > 3 else ""
            examples.append(RatingExample(uid, iid, title, rating))
    if examples:
        ratings = [e.rating for e in examples]
        rating_range = (min(ratings), max(ratings))
    else:
        rating_range = (0.0, 0.0)
    schema = DatasetSchema(n_users=len(users), n_items=len(items),
                           rating_range=rating_range, split_seed=split_seed,
                           n_buckets=n_buckets)
    return RatingDataset(schema, examples)
