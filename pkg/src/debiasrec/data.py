"""Interaction data: parsing, splitting, binarization and on-disk bundles.

Every split is held column-wise (numpy arrays of users, items, labels and
optional list positions).  Iterating a split yields :class:`Interaction`
tuples, so small code paths and tests can treat it as a plain list.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import BoundsError, DomainError, ParseError

SCHEMA_VERSION = 1
FEEDBACK_KINDS = ("explicit", "implicit", "list")
SPLITS = ("train", "uniform", "validation", "test")


class Interaction(NamedTuple):
    user: int
    item: int
    label: int
    position: int | None = None


@dataclass(frozen=True, eq=False)
class Interactions:
    """A column-wise collection of interactions.

    ``positions`` is ``None`` for data without list positions; otherwise it
    holds 1-based display ranks aligned with the other columns.
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "users", np.asarray(self.users, dtype=np.int64))
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        n = len(self.users)
        if len(self.items) != n or len(self.labels) != n:
            raise ValueError("column lengths differ")
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=np.int64)
            if len(pos) != n:
                raise ValueError("column lengths differ")
            if n and pos.min() < 1:
                raise DomainError("positions are 1-based")
            object.__setattr__(self, "positions", pos)
        for col in (self.users, self.items, self.labels, self.positions):
            if col is not None:
                col.setflags(write=False)

    @classmethod
    def empty(cls, with_positions=False):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z if with_positions else None)

    @classmethod
    def from_records(cls, records: Iterable[Sequence[int]]):
        """Build from ``(user, item, label[, position])`` tuples."""
        rows = [tuple(r) for r in records]
        if not rows:
            return cls.empty()
        has_pos = len(rows[0]) > 3 and rows[0][3] is not None
        users = [r[0] for r in rows]
        items = [r[1] for r in rows]
        labels = [r[2] for r in rows]
        positions = [r[3] for r in rows] if has_pos else None
        return cls(users, items, labels, positions)

    @classmethod
    def concat(cls, parts: Sequence["Interactions"]):
        parts = list(parts)
        if not parts:
            return cls.empty()
        with_pos = all(p.positions is not None for p in parts)
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.positions for p in parts]) if with_pos else None,
        )

    def __len__(self):
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        pos = self.positions
        for k in range(len(self)):
            yield Interaction(
                int(self.users[k]),
                int(self.items[k]),
                int(self.labels[k]),
                None if pos is None else int(pos[k]),
            )

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            k = int(idx)
            return Interaction(
                int(self.users[k]),
                int(self.items[k]),
                int(self.labels[k]),
                None if self.positions is None else int(self.positions[k]),
            )
        return Interactions(
            self.users[idx],
            self.items[idx],
            self.labels[idx],
            None if self.positions is None else self.positions[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, Interactions):
            return NotImplemented
        if (self.positions is None) != (other.positions is None):
            return False
        same = (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.labels, other.labels)
        )
        if self.positions is not None:
            same = same and np.array_equal(self.positions, other.positions)
        return same

    __hash__ = None

    def pair_keys(self, n_items: int) -> np.ndarray:
        return self.users * n_items + self.items


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    train: Interactions
    uniform: Interactions
    validation: Interactions
    test: Interactions
    n_users: int
    n_items: int
    feedback_kind: str = "explicit"
    seed: int | None = None
    # raw id of each 0-based index, when the data came from files
    user_ids: np.ndarray | None = field(default=None, repr=False)
    item_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.feedback_kind not in FEEDBACK_KINDS:
            raise DomainError(f"unknown feedback kind {self.feedback_kind!r}")
        for name in SPLITS:
            split = getattr(self, name)
            if len(split) == 0:
                continue
            if split.users.min() < 0 or split.users.max() >= self.n_users:
                raise BoundsError(f"{name}: user index outside [0, {self.n_users})")
            if split.items.min() < 0 or split.items.max() >= self.n_items:
                raise BoundsError(f"{name}: item index outside [0, {self.n_items})")
            if not np.isin(split.labels, (-1, 1)).all():
                raise DomainError(f"{name}: labels must be -1 or +1")
        if self.feedback_kind == "implicit" and (self.train.labels != 1).any():
            raise DomainError("implicit train split may only hold positive labels")

    def observation(self) -> "ObservationIndicator":
        return ObservationIndicator(self.train, self.n_users, self.n_items)

    def with_splits(self, **splits) -> "DatasetBundle":
        return replace(self, **splits)

    def fingerprint(self) -> str:
        """Content hash of the four splits and the shape metadata."""
        h = hashlib.sha256()
        h.update(f"{self.n_users},{self.n_items},{self.feedback_kind}".encode())
        for name in SPLITS:
            split = getattr(self, name)
            h.update(name.encode())
            for col in (split.users, split.items, split.labels, split.positions):
                if col is not None:
                    h.update(np.ascontiguousarray(col).tobytes())
        return h.hexdigest()


class ObservationIndicator:
    """O(u, i) = 1 iff the pair occurs in the training split.

    Also remembers the last observed label and the event count per pair,
    which the meta model and the conformity provider need.
    """

    def __init__(self, train: Interactions, n_users: int, n_items: int):
        self.n_users = n_users
        self.n_items = n_items
        keys = train.pair_keys(n_items)
        # last occurrence wins for the label lookup
        rev = keys[::-1]
        uniq, first_in_rev, counts = np.unique(rev, return_index=True, return_counts=True)
        self._keys = uniq
        self._labels = train.labels[::-1][first_in_rev]
        self._counts = counts

    def __len__(self):
        return len(self._keys)

    def _lookup(self, users, items):
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        idx = np.searchsorted(self._keys, keys)
        idx = np.minimum(idx, max(len(self._keys) - 1, 0))
        hit = (self._keys[idx] == keys) if len(self._keys) else np.zeros(keys.shape, bool)
        return idx, hit

    def __call__(self, users, items) -> np.ndarray:
        """Vectorised indicator; returns an int array of 0/1."""
        _, hit = self._lookup(users, items)
        return hit.astype(np.int64)

    def observed_label(self, users, items) -> np.ndarray:
        """Last observed train label per pair, 0 where the pair is unobserved."""
        idx, hit = self._lookup(users, items)
        if not len(self._keys):
            return np.zeros(np.shape(users), dtype=np.int64)
        return np.where(hit, self._labels[idx], 0)

    def count(self, users, items) -> np.ndarray:
        idx, hit = self._lookup(users, items)
        if not len(self._keys):
            return np.zeros(np.shape(users), dtype=np.int64)
        return np.where(hit, self._counts[idx], 0)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.n_users * self.n_items, dtype=np.int64)
        out[self._keys] = 1
        return out.reshape(self.n_users, self.n_items)


def binarize(rating) -> int:
    """Map a 1..5 star rating to +1 (rating > 3) or -1."""
    if isinstance(rating, bool) or int(rating) != rating or not 1 <= rating <= 5:
        raise DomainError(f"rating {rating!r} outside 1..5")
    return 1 if rating > 3 else -1


def _binarize_array(ratings: np.ndarray) -> np.ndarray:
    return np.where(ratings > 3, 1, -1).astype(np.int64)


def read_triples(path) -> np.ndarray:
    """Parse a ``user item rating`` file into an ``(n, 3)`` int array."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            try:
                u, i, r = (int(p) for p in parts)
            except ValueError:
                raise ParseError(path, lineno, f"non-integer field in {line.strip()!r}") from None
            if not 1 <= r <= 5:
                raise ParseError(path, lineno, f"rating {r} outside 1..5")
            rows.append((u, i, r))
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def _dedupe_last(arr: np.ndarray, n_items: int) -> np.ndarray:
    keys = arr[:, 0] * n_items + arr[:, 1]
    _, first_in_rev = np.unique(keys[::-1], return_index=True)
    keep = np.sort(len(keys) - 1 - first_in_rev)
    return arr[keep]


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DomainError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_uniform = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_uniform)
    return n_uniform, n_val, n - n_uniform - n_val


def split_unbiased(
    data: Interactions, ratios: Sequence[float], seed: int
) -> tuple[Interactions, Interactions, Interactions]:
    """Random partition into uniform / validation / test."""
    n_u, n_v, _ = split_sizes(len(data), ratios)
    perm = np.random.default_rng(seed).permutation(len(data))
    return data[perm[:n_u]], data[perm[n_u : n_u + n_v]], data[perm[n_u + n_v :]]


def load_explicit(
    path_biased,
    path_unbiased,
    split_ratios=(0.05, 0.05, 0.90),
    seed=0,
    n_users=None,
    n_items=None,
    id_base="auto",
) -> DatasetBundle:
    """Load a biased/unbiased rating pair (Yahoo!R3 and Coat layout).

    Raw ids are shifted by ``id_base`` (detected as 1 when every id in both
    files is at least 1) to become 0-based indices.  When ``n_users`` or
    ``n_items`` is given, any shifted id at or above it raises
    :class:`BoundsError`.  The unbiased file is deduplicated (last row wins
    per pair) and then split randomly by ``split_ratios``.
    """
    biased = read_triples(path_biased)
    unbiased = read_triples(path_unbiased)
    both = np.concatenate([biased, unbiased])
    if id_base == "auto":
        id_base = 1 if len(both) and both[:, :2].min() >= 1 else 0
    biased = biased.copy()
    unbiased = unbiased.copy()
    for arr in (biased, unbiased):
        arr[:, :2] -= id_base
    if len(both) and min(biased[:, :2].min(initial=0), unbiased[:, :2].min(initial=0)) < 0:
        raise BoundsError(f"negative id after subtracting id_base={id_base}")

    max_u = int(max(biased[:, 0].max(initial=-1), unbiased[:, 0].max(initial=-1)))
    max_i = int(max(biased[:, 1].max(initial=-1), unbiased[:, 1].max(initial=-1)))
    if n_users is None:
        n_users = max_u + 1
    elif max_u >= n_users:
        raise BoundsError(f"user id {max_u + id_base} exceeds declared n_users={n_users}")
    if n_items is None:
        n_items = max_i + 1
    elif max_i >= n_items:
        raise BoundsError(f"item id {max_i + id_base} exceeds declared n_items={n_items}")

    train = Interactions(biased[:, 0], biased[:, 1], _binarize_array(biased[:, 2]))
    if len(unbiased):
        unbiased = _dedupe_last(unbiased, max(n_items, 1))
    pool = Interactions(unbiased[:, 0], unbiased[:, 1], _binarize_array(unbiased[:, 2]))
    uniform, validation, test = split_unbiased(pool, split_ratios, seed)
    return DatasetBundle(
        train,
        uniform,
        validation,
        test,
        n_users=n_users,
        n_items=n_items,
        feedback_kind="explicit",
        seed=seed,
        user_ids=np.arange(n_users) + id_base,
        item_ids=np.arange(n_items) + id_base,
    )


def to_implicit(bundle: DatasetBundle) -> DatasetBundle:
    """Drop negative training feedback; evaluation splits are untouched."""
    if bundle.feedback_kind != "explicit":
        raise DomainError("to_implicit expects an explicit-feedback bundle")
    train = bundle.train[bundle.train.labels == 1]
    if len(train) == 0:
        warnings.warn("training split has no positive feedback; implicit train is empty", stacklevel=2)
    return replace(bundle, train=train, feedback_kind="implicit")


def matrix_to_triples(src, dst):
    """Convert a dense whitespace rating matrix (0 = missing) to triples.

    Coat ships its data this way; ids in the output are 0-based.
    """
    mat = np.loadtxt(src, dtype=np.int64, ndmin=2)
    users, items = np.nonzero(mat)
    with open(dst, "w") as fh:
        for u, i in zip(users, items):
            fh.write(f"{u} {i} {mat[u, i]}\n")
    return len(users)


# -- on-disk bundles -------------------------------------------------------


def _write_split(path: Path, split: Interactions):
    cols = [split.users, split.items, split.labels]
    if split.positions is not None:
        cols.append(split.positions)
    arr = np.column_stack(cols) if len(split) else np.zeros((0, len(cols)), dtype=np.int64)
    np.savetxt(path, arr, fmt="%d")


def _read_split(path: Path, with_positions: bool) -> Interactions:
    arr = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if arr.size == 0:
        return Interactions.empty(with_positions)
    return Interactions(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3] if with_positions else None)


def write_kv(path, values: dict):
    with open(path, "w") as fh:
        for key, val in values.items():
            fh.write(f"{key} = {val}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(path, lineno, "expected 'key = value'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        _write_split(d / f"{name}.txt", getattr(bundle, name))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "n_users": bundle.n_users,
        "n_items": bundle.n_items,
        "feedback_kind": bundle.feedback_kind,
        "seed": bundle.seed,
        "has_positions": int(bundle.train.positions is not None),
        "fingerprint": bundle.fingerprint(),
    }
    write_kv(d / "meta.txt", meta)
    if bundle.user_ids is not None:
        np.savetxt(d / "user_ids.txt", bundle.user_ids, fmt="%d")
    if bundle.item_ids is not None:
        np.savetxt(d / "item_ids.txt", bundle.item_ids, fmt="%d")
    return d


def load_bundle(directory) -> DatasetBundle:
    d = Path(directory)
    meta = read_kv(d / "meta.txt")
    if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
        raise DomainError(f"unsupported bundle schema {meta.get('schema_version')}")
    has_pos = bool(int(meta.get("has_positions", 0)))
    splits = {}
    for name in SPLITS:
        # only training data carries list positions
        splits[name] = _read_split(d / f"{name}.txt", has_pos and name == "train")
    seed = meta.get("seed", "None")
    user_ids = np.loadtxt(d / "user_ids.txt", dtype=np.int64, ndmin=1) if (d / "user_ids.txt").exists() else None
    item_ids = np.loadtxt(d / "item_ids.txt", dtype=np.int64, ndmin=1) if (d / "item_ids.txt").exists() else None
    return DatasetBundle(
        **splits,
        n_users=int(meta["n_users"]),
        n_items=int(meta["n_items"]),
        feedback_kind=meta["feedback_kind"],
        seed=None if seed == "None" else int(seed),
        user_ids=user_ids,
        item_ids=item_ids,
    )
