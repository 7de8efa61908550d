"""Interaction logs: parsing, filtering, splitting, batching and a labelled synthetic generator."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD = 0
SIGNAL = "signal"
NOISE = "noise"
UNKNOWN = "unknown"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    behavior_type: str | None = None


@dataclass
class InteractionSequence:
    user_id: int
    items: np.ndarray
    timestamps: np.ndarray | None = None
    behavior_types: list[str] | None = None

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Catalog:
    """Contiguous item ids ``1..num_items``; id 0 is reserved for padding."""

    num_items: int
    remap: dict[int, int]
    popularity: np.ndarray  # length num_items + 1, popularity[0] == 0

    @property
    def vocab_size(self) -> int:
        return self.num_items + 1

    @classmethod
    def from_interactions(cls, interactions: Sequence[Interaction]) -> "Catalog":
        raw_ids = sorted({x.item_id for x in interactions})
        remap = {raw: i + 1 for i, raw in enumerate(raw_ids)}
        pop = np.zeros(len(raw_ids) + 1, dtype=np.int64)
        for x in interactions:
            pop[remap[x.item_id]] += 1
        return cls(len(raw_ids), remap, pop)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "loo"  # "loo" | "multistep"
    steps: int = 1
    max_len: int = 50

    def __post_init__(self):
        if self.mode not in ("loo", "multistep"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if self.mode == "multistep" and not 1 <= self.steps <= 5:
            raise DataError(f"multi-step window must be in 1..5, got {self.steps}")


@dataclass
class EvalExample:
    user_id: int
    context: np.ndarray
    targets: np.ndarray
    behaviors: list[str] | None = None


@dataclass
class SplitViews:
    train: list[InteractionSequence]
    validation: list[EvalExample]
    test: list[EvalExample]
    excluded: int = 0


@dataclass
class FilterStats:
    rounds: int = 0
    removed_users: int = 0
    removed_items: int = 0
    removed_interactions: int = 0


@dataclass
class SyntheticSpec:
    num_users: int = 2000
    num_items: int = 500
    num_clusters: int = 10
    cluster_concentration: float = 0.1
    transition_sharpness: float = 0.8
    p_noise: float = 0.3
    min_len: int = 20
    max_len: int = 50
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.num_clusters < 1 or self.num_clusters > self.num_items:
            problems.append(f"num_clusters={self.num_clusters} must be in [1, num_items={self.num_items}]")
        if not 0.0 <= self.p_noise <= 1.0:
            problems.append(f"p_noise={self.p_noise} outside [0, 1]")
        if not 0.0 <= self.transition_sharpness <= 1.0:
            problems.append(f"transition_sharpness={self.transition_sharpness} outside [0, 1]")
        if self.min_len < 3 or self.min_len > self.max_len:
            problems.append(f"length range [{self.min_len}, {self.max_len}] invalid (need 3 <= min <= max)")
        if self.cluster_concentration <= 0:
            problems.append("cluster_concentration must be > 0")
        if self.num_users < 1:
            problems.append("num_users must be >= 1")
        if problems:
            raise DataError("; ".join(problems))


# ---------------------------------------------------------------------------
# ingestion


def load_tsv(path: str | Path) -> list[Interaction]:
    """Parse ``user item timestamp [behavior]`` rows; a non-numeric first row is a header."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows: list[Interaction] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.rstrip("\n").split("\t")
        if lineno == 1 and not cols[0].strip().lstrip("-").isdigit():
            continue
        if len(cols) < 3:
            raise DataError(f"{path}:{lineno}: expected at least 3 columns, got {len(cols)}")
        try:
            user, item, ts = (int(c) for c in cols[:3])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-integer field ({exc})") from exc
        behavior = cols[3].strip() if len(cols) > 3 and cols[3].strip() else None
        rows.append(Interaction(user, item, ts, behavior))
    return rows


def filter_min_count(interactions: Sequence[Interaction], c: int) -> tuple[list[Interaction], FilterStats]:
    """Drop users and items with fewer than ``c`` interactions, repeated to a fixpoint."""
    if c < 1:
        raise DataError(f"min count must be >= 1, got {c}")
    kept = list(interactions)
    stats = FilterStats()
    users0 = {x.user_id for x in kept}
    items0 = {x.item_id for x in kept}
    while True:
        ucount = Counter(x.user_id for x in kept)
        icount = Counter(x.item_id for x in kept)
        nxt = [x for x in kept if ucount[x.user_id] >= c and icount[x.item_id] >= c]
        if len(nxt) == len(kept):
            break
        kept = nxt
        stats.rounds += 1
    stats.removed_users = len(users0) - len({x.user_id for x in kept})
    stats.removed_items = len(items0) - len({x.item_id for x in kept})
    stats.removed_interactions = len(interactions) - len(kept)
    return kept, stats


def build_sequences(interactions: Sequence[Interaction], catalog: Catalog) -> list[InteractionSequence]:
    """Group by user, stable-sort by timestamp, remap item ids."""
    per_user: dict[int, list[Interaction]] = defaultdict(list)
    for x in interactions:
        per_user[x.user_id].append(x)
    out = []
    for user in sorted(per_user):
        rows = sorted(per_user[user], key=lambda x: x.timestamp)
        behaviors = [x.behavior_type for x in rows]
        out.append(InteractionSequence(
            user_id=user,
            items=np.array([catalog.remap[x.item_id] for x in rows], dtype=np.int64),
            timestamps=np.array([x.timestamp for x in rows], dtype=np.int64),
            behavior_types=None if all(b is None for b in behaviors) else behaviors,
        ))
    return out


# ---------------------------------------------------------------------------
# splits


def split(sequences: Sequence[InteractionSequence], spec: SplitSpec) -> SplitViews:
    """Leave-one-out or multi-step views; sequences too short for the mode are excluded."""
    views = SplitViews([], [], [])
    for seq in sequences:
        n = len(seq)
        beh = seq.behavior_types
        if spec.mode == "loo":
            if n < 3:
                views.excluded += 1
                continue
            train_end, val_slice, test_ctx_end, test_slice = n - 2, slice(n - 2, n - 1), n - 1, slice(n - 1, n)
        else:
            i = spec.steps
            if n <= 10:
                views.excluded += 1
                continue
            train_end = n - 10
            val_slice = slice(n - 10, n - 10 + i)
            test_ctx_end = n - 5
            test_slice = slice(n - 5, n - 5 + i)
        views.train.append(InteractionSequence(
            seq.user_id, seq.items[:train_end],
            None if seq.timestamps is None else seq.timestamps[:train_end],
            None if beh is None else beh[:train_end]))
        views.validation.append(EvalExample(seq.user_id, seq.items[:train_end], seq.items[val_slice],
                                            None if beh is None else beh[:train_end]))
        views.test.append(EvalExample(seq.user_id, seq.items[:test_ctx_end], seq.items[test_slice],
                                      None if beh is None else beh[:test_ctx_end]))
    return views


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    items: np.ndarray  # (B, max_len) left-padded with PAD
    lengths: np.ndarray  # real lengths after truncation
    index: np.ndarray  # positions of these sequences in the source list
    negatives: np.ndarray | None
    behaviors: list[list[str] | None] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return self.items != PAD


def pad_left(seqs: Sequence[np.ndarray], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the most recent ``max_len`` items of each sequence and left-pad with PAD."""
    out = np.full((len(seqs), max_len), PAD, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = np.asarray(s)[-max_len:]
        if len(s):
            out[r, max_len - len(s):] = s
        lengths[r] = len(s)
    return out, lengths


def batch_rng(seed: int, epoch: int, batch: int, stream: int) -> np.random.Generator:
    """Counter-style stream keyed by run seed, epoch, batch index and purpose."""
    return np.random.default_rng([seed, epoch, batch, stream])


def sample_negatives(rng: np.random.Generator, num_items: int, num_negatives: int,
                     forbidden: np.ndarray) -> np.ndarray:
    if num_negatives >= num_items:
        raise DataError(f"num_negatives={num_negatives} must be < catalog size {num_items}")
    pool = np.setdiff1d(np.arange(1, num_items + 1), forbidden)
    if len(pool) < num_negatives:
        raise DataError(f"catalog too small: {len(pool)} candidates left after removing batch targets, "
                        f"{num_negatives} negatives requested")
    return np.sort(rng.choice(pool, size=num_negatives, replace=False))


def batch_with_negatives(
    train: Sequence[InteractionSequence],
    batch_size: int,
    num_negatives: int | None,
    seed: int,
    num_items: int,
    max_len: int = 50,
    epoch: int = 0,
    shuffle: bool = True,
    trim: bool = True,
) -> Iterator[Batch]:
    """Yield left-padded batches; each carries one negative set disjoint from its targets.

    With ``trim`` rows are padded to the longest (truncated) sequence of the
    batch instead of ``max_len``.

    ``num_negatives=None`` means full-catalog scoring (no negative set).
    """
    order = np.arange(len(train))
    if shuffle:
        order = batch_rng(seed, epoch, 0, 0).permutation(len(train))
    for b, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        width = min(max_len, max(len(train[i].items) for i in idx)) if trim else max_len
        items, lengths = pad_left([train[i].items for i in idx], max(width, 1))
        negatives = None
        if num_negatives is not None:
            # any item with a real predecessor can be a target, before or after subsampling
            targets = np.unique(items[:, 1:][items[:, :-1] != PAD])
            negatives = sample_negatives(batch_rng(seed, epoch, b, 1), num_items, num_negatives, targets)
        behaviors = [None if train[i].behavior_types is None else train[i].behavior_types[-max_len:]
                     for i in idx]
        yield Batch(items, lengths, idx, negatives, behaviors)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticResult:
    sequences: list[InteractionSequence]
    catalog: Catalog
    noise_fraction: float
    clusters: np.ndarray  # cluster id per item id (index 0 unused, -1)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticResult:
    """Users walk a sharp Markov chain inside preferred clusters; noise items are uniform.

    Items are partitioned into clusters. Each cluster carries a random successor
    map; a signal step follows it with probability ``transition_sharpness`` and
    otherwise redraws a cluster from the user's weights and jumps to a uniform
    member of it. With probability
    ``p_noise`` a step instead emits a uniform catalog item labelled noise,
    leaving the chain state untouched.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    V, C = spec.num_items, spec.num_clusters
    perm = rng.permutation(V) + 1
    members = np.array_split(perm, C)
    cluster_of = np.full(V + 1, -1, dtype=np.int64)
    successor = np.zeros(V + 1, dtype=np.int64)
    for c, mem in enumerate(members):
        cluster_of[mem] = c
        cycle = rng.permutation(mem)
        successor[cycle] = np.roll(cycle, -1)

    sequences = []
    noise_total = 0
    item_total = 0
    for u in range(spec.num_users):
        weights = rng.dirichlet(np.full(C, spec.cluster_concentration))
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        cur_cluster = int(rng.choice(C, p=weights))
        state = int(rng.choice(members[cur_cluster]))
        items = np.empty(n, dtype=np.int64)
        labels = []
        for t in range(n):
            if rng.random() < spec.p_noise:
                items[t] = rng.integers(1, V + 1)
                labels.append(NOISE)
                continue
            if t > 0:
                if rng.random() < spec.transition_sharpness:
                    state = int(successor[state])
                else:
                    cur_cluster = int(rng.choice(C, p=weights))
                    state = int(rng.choice(members[cur_cluster]))
            items[t] = state
            labels.append(SIGNAL)
        noise_total += labels.count(NOISE)
        item_total += n
        sequences.append(InteractionSequence(u, items, np.arange(n, dtype=np.int64), labels))

    pop = np.zeros(V + 1, dtype=np.int64)
    for s in sequences:
        np.add.at(pop, s.items, 1)
    catalog = Catalog(V, {i: i for i in range(1, V + 1)}, pop)
    return SyntheticResult(sequences, catalog, noise_total / max(item_total, 1), cluster_of)


# ---------------------------------------------------------------------------
# persistence


def _write_ragged(path: Path, arrays: Sequence[Sequence[int]]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            arr = np.asarray(arr, dtype="<u4")
            fh.write(struct.pack("<I", len(arr)))
            fh.write(arr.tobytes())


def _read_ragged(path: Path) -> list[np.ndarray]:
    raw = path.read_bytes()
    out, pos = [], 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise DataError(f"{path}: truncated length prefix at byte {pos}")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        end = pos + 4 * n
        if end > len(raw):
            raise DataError(f"{path}: truncated record at byte {pos}")
        out.append(np.frombuffer(raw, dtype="<u4", count=n, offset=pos).astype(np.int64))
        pos = end
    return out


def save_dataset(out_dir: str | Path, sequences: Sequence[InteractionSequence], catalog: Catalog,
                 extra: dict | None = None) -> None:
    """Write ``catalog.json`` plus length-prefixed little-endian uint32 sequence files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labelled = [[UNKNOWN if b is None else b for b in s.behavior_types] if s.behavior_types else None
                for s in sequences]
    vocab = sorted({b for bs in labelled if bs for b in bs})
    manifest = {
        "num_items": catalog.num_items,
        "remap": {str(k): v for k, v in sorted(catalog.remap.items())},
        "popularity": catalog.popularity.tolist(),
        "user_ids": [int(s.user_id) for s in sequences],
        "behavior_vocab": vocab,
    }
    if extra:
        manifest["extra"] = extra
    (out_dir / "catalog.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    _write_ragged(out_dir / "sequences.bin", [s.items for s in sequences])
    if vocab:
        code = {b: i for i, b in enumerate(vocab)}
        _write_ragged(out_dir / "behaviors.bin",
                      [[code[b] for b in bs] if bs else [] for bs in labelled])


def load_dataset(data_dir: str | Path) -> tuple[list[InteractionSequence], Catalog, dict]:
    data_dir = Path(data_dir)
    try:
        manifest = json.loads((data_dir / "catalog.json").read_text())
        items = _read_ragged(data_dir / "sequences.bin")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset from {data_dir}: {exc}") from exc
    vocab = manifest.get("behavior_vocab", [])
    behaviors = _read_ragged(data_dir / "behaviors.bin") if vocab else [None] * len(items)
    users = manifest["user_ids"]
    if len(users) != len(items):
        raise DataError(f"{data_dir}: {len(users)} user ids but {len(items)} sequences")
    seqs = []
    for u, it, bh in zip(users, items, behaviors):
        if it.size and (it.min() < 1 or it.max() > manifest["num_items"]):
            raise DataError(f"{data_dir}: user {u} has item ids outside [1, {manifest['num_items']}]")
        labels = [vocab[c] for c in bh] if bh is not None and len(bh) == len(it) else None
        seqs.append(InteractionSequence(u, it, None, labels))
    catalog = Catalog(manifest["num_items"], {int(k): v for k, v in manifest["remap"].items()},
                      np.array(manifest["popularity"], dtype=np.int64))
    return seqs, catalog, manifest.get("extra", {})


def fingerprint(data_dir: str | Path) -> str:
    """SHA-256 over the dataset files, for run manifests."""
    h = hashlib.sha256()
    for name in ("catalog.json", "sequences.bin", "behaviors.bin"):
        p = Path(data_dir) / name
        if p.exists():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def binomial_halfwidth(p: float, n: int, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(p * (1 - p) / n)

