"""Interaction corpus loading and leave-one-out trajectory splitting.

An interaction file is read into per-user chronological item sequences with
ids remapped to a contiguous range 1..M (0 is reserved for padding). Each
sufficiently long user yields three non-overlapping k-step trajectory
windows: the chronologically last window is the test target, the one before
it validation, the one before that training. Histories are truncated to the
most recent n_max items and left-padded so trajectory slots always sit at
the rightmost positions.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    ConfigError,
    EmptyCorpusError,
    EmptySplitError,
    ParseError,
    VocabularyError,
)
from .validation import check_positive_int

SPLITS = ("train", "valid", "test")


@dataclass
class InteractionCorpus:
    """Per-user ordered interactions with a contiguous item vocabulary.

    users holds the original user keys in file order; events maps each user
    to its time-sorted (item_id, timestamp) pairs with remapped item ids;
    item_map maps each raw item key to its remapped id.
    """

    users: list = field(default_factory=list)
    events: dict = field(default_factory=dict)
    item_map: dict = field(default_factory=dict)
    n_items: int = 0

    def sequences(self) -> list[list[int]]:
        return [[item for item, _ in self.events[user]] for user in self.users]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_events(self) -> int:
        return sum(len(v) for v in self.events.values())

    def vocab_hash(self) -> str:
        """Stable digest of the vocabulary; checkpoints refuse to load
        against a different one."""
        h = hashlib.sha256()
        h.update(f"n_items={self.n_items}\n".encode())
        for raw, new in sorted(self.item_map.items(), key=lambda kv: kv[1]):
            h.update(f"{raw}\t{new}\n".encode())
        return h.hexdigest()


def load_interactions(
    path,
    fmt: str = "tsv",
    usecols: tuple[int, int, int] = (0, 1, 2),
    delimiter: str | None = None,
    id_map_out=None,
) -> InteractionCorpus:
    """Read (user, item, timestamp) rows into an InteractionCorpus.

    fmt selects the delimiter ("tsv" or "csv"); delimiter overrides it for
    oddball separators. usecols names the (user, item, timestamp) column
    indices for files carrying extra columns. Ties in timestamp keep file
    order. When id_map_out is given the raw-to-remapped item table is
    written there as two-column text.
    """
    if fmt not in ("tsv", "csv"):
        raise ConfigError(f"fmt must be 'tsv' or 'csv', got {fmt!r}")
    sep = delimiter if delimiter is not None else ("\t" if fmt == "tsv" else ",")
    path = Path(path)

    users: list = []
    raw_events: dict = {}
    item_map: dict = {}
    max_col = max(usecols)

    with open(path, newline="", encoding="utf-8") as fh:
        if len(sep) == 1:
            rows = csv.reader(fh, delimiter=sep)
        else:
            rows = (line.rstrip("\r\n").split(sep) for line in fh)
        for line_number, row in enumerate(rows, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) <= max_col:
                raise ParseError(
                    f"expected at least {max_col + 1} fields, got {len(row)}",
                    line_number,
                )
            user = row[usecols[0]].strip()
            item = row[usecols[1]].strip()
            ts_text = row[usecols[2]].strip()
            if not user or not item:
                raise ParseError("empty user or item field", line_number)
            try:
                ts = int(float(ts_text))
            except ValueError:
                raise ParseError(f"bad timestamp {ts_text!r}", line_number) from None
            if item not in item_map:
                item_map[item] = len(item_map) + 1
            if user not in raw_events:
                users.append(user)
                raw_events[user] = []
            raw_events[user].append((item_map[item], ts))

    if not item_map:
        raise EmptyCorpusError(f"no interaction rows in {path}")

    # stable sort per user: timestamp ties keep file order
    events = {user: sorted(evs, key=lambda e: e[1]) for user, evs in raw_events.items()}
    corpus = InteractionCorpus(
        users=users, events=events, item_map=item_map, n_items=len(item_map)
    )
    if id_map_out is not None:
        write_id_map(corpus.item_map, id_map_out)
    return corpus


def corpus_from_sequences(sequences, n_items: int | None = None) -> InteractionCorpus:
    """Wrap already-remapped per-user item sequences as a corpus.

    Ids must lie in [1, n_items]; positions double as timestamps.
    """
    sequences = [list(seq) for seq in sequences]
    observed = max((max(seq) for seq in sequences if seq), default=0)
    if n_items is None:
        n_items = observed
    if observed > n_items:
        raise VocabularyError(f"sequence item id {observed} exceeds n_items={n_items}")
    if any(min(seq, default=1) < 1 for seq in sequences):
        raise VocabularyError("sequence item ids must be >= 1 (0 is padding)")
    users = [f"u{i}" for i in range(len(sequences))]
    events = {
        user: [(item, pos) for pos, item in enumerate(seq)]
        for user, seq in zip(users, sequences)
    }
    item_map = {str(i): i for i in range(1, n_items + 1)}
    return InteractionCorpus(users=users, events=events, item_map=item_map, n_items=n_items)


@dataclass(frozen=True)
class TrajectoryExample:
    """One supervised trajectory window.

    history is left-padded with 0 to a fixed length; target holds exactly k
    future items in chronological order.
    """

    user: str
    history: tuple[int, ...]
    target: tuple[int, ...]
    split: str

    def history_length(self) -> int:
        return sum(1 for i in self.history if i != 0)


def _pad_history(items: list[int], n_max: int) -> tuple[int, ...]:
    recent = items[-n_max:]
    return tuple([0] * (n_max - len(recent)) + recent)


def filter_and_split(corpus: InteractionCorpus, k: int, n_max: int = 50) -> list[TrajectoryExample]:
    """Carve train/valid/test windows out of each sufficiently long user.

    A user needs a raw sequence strictly longer than 1 + 3k so that even the
    earliest window keeps a non-empty history. The length test applies to
    the full raw sequence; truncation to n_max happens afterwards.
    """
    check_positive_int(k, "k")
    check_positive_int(n_max, "n_max")
    threshold = 1 + 3 * k
    examples: list[TrajectoryExample] = []
    for user in corpus.users:
        seq = [item for item, _ in corpus.events[user]]
        if len(seq) <= threshold:
            continue
        windows = {
            "train": (seq[: -3 * k], seq[-3 * k : -2 * k]),
            "valid": (seq[: -2 * k], seq[-2 * k : -k]),
            "test": (seq[:-k], seq[-k:]),
        }
        for split, (history, target) in windows.items():
            examples.append(
                TrajectoryExample(
                    user=str(user),
                    history=_pad_history(history, n_max),
                    target=tuple(target),
                    split=split,
                )
            )
    if not examples:
        raise EmptySplitError(
            f"no user has more than {threshold} interactions (k={k}); "
            "nothing to split"
        )
    return examples


def by_split(examples) -> dict[str, list[TrajectoryExample]]:
    out: dict[str, list[TrajectoryExample]] = {name: [] for name in SPLITS}
    for ex in examples:
        out[ex.split].append(ex)
    return out


@dataclass(frozen=True)
class Batch:
    """Stacked examples ready for the model."""

    history: np.ndarray  # [B, n_max] int64, left-padded with 0
    target: np.ndarray  # [B, k] int64
    history_mask: np.ndarray  # [B, n_max] bool, True at real items
    users: tuple[str, ...]

    def __len__(self) -> int:
        return self.history.shape[0]


def make_batch(examples) -> Batch:
    history = np.array([ex.history for ex in examples], dtype=np.int64)
    target = np.array([ex.target for ex in examples], dtype=np.int64)
    return Batch(
        history=history,
        target=target,
        history_mask=history != 0,
        users=tuple(ex.user for ex in examples),
    )


def batch_iterator(examples, batch_size: int, shuffle: bool = False, seed: int = 0):
    """Yield every example exactly once in fixed-size batches.

    With shuffle=True the order is a permutation drawn from the given seed,
    so identical seeds reproduce identical batch streams.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    examples = list(examples)
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        picked = [examples[i] for i in order[start : start + batch_size]]
        yield make_batch(picked)


# ---------------------------------------------------------------- persistence


def write_id_map(item_map: dict, path) -> None:
    """Two-column text: raw item key, remapped id; sorted by remapped id."""
    with open(path, "w", encoding="utf-8") as fh:
        for raw, new in sorted(item_map.items(), key=lambda kv: kv[1]):
            fh.write(f"{raw}\t{new}\n")


def read_id_map(path) -> dict:
    item_map: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ParseError("id-map rows carry exactly two columns", line_number)
            item_map[parts[0]] = int(parts[1])
    return item_map


def write_split_manifest(examples, path) -> None:
    """Line-delimited JSON records {user, split, history, target}.

    Deterministic for a given example list, so reruns on unchanged input
    produce byte-identical files.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_split_manifest(examples))


def dump_split_manifest(examples) -> str:
    buf = io.StringIO()
    for ex in examples:
        record = {
            "user": ex.user,
            "split": ex.split,
            "history": list(ex.history),
            "target": list(ex.target),
        }
        buf.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
        buf.write("\n")
    return buf.getvalue()


def read_split_manifest(path) -> list[TrajectoryExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            examples.append(
                TrajectoryExample(
                    user=record["user"],
                    history=tuple(record["history"]),
                    target=tuple(record["target"]),
                    split=record["split"],
                )
            )
    return examples
