"""Check-in parsing, filtering, session splitting and vocabulary building."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataFormatError, DataIntegrityError, EmptyDataError

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"SGRD1"
SPLITS = ("train", "valid", "test")
CANONICAL_HEADER = ["user_id", "poi_id", "category_id", "timestamp"]
RAW_TIME_FORMAT = "%a %b %d %H:%M:%S %z %Y"
MAX_MALFORMED_FRACTION = 0.01


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    poi_id: str
    category_id: str
    timestamp: int


@dataclass
class CheckInSequence:
    """One user session.  Ids are raw strings before indexing, ints after."""

    user: object
    pois: tuple
    cats: tuple
    timestamps: tuple
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pois)


@dataclass
class DatasetConfig:
    min_user_checkins: int = 10
    min_poi_users: int = 10
    session_gap_hours: float = 24.0
    min_seq_len: int = 10
    max_seq_len: int = 20
    split_ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError(f"split_ratios must be three values summing to 1, got {self.split_ratios}")
        if min(self.split_ratios) < 0:
            raise ValueError("split_ratios must be non-negative")
        for name in ("min_user_checkins", "min_poi_users", "session_gap_hours", "min_seq_len", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_seq_len > self.max_seq_len:
            raise ValueError("min_seq_len cannot exceed max_seq_len")

    @classmethod
    def foursquare(cls, **overrides) -> "DatasetConfig":
        return cls(**{"session_gap_hours": 72.0, **overrides})

    @classmethod
    def gowalla(cls, **overrides) -> "DatasetConfig":
        return cls(**{"session_gap_hours": 24.0, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


class CheckInList(list):
    """A list of :class:`CheckIn` that remembers how many input lines were rejected."""

    def __init__(self, items: Iterable[CheckIn] = (), malformed: int = 0):
        super().__init__(items)
        self.malformed = malformed


# -- parsing ------------------------------------------------------------------


def parse_raw_time(text: str) -> int:
    """Foursquare UTC time string, e.g. ``Tue Apr 03 18:00:09 +0000 2012``, to epoch seconds."""
    return int(datetime.strptime(text.strip(), RAW_TIME_FORMAT).timestamp())


def _parse_canonical(lines: Sequence[str]):
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CANONICAL_HEADER:
        raise DataFormatError(f"expected CSV header {','.join(CANONICAL_HEADER)}, got {header}")
    for row in reader:
        if not row:
            continue
        try:
            user, poi, cat, ts = (c.strip() for c in row)
            yield CheckIn(user, poi, cat, int(ts)) if user and poi and cat else None
        except ValueError:
            yield None


def _parse_raw(lines: Sequence[str]):
    for line in lines:
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").split("\t")
        try:
            user, venue, cat_id, _cat_name, lat, lon, _tz, when = parts
            float(lat), float(lon)
            yield CheckIn(user, venue, cat_id, parse_raw_time(when)) if user and venue and cat_id else None
        except ValueError:
            yield None


def parse_checkins(path, fmt: str = "canonical") -> CheckInList:
    """Read check-ins from a canonical CSV or a raw Foursquare TSV dump.

    Malformed lines are skipped and counted; more than 1% of them is an error.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read check-in file {path}: {exc}") from exc
    lines = text.splitlines()
    if fmt == "canonical":
        parsed = list(_parse_canonical(lines))
    elif fmt == "raw":
        parsed = list(_parse_raw(lines))
    else:
        raise ValueError(f"unknown check-in format {fmt!r}")

    good = [c for c in parsed if c is not None and c.timestamp > 0]
    bad = len(parsed) - len(good)
    if parsed and bad / len(parsed) > MAX_MALFORMED_FRACTION:
        raise DataFormatError(f"{path}: {bad} of {len(parsed)} lines malformed")
    if bad:
        logger.warning("%s: skipped %d malformed line(s)", path, bad)
    return CheckInList(good, malformed=bad)


def write_canonical(checkins: Iterable[CheckIn], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANONICAL_HEADER)
        for c in checkins:
            w.writerow([c.user_id, c.poi_id, c.category_id, c.timestamp])


# -- filtering and splitting --------------------------------------------------


def filter_dataset(checkins: Sequence[CheckIn], cfg: DatasetConfig) -> list:
    """Drop inactive users and unpopular POIs repeatedly until nothing changes."""
    current = list(checkins)
    while True:
        per_user = defaultdict(int)
        poi_users = defaultdict(set)
        for c in current:
            per_user[c.user_id] += 1
            poi_users[c.poi_id].add(c.user_id)
        kept = [
            c
            for c in current
            if per_user[c.user_id] >= cfg.min_user_checkins and len(poi_users[c.poi_id]) >= cfg.min_poi_users
        ]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        logger.warning("filtering removed every check-in")
    return current


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int, ratios: Sequence[float]) -> tuple:
    """Train/valid/test sizes for ``n`` sequences of one user."""
    n_valid = _round_half_up(ratios[1] * n)
    n_test = _round_half_up(ratios[2] * n)
    while n_valid + n_test > n:
        if n_test >= n_valid and n_test > 0:
            n_test -= 1
        else:
            n_valid -= 1
    return n - n_valid - n_test, n_valid, n_test


def sessionize(checkins: Sequence[CheckIn], gap_seconds: float) -> list:
    """Cut one user's time-sorted check-ins wherever consecutive gap exceeds the window."""
    sessions = []
    cur: list = []
    for c in checkins:
        if cur and c.timestamp - cur[-1].timestamp > gap_seconds:
            sessions.append(cur)
            cur = []
        cur.append(c)
    if cur:
        sessions.append(cur)
    return sessions


def split_sequences(checkins: Sequence[CheckIn], cfg: DatasetConfig) -> list:
    """Session-split every user, enforce length bounds and tag train/valid/test."""
    by_user = defaultdict(list)
    for c in checkins:
        by_user[c.user_id].append(c)

    rng = np.random.default_rng(cfg.seed)
    out = []
    for user in sorted(by_user):
        events = sorted(by_user[user], key=lambda c: c.timestamp)
        seqs = []
        for sess in sessionize(events, cfg.session_gap_hours * 3600.0):
            if len(sess) < cfg.min_seq_len:
                continue
            sess = sess[-cfg.max_seq_len :]
            seqs.append(
                CheckInSequence(
                    user=user,
                    pois=tuple(c.poi_id for c in sess),
                    cats=tuple(c.category_id for c in sess),
                    timestamps=tuple(c.timestamp for c in sess),
                )
            )
        if not seqs:
            continue
        n_train, n_valid, _ = split_counts(len(seqs), cfg.split_ratios)
        order = rng.permutation(len(seqs))
        for rank, i in enumerate(order):
            seqs[i].split = "train" if rank < n_train else ("valid" if rank < n_train + n_valid else "test")
        out.extend(seqs)
    return out


# -- vocabularies -------------------------------------------------------------


@dataclass
class Vocabulary:
    users: list
    pois: list
    cats: list
    poi_cat: list
    relations: list = field(default_factory=list)

    def __post_init__(self):
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.poi_index = {p: i for i, p in enumerate(self.pois)}
        self.cat_index = {c: i for i, c in enumerate(self.cats)}
        self.relations = [tuple(r) for r in self.relations]
        self._rel_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_pois(self) -> int:
        return len(self.pois)

    @property
    def n_cats(self) -> int:
        return len(self.cats)

    @property
    def n_relations(self) -> int:
        """Observed category-pair relations, excluding the UNK slot."""
        return len(self.relations)

    @property
    def unk_relation(self) -> int:
        return len(self.relations)

    def relation_index(self, cat_from: int, cat_to: int) -> int:
        return self._rel_index.get((cat_from, cat_to), self.unk_relation)

    def relation_of_pois(self, poi_from: int, poi_to: int) -> int:
        return self.relation_index(self.poi_cat[poi_from], self.poi_cat[poi_to])

    def to_dict(self) -> dict:
        return {
            "users": list(self.users),
            "pois": list(self.pois),
            "cats": list(self.cats),
            "poi_cat": [int(c) for c in self.poi_cat],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["users"], d["pois"], d["cats"], d["poi_cat"], d["relations"])

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def build_vocabs(sequences: Sequence[CheckInSequence]) -> tuple:
    """Index raw sequences.  Returns ``(vocab, indexed_sequences)``.

    Users without a training sequence are dropped along with their sequences.
    """
    if not sequences:
        raise EmptyDataError("no sequences to build a vocabulary from")
    poi_cats = defaultdict(set)
    for s in sequences:
        for p, c in zip(s.pois, s.cats):
            poi_cats[p].add(c)
    offenders = sorted(p for p, cs in poi_cats.items() if len(cs) > 1)
    if offenders:
        detail = ", ".join(f"{p}: {sorted(poi_cats[p])}" for p in offenders[:20])
        raise DataIntegrityError(f"POIs with more than one category: {detail}")

    train_users = {s.user for s in sequences if s.split == "train"}
    kept = [s for s in sequences if s.user in train_users]
    if not kept:
        raise EmptyDataError("no user has a training sequence")

    users = sorted(train_users)
    pois = sorted({p for s in kept for p in s.pois})
    cats = sorted({c for s in kept for c in s.cats})
    cat_index = {c: i for i, c in enumerate(cats)}
    poi_cat = [cat_index[next(iter(poi_cats[p]))] for p in pois]

    pairs = set()
    for s in kept:
        if s.split != "train":
            continue
        for a, b in zip(s.cats[:-1], s.cats[1:]):
            pairs.add((cat_index[a], cat_index[b]))
    vocab = Vocabulary(users, pois, cats, poi_cat, sorted(pairs))

    indexed = [
        CheckInSequence(
            user=vocab.user_index[s.user],
            pois=tuple(vocab.poi_index[p] for p in s.pois),
            cats=tuple(vocab.cat_index[c] for c in s.cats),
            timestamps=tuple(int(t) for t in s.timestamps),
            split=s.split,
        )
        for s in kept
    ]
    return vocab, indexed


# -- dataset bundle -----------------------------------------------------------


@dataclass
class Dataset:
    vocab: Vocabulary
    sequences: list
    config: Optional[DatasetConfig] = None

    def split(self, name: str) -> list:
        return [s for s in self.sequences if s.split == name]

    @property
    def max_seq_len(self) -> int:
        if self.config is not None:
            return self.config.max_seq_len
        return max(len(s) for s in self.sequences)

    def stats(self) -> dict:
        return {
            "#User": self.vocab.n_users,
            "#POI": self.vocab.n_pois,
            "#Cat.": self.vocab.n_cats,
            "#Check-in": sum(len(s) for s in self.sequences),
            "#Seq.": len(self.sequences),
            "#Relation": self.vocab.n_relations,
        }

    def to_dict(self) -> dict:
        return {
            "format": "sgrec-dataset",
            "version": 1,
            "config": self.config.to_dict() if self.config else None,
            "vocab": self.vocab.to_dict(),
            "sequences": [
                {
                    "user": s.user,
                    "pois": list(s.pois),
                    "cats": list(s.cats),
                    "timestamps": list(s.timestamps),
                    "split": s.split,
                }
                for s in self.sequences
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        cfg = DatasetConfig(**d["config"]) if d.get("config") else None
        seqs = [
            CheckInSequence(s["user"], tuple(s["pois"]), tuple(s["cats"]), tuple(s["timestamps"]), s["split"])
            for s in d["sequences"]
        ]
        return cls(Vocabulary.from_dict(d["vocab"]), seqs, cfg)


def save_bundle(dataset: Dataset, path) -> str:
    """Write the bundle and return its SHA-256 checksum."""
    payload = BUNDLE_MAGIC + b"\n" + json.dumps(dataset.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_bundle(path) -> Dataset:
    raw = Path(path).read_bytes()
    magic, _, body = raw.partition(b"\n")
    if magic != BUNDLE_MAGIC:
        raise DataFormatError(f"{path} is not an sgrec dataset bundle (bad magic {magic[:8]!r})")
    try:
        return Dataset.from_dict(json.loads(body.decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"{path}: corrupt dataset bundle ({exc})") from exc


def preprocess(checkins: Sequence[CheckIn], cfg: DatasetConfig) -> Dataset:
    """Filter, sessionize, split and index a raw check-in log."""
    filtered = filter_dataset(checkins, cfg)
    if not filtered:
        raise EmptyDataError("no check-ins survive user/POI filtering")
    seqs = split_sequences(filtered, cfg)
    if not seqs:
        raise EmptyDataError("no sequence meets the minimum length")
    vocab, indexed = build_vocabs(seqs)
    return Dataset(vocab, indexed, cfg)
