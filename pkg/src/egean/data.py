"""Interaction files, manifests, batching and in-batch negatives.

File format: UTF-8 CSV, one header line naming the categorical fields in
schema order followed by ``click`` and ``conversion``; every value is an
integer code.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

LABEL_COLUMNS = ("click", "conversion")


class DataValidationError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab: int
    side: str  # "user" or "item"


@dataclass(frozen=True)
class Schema:
    fields: Tuple[FieldSpec, ...]

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.fields]

    @property
    def vocab_sizes(self) -> List[int]:
        return [f.vocab for f in self.fields]

    def side_index(self, side: str) -> List[int]:
        return [k for k, f in enumerate(self.fields) if f.side == side]

    def to_json(self) -> dict:
        return {"fields": [asdict(f) for f in self.fields]}

    @classmethod
    def from_json(cls, obj: dict) -> "Schema":
        return cls(tuple(FieldSpec(**f) for f in obj["fields"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Schema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class InteractionRecord:
    codes: Tuple[int, ...]
    click: int
    conversion: int

    @property
    def user_id(self) -> int:
        return self.codes[0]

    @property
    def item_id(self) -> int:
        return self.codes[1]


@dataclass
class DatasetManifest:
    users: int
    items: int
    exposures: int
    clicks: int
    conversions: int
    vocab_sizes: Dict[str, int] = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Dataset:
    schema: Schema
    codes: np.ndarray  # (n, fields) int64
    click: np.ndarray
    conversion: np.ndarray

    def __len__(self) -> int:
        return self.codes.shape[0]

    def records(self) -> Iterator[InteractionRecord]:
        for row, c, v in zip(self.codes, self.click, self.conversion):
            yield InteractionRecord(tuple(int(x) for x in row), int(c), int(v))

    def manifest(self) -> DatasetManifest:
        names = self.schema.names
        return DatasetManifest(
            users=int(np.unique(self.codes[:, names.index("user_id")]).size) if "user_id" in names else 0,
            items=int(np.unique(self.codes[:, names.index("item_id")]).size) if "item_id" in names else 0,
            exposures=len(self),
            clicks=int(self.click.sum()),
            conversions=int(self.conversion.sum()),
            vocab_sizes={f.name: f.vocab for f in self.schema.fields},
        )

    def subset(self, index) -> "Dataset":
        return Dataset(self.schema, self.codes[index], self.click[index], self.conversion[index])


def write_dataset(path, dataset: Dataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset.schema.names + list(LABEL_COLUMNS))
        for row, c, v in zip(dataset.codes, dataset.click, dataset.conversion):
            writer.writerow([*map(int, row), int(c), int(v)])


def load_dataset(path, schema: Schema) -> Tuple[Dataset, DatasetManifest]:
    """Stream-parse an interaction file, validating every line against ``schema``."""
    expected = schema.names + list(LABEL_COLUMNS)
    vocab = np.array(schema.vocab_sizes)
    rows: List[List[int]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataValidationError(f"header {header} does not match schema {expected}", 1)
        for lineno, line in enumerate(reader, start=2):
            if len(line) != len(expected):
                raise DataValidationError(f"expected {len(expected)} columns, got {len(line)}", lineno)
            try:
                vals = [int(x) for x in line]
            except ValueError as exc:
                raise DataValidationError(f"non-integer value ({exc})", lineno) from None
            codes, click, conv = vals[:-2], vals[-2], vals[-1]
            if click not in (0, 1) or conv not in (0, 1):
                raise DataValidationError("click and conversion must be 0 or 1", lineno)
            if conv == 1 and click == 0:
                raise DataValidationError("conversion=1 without click", lineno)
            bad = [k for k, c in enumerate(codes) if not 0 <= c < vocab[k]]
            if bad:
                k = bad[0]
                raise DataValidationError(
                    f"code {codes[k]} outside vocabulary of field {schema.names[k]!r} (size {vocab[k]})", lineno)
            rows.append(vals)
    arr = np.array(rows, dtype=np.int64).reshape(-1, len(expected))
    ds = Dataset(schema, arr[:, :-2], arr[:, -2], arr[:, -1])
    return ds, ds.manifest()


@dataclass(frozen=True)
class Batch:
    index: np.ndarray
    codes: np.ndarray
    click: np.ndarray
    conversion: np.ndarray

    @property
    def size(self) -> int:
        return self.codes.shape[0]


def make_batches(dataset: Dataset, batch_size: int, seed: int) -> List[Batch]:
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 for in-batch negatives")
    order = np.random.default_rng([seed, 0xBA7C]).permutation(len(dataset))
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        out.append(Batch(idx, dataset.codes[idx], dataset.click[idx], dataset.conversion[idx]))
    return out


@dataclass(frozen=True)
class ExposureBatch:
    codes: np.ndarray
    label: np.ndarray
    negative_source: np.ndarray  # row each negative's item fields came from; -1 for positives
    skipped: int


def in_batch_negatives(codes: np.ndarray, schema: Schema, rng: np.random.Generator,
                       max_retries: int = 10) -> ExposureBatch:
    """Pair every row's user fields with the item fields of another row.

    Negatives that coincide with a (user, item) positive of the batch are
    re-drawn up to ``max_retries`` times, then dropped and counted.
    """
    n = codes.shape[0]
    if n < 2:
        raise ValueError("in-batch negatives need at least two rows")
    user_cols, item_cols = schema.side_index("user"), schema.side_index("item")
    names = schema.names
    uid = names.index("user_id") if "user_id" in names else user_cols[0]
    iid = names.index("item_id") if "item_id" in names else item_cols[0]
    positives = set(zip(codes[:, uid].tolist(), codes[:, iid].tolist()))
    negs, sources, skipped = [], [], 0
    for row in range(n):
        for _ in range(max_retries + 1):
            j = int(rng.integers(0, n - 1))
            j += j >= row
            if (int(codes[row, uid]), int(codes[j, iid])) not in positives:
                neg = codes[row].copy()
                neg[item_cols] = codes[j, item_cols]
                negs.append(neg)
                sources.append(j)
                break
        else:
            skipped += 1
    neg_arr = np.array(negs, dtype=np.int64).reshape(-1, codes.shape[1])
    return ExposureBatch(
        codes=np.concatenate([codes, neg_arr]),
        label=np.concatenate([np.ones(n), np.zeros(len(negs))]),
        negative_source=np.concatenate([np.full(n, -1), np.array(sources, dtype=np.int64)]),
        skipped=skipped,
    )


def dataset_from_world(world, obs) -> Dataset:
    """Dataset view of a synthetic world under one click/label draw."""
    names, codes, vocab, sides = world.codes()
    schema = Schema(tuple(FieldSpec(n, vocab[n], sides[n]) for n in names))
    click = obs.o.astype(np.int64)
    return Dataset(schema, codes, click, click * obs.r.astype(np.int64))

