"""Dataset ingestion, generation templates and the auxiliary/training split."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from privbench.errors import DataError
from privbench.vocab import EOS, SEP, word_tokenize

RELATION_PROMPT = "The relation is"
AUXILIARY_FRACTION = 0.4

ROLE_TRAIN = "train"
ROLE_AUXILIARY = "auxiliary"
ROLE_INFERENCE = "inference"


@dataclass(frozen=True)
class RawSample:
    id: str
    premise: str
    hypothesis: str | None
    label: int


@dataclass(frozen=True)
class TemplatedSample:
    id: str
    tokens: tuple[str, ...]
    label: int
    role: str = ROLE_TRAIN

    @property
    def label_position(self) -> int:
        """Index of the label token (the last content token before <eos>)."""
        return len(self.tokens) - 2


def template_text(sample: RawSample) -> str:
    parts = [sample.premise]
    if sample.hypothesis is not None:
        parts.append(sample.hypothesis)
    return f" {SEP} ".join(parts) + f" {SEP} {RELATION_PROMPT} {sample.label}"


def templatize(sample: RawSample, num_labels: int = 3, role: str = ROLE_TRAIN,
               tokenize: Callable[[str], list[str]] = word_tokenize) -> TemplatedSample:
    """Turn a classification sample into one generation sequence ending in <eos>.

    Pair samples become ``premise <SEP> hypothesis <SEP> The relation is <label>``;
    single-sentence samples drop the hypothesis and its separator.
    """
    if isinstance(sample, TemplatedSample):
        raise DataError(f"sample {sample.id} is already templated")
    if not sample.premise or not sample.premise.strip():
        raise DataError(f"sample {sample.id} has an empty premise")
    if SEP in sample.premise or (sample.hypothesis and SEP in sample.hypothesis):
        raise DataError(f"sample {sample.id} already contains {SEP}; refusing to wrap twice")
    if not 0 <= sample.label < num_labels:
        raise DataError(f"sample {sample.id}: label {sample.label} outside [0, {num_labels})")
    tokens = tuple(tokenize(template_text(sample))) + (EOS,)
    return TemplatedSample(sample.id, tokens, sample.label, role)


def detokenize(tokens: Sequence[str], kind: str = "word") -> str:
    toks = [t for t in tokens if t != EOS]
    return (" " if kind == "word" else "").join(toks)


def split_auxiliary(samples: Sequence, seed: int, fraction: float = AUXILIARY_FRACTION):
    """Uniform (unstratified) split into ``(auxiliary, training)``.

    The auxiliary part has ``floor(fraction * N)`` samples; order within each
    part follows the input order.
    """
    n = len(samples)
    if n < 5:
        raise DataError(f"need at least 5 samples to split, got {n}")
    n_aux = int(np.floor(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    aux_idx = set(perm[:n_aux].tolist())
    aux = [s for i, s in enumerate(samples) if i in aux_idx]
    train = [s for i, s in enumerate(samples) if i not in aux_idx]
    return aux, train


# -- ingestion ------------------------------------------------------------------------

DEFAULT_COLUMNS = {"id": "id", "premise": "premise", "hypothesis": "hypothesis", "label": "label"}


def _to_sample(row: dict, columns: dict, index: int) -> RawSample:
    premise = row.get(columns["premise"])
    if premise is None or not str(premise).strip():
        raise DataError(f"row {index}: missing premise")
    hyp = row.get(columns["hypothesis"]) if columns.get("hypothesis") else None
    if hyp is not None and not str(hyp).strip():
        hyp = None
    sid = row.get(columns["id"])
    try:
        label = int(row[columns["label"]])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"row {index}: bad or missing label") from None
    return RawSample(str(sid if sid is not None else index), str(premise).strip(),
                     None if hyp is None else str(hyp).strip(), label)


def read_tsv(path: str | Path, columns: dict | None = None) -> list[RawSample]:
    """GLUE-style TSV with a header row."""
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        return [_to_sample(row, cols, i) for i, row in enumerate(reader)]


def read_jsonl(path: str | Path, columns: dict | None = None) -> list[RawSample]:
    cols = {**DEFAULT_COLUMNS, **(columns or {})}
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if line.strip():
                out.append(_to_sample(json.loads(line), cols, i))
    return out


def write_jsonl(samples: Iterable[RawSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"id": s.id, "premise": s.premise, "label": s.label}
            if s.hypothesis is not None:
                rec["hypothesis"] = s.hypothesis
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_templated_corpus(sequences: Iterable[Sequence[int]], path: str | Path) -> None:
    """One token-id sequence per line, space separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")


def read_templated_corpus(path: str | Path) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        return [[int(t) for t in line.split()] for line in fh if line.strip()]


def write_split_manifest(roles: dict[str, str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "role"])
        for sid, role in roles.items():
            w.writerow([sid, role])


def read_split_manifest(path: str | Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["sample_id"]: row["role"] for row in csv.DictReader(fh)}
