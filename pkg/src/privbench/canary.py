"""Canary formats, randomness spaces and the insertion schedule.

Seven decoder-style formats are supported. Names, cities and e-mails come
from static synthetic lists shipped with the package; digit, letter and word
candidates are drawn at plan time (word candidates from the corpus
vocabulary). An insertion plan inserts ``floor(0.4 * |R|)`` candidates, the
k-th of them ``10 * k`` times; the rest are held out and never appear.
"""

from __future__ import annotations

import csv
import json
import math
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from privbench.errors import ConfigError, DataError, DomainError

SLOT = "{slot}"
# four fixed words framing the one-word and three-word canaries
FILLER_WORDS = ("amber", "compass", "velvet", "meadow")

TEMPLATES = {
    "Name": ("My name is {slot}", 80),
    "City": ("I live in {slot}. It is a beautiful city", 80),
    "Email": ("My email is {slot}", 70),
    "Phone": ("My phone number is {slot}. You can call me by this number.", 100),
    "Letters": ("The letters are {slot}. It is my password.", 100),
    "OneWord": (f"{FILLER_WORDS[0]} {FILLER_WORDS[1]} {{slot}} {FILLER_WORDS[2]} {FILLER_WORDS[3]}", 100),
    "ThreeWords": (f"{FILLER_WORDS[0]} {FILLER_WORDS[1]} {{slot}} {FILLER_WORDS[2]} {FILLER_WORDS[3]}", 100),
}
FORMAT_NAMES = tuple(TEMPLATES)


@dataclass(frozen=True)
class CanaryFormat:
    name: str
    template: str
    candidates: tuple[str, ...]

    def __post_init__(self):
        if self.template.count(SLOT) != 1:
            raise ConfigError(f"template for {self.name} must contain exactly one slot")
        if len(set(self.candidates)) != len(self.candidates):
            raise ConfigError(f"{self.name}: duplicate candidates")
        if not self.candidates:
            raise ConfigError(f"{self.name}: empty randomness space")

    @property
    def size(self) -> int:
        return len(self.candidates)

    def instantiate(self, candidate: str) -> str:
        if candidate not in self._index:
            raise DomainError(f"{candidate!r} is not in the {self.name} randomness space")
        return self.template.replace(SLOT, candidate)

    def extract(self, text: str) -> str:
        """Inverse of `instantiate`."""
        head, tail = self.template.split(SLOT)
        if not (text.startswith(head) and text.endswith(tail)) or len(text) < len(head) + len(tail):
            raise DomainError(f"{text!r} does not match the {self.name} format")
        r = text[len(head):len(text) - len(tail)]
        if r not in self._index:
            raise DomainError(f"{r!r} is not in the {self.name} randomness space")
        return r

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {c: i for i, c in enumerate(self.candidates)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def candidate_id(self, candidate: str) -> str:
        return f"{self.name}:{self._index[candidate]}"


def _static_list(name: str) -> list[str]:
    text = resources.files("privbench.data").joinpath(name).read_text(encoding="utf-8")
    return [line for line in text.split("\n") if line]


def _distinct(draw, count: int, rng, limit: int = 100_000) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for _ in range(limit):
        if len(seen) == count:
            break
        seen.setdefault(draw(rng))
    if len(seen) < count:
        raise ConfigError(f"could not draw {count} distinct candidates")
    return tuple(seen)


def build_formats(vocabulary_words: Iterable[str], seed: int, names: Sequence[str] = FORMAT_NAMES) -> list[CanaryFormat]:
    """Instantiate the canary formats.

    `vocabulary_words` feeds the one-word and three-word randomness spaces;
    only alphabetic words that are not filler words are eligible.
    """
    rng = np.random.default_rng(seed)
    words = sorted({w for w in vocabulary_words if w.isalpha() and w not in FILLER_WORDS})
    out = []
    for name in names:
        template, count = TEMPLATES[name]
        if name == "Name":
            cands = tuple(_static_list("names.txt"))
        elif name == "City":
            cands = tuple(_static_list("cities.txt"))
        elif name == "Email":
            cands = tuple(_static_list("emails.txt"))
        elif name == "Phone":
            cands = _distinct(lambda g: " ".join(str(d) for d in g.integers(0, 10, 5)), count, rng)
        elif name == "Letters":
            letters = string.ascii_lowercase
            cands = _distinct(lambda g: " ".join(letters[i] for i in g.integers(0, 26, 6)), count, rng)
        elif name == "OneWord":
            if len(words) < count:
                raise ConfigError(f"need {count} vocabulary words for OneWord, have {len(words)}")
            cands = tuple(words[i] for i in rng.choice(len(words), count, replace=False))
        elif name == "ThreeWords":
            cands = _distinct(lambda g: " ".join(words[i] for i in g.choice(len(words), 3, replace=False)),
                              count, rng)
        else:
            raise ConfigError(f"unknown canary format {name!r}")
        if len(cands) != count:
            raise ConfigError(f"{name}: expected {count} candidates, got {len(cands)}")
        out.append(CanaryFormat(name, template, cands))
    return out


@dataclass(frozen=True)
class InsertionPlan:
    format: CanaryFormat
    inserted: tuple[str, ...]
    repetitions: tuple[int, ...]
    held_out: tuple[str, ...]

    def repetitions_of(self, candidate: str) -> int:
        try:
            return self.repetitions[self.inserted.index(candidate)]
        except ValueError:
            return 0

    @property
    def total_lines(self) -> int:
        return sum(self.repetitions)


def build_insertion_plan(fmt: CanaryFormat, fraction: float = 0.4, base_reps: int = 10,
                         seed: int = 0) -> InsertionPlan:
    """Choose ``floor(fraction * |R|)`` candidates; the k-th repeats ``base_reps * k`` times."""
    if not 0 < fraction < 1:
        raise ConfigError("insertion fraction must lie in (0, 1)")
    k = math.floor(fraction * fmt.size + 1e-9)
    if k == 0:
        raise ConfigError(f"fraction {fraction} inserts no {fmt.name} canaries")
    if base_reps < 1:
        raise ConfigError("base repetitions must be >= 1")
    order = np.random.default_rng(seed).choice(fmt.size, size=k, replace=False)
    inserted = tuple(fmt.candidates[i] for i in order)
    chosen = set(inserted)
    held_out = tuple(c for c in fmt.candidates if c not in chosen)
    reps = tuple(base_reps * (i + 1) for i in range(k))
    return InsertionPlan(fmt, inserted, reps, held_out)


@dataclass(frozen=True)
class InjectedLine:
    text: str
    canary_id: str | None = None
    source_index: int | None = None


def inject(corpus: Sequence[str], plans: Sequence[InsertionPlan], seed: int) -> list[InjectedLine]:
    """Interleave scheduled canary copies uniformly among the corpus lines."""
    if not corpus:
        raise DataError("cannot inject canaries into an empty corpus")
    lines = [InjectedLine(text, None, i) for i, text in enumerate(corpus)]
    if not plans:
        return lines
    for plan in plans:
        for cand, reps in zip(plan.inserted, plan.repetitions):
            line = InjectedLine(plan.format.instantiate(cand), plan.format.candidate_id(cand))
            lines.extend([line] * reps)
    perm = np.random.default_rng(seed).permutation(len(lines))
    return [lines[i] for i in perm]


# -- persistence -------------------------------------------------------------------------


def write_plans(plans: Sequence[InsertionPlan], path: str | Path) -> None:
    """JSONL, one row per candidate: inserted ones in schedule order, then held-out."""
    with open(path, "w", encoding="utf-8") as fh:
        for plan in plans:
            name = plan.format.name
            for cand, reps in zip(plan.inserted, plan.repetitions):
                fh.write(json.dumps({"format": name, "candidate": cand, "inserted": True,
                                     "repetitions": reps}) + "\n")
            for cand in plan.held_out:
                fh.write(json.dumps({"format": name, "candidate": cand, "inserted": False,
                                     "repetitions": 0}) + "\n")


def read_plans(path: str | Path) -> list[InsertionPlan]:
    rows: dict[str, list[dict]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.setdefault(rec["format"], []).append(rec)
    plans = []
    for name, recs in rows.items():
        template = TEMPLATES[name][0]
        fmt = CanaryFormat(name, template, tuple(r["candidate"] for r in recs))
        ins = [r for r in recs if r["inserted"]]
        plans.append(InsertionPlan(fmt, tuple(r["candidate"] for r in ins),
                                   tuple(int(r["repetitions"]) for r in ins),
                                   tuple(r["candidate"] for r in recs if not r["inserted"])))
    return plans


def write_injection_manifest(lines: Sequence[InjectedLine], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "kind", "ref"])
        for i, line in enumerate(lines):
            if line.canary_id is None:
                w.writerow([i, "sample", line.source_index])
            else:
                w.writerow([i, "canary", line.canary_id])
