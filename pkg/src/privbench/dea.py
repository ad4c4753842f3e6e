"""Data extraction scoring: canary ranks, exposure and exposure rate.

Every candidate of a format is scored by its log-perplexity (bits). The rank
of a candidate counts all candidates whose log-perplexity is ``<=`` its own,
so ties go against the target and the minimum rank is 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from privbench.canary import InsertionPlan
from privbench.errors import DataError, DomainError, IncompleteScoringError
from privbench.tinylm import TinyLM, log_perplexities


@dataclass(frozen=True)
class CanaryScore:
    format: str
    candidate: str
    candidate_id: str
    inserted: bool
    repetitions: int
    log_perplexity: float


@dataclass(frozen=True)
class CanaryExposure:
    score: CanaryScore
    rank: int
    exposure: float


@dataclass(frozen=True)
class FormatSummary:
    format: str
    size: int
    inserted: int
    mean_exposure: float  # over inserted canaries only
    exposure_rate: float


@dataclass
class ExposureReport:
    canaries: list[CanaryExposure]
    formats: list[FormatSummary]
    epochs: int = 1
    notes: list[str] = field(default_factory=lambda: ["mean exposure is over inserted canaries only"])

    @property
    def mean_exposure(self) -> float:
        vals = [c.exposure for c in self.canaries if c.score.inserted]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def exposure_rate(self) -> float:
        """Pooled over formats, weighted by inserted count."""
        total = sum(f.inserted for f in self.formats)
        return sum(f.exposure_rate * f.inserted for f in self.formats) / total if total else math.nan


def rank(perplexities: Sequence[float], target: int) -> int:
    """Rank of candidate `target`: number of candidates with log-perplexity <= its own."""
    values = np.asarray(perplexities, dtype=float)
    if not 0 <= target < values.size:
        raise IncompleteScoringError(f"candidate {target} was not scored")
    return int(np.count_nonzero(values <= values[target]))


def ranks(perplexities: Sequence[float]) -> np.ndarray:
    """All ranks at once; same rule as `rank`."""
    values = np.asarray(perplexities, dtype=float)
    return np.searchsorted(np.sort(values), values, side="right")


def exposure(rank_value: int, size: int) -> float:
    if size < 1 or not 1 <= rank_value <= size:
        raise DomainError(f"rank {rank_value} outside [1, {size}]")
    return math.log2(size / rank_value)


def exposure_rate(scores: Sequence[CanaryScore]) -> float:
    """Fraction of inserted canaries strictly below every held-out candidate."""
    held = [s.log_perplexity for s in scores if not s.inserted]
    ins = [s.log_perplexity for s in scores if s.inserted]
    if not held:
        raise DomainError("exposure rate needs at least one held-out candidate")
    if not ins:
        raise DomainError("exposure rate needs at least one inserted candidate")
    floor = min(held)
    return sum(p < floor for p in ins) / len(ins)


def build_report(scores: Sequence[CanaryScore], sizes: dict[str, int] | None = None,
                 epochs: int = 1) -> ExposureReport:
    """Aggregate per-candidate scores into ranks, exposures and per-format summaries."""
    by_format: dict[str, list[CanaryScore]] = {}
    for s in scores:
        if not math.isfinite(s.log_perplexity):
            raise DataError(f"non-finite log-perplexity for {s.candidate_id}")
        by_format.setdefault(s.format, []).append(s)
    if sizes is not None:
        for name, size in sizes.items():
            got = len(by_format.get(name, []))
            if got != size:
                raise IncompleteScoringError(f"{name}: scored {got} of {size} candidates")
    canaries, summaries = [], []
    for name, group in by_format.items():
        rk = ranks([s.log_perplexity for s in group])
        exps = [CanaryExposure(s, int(r), exposure(int(r), len(group))) for s, r in zip(group, rk)]
        canaries.extend(exps)
        inserted = [e.exposure for e in exps if e.score.inserted]
        summaries.append(FormatSummary(name, len(group), len(inserted),
                                       float(np.mean(inserted)) if inserted else math.nan,
                                       exposure_rate(group)))
    return ExposureReport(canaries, summaries, epochs)


def score_candidates(model: TinyLM, plans: Sequence[InsertionPlan],
                     encode: Callable[[str], list[int]], batch_size: int = 256) -> list[CanaryScore]:
    """Log-perplexity of every candidate surface string (no end-of-sequence token)."""
    scores = []
    for plan in plans:
        fmt = plan.format
        seqs = [encode(fmt.instantiate(c)) for c in fmt.candidates]
        ppl = log_perplexities(model, seqs, batch_size)
        for c, p in zip(fmt.candidates, ppl):
            reps = plan.repetitions_of(c)
            scores.append(CanaryScore(fmt.name, c, fmt.candidate_id(c), reps > 0, reps, float(p)))
    return scores


def dea_report(model: TinyLM, plans: Sequence[InsertionPlan], encode: Callable[[str], list[int]],
               epochs: int = 1, batch_size: int = 256) -> ExposureReport:
    scores = score_candidates(model, plans, encode, batch_size)
    return build_report(scores, {p.format.name: p.format.size for p in plans}, epochs)


# -- persistence -------------------------------------------------------------------------

CANARY_COLUMNS = ["format", "candidate_id", "candidate", "inserted", "repetitions", "logppl_bits",
                  "rank", "exposure"]
SUMMARY_COLUMNS = ["format", "size", "inserted", "mean_exposure", "exposure_rate"]


def write_scores(scores: Sequence[CanaryScore], path: str | Path) -> None:
    """Raw score dump; `build_report` over the reloaded dump reproduces every report value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["format", "candidate_id", "candidate", "inserted", "repetitions", "logppl_bits"])
        for s in scores:
            w.writerow([s.format, s.candidate_id, s.candidate, int(s.inserted), s.repetitions,
                        repr(float(s.log_perplexity))])


def read_scores(path: str | Path) -> list[CanaryScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CanaryScore(r["format"], r["candidate"], r["candidate_id"], r["inserted"] == "1",
                            int(r["repetitions"]), float(r["logppl_bits"])) for r in csv.DictReader(fh)]


def write_exposure_csv(report: ExposureReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANARY_COLUMNS)
        for c in report.canaries:
            s = c.score
            w.writerow([s.format, s.candidate_id, s.candidate, int(s.inserted), s.repetitions,
                        f"{s.log_perplexity:.6f}", c.rank, f"{c.exposure:.6f}"])
        w.writerow([])
        w.writerow(SUMMARY_COLUMNS)
        for f in report.formats:
            w.writerow([f.format, f.size, f.inserted, f"{f.mean_exposure:.6f}", f"{f.exposure_rate:.6f}"])


def write_scatter(report: ExposureReport, path: str | Path) -> None:
    """Inserted canaries: raw repetitions, repetitions times epochs, and exposure."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["format", "candidate_id", "repetitions", "insertions_times_epochs", "exposure"])
        for c in report.canaries:
            if c.score.inserted:
                w.writerow([c.score.format, c.score.candidate_id, c.score.repetitions,
                            c.score.repetitions * report.epochs, f"{c.exposure:.6f}"])


def repetition_exposure_spearman(report: ExposureReport) -> float:
    """Spearman correlation between repetitions and exposure over all candidates.

    Held-out candidates enter with zero repetitions.
    """
    reps = [c.score.repetitions for c in report.canaries]
    exps = [c.exposure for c in report.canaries]
    if len(set(reps)) < 2 or len(set(exps)) < 2:
        return math.nan
    return float(spearmanr(reps, exps).statistic)
