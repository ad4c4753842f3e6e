"""Likelihood-ratio membership inference with shadow models.

The per-sample statistic is the total sequence log-likelihood (natural log,
end-of-sequence token included). For each sample, Gaussians are fitted to its
scores under shadow models that trained on it ("in") and that did not ("out");
the attack score is the log density ratio at the target model's score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from privbench.errors import ConfigError, FitError
from privbench.tinylm import TinyLM, sequence_log_likelihoods

VARIANCE_FLOOR = 1e-8
TARGET_SHADOW_ID = -1  # marks target-model rows in a score dump


@dataclass(frozen=True)
class ShadowAssignment:
    sample_ids: tuple[str, ...]
    membership: np.ndarray  # (n_samples, n_shadows) bool

    @property
    def n_shadows(self) -> int:
        return self.membership.shape[1]

    def members_of(self, shadow: int) -> np.ndarray:
        return np.flatnonzero(self.membership[:, shadow])


def assign_shadows(sample_ids: Sequence[str], n_shadows: int = 128, seed: int = 0,
                   min_side: int = 2) -> ShadowAssignment:
    """Fair coin per (sample, shadow); a sample's row is redrawn until both sides have `min_side`."""
    if n_shadows < 2 * min_side:
        raise ConfigError(f"need at least {2 * min_side} shadow models, got {n_shadows}")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in sample_ids:
        while True:
            row = rng.random(n_shadows) < 0.5
            k = int(row.sum())
            if min_side <= k <= n_shadows - min_side:
                rows.append(row)
                break
    membership = np.array(rows, dtype=bool).reshape(len(sample_ids), n_shadows)
    return ShadowAssignment(tuple(sample_ids), membership)


def sample_scores(model: TinyLM, sequences: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Total natural-log likelihood of each sequence; higher means more confident."""
    return sequence_log_likelihoods(model, sequences, batch_size)


def sample_score(model: TinyLM, sequence: Sequence[int]) -> float:
    return float(sample_scores(model, [sequence])[0])


@dataclass(frozen=True)
class LiraFit:
    mu_in: np.ndarray
    var_in: np.ndarray
    mu_out: np.ndarray
    var_out: np.ndarray
    n_in: np.ndarray
    n_out: np.ndarray


def fit_lira(scores: np.ndarray, membership: np.ndarray, pooled: bool = False,
             floor: float = VARIANCE_FLOOR, sample_ids: Sequence[str] | None = None) -> LiraFit:
    """Per-sample mean and population variance on each side.

    `scores` and `membership` are (n_samples, n_shadows). With ``pooled=True``
    every sample shares one variance per side (the mean of per-sample variances).
    """
    s = np.asarray(scores, dtype=float)
    m = np.asarray(membership, dtype=bool)
    if s.shape != m.shape:
        raise FitError(f"score matrix {s.shape} does not match assignment {m.shape}")
    n_in, n_out = m.sum(1), (~m).sum(1)
    for counts, side in ((n_in, "in"), (n_out, "out")):
        bad = np.flatnonzero(counts < 2)
        if bad.size:
            name = sample_ids[bad[0]] if sample_ids is not None else str(bad[0])
            raise FitError(f"sample {name} has {counts[bad[0]]} {side}-scores; at least 2 are needed")

    def side_stats(mask, count):
        mu = np.where(mask, s, 0.0).sum(1) / count
        var = np.where(mask, (s - mu[:, None]) ** 2, 0.0).sum(1) / count
        return mu, var

    mu_in, var_in = side_stats(m, n_in)
    mu_out, var_out = side_stats(~m, n_out)
    if pooled:
        var_in = np.full_like(var_in, var_in.mean())
        var_out = np.full_like(var_out, var_out.mean())
    return LiraFit(mu_in, np.maximum(var_in, floor), mu_out, np.maximum(var_out, floor), n_in, n_out)


def _log_normal_pdf(x, mu, var):
    return -0.5 * np.log(2 * np.pi * var) - (x - mu) ** 2 / (2 * var)


def lira_log_score(fit: LiraFit, observed: np.ndarray) -> np.ndarray:
    """log p(observed | in-Gaussian) - log p(observed | out-Gaussian), per sample."""
    x = np.asarray(observed, dtype=float)
    return _log_normal_pdf(x, fit.mu_in, fit.var_in) - _log_normal_pdf(x, fit.mu_out, fit.var_out)


def lira_score(fit: LiraFit, observed: np.ndarray) -> np.ndarray:
    """Likelihood ratio; larger means more likely a member. May overflow to inf."""
    with np.errstate(over="ignore"):
        return np.exp(lira_log_score(fit, observed))


@dataclass(frozen=True)
class MiaScoreSet:
    sample_ids: tuple[str, ...]
    labels: np.ndarray  # True for members of the target's training set
    scores: np.ndarray


def online_lira(shadow_scores: np.ndarray, assignment: ShadowAssignment, target_scores: np.ndarray,
                labels: Sequence[bool], pooled: bool = False) -> MiaScoreSet:
    fit = fit_lira(shadow_scores, assignment.membership, pooled, sample_ids=assignment.sample_ids)
    return MiaScoreSet(assignment.sample_ids, np.asarray(labels, bool), lira_log_score(fit, target_scores))


def offline_lira(target: TinyLM, reference: TinyLM, sequences: Sequence[Sequence[int]],
                 sample_ids: Sequence[str], labels: Sequence[bool], batch_size: int = 256) -> MiaScoreSet:
    """Score = target log-likelihood minus reference log-likelihood."""
    if target.config.vocab_size != reference.config.vocab_size:
        raise ConfigError("target and reference models use different vocabularies")
    diff = sample_scores(target, sequences, batch_size) - sample_scores(reference, sequences, batch_size)
    return MiaScoreSet(tuple(sample_ids), np.asarray(labels, bool), diff)


def collect_shadow_scores(train_shadow: Callable[[list[int], int], TinyLM],
                          sequences: Sequence[Sequence[int]], assignment: ShadowAssignment,
                          batch_size: int = 256) -> np.ndarray:
    """Train each shadow on its in-split and score every sample, giving (n_samples, n_shadows).

    `train_shadow(member_indices, shadow_index)` owns model construction and its RNG stream.
    """
    out = np.empty(assignment.membership.shape)
    for j in range(assignment.n_shadows):
        model = train_shadow(assignment.members_of(j).tolist(), j)
        out[:, j] = sample_scores(model, sequences, batch_size)
    return out


# -- score dumps ---------------------------------------------------------------------------


def write_score_dump(path: str | Path, sample_ids: Sequence[str], scores: np.ndarray,
                     membership: np.ndarray) -> None:
    """JSONL rows {sample_id, shadow_id, in_training, score}; 1-d input means target rows."""
    s = np.asarray(scores, dtype=float)
    m = np.asarray(membership, dtype=bool)
    with open(path, "w", encoding="utf-8") as fh:
        if s.ndim == 1:
            for sid, v, flag in zip(sample_ids, s, m):
                fh.write(json.dumps({"sample_id": sid, "shadow_id": TARGET_SHADOW_ID,
                                     "in_training": bool(flag), "score": float(v)}) + "\n")
            return
        for i, sid in enumerate(sample_ids):
            for j in range(s.shape[1]):
                fh.write(json.dumps({"sample_id": sid, "shadow_id": j, "in_training": bool(m[i, j]),
                                     "score": float(s[i, j])}) + "\n")


def read_score_dump(path: str | Path):
    """Returns (sample_ids, scores, membership); 1-d arrays for a target dump."""
    ids: dict[str, int] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids.setdefault(rec["sample_id"], len(ids))
                rows.append(rec)
    shadows = sorted({r["shadow_id"] for r in rows})
    if shadows == [TARGET_SHADOW_ID]:
        scores, member = np.full(len(ids), math.nan), np.zeros(len(ids), bool)
        for r in rows:
            scores[ids[r["sample_id"]]] = r["score"]
            member[ids[r["sample_id"]]] = r["in_training"]
    else:
        col = {s: k for k, s in enumerate(shadows)}
        scores = np.full((len(ids), len(shadows)), math.nan)
        member = np.zeros((len(ids), len(shadows)), bool)
        for r in rows:
            i, j = ids[r["sample_id"]], col[r["shadow_id"]]
            scores[i, j] = r["score"]
            member[i, j] = r["in_training"]
    if np.isnan(scores).any():
        raise FitError(f"score dump {path} is missing (sample, shadow) entries")
    return tuple(ids), scores, member
