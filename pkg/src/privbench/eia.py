"""Generative embedding inversion.

An attacker decoder reads an aligned victim sentence embedding in place of
its first input token and is trained with teacher forcing to emit the
sentence followed by ``<eos>``. Reconstructions are scored by token-multiset
overlap, micro-aggregated over the evaluation set.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from privbench.errors import ConfigError, IntegrityError, ShapeError
from privbench.metrics import precision_recall_f1
from privbench.tinylm import TinyLM, embed_batch, parameter_digest, scoring_batch, token_log_likelihoods


class AlignmentMap(nn.Module):
    """Affine map from victim embedding space to the attacker's input space.

    Starts at zero so an untrained attacker sees the same input for every embedding.
    """

    def __init__(self, victim_dim: int, attacker_dim: int, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(attacker_dim, victim_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(attacker_dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"embedding dim {x.shape[-1]} != alignment input dim {self.weight.shape[1]}")
        return x @ self.weight.T + self.bias


@dataclass(frozen=True)
class EiaPair:
    sample_id: str
    embedding: np.ndarray
    reference: tuple[int, ...]  # ends with <eos>


def build_dataset(victim: TinyLM, sample_ids: Sequence[str], sentences: Sequence[Sequence[int]],
                  batch_size: int = 256) -> list[EiaPair]:
    """Embed each sentence (without ``<eos>``) with the frozen victim."""
    eos = victim.config.eos_id
    bare = [[t for t in s if t != eos] for s in sentences]
    emb = embed_batch(victim, bare, batch_size)
    return [EiaPair(sid, e, tuple(s) + (eos,)) for sid, e, s in zip(sample_ids, emb, bare)]


@dataclass
class AttackerResult:
    attacker: TinyLM
    alignment: AlignmentMap
    epoch_losses: list[float] = field(default_factory=list)


def _batch_loss(attacker, alignment, pairs):
    inputs, targets, mask = scoring_batch(attacker, [p.reference for p in pairs])
    emb = torch.as_tensor(np.stack([p.embedding for p in pairs]), dtype=attacker.dtype)
    ll = token_log_likelihoods(attacker, inputs, targets, mask, alignment(emb))
    return -ll.sum() / mask.sum()


def train_attacker(victim: TinyLM, attacker: TinyLM, dataset: Sequence[EiaPair], epochs: int = 20,
                   learning_rate: float = 1e-3, batch_size: int = 32, seed: int = 0,
                   alignment: AlignmentMap | None = None) -> AttackerResult:
    """Jointly fit attacker and alignment by teacher-forced cross-entropy; the victim is only read."""
    if not dataset:
        raise ConfigError("embedding inversion needs a non-empty training set")
    d_victim = victim.config.embedding_dim
    for p in dataset:
        if p.embedding.shape != (d_victim,):
            raise ShapeError(f"embedding of {p.sample_id} has shape {p.embedding.shape}, expected ({d_victim},)")
    digest = parameter_digest(victim)
    if alignment is None:
        alignment = AlignmentMap(d_victim, attacker.config.embedding_dim, attacker.dtype)
    params = list(attacker.parameters()) + list(alignment.parameters())
    opt = torch.optim.Adam(params, lr=learning_rate)
    rng = np.random.default_rng(seed)
    result = AttackerResult(attacker, alignment)
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start:start + batch_size]]
            opt.zero_grad(set_to_none=True)
            loss = _batch_loss(attacker, alignment, batch)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        result.epoch_losses.append(total / count)
    if parameter_digest(victim) != digest:
        raise IntegrityError("victim parameters changed during attacker training")
    return result


@torch.no_grad()
def invert_batch(attacker: TinyLM, alignment: AlignmentMap, embeddings: np.ndarray,
                 max_len: int = 64) -> list[list[int]]:
    """Greedy decoding from aligned embeddings; each output stops at ``<eos>`` (kept) or `max_len`."""
    c = attacker.config
    emb = torch.as_tensor(np.atleast_2d(np.asarray(embeddings)), dtype=attacker.dtype)
    first = alignment(emb)
    B = emb.shape[0]
    ids = torch.full((B, 1), c.eos_id, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    outs: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        if ids.shape[1] > c.max_tokens:
            break
        nxt = attacker(ids, first)[:, -1].argmax(-1)
        for i in torch.nonzero(~done).flatten().tolist():
            outs[i].append(int(nxt[i]))
        done |= nxt == c.eos_id
        if bool(done.all()):
            break
        ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
    return outs


def invert(attacker: TinyLM, alignment: AlignmentMap, embedding: np.ndarray, max_len: int = 64) -> list[int]:
    return invert_batch(attacker, alignment, np.asarray(embedding)[None, :], max_len)[0]


@dataclass(frozen=True)
class EiaScores:
    precision: float
    recall: float
    f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    overlaps: tuple[tuple[int, int, int], ...]  # (overlap, predicted, reference) per sample


def overlap_counts(reference: Sequence[int], prediction: Sequence[int], exclude=frozenset()) -> tuple[int, int, int]:
    ref = Counter(t for t in reference if t not in exclude)
    pred = Counter(t for t in prediction if t not in exclude)
    return sum((ref & pred).values()), sum(pred.values()), sum(ref.values())


def score_reconstructions(references: Sequence[Sequence[int]], predictions: Sequence[Sequence[int]],
                          exclude=frozenset()) -> EiaScores:
    if not references:
        raise ConfigError("evaluation set is empty")
    return scores_from_counts([overlap_counts(r, p, exclude) for r, p in zip(references, predictions, strict=True)])


def eia_evaluate(attacker: TinyLM, alignment: AlignmentMap, eval_pairs: Sequence[EiaPair],
                 special_ids=frozenset(), max_len: int = 64):
    """Returns (scores, reconstructions)."""
    if not eval_pairs:
        raise ConfigError("evaluation set is empty")
    preds = invert_batch(attacker, alignment, np.stack([p.embedding for p in eval_pairs]), max_len)
    return score_reconstructions([p.reference for p in eval_pairs], preds, special_ids), preds


def random_token_predictions(references: Sequence[Sequence[int]], vocab_size: int, special_ids=frozenset(),
                             seed: int = 0) -> list[list[int]]:
    """Uniform non-special tokens at the reference's (non-special) length."""
    rng = np.random.default_rng(seed)
    pool = np.array([t for t in range(vocab_size) if t not in special_ids])
    return [rng.choice(pool, size=sum(t not in special_ids for t in r)).tolist() for r in references]


def random_token_baseline(references: Sequence[Sequence[int]], vocab_size: int, special_ids=frozenset(),
                          seed: int = 0) -> EiaScores:
    preds = random_token_predictions(references, vocab_size, special_ids, seed)
    return score_reconstructions(references, preds, special_ids)


# -- persistence ---------------------------------------------------------------------------


def write_embedding_dump(path: str | Path, sample_ids: Sequence[str], embeddings: np.ndarray,
                         texts: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, e, t in zip(sample_ids, embeddings, texts):
            fh.write(json.dumps({"sample_id": sid, "embedding": [float(v) for v in e], "text": t}) + "\n")


def read_embedding_dump(path: str | Path):
    """Returns (sample_ids, embeddings (n, d), texts)."""
    ids, embs, texts = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids.append(rec["sample_id"])
                embs.append(rec["embedding"])
                texts.append(rec["text"])
    return ids, np.asarray(embs, dtype=float), texts


RECONSTRUCTION_COLUMNS = ["sample_id", "reference", "reconstruction", "overlap", "predicted_tokens",
                          "reference_tokens"]


def write_reconstructions(path: str | Path, sample_ids: Sequence[str], references: Sequence[str],
                          reconstructions: Sequence[str], scores: EiaScores) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECONSTRUCTION_COLUMNS)
        for row in zip(sample_ids, references, reconstructions, scores.overlaps):
            w.writerow([*row[:3], *row[3]])


def read_reconstructions(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def scores_from_counts(counts: Sequence[tuple[int, int, int]]) -> EiaScores:
    """Rebuild micro and macro scores from persisted overlap counts."""
    if not counts:
        raise ConfigError("evaluation set is empty")
    o, np_, nr = (sum(c[k] for c in counts) for k in range(3))
    per = np.array([precision_recall_f1(*c) for c in counts])
    return EiaScores(*precision_recall_f1(o, np_, nr), *(float(v) for v in per.mean(0)), tuple(counts))
