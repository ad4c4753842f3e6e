"""End-to-end experiment orchestration.

Data preparation is a pure function of the config, so every stage can
rebuild it instead of passing state around. Each (model preset, tuning mode,
DP setting) combination gets its own directory holding checkpoints, dumps
and a status file. Two victims are trained per combination: a clean one on
the training split (membership inference, inversion, utility) and one on the
training split with canaries interleaved (data extraction).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from privbench import canary as canary_mod
from privbench import dea as dea_mod
from privbench import eia as eia_mod
from privbench import mia as mia_mod
from privbench.config import ExperimentConfig
from privbench.corpus import (
    ROLE_AUXILIARY,
    ROLE_INFERENCE,
    ROLE_TRAIN,
    RawSample,
    TemplatedSample,
    read_jsonl,
    read_tsv,
    split_auxiliary,
    template_text,
    templatize,
    write_split_manifest,
    write_templated_corpus,
)
from privbench.dp_train import PrivacySpec, TrainConfig, TrainResult, train, write_ledger
from privbench.errors import ConfigError, DataError, IntegrityError, StageError
from privbench.seeds import derive_seed, torch_generator
from privbench.synthetic import NliGenerator
from privbench.tinylm import ModelConfig, TinyLM, load_checkpoint, save_checkpoint, scoring_batch
from privbench.vocab import TOKENIZERS, Vocabulary

logger = logging.getLogger(__name__)

ATTACKS = ("dea", "mia", "eia")

STATUS_OK = "ok"
STATUS_FAILED = "failed"
STATUS_RESOURCE = "resource_exhausted"


# -- data --------------------------------------------------------------------------------


@dataclass
class PreparedData:
    vocab: Vocabulary
    train: list[TemplatedSample]
    auxiliary: list[TemplatedSample]
    evaluation: list[TemplatedSample]
    raw: dict[str, RawSample]
    pretrain: list[TemplatedSample]
    plans: list[canary_mod.InsertionPlan]
    injected: list[canary_mod.InjectedLine]

    def encode(self, sample: TemplatedSample) -> list[int]:
        return self.vocab.encode_tokens(sample.tokens)

    def encode_text(self, text: str) -> list[int]:
        return self.vocab.encode(text)

    def premise_ids(self, samples) -> list[list[int]]:
        return [self.vocab.encode(self.raw[s.id].premise) for s in samples]

    def canary_sequences(self) -> list[list[int]]:
        return [self.vocab.encode(line.text) + [self.vocab.eos_id] for line in self.injected]


def _load_raw(config: ExperimentConfig) -> tuple[list[RawSample], list[RawSample]]:
    g = config.get
    seed = g("experiment", "seed")
    source = g("corpus", "source")
    if source == "synthetic":
        n, n_eval = g("corpus", "num_samples"), g("corpus", "eval_samples")
        samples = NliGenerator(derive_seed(seed, "corpus")).generate(n + n_eval)
        return samples[:n], samples[n:]
    reader = read_tsv if source == "tsv" else read_jsonl
    if not g("corpus", "path") or not g("corpus", "eval_path"):
        raise ConfigError("corpus.path and corpus.eval_path are required for file sources")
    return reader(g("corpus", "path")), reader(g("corpus", "eval_path"))


def prepare_data(config: ExperimentConfig) -> PreparedData:
    g = config.get
    seed = g("experiment", "seed")
    kind = g("corpus", "tokenizer")
    tokenize = TOKENIZERS[kind]
    k = g("corpus", "num_labels")
    pool, held = _load_raw(config)
    aux_raw, train_raw = split_auxiliary(pool, derive_seed(seed, "split"), g("corpus", "auxiliary_fraction"))
    train_s = [templatize(s, k, ROLE_TRAIN, tokenize) for s in train_raw]
    aux_s = [templatize(s, k, ROLE_AUXILIARY, tokenize) for s in aux_raw]
    eval_s = [templatize(s, k, ROLE_INFERENCE, tokenize) for s in held]
    raw = {s.id: s for s in [*pool, *held]}
    if len(raw) != len(pool) + len(held):
        raise DataError("sample ids must be unique across the training pool and evaluation set")

    pretrain_raw = []
    if g("pretrain", "enabled"):
        pretrain_raw = NliGenerator(derive_seed(seed, "pretrain-corpus")).generate(g("pretrain", "num_samples"), "p")
    pretrain_s = [templatize(s, k, ROLE_TRAIN, tokenize) for s in pretrain_raw]

    plans, injected = [], []
    corpus_lines = [template_text(s) for s in train_raw]
    if "dea" in g("experiment", "attacks"):
        words = {w for s in train_raw for w in f"{s.premise} {s.hypothesis or ''}".split()
                 if w.isalpha() and w.islower()}
        formats = canary_mod.build_formats(sorted(words), derive_seed(seed, "canary-formats"), g("canary", "formats"))
        plans = [canary_mod.build_insertion_plan(f, g("canary", "fraction"), g("canary", "base_reps"),
                                                 derive_seed(seed, f"plan:{f.name}")) for f in formats]
        injected = canary_mod.inject(corpus_lines, plans, derive_seed(seed, "inject"))

    texts = [template_text(s) for s in [*pool, *held, *pretrain_raw]]
    texts += [p.format.instantiate(c) for p in plans for c in p.format.candidates]
    vocab = Vocabulary.build(texts, kind)
    return PreparedData(vocab, train_s, aux_s, eval_s, raw, pretrain_s, plans, injected)


def persist_data(data: PreparedData, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    data.vocab.save(out / "vocab.txt")
    roles = {s.id: s.role for s in [*data.train, *data.auxiliary, *data.evaluation]}
    write_split_manifest(roles, out / "split_manifest.csv")
    write_templated_corpus([data.encode(s) for s in data.train], out / "train_corpus.txt")
    if data.plans:
        canary_mod.write_plans(data.plans, out / "canary_plans.jsonl")
        canary_mod.write_injection_manifest(data.injected, out / "injection_manifest.csv")


# -- models and training -------------------------------------------------------------------


def combinations(config: ExperimentConfig) -> list[tuple[str, str, bool]]:
    g = config.get
    return [(m, t, d == "on") for m in g("experiment", "models") for t in g("experiment", "tuning_modes")
            for d in g("experiment", "dp")]


def combo_name(preset: str, mode: str, dp: bool) -> str:
    return f"{preset}-{mode}-{'dp' if dp else 'nodp'}"


def _dtype(config) -> torch.dtype:
    return torch.float64 if config.get("experiment", "dtype") == "float64" else torch.float32


def model_config(config: ExperimentConfig, preset: str, vocab: Vocabulary, mode: str = "full") -> ModelConfig:
    p = config.models[preset]
    return ModelConfig(vocab_size=len(vocab), embedding_dim=p["embedding_dim"], num_layers=p["num_layers"],
                       context_length=p["context_length"], hidden_width=p["hidden_width"], tuning_mode=mode,
                       num_virtual_tokens=p["num_virtual_tokens"], pad_id=vocab.pad_id, eos_id=vocab.eos_id)


def check_lengths(config: ExperimentConfig, data: PreparedData) -> None:
    longest = max(len(s.tokens) for s in [*data.train, *data.auxiliary, *data.evaluation, *data.pretrain])
    if data.injected:
        longest = max(longest, max(len(data.vocab.encode(l.text)) + 1 for l in set(data.injected)))
    for preset in config.get("experiment", "models"):
        for mode in config.get("experiment", "tuning_modes"):
            cap = model_config(config, preset, data.vocab, mode).max_tokens
            if longest > cap:
                raise ConfigError(f"longest sequence has {longest} tokens but preset {preset!r} "
                                  f"in {mode} mode fits {cap}; raise context_length")


def train_config(config: ExperimentConfig, mode: str, stage: str, epochs: int | None = None) -> TrainConfig:
    g = config.get
    lr = g("train", "lr_full") if mode == "full" else g("train", "lr_prompt_prefix")
    return TrainConfig(epochs=epochs or g("train", "epochs"), virtual_batch_size=g("train", "virtual_batch_size"),
                       micro_batch_size=g("train", "micro_batch_size"), learning_rate=lr,
                       lr_schedule=g("train", "lr_schedule"), optimizer=g("train", "optimizer"),
                       seed=derive_seed(g("experiment", "seed"), stage))


def privacy_spec(config: ExperimentConfig) -> PrivacySpec:
    g = config.get
    return PrivacySpec(epsilon=g("privacy", "epsilon"), delta=g("privacy", "delta"),
                       clip_norm=g("privacy", "clip_norm"), noise_multiplier=g("privacy", "noise_multiplier"))


def base_path(out: Path, preset: str) -> Path:
    return out / f"base-{preset}.ckpt"


def ensure_base(config: ExperimentConfig, data: PreparedData, preset: str, out: Path) -> TinyLM | None:
    """Pretrained base model for `preset`, trained once and cached as a checkpoint."""
    if not config.get("pretrain", "enabled"):
        return None
    path = base_path(out, preset)
    dtype = _dtype(config)
    if not path.exists():
        seed = config.get("experiment", "seed")
        model = TinyLM(model_config(config, preset, data.vocab), torch_generator(seed, f"init:{preset}"), dtype)
        cfg = TrainConfig(epochs=config.get("pretrain", "epochs"), virtual_batch_size=config.get("train", "virtual_batch_size"),
                          micro_batch_size=config.get("train", "micro_batch_size"),
                          learning_rate=config.get("pretrain", "learning_rate"),
                          seed=derive_seed(seed, f"pretrain:{preset}"))
        train(model, [data.encode(s) for s in data.pretrain], cfg)
        save_checkpoint(model, path)
    return load_checkpoint(path, dtype)


def initial_model(config: ExperimentConfig, data: PreparedData, preset: str, mode: str, stage: str,
                  base: TinyLM | None) -> TinyLM:
    seed = config.get("experiment", "seed")
    if base is not None:
        return TinyLM.from_base(base, mode, config.models[preset]["num_virtual_tokens"],
                                torch_generator(seed, f"tuning-init:{stage}"))
    return TinyLM(model_config(config, preset, data.vocab, mode), torch_generator(seed, f"init:{preset}"),
                  _dtype(config))


def fit_model(config: ExperimentConfig, model: TinyLM, sequences, mode: str, dp: bool, stage: str,
              epochs: int | None = None) -> TrainResult:
    seed = config.get("experiment", "seed")
    return train(model, sequences, train_config(config, mode, stage, epochs),
                 privacy_spec(config) if dp else None, torch_generator(seed, stage))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _train_record(result: TrainResult, n: int) -> dict:
    return {"examples": n, "steps": result.steps, "epoch_losses": [float(x) for x in result.epoch_losses],
            "noise_multiplier": result.noise_multiplier, "sampling_rate": result.sampling_rate,
            "epsilon": result.epsilon, "delta": result.delta}


# -- utility ---------------------------------------------------------------------------------


@torch.no_grad()
def utility_eval(model: TinyLM, sequences, label_positions, batch_size: int = 256) -> tuple[int, int]:
    """(correct, total): argmax at the label position equals the true label token."""
    if not sequences:
        raise ConfigError("utility evaluation set is empty")
    correct = 0
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        inputs, targets, _ = scoring_batch(model, chunk)
        pred = model(inputs).argmax(-1)
        for i, pos in enumerate(label_positions[start:start + batch_size]):
            correct += int(pred[i, pos] == targets[i, pos])
    return correct, len(sequences)


# -- stages ------------------------------------------------------------------------------------


class StageRecorder:
    """Status and wall-clock bookkeeping for one combination."""

    def __init__(self, directory: Path, timings: dict):
        self.dir = directory
        self.path = directory / "status.json"
        self.status = _read_json(self.path) if self.path.exists() else {}
        self.timings = timings

    def run(self, stage: str, fn: Callable[[], None], isolate: bool) -> bool:
        t0 = time.perf_counter()
        try:
            fn()
            self.status[stage] = STATUS_OK
            return True
        except MemoryError as exc:
            self.status[stage] = f"{STATUS_RESOURCE}: {exc}"
            if not isolate:
                raise StageError(stage, exc) from exc
            return False
        except Exception as exc:  # attacks are isolated from each other
            if isinstance(exc, RuntimeError) and "out of memory" in str(exc).lower():
                self.status[stage] = f"{STATUS_RESOURCE}: {exc}"
            else:
                self.status[stage] = f"{STATUS_FAILED}: {type(exc).__name__}: {exc}"
            logger.exception("stage %s failed in %s", stage, self.dir.name)
            if not isolate:
                raise StageError(stage, exc) from exc
            return False
        finally:
            self.timings[f"{self.dir.name}/{stage}"] = round(time.perf_counter() - t0, 3)
            _write_json(self.path, self.status)


def stage_train(config: ExperimentConfig, data: PreparedData, out: Path, timings: dict) -> None:
    attacks = config.get("experiment", "attacks")
    for preset, mode, dp in combinations(config):
        name = combo_name(preset, mode, dp)
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        rec = StageRecorder(d, timings)

        def clean():
            base = ensure_base(config, data, preset, out)
            model = initial_model(config, data, preset, mode, f"victim:{name}", base)
            seqs = [data.encode(s) for s in data.train]
            result = fit_model(config, model, seqs, mode, dp, f"victim:{name}")
            save_checkpoint(model, d / "victim.ckpt")
            _write_json(d / "train.json", _train_record(result, len(seqs)))
            if dp:
                write_ledger(result.ledger, d / "ledger.csv", result.delta)

        def canary_victim():
            base = ensure_base(config, data, preset, out)
            model = initial_model(config, data, preset, mode, f"canary-victim:{name}", base)
            seqs = data.canary_sequences()
            result = fit_model(config, model, seqs, mode, dp, f"canary-victim:{name}",
                               config.get("train", "canary_epochs"))
            save_checkpoint(model, d / "canary_victim.ckpt")
            _write_json(d / "train_canary.json", _train_record(result, len(seqs)))
            if dp:
                write_ledger(result.ledger, d / "ledger_canary.csv", result.delta)

        rec.run("train", clean, isolate=False)
        if "dea" in attacks:
            rec.run("train_canary", canary_victim, isolate=False)


def _load_victim(config, d: Path, file: str) -> TinyLM:
    path = d / file
    if not path.exists():
        raise IntegrityError(f"missing checkpoint {path}; run the train stage first")
    return load_checkpoint(path, _dtype(config))


def attack_utility(config, data: PreparedData, d: Path) -> None:
    model = _load_victim(config, d, "victim.ckpt")
    seqs = [data.encode(s) for s in data.evaluation]
    correct, total = utility_eval(model, seqs, [s.label_position for s in data.evaluation])
    _write_json(d / "utility.json", {"correct": correct, "total": total})


def attack_dea(config, data: PreparedData, d: Path) -> None:
    model = _load_victim(config, d, "canary_victim.ckpt")
    scores = dea_mod.score_candidates(model, data.plans, data.encode_text)
    dea_mod.write_scores(scores, d / "dea_scores.csv")


def mia_pool(data: PreparedData) -> tuple[list[TemplatedSample], np.ndarray]:
    pool = sorted([*data.train, *data.auxiliary], key=lambda s: s.id)
    return pool, np.array([s.role == ROLE_TRAIN for s in pool])


def attack_mia(config, data: PreparedData, d: Path, out: Path, preset: str, mode: str, dp: bool) -> None:
    g = config.get
    name = d.name
    seed = g("experiment", "seed")
    pool, labels = mia_pool(data)
    ids = [s.id for s in pool]
    seqs = [data.encode(s) for s in pool]
    assignment = mia_mod.assign_shadows(ids, g("mia", "n_shadows"), derive_seed(seed, "shadow-assignment"))
    base = ensure_base(config, data, preset, out)

    def train_shadow(members, j):
        stage = f"shadow:{name}:{j}"
        model = initial_model(config, data, preset, mode, stage, base)
        fit_model(config, model, [seqs[i] for i in members], mode, dp, stage)
        return model

    shadow = mia_mod.collect_shadow_scores(train_shadow, seqs, assignment)
    mia_mod.write_score_dump(d / "mia_shadow_scores.jsonl", ids, shadow, assignment.membership)
    target = _load_victim(config, d, "victim.ckpt")
    mia_mod.write_score_dump(d / "mia_target_scores.jsonl", ids, mia_mod.sample_scores(target, seqs), labels)
    if g("mia", "offline") and base is not None:
        offline = mia_mod.offline_lira(target, base, seqs, ids, labels)
        mia_mod.write_score_dump(d / "mia_offline_scores.jsonl", ids, offline.scores, labels)


def attack_eia(config, data: PreparedData, d: Path, out: Path) -> None:
    g = config.get
    seed = g("experiment", "seed")
    victim = _load_victim(config, d, "victim.ckpt")
    train_pairs = eia_mod.build_dataset(victim, [s.id for s in data.auxiliary], data.premise_ids(data.auxiliary))
    eval_pairs = eia_mod.build_dataset(victim, [s.id for s in data.evaluation], data.premise_ids(data.evaluation))
    for file, samples, pairs in (("eia_train_embeddings.jsonl", data.auxiliary, train_pairs),
                                 ("eia_eval_embeddings.jsonl", data.evaluation, eval_pairs)):
        eia_mod.write_embedding_dump(d / file, [p.sample_id for p in pairs], np.stack([p.embedding for p in pairs]),
                                     [data.raw[s.id].premise for s in samples])
    preset = g("eia", "attacker_model")
    base = ensure_base(config, data, preset, out)
    if base is not None:
        attacker = TinyLM.from_base(base, "full")
    else:
        attacker = TinyLM(model_config(config, preset, data.vocab), torch_generator(seed, f"attacker-init:{d.name}"),
                          _dtype(config))
    result = eia_mod.train_attacker(victim, attacker, train_pairs, g("eia", "epochs"), g("eia", "learning_rate"),
                                    g("eia", "batch_size"), derive_seed(seed, f"attacker:{d.name}"))
    special = data.vocab.special_ids
    scores, preds = eia_mod.eia_evaluate(result.attacker, result.alignment, eval_pairs, special, g("eia", "max_len"))
    refs = [p.reference for p in eval_pairs]
    sids = [p.sample_id for p in eval_pairs]
    detok = lambda ids: " ".join(data.vocab.decode_tokens([t for t in ids if t not in special]))
    eia_mod.write_reconstructions(d / "eia_reconstructions.csv", sids, [detok(r) for r in refs],
                                  [detok(p) for p in preds], scores)
    base_preds = eia_mod.random_token_predictions(refs, len(data.vocab), special,
                                                  derive_seed(seed, f"eia-baseline:{d.name}"))
    base_scores = eia_mod.score_reconstructions(refs, base_preds, special)
    eia_mod.write_reconstructions(d / "eia_baseline.csv", sids, [detok(r) for r in refs],
                                  [detok(p) for p in base_preds], base_scores)
    _write_json(d / "eia_train.json", {"epoch_losses": [float(x) for x in result.epoch_losses],
                                       "train_pairs": len(train_pairs)})


def stage_attacks(config: ExperimentConfig, data: PreparedData, out: Path, timings: dict,
                  only: tuple[str, ...] | None = None) -> dict[str, str]:
    """Run utility plus the selected attacks on every combination; returns failed stage names."""
    selected = [a for a in config.get("experiment", "attacks") if only is None or a in only]
    failures: dict[str, str] = {}
    for preset, mode, dp in combinations(config):
        d = out / combo_name(preset, mode, dp)
        if not (d / "victim.ckpt").exists():
            raise StageError("train", IntegrityError(f"no trained victim in {d}"))
        rec = StageRecorder(d, timings)
        if only is None or rec.status.get("utility") != STATUS_OK:
            rec.run("utility", lambda: attack_utility(config, data, d), isolate=False)
        jobs = {"dea": lambda: attack_dea(config, data, d),
                "mia": lambda: attack_mia(config, data, d, out, preset, mode, dp),
                "eia": lambda: attack_eia(config, data, d, out)}
        for attack in selected:
            if not rec.run(attack, jobs[attack], isolate=True):
                failures[f"{d.name}/{attack}"] = rec.status[attack]
    return failures


def write_config(config: ExperimentConfig, out: Path) -> None:
    """Resolved config with its hash; every dump in `out` was produced under this hash."""
    text = f"# config_hash = {config.hash()}\n{config.to_ini()}"
    (out / "config.ini").write_text(text, encoding="utf-8")


def write_timings(out: Path, timings: dict) -> None:
    path = out / "timing.json"
    existing = _read_json(path) if path.exists() else {}
    existing.update(timings)
    _write_json(path, existing)


def run_experiment(config: ExperimentConfig, out: str | Path | None = None):
    """split -> canaries -> victims -> attacks -> report. Returns the rendered report."""
    from privbench.report import report_render

    out = Path(out or config.get("experiment", "out"))
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    try:
        data = prepare_data(config)
        check_lengths(config, data)
        persist_data(data, out)
    except (ConfigError, DataError) as exc:
        raise StageError("data", exc) from exc
    write_config(config, out)
    stage_train(config, data, out, timings)
    failures = stage_attacks(config, data, out, timings)
    write_timings(out, timings)
    report = report_render(out, config)
    report.failures = failures
    return report
