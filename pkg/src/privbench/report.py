"""Report rendering from persisted dumps.

Everything here reads files written by the attack stages and nothing else, so
rendering twice from the same dumps gives identical bytes. Wall-clock times
live in ``timing.json`` and never enter the rendered tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from privbench import canary as canary_mod
from privbench import dea as dea_mod
from privbench import eia as eia_mod
from privbench import mia as mia_mod
from privbench.config import KEYS, ExperimentConfig, render_value
from privbench.errors import IntegrityError
from privbench.metrics import auc, format_percent, mia_metrics, write_metrics_csv
from privbench.pipeline import STATUS_OK, combinations, combo_name

SUMMARY_COLUMNS = ("model", "DP?", "tuning", "utility", "ER", "mean_exposure", "spearman", "AUC", "TPR@0.1%",
                   "TPR@1%", "offline_AUC", "Pre", "Rec", "F1", "baseline_F1", "epsilon", "status")


@dataclass
class AttackReport:
    config_hash: str
    seed: int
    rows: list[dict]
    notes: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)


def _need(path: Path) -> Path:
    if not path.exists():
        raise IntegrityError(f"missing dump {path}")
    return path


def _json(path: Path):
    return json.loads(_need(path).read_text(encoding="utf-8"))


def _eia_counts(path: Path) -> list[tuple[int, int, int]]:
    rows = eia_mod.read_reconstructions(_need(path))
    return [(int(r["overlap"]), int(r["predicted_tokens"]), int(r["reference_tokens"])) for r in rows]


def combo_metrics(directory: Path, config: ExperimentConfig, plans) -> dict:
    """All metrics of one combination, recomputed from its dumps."""
    status = _json(directory / "status.json")
    row: dict = {"status": {k: status[k] for k in sorted(status)}}
    utility = _json(directory / "utility.json") if status.get("utility") == STATUS_OK else None
    row["utility"] = utility["correct"] / utility["total"] if utility else None
    row["epsilon"] = _json(directory / "train.json")["epsilon"] if status.get("train") == STATUS_OK else None

    if status.get("dea") == STATUS_OK:
        scores = dea_mod.read_scores(_need(directory / "dea_scores.csv"))
        epochs = config.get("train", "canary_epochs")
        rep = dea_mod.build_report(scores, {p.format.name: p.format.size for p in plans}, epochs)
        dea_mod.write_exposure_csv(rep, directory / "dea_exposure.csv")
        dea_mod.write_scatter(rep, directory / "dea_scatter.csv")
        row.update(ER=rep.exposure_rate, mean_exposure=rep.mean_exposure,
                   spearman=dea_mod.repetition_exposure_spearman(rep),
                   dea_formats={f.format: {"mean_exposure": f.mean_exposure, "exposure_rate": f.exposure_rate,
                                           "size": f.size, "inserted": f.inserted} for f in rep.formats})

    if status.get("mia") == STATUS_OK:
        ids, shadow, member = mia_mod.read_score_dump(_need(directory / "mia_shadow_scores.jsonl"))
        t_ids, target, labels = mia_mod.read_score_dump(_need(directory / "mia_target_scores.jsonl"))
        if t_ids != ids:
            raise IntegrityError(f"{directory}: target and shadow dumps cover different samples")
        assignment = mia_mod.ShadowAssignment(ids, member)
        result = mia_mod.online_lira(shadow, assignment, target, labels, config.get("mia", "pooled_variance"))
        row.update(mia_metrics(result.scores, result.labels))
        row["mia_samples"] = len(ids)
        row["n_shadows"] = int(member.shape[1])
        offline = directory / "mia_offline_scores.jsonl"
        if offline.exists():
            _, off_scores, off_labels = mia_mod.read_score_dump(offline)
            row["offline_AUC"] = auc(off_scores, off_labels)

    if status.get("eia") == STATUS_OK:
        s = eia_mod.scores_from_counts(_eia_counts(directory / "eia_reconstructions.csv"))
        b = eia_mod.scores_from_counts(_eia_counts(directory / "eia_baseline.csv"))
        row.update(Pre=s.precision, Rec=s.recall, F1=s.f1, macro_F1=s.macro_f1, baseline_F1=b.f1)
    return row


def _cell(key: str, value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    if key in ("mean_exposure", "spearman"):
        return f"{value:.3f}"
    if key == "epsilon":
        return f"{value:.4f}"
    return format_percent(value)


def _status_cell(status: dict) -> str:
    bad = [f"{k}={v.split(':')[0]}" for k, v in status.items() if v != STATUS_OK]
    return "ok" if not bad else ";".join(bad)


def _jsonable(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def desk_deviations(config: ExperimentConfig) -> list[str]:
    """One note per key whose value differs from the full-scale setting."""
    out = []
    for k in KEYS:
        value = config.get(k.section, k.name)
        if k.full_scale is not None and value != k.full_scale:
            out.append(f"desk deviation: {k.dotted} = {render_value(value)} (full scale {render_value(k.full_scale)})")
    return out


def report_render(out: str | Path, config: ExperimentConfig, tables: tuple[str, ...] = ("summary", "metrics", "json")
                  ) -> AttackReport:
    out = Path(out)
    plans = []
    if "dea" in config.get("experiment", "attacks"):
        plans = canary_mod.read_plans(_need(out / "canary_plans.jsonl"))
    rows = []
    for preset, mode, dp in combinations(config):
        d = out / combo_name(preset, mode, dp)
        row = combo_metrics(d, config, plans)
        row.update(model=preset, tuning=mode, **{"DP?": "yes" if dp else "no"}, combination=d.name)
        rows.append(row)

    h = config.hash()
    notes = ["rates and MIA/EIA metrics in %; mean exposure in bits over inserted canaries only",
             "spearman is over every candidate, held-out candidates counted with zero repetitions",
             f"shadow models: {config.get('mia', 'n_shadows')}",
             "DEA reads the canary-inserted victim; MIA, EIA and utility read the clean victim",
             *desk_deviations(config)]
    if "summary" in tables:
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_hash", *SUMMARY_COLUMNS])
            for r in rows:
                cells = [r["model"], r["DP?"], r["tuning"]]
                cells += [_cell(k, r.get(k)) for k in SUMMARY_COLUMNS[3:-1]]
                w.writerow([h, *cells, _status_cell(r["status"])])
    if "metrics" in tables:
        write_metrics_csv(rows, out / "metrics.csv", leading=("model", "DP?", "tuning"))
    if "json" in tables:
        doc = {"config_hash": h, "seed": config.get("experiment", "seed"), "notes": notes,
               "rows": [_jsonable({k: v for k, v in r.items()}) for r in rows]}
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return AttackReport(h, config.get("experiment", "seed"), rows, notes)
