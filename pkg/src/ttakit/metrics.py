"""Metrics, cost accounting, and evaluation reports.

Error tables are exact ratios recomputable from persisted per-image outcome
records; CE_c averages one corruption's five severity errors and mCE
averages CE_c within a corruption group (training kinds vs held-out kinds,
reported separately).  All CSV output is RFC-4180-style with dot decimals
and 4 decimal places.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import policy as policy_mod
from .corrupt import CorruptionKind, corruption_sets, load_manifest
from .data import LabeledDataset, load_cifar_binary
from .errors import ConfigError, DimensionError, ParameterError, StorageError
from .images import TransformSpace
from .labels import LabelStore, compute_transform_losses_batch
from .models import (
    LossPredictor,
    TargetClassifier,
    predictor_forward_batch,
)
from .policy import PolicyKind, SelectionPolicy
from .ranking import exact_spearman
from .seeds import mix


def corruption_error(errors) -> float:
    """CE_c: the mean of one corruption's five severity errors."""
    errors = list(errors)
    if len(errors) != 5:
        raise DimensionError(f"CE_c needs exactly 5 severity errors, got {len(errors)}")
    if any(not 0.0 <= e <= 100.0 for e in errors):
        raise ParameterError("errors must be percentages in [0, 100]")
    return float(np.mean(errors))


def mce(ce_values) -> float:
    """Mean of CE_c values over a corruption group."""
    ce_values = list(ce_values)
    if not ce_values:
        raise ParameterError("mCE of an empty group is undefined")
    return float(np.mean(ce_values))


def relative_cost(policy: SelectionPolicy, target_macs: int, predictor_macs: int) -> float:
    """Inference compute relative to one plain target forward pass."""
    if target_macs <= 0 or predictor_macs < 0:
        raise ParameterError("MAC counts must be positive")
    extra = predictor_macs if policy.uses_predictor() else 0
    return (policy.inference_count() * target_macs + extra) / target_macs


@dataclass
class CellResult:
    error: float
    count: int


@dataclass
class MetricsReport:
    policy_tag: str
    clean_error: float
    clean_count: int
    cells: dict[str, dict[int, CellResult]]            # kind value -> severity -> result
    ce: dict[str, float]                               # kind value -> CE_c
    mce_known: float | None
    mce_heldout: float | None
    relative_cost: float
    spearman_loss_valid: float | None = None
    spearman_heldout: float | None = None
    selection_rates: dict[str, list[float]] = field(default_factory=dict)
    transform_labels: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "policy": self.policy_tag,
            "clean_error": self.clean_error,
            "clean_count": self.clean_count,
            "cells": {
                kind: {str(s): [c.error, c.count] for s, c in severities.items()}
                for kind, severities in self.cells.items()
            },
            "ce": self.ce,
            "mce_known": self.mce_known,
            "mce_heldout": self.mce_heldout,
            "relative_cost": self.relative_cost,
            "spearman_loss_valid": self.spearman_loss_valid,
            "spearman_heldout": self.spearman_heldout,
            "selection_rates": self.selection_rates,
            "transform_labels": self.transform_labels,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        d = json.loads(text)
        return MetricsReport(
            policy_tag=d["policy"],
            clean_error=d["clean_error"],
            clean_count=d["clean_count"],
            cells={
                kind: {int(s): CellResult(*v) for s, v in severities.items()}
                for kind, severities in d["cells"].items()
            },
            ce=d["ce"],
            mce_known=d["mce_known"],
            mce_heldout=d["mce_heldout"],
            relative_cost=d["relative_cost"],
            spearman_loss_valid=d["spearman_loss_valid"],
            spearman_heldout=d["spearman_heldout"],
            selection_rates=d["selection_rates"],
            transform_labels=d["transform_labels"],
        )


# ---------------------------------------------------------------------------
# Policy execution over one dataset
# ---------------------------------------------------------------------------

def _run_policy(
    target: TargetClassifier,
    predictor: LossPredictor | None,
    policy: SelectionPolicy,
    data: LabeledDataset,
    space: TransformSpace,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (correct bool array, chosen index matrix or None)."""
    imgs, labels = data.images, data.labels
    kind = policy.kind
    if kind is PolicyKind.IDENTITY:
        probs = policy_mod.transform_prob_cache(target, imgs, _identity_only(space))[0]
        return probs.argmax(1) == labels, None
    if kind is PolicyKind.HFLIP_ENSEMBLE:
        ident = policy_mod._ensure_model_side(imgs, target.input_side)
        p = policy_mod.target_forward_batch(target, ident)
        p = p + policy_mod.target_forward_batch(target, ident[:, :, ::-1, :].copy())
        return (p / 2).argmax(1) == labels, None
    if kind in (PolicyKind.FIVE_CROP, PolicyKind.TEN_CROP):
        n = 5 if kind is PolicyKind.FIVE_CROP else 10
        probs = policy_mod.crop_ensemble_batch(target, imgs, n)
        return probs.argmax(1) == labels, None
    if kind is PolicyKind.RANDOM_K:
        chosen = np.stack(
            [
                policy_mod.random_select(
                    space, policy.k, policy_mod.per_image_seed(policy.seed, int(i))
                )
                for i in data.ids
            ]
        )
    elif kind is PolicyKind.ORACLE_K:
        losses = compute_transform_losses_batch(target, imgs, labels, space)
        chosen = np.stack([policy_mod.select_topk(row, policy.k) for row in losses])
    elif kind is PolicyKind.OURS_K:
        if predictor is None:
            raise ConfigError(
                "policy 'ours' needs a loss predictor; run train-predictor first"
            )
        scores = predictor_forward_batch(predictor, imgs)
        if scores.shape[1] != len(space):
            raise DimensionError(
                f"predictor emits {scores.shape[1]} scores for a {len(space)}-transform space"
            )
        chosen = np.stack([policy_mod.select_topk(row, policy.k) for row in scores])
    else:
        raise ConfigError(f"unhandled policy kind {kind}")

    cache = policy_mod.transform_prob_cache(target, imgs, space)
    probs = policy_mod.ensemble_from_cache(cache, chosen)
    if policy.compose_flip:
        flipped_cache = policy_mod.transform_prob_cache(
            target, imgs[:, :, ::-1, :].copy(), space
        )
        probs = (probs + policy_mod.ensemble_from_cache(flipped_cache, chosen)) / 2.0
    return probs.argmax(1) == labels, chosen


def _identity_only(space: TransformSpace) -> TransformSpace:
    return TransformSpace((space[space.identity_index()],))


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------

def evaluate_policy(
    target: TargetClassifier,
    predictor: LossPredictor | None,
    policy: SelectionPolicy,
    clean_set: LabeledDataset,
    corrupted_dir,
    space: TransformSpace,
    out_dir=None,
    max_per_cell: int | None = None,
) -> MetricsReport:
    """Error table over clean + every (corruption, severity) cell.

    ``max_per_cell`` caps how many images of each corrupted cell are scored
    (taken in manifest order) to bound desk-scale runtimes; counts are
    recorded per cell.  Per-image outcomes are persisted under ``out_dir``
    so every aggregate is recomputable.
    """
    policy.validate(len(space))
    if policy.uses_predictor() and predictor is None:
        raise ConfigError("policy 'ours' needs a loss predictor; run train-predictor first")
    entries = load_manifest(corrupted_dir)
    cells: dict[tuple[str, int], str] = {}
    for e in entries:
        cells.setdefault((e.kind.value, e.severity), e.path)

    outcome_lines: list[str] = []
    selection_counts: dict[str, np.ndarray] = {}

    def record(tag: str, data: LabeledDataset, correct: np.ndarray, chosen) -> None:
        for row, img_id in enumerate(data.ids):
            picked = "" if chosen is None else ",".join(str(c) for c in chosen[row])
            outcome_lines.append(
                f"{tag}\t{int(img_id)}\t{policy.tag()}\t{picked}\t{int(correct[row])}"
            )
        if chosen is not None:
            counts = np.zeros(len(space), dtype=np.int64)
            for row in chosen:
                for c in row:
                    counts[c] += 1
            selection_counts[tag] = counts

    correct_clean, chosen_clean = _run_policy(target, predictor, policy, clean_set, space)
    record("clean", clean_set, correct_clean, chosen_clean)
    clean_error = 100.0 * (1.0 - correct_clean.mean())

    cell_results: dict[str, dict[int, CellResult]] = {}
    for (kind_value, severity), file_name in sorted(cells.items()):
        cell_data = load_cifar_binary(
            Path(corrupted_dir) / file_name, class_count=clean_set.class_count
        )
        if max_per_cell is not None and len(cell_data) > max_per_cell:
            cell_data = cell_data.subset(np.arange(max_per_cell))
        correct, chosen = _run_policy(target, predictor, policy, cell_data, space)
        record(f"{kind_value}:s{severity}", cell_data, correct, chosen)
        cell_results.setdefault(kind_value, {})[severity] = CellResult(
            100.0 * (1.0 - correct.mean()), len(cell_data)
        )

    ce: dict[str, float] = {}
    for kind_value, severities in cell_results.items():
        if len(severities) == 5:
            ce[kind_value] = corruption_error(
                [severities[s].error for s in sorted(severities)]
            )
    training_kinds = {k.value for k in corruption_sets()[0]}
    heldout_kinds = {k.value for k in corruption_sets()[1]}
    known = [v for k, v in ce.items() if k in training_kinds]
    heldout = [v for k, v in ce.items() if k in heldout_kinds]

    rates = {
        tag: (counts / counts.sum()).tolist()
        for tag, counts in selection_counts.items()
    }
    report = MetricsReport(
        policy_tag=policy.tag(),
        clean_error=float(clean_error),
        clean_count=len(clean_set),
        cells=cell_results,
        ce=ce,
        mce_known=mce(known) if known else None,
        mce_heldout=mce(heldout) if heldout else None,
        relative_cost=relative_cost(
            policy, target.mac_count(), predictor.mac_count() if predictor else 0
        ),
        selection_rates=rates,
        transform_labels=space.labels(),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"{policy.tag()}_outcomes.tsv").write_text(
                "".join(line + "\n" for line in outcome_lines), encoding="utf-8"
            )
        except OSError as exc:
            raise StorageError(f"cannot write outcomes: {exc}") from exc
    return report


def error_table_csv(report: MetricsReport, path) -> None:
    lines = ["corruption,severity,error,count"]
    lines.append(f"clean,0,{report.clean_error:.4f},{report.clean_count}")
    for kind_value in sorted(report.cells):
        for severity in sorted(report.cells[kind_value]):
            cell = report.cells[kind_value][severity]
            lines.append(f"{kind_value},{severity},{cell.error:.4f},{cell.count}")
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def selection_rate_report(report: MetricsReport, path) -> None:
    """CSV of per-(corruption, severity) selection fractions per transform."""
    if not report.selection_rates:
        raise ParameterError(f"policy {report.policy_tag} recorded no selections")
    header = "corruption,severity," + ",".join(report.transform_labels)
    lines = [header]

    def row_for(tag: str) -> str:
        rates = report.selection_rates[tag]
        if tag == "clean":
            kind_value, severity = "clean", 0
        else:
            kind_value, s = tag.rsplit(":s", 1)
            severity = int(s)
        return f"{kind_value},{severity}," + ",".join(f"{r:.4f}" for r in rates)

    if "clean" in report.selection_rates:
        lines.append(row_for("clean"))
    for tag in sorted(t for t in report.selection_rates if t != "clean"):
        lines.append(row_for(tag))
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# Predictor correlation
# ---------------------------------------------------------------------------

def predictor_correlation(
    predictor: LossPredictor, store: LabelStore, data: LabeledDataset
) -> tuple[float, int]:
    """Mean exact Spearman of predictor scores vs stored ground truth.

    Evaluates every stored state of every image in ``data``; NaN records
    (constant truth) are skipped.  Returns (mean, contributing count);
    the mean is NaN when nothing contributes.
    """
    from .corrupt import state_image

    by_id = store.records_by_id()
    id_to_pos = {int(v): i for i, v in enumerate(data.ids)}
    imgs, truths = [], []
    for img_id, pos in id_to_pos.items():
        for rec in by_id.get(img_id, []):
            pert = rec.perturbation
            imgs.append(state_image(data.images[pos], pert.kind, pert.severity, pert.seed))
            truths.append(rec.relative_losses)
    if not imgs:
        return float("nan"), 0
    scores = predictor_forward_batch(predictor, np.stack(imgs))
    rhos = []
    for score, truth in zip(scores, truths):
        rho = exact_spearman(score, truth)
        if not math.isnan(rho):
            rhos.append(rho)
    if not rhos:
        return float("nan"), 0
    return float(np.mean(rhos)), len(rhos)


def heldout_correlation(
    predictor: LossPredictor,
    target: TargetClassifier,
    data: LabeledDataset,
    space: TransformSpace,
    seed: int = 0,
    max_states: int = 256,
) -> tuple[float, int]:
    """Spearman vs freshly computed true losses on held-out corrupted states."""
    from .corrupt import CorruptionSpec, apply_corruption, image_seed

    heldout_kinds = corruption_sets()[1]
    rng = np.random.default_rng(np.uint64(mix(seed, 0xAE)))
    n_states = min(max_states, len(data))
    picks = rng.choice(len(data), size=n_states, replace=False)
    imgs, labels = [], []
    for i in picks:
        kind = heldout_kinds[int(rng.integers(len(heldout_kinds)))]
        severity = int(rng.integers(1, 6))
        spec = CorruptionSpec(
            kind, severity, image_seed(seed, int(data.ids[i]), kind, severity)
        )
        imgs.append(apply_corruption(data.images[i], spec))
        labels.append(data.labels[i])
    imgs = np.stack(imgs)
    labels = np.asarray(labels)
    truths = compute_transform_losses_batch(target, imgs, labels, space)
    scores = predictor_forward_batch(predictor, imgs)
    rhos = [
        r
        for r in (exact_spearman(s, t) for s, t in zip(scores, truths))
        if not math.isnan(r)
    ]
    if not rhos:
        return float("nan"), 0
    return float(np.mean(rhos)), len(rhos)
