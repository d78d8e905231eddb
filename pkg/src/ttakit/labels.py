"""Ground-truth relative-loss labels over the transform space.

For every image state (clean or corrupted) the frozen target's cross-entropy
is evaluated under each candidate transform; the raw loss vector is
softmax-normalized into relative losses.  Records are persisted in an
append-only, human-inspectable store: a JSON header line followed by one
tab-separated record per line.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .corrupt import KIND_IDS, CorruptionKind, corruption_sets, state_image
from .data import LabeledDataset
from .errors import (
    ConsistencyError,
    DimensionError,
    NumericError,
    ParameterError,
    StorageError,
)
from .images import TransformSpace, batch_apply_transform, resize_bicubic_batch
from .models import TargetClassifier, _to_batch_tensor, param_fingerprint
from .seeds import mix

STORE_VERSION = 1


@dataclass(frozen=True)
class Perturbation:
    """State descriptor: a corruption kind/severity/seed, or clean."""

    kind: str | None = None
    severity: int = 0
    seed: int = 0

    def is_clean(self) -> bool:
        return self.kind is None

    def encode(self) -> str:
        if self.is_clean():
            return "clean"
        return f"{self.kind}:{self.severity}:{self.seed}"

    @staticmethod
    def parse(text: str) -> "Perturbation":
        if text == "clean":
            return Perturbation()
        kind, severity, seed = text.split(":")
        return Perturbation(kind, int(severity), int(seed))


@dataclass(frozen=True)
class LossLabelRecord:
    image_id: int
    perturbation: Perturbation
    raw_losses: np.ndarray       # (|T|,) float64, finite, >= 0
    relative_losses: np.ndarray  # softmax of raw_losses

    def validate(self) -> None:
        raw, rel = self.raw_losses, self.relative_losses
        if raw.shape != rel.shape or raw.ndim != 1:
            raise DimensionError("raw and relative loss vectors must match")
        if not np.all(np.isfinite(raw)) or raw.min() < 0.0:
            raise NumericError("raw losses must be finite and non-negative")
        if abs(rel.sum() - 1.0) > 1e-6 or rel.min() <= 0.0 or rel.max() >= 1.0:
            raise NumericError("relative losses must be a strict interior simplex point")
        if int(np.argmin(raw)) != int(np.argmin(rel)):
            raise ConsistencyError("normalization changed the argmin")

    def key(self) -> tuple[int, str]:
        return (self.image_id, self.perturbation.encode())


def normalize_relative(raw: np.ndarray) -> np.ndarray:
    """Stable softmax of the raw losses; strictly order-preserving."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.isnan(raw).any():
        raise NumericError("NaN in raw loss vector")
    e = np.exp(raw - raw.max())
    return e / e.sum()


def compute_transform_losses_batch(
    target: TargetClassifier,
    imgs: np.ndarray,
    labels: np.ndarray,
    space: TransformSpace,
) -> np.ndarray:
    """Cross-entropy -log p(label) per (image, transform); shape (N, |T|)."""
    if not target.frozen:
        raise ConsistencyError("target must be frozen before label generation")
    if labels.min() < 0 or labels.max() >= target.class_count:
        raise ParameterError("label outside [0, class_count)")
    n = len(imgs)
    out = np.empty((n, len(space)), dtype=np.float64)
    rows = torch.arange(n)
    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    side = target.input_side
    with torch.no_grad():
        for ti, transform in enumerate(space.transforms):
            moved = batch_apply_transform(imgs, transform)
            if moved.shape[1] != side or moved.shape[2] != side:
                moved = resize_bicubic_batch(moved, side, side)
            logp = F.log_softmax(target(_to_batch_tensor(moved)), dim=1)
            out[:, ti] = (-logp[rows, labels_t]).numpy().astype(np.float64)
    return out


def compute_transform_losses(
    target: TargetClassifier, img: np.ndarray, label: int, space: TransformSpace
) -> np.ndarray:
    return compute_transform_losses_batch(target, img[None], np.array([label]), space)[0]


# ---------------------------------------------------------------------------
# Sampling plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    """Which perturbed states get labels for each image."""

    corrupted_per_image: int = 3
    include_clean: bool = True
    kinds: tuple[CorruptionKind, ...] = tuple(corruption_sets()[0])
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    seed: int = 0

    def states_for(self, image_id: int) -> list[Perturbation]:
        states: list[Perturbation] = []
        if self.include_clean:
            states.append(Perturbation())
        for draw in range(self.corrupted_per_image):
            rng = np.random.default_rng(np.uint64(mix(self.seed, image_id, 0x57A7E, draw)))
            kind = self.kinds[int(rng.integers(len(self.kinds)))]
            severity = int(self.severities[int(rng.integers(len(self.severities)))])
            seed = mix(self.seed, image_id, KIND_IDS[kind], severity, draw)
            states.append(Perturbation(kind.value, severity, seed))
        return states


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

@dataclass
class LabelStore:
    space_fingerprint: str
    target_fingerprint: str
    space_size: int
    records: dict[tuple[int, str], LossLabelRecord] = field(default_factory=dict)

    def add(self, record: LossLabelRecord) -> None:
        key = record.key()
        if key in self.records:
            raise ConsistencyError(f"duplicate record key {key}")
        self.records[key] = record

    def records_by_id(self) -> dict[int, list[LossLabelRecord]]:
        by_id: dict[int, list[LossLabelRecord]] = {}
        for rec in self.records.values():
            by_id.setdefault(rec.image_id, []).append(rec)
        return by_id

    def header_line(self) -> str:
        return json.dumps(
            {
                "version": STORE_VERSION,
                "space_fingerprint": self.space_fingerprint,
                "target_fingerprint": self.target_fingerprint,
                "space_size": self.space_size,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


def _format_record(rec: LossLabelRecord) -> str:
    nums = [f"{x:.9g}" for x in rec.raw_losses] + [f"{x:.9g}" for x in rec.relative_losses]
    return "\t".join([str(rec.image_id), rec.perturbation.encode(), *nums])


def _parse_record(line: str, space_size: int) -> LossLabelRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 2 + 2 * space_size:
        raise StorageError(f"malformed store record: {len(parts)} fields")
    raw = np.array([float(x) for x in parts[2:2 + space_size]], dtype=np.float64)
    rel = np.array([float(x) for x in parts[2 + space_size:]], dtype=np.float64)
    return LossLabelRecord(int(parts[0]), Perturbation.parse(parts[1]), raw, rel)


def load_label_store(path) -> LabelStore:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise StorageError(f"{path}: bad store header: {exc}") from exc
        if header.get("version") != STORE_VERSION:
            raise StorageError(f"{path}: unsupported store version {header.get('version')}")
        store = LabelStore(
            header["space_fingerprint"], header["target_fingerprint"], header["space_size"]
        )
        for line in f:
            if line.strip():
                store.add(_parse_record(line, store.space_size))
    return store


def generate_label_store(
    target: TargetClassifier,
    data: LabeledDataset,
    space: TransformSpace,
    plan: SamplingPlan,
    out_path,
    workers: int = 1,
    block_size: int = 64,
) -> LabelStore:
    """Compute and persist one record per planned (image, state).

    Resumable: existing keys are skipped and fingerprints must match.  Blocks
    of images are processed by a worker pool but written in id order, so the
    store bytes are independent of the worker count.
    """
    if not target.frozen:
        raise ConsistencyError("target must be frozen before label generation")
    out_path = Path(out_path)
    space_fp = space.fingerprint()
    target_fp = param_fingerprint(target)
    if out_path.exists():
        store = load_label_store(out_path)
        if store.space_fingerprint != space_fp or store.target_fingerprint != target_fp:
            raise ConsistencyError(
                f"{out_path}: store was built against different space/target fingerprints"
            )
    else:
        store = LabelStore(space_fp, target_fp, len(space))
        try:
            with open(out_path, "w", encoding="utf-8") as f:
                f.write(store.header_line() + "\n")
        except OSError as exc:
            raise StorageError(f"cannot create label store {out_path}: {exc}") from exc

    order = np.argsort(data.ids)
    todo: list[tuple[int, Perturbation]] = []  # (position in data, state)
    for pos in order:
        image_id = int(data.ids[pos])
        for pert in plan.states_for(image_id):
            if (image_id, pert.encode()) not in store.records:
                todo.append((int(pos), pert))

    def process(block: list[tuple[int, Perturbation]]) -> list[LossLabelRecord]:
        imgs = np.stack(
            [
                state_image(data.images[pos], pert.kind, pert.severity, pert.seed)
                for pos, pert in block
            ]
        )
        labels = data.labels[[pos for pos, _ in block]]
        raw = compute_transform_losses_batch(target, imgs, labels, space)
        recs = []
        for row, (pos, pert) in enumerate(block):
            rec = LossLabelRecord(
                int(data.ids[pos]), pert, raw[row], normalize_relative(raw[row])
            )
            rec.validate()
            recs.append(rec)
        return recs

    blocks = [todo[i:i + block_size] for i in range(0, len(todo), block_size)]
    try:
        with open(out_path, "a", encoding="utf-8") as f:
            if workers <= 1:
                produced = map(process, blocks)
            else:
                pool = ThreadPoolExecutor(max_workers=workers)
                produced = pool.map(process, blocks)
            for recs in produced:
                for rec in recs:
                    store.add(rec)
                    f.write(_format_record(rec) + "\n")
            if workers > 1:
                pool.shutdown()
    except OSError as exc:
        raise StorageError(f"cannot append to label store {out_path}: {exc}") from exc
    return store
