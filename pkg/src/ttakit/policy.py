"""Test-time selection and ensembling policies.

Fixed policies average the target's class probabilities over a prefixed
transform list; instance-aware policies pick the k transforms with the
lowest predicted (or true, for the oracle) loss per input and average over
those.  ``inference_count`` counts target forward passes only: the loss
predictor is a separate, much smaller network.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import images
from .errors import ConfigError, DimensionError, ParameterError
from .images import CROP_RATIO, Transform, TransformKind, TransformSpace
from .labels import compute_transform_losses_batch
from .models import (
    LossPredictor,
    TargetClassifier,
    predictor_forward_batch,
    target_forward_batch,
)
from .seeds import mix


class PolicyKind(enum.Enum):
    IDENTITY = "identity"
    HFLIP_ENSEMBLE = "hflip"
    FIVE_CROP = "five_crop"
    TEN_CROP = "ten_crop"
    RANDOM_K = "random"
    OURS_K = "ours"
    ORACLE_K = "oracle"


_SELECTOR_KINDS = (PolicyKind.RANDOM_K, PolicyKind.OURS_K, PolicyKind.ORACLE_K)


@dataclass(frozen=True)
class SelectionPolicy:
    kind: PolicyKind
    k: int = 1
    compose_flip: bool = False
    seed: int = 0

    def validate(self, space_size: int) -> None:
        if self.kind in _SELECTOR_KINDS and not 1 <= self.k <= space_size:
            raise ParameterError(f"k={self.k} outside 1..{space_size}")
        if self.compose_flip and self.kind is not PolicyKind.OURS_K:
            raise ParameterError("compose_flip is only defined for the ours policy")

    def uses_predictor(self) -> bool:
        return self.kind is PolicyKind.OURS_K

    def is_selector(self) -> bool:
        return self.kind in _SELECTOR_KINDS

    def tag(self) -> str:
        if self.kind in _SELECTOR_KINDS:
            suffix = f"_k{self.k}" + ("_flip" if self.compose_flip else "")
            return self.kind.value + suffix
        return self.kind.value

    def inference_count(self) -> int:
        """Target forward passes per test image."""
        if self.kind is PolicyKind.IDENTITY:
            return 1
        if self.kind is PolicyKind.HFLIP_ENSEMBLE:
            return 2
        if self.kind is PolicyKind.FIVE_CROP:
            return 5
        if self.kind is PolicyKind.TEN_CROP:
            return 10
        if self.kind is PolicyKind.OURS_K and self.compose_flip:
            return 2 * self.k
        return self.k


@dataclass
class EnsemblePrediction:
    probabilities: np.ndarray
    chosen: list[int] = field(default_factory=list)
    inference_count: int = 0


def _ensure_model_side(imgs: np.ndarray, side: int) -> np.ndarray:
    if imgs.shape[1] != side or imgs.shape[2] != side:
        return images.resize_bicubic_batch(imgs, side, side)
    return imgs


def select_topk(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k smallest scores; ties break toward the lower index."""
    scores = np.asarray(scores)
    if not 1 <= k <= len(scores):
        raise ParameterError(f"k={k} outside 1..{len(scores)}")
    order = np.argsort(scores, kind="stable")
    return [int(i) for i in order[:k]]


def random_select(space: TransformSpace, k: int, seed: int) -> list[int]:
    """k distinct uniform indices (identity included); sorted ascending."""
    if not 1 <= k <= len(space):
        raise ParameterError(f"k={k} outside 1..{len(space)}")
    rng = np.random.default_rng(np.uint64(seed & (2**64 - 1)))
    picks = rng.choice(len(space), size=k, replace=False)
    return sorted(int(i) for i in picks)


def per_image_seed(policy_seed: int, image_id: int) -> int:
    return mix(policy_seed, image_id, 0x5EED)


def oracle_select(
    target: TargetClassifier, img: np.ndarray, label: int, space: TransformSpace, k: int
) -> list[int]:
    """Transforms with the k lowest true losses; evaluation-only upper bound."""
    losses = compute_transform_losses_batch(target, img[None], np.array([label]), space)[0]
    return select_topk(losses, k)


def predict_fixed_ensemble(
    target: TargetClassifier, img: np.ndarray, transforms: list[Transform]
) -> EnsemblePrediction:
    """Arithmetic mean of class probabilities over the transformed inputs."""
    if not transforms:
        raise ParameterError("transform list must be non-empty")
    stack = np.stack(
        [
            _ensure_model_side(images.apply_transform(img, t)[None], target.input_side)[0]
            for t in transforms
        ]
    )
    probs = target_forward_batch(target, stack)
    return EnsemblePrediction(probs.mean(axis=0), [], len(transforms))


def predict_instance_aware(
    target: TargetClassifier,
    predictor: LossPredictor,
    img: np.ndarray,
    space: TransformSpace,
    k: int,
    compose_flip: bool = False,
) -> EnsemblePrediction:
    """Score once with the predictor, ensemble the k best transforms."""
    scores = predictor_forward_batch(predictor, img[None])[0]
    if len(scores) != len(space):
        raise DimensionError(
            f"predictor emits {len(scores)} scores but the space has {len(space)}"
        )
    chosen = select_topk(scores, k)
    inputs = []
    for i in chosen:
        moved = images.apply_transform(img, space[i])
        inputs.append(moved)
        if compose_flip:
            inputs.append(images.hflip(moved))
    stack = _ensure_model_side(
        np.stack([_ensure_model_side(x[None], target.input_side)[0] for x in inputs]),
        target.input_side,
    )
    probs = target_forward_batch(target, stack)
    return EnsemblePrediction(probs.mean(axis=0), chosen, len(inputs))


# ---------------------------------------------------------------------------
# Batched evaluation paths (same math as the single-image ops)
# ---------------------------------------------------------------------------

def transform_prob_cache(
    target: TargetClassifier, imgs: np.ndarray, space: TransformSpace
) -> np.ndarray:
    """Class probabilities for every (transform, image); shape (|T|, N, C)."""
    out = np.empty((len(space), len(imgs), target.class_count), dtype=np.float32)
    for ti, transform in enumerate(space.transforms):
        moved = images.batch_apply_transform(imgs, transform)
        moved = _ensure_model_side(moved, target.input_side)
        out[ti] = target_forward_batch(target, moved)
    return out


def ensemble_from_cache(cache: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Mean cached probabilities over each row's chosen transform indices."""
    n = cache.shape[1]
    k = chosen.shape[1]
    acc = np.zeros((n, cache.shape[2]), dtype=np.float64)
    for j in range(k):
        acc += cache[chosen[:, j], np.arange(n)]
    return (acc / k).astype(np.float32)


def crop_ensemble_batch(
    target: TargetClassifier, imgs: np.ndarray, n_crops: int
) -> np.ndarray:
    """5/10-crop ensemble probabilities for a stack of images."""
    side = min(imgs.shape[1], imgs.shape[2])
    crop_to = int(round(CROP_RATIO * side))
    probs = None
    count = 0
    # crop boxes are shared across the batch because shapes are uniform
    views = []
    for corner in range(5):
        top, left = images._crop_box(imgs.shape[1], imgs.shape[2], crop_to, corner)
        views.append(imgs[:, top:top + crop_to, left:left + crop_to, :])
    if n_crops == 10:
        views.extend(v[:, :, ::-1, :] for v in list(views))
    for view in views:
        resized = _ensure_model_side(np.ascontiguousarray(view), target.input_side)
        p = target_forward_batch(target, resized)
        probs = p if probs is None else probs + p
        count += 1
    return probs / count
