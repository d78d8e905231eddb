"""Target classifier and loss predictor: architectures, training, checkpoints.

Both nets are small CPU-friendly CNNs.  The target is a conv/relu/pool stack
with a global-average-pool head; the predictor taps globally pooled features
after every stage, projects them to a common width, and maps the
concatenation to one raw score per candidate transform (lower = better).

Determinism contract: weight init draws from explicit per-layer generators,
and each training run seeds the global torch RNG, so a fixed seed plus
single-threaded execution reproduces checkpoints bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ranking
from .corrupt import state_image
from .data import LabeledDataset
from .errors import (
    ConsistencyError,
    DimensionError,
    FormatError,
    ParameterError,
    TrainingError,
)
from .images import resize_bicubic_batch
from .ranking import RankingObjectiveConfig
from .seeds import mix

CHECKPOINT_MAGIC = b"TTAS"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.025
    epochs: int = 25
    batch_size: int = 128
    weight_decay: float = 1e-5
    momentum: float = 0.9
    dropout: float = 0.3
    ema_momentum: float = 0.99
    seed: int = 0
    batch_repetition: int = 1        # predictor only: copies of one image per batch
    cutout_max_coverage: float = 0.5  # predictor only: max masked fraction of each side
    clean_prob: float = 0.25          # predictor only: chance of the uncorrupted state

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("learning_rate > 0, epochs >= 0, batch_size >= 1 required")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.ema_momentum < 1.0:
            raise ParameterError("dropout and ema_momentum must be in [0, 1)")
        if self.weight_decay < 0 or not 0.0 <= self.momentum < 1.0:
            raise ParameterError("weight_decay >= 0 and momentum in [0, 1) required")
        if self.batch_repetition < 1 or not 0.0 <= self.cutout_max_coverage <= 1.0:
            raise ParameterError("batch_repetition >= 1, cutout coverage in [0, 1]")
        if not 0.0 <= self.clean_prob <= 1.0:
            raise ParameterError("clean_prob must be in [0, 1]")


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=gen)
        if conv.bias is not None:
            conv.bias.uniform_(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), generator=gen)


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = math.sqrt(6.0 / lin.in_features)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-1.0 / math.sqrt(lin.in_features), 1.0 / math.sqrt(lin.in_features), generator=gen)


class TargetClassifier(nn.Module):
    """Conv blocks -> global average pool -> linear head to class logits."""

    def __init__(
        self,
        class_count: int,
        input_side: int = 32,
        in_channels: int = 3,
        channels: tuple[int, ...] = (32, 64, 128),
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.class_count = class_count
        self.input_side = input_side
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.frozen = False
        gen = torch.Generator().manual_seed(mix(seed, 0xC0) & (2**63 - 1))
        convs = []
        cin = in_channels
        for cout in self.channels:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            _init_conv(conv, gen)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(cin, class_count)
        _init_linear(self.head, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.max_pool2d(F.relu(conv(x)), 2)
        x = x.mean(dim=(2, 3))
        return self.head(x)

    def freeze(self) -> "TargetClassifier":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def descriptor(self) -> dict:
        return {
            "arch": "target",
            "class_count": self.class_count,
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
        }

    def mac_count(self) -> int:
        side = self.input_side
        macs = 0
        cin = self.in_channels
        for cout in self.channels:
            macs += 9 * cin * cout * side * side
            side //= 2
            cin = cout
        return macs + cin * self.class_count


class LossPredictor(nn.Module):
    """Multi-level-tap CNN scoring each candidate transform of the input."""

    def __init__(
        self,
        output_dim: int,
        input_side: int = 32,
        in_channels: int = 3,
        channels: tuple[int, ...] = (8, 16, 32),
        tap_width: int = 32,
        feature_dropout: float = 0.3,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.output_dim = output_dim
        self.input_side = input_side
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.tap_width = tap_width
        self.feature_dropout = feature_dropout
        gen = torch.Generator().manual_seed(mix(seed, 0x10) & (2**63 - 1))
        convs, taps = [], []
        cin = in_channels
        for cout in self.channels:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            _init_conv(conv, gen)
            convs.append(conv)
            tap = nn.Linear(cout, tap_width)
            _init_linear(tap, gen)
            taps.append(tap)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.taps = nn.ModuleList(taps)
        self.head = nn.Linear(tap_width * len(self.channels), output_dim)
        _init_linear(self.head, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        for conv, tap in zip(self.convs, self.taps):
            x = F.max_pool2d(F.relu(conv(x)), 2)
            f = F.relu(tap(x.mean(dim=(2, 3))))
            if self.training and self.feature_dropout > 0.0:
                # Level dropout: each tap vector is kept or zeroed whole.
                keep = (
                    torch.rand(f.shape[0], 1, device=f.device) >= self.feature_dropout
                ).to(f.dtype) / (1.0 - self.feature_dropout)
                f = f * keep
            feats.append(f)
        return self.head(torch.cat(feats, dim=1))

    def descriptor(self) -> dict:
        return {
            "arch": "predictor",
            "output_dim": self.output_dim,
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "tap_width": self.tap_width,
            "feature_dropout": self.feature_dropout,
        }

    def mac_count(self) -> int:
        side = self.input_side
        macs = 0
        cin = self.in_channels
        for cout in self.channels:
            macs += 9 * cin * cout * side * side
            side //= 2
            macs += cout * self.tap_width
            cin = cout
        return macs + self.tap_width * len(self.channels) * self.output_dim


def _model_from_descriptor(desc: dict, seed: int = 0):
    kind = desc.get("arch")
    if kind == "target":
        return TargetClassifier(
            desc["class_count"],
            desc["input_side"],
            desc["in_channels"],
            tuple(desc["channels"]),
            seed=seed,
        )
    if kind == "predictor":
        return LossPredictor(
            desc["output_dim"],
            desc["input_side"],
            desc["in_channels"],
            tuple(desc["channels"]),
            desc["tap_width"],
            desc["feature_dropout"],
            seed=seed,
        )
    raise FormatError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------------------
# Forward helpers (numpy in, numpy out)
# ---------------------------------------------------------------------------

def _to_batch_tensor(imgs: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2)))


def _check_input(model, imgs: np.ndarray) -> None:
    if imgs.ndim != 4:
        raise DimensionError(f"expected (N, H, W, C), got {imgs.shape}")
    if imgs.shape[3] != model.in_channels:
        raise DimensionError(
            f"model expects {model.in_channels} channels, got {imgs.shape[3]}"
        )


def target_forward_batch(model: TargetClassifier, imgs: np.ndarray) -> np.ndarray:
    """Class-probability rows (softmax of logits) for a stack of images."""
    _check_input(model, imgs)
    if imgs.shape[1] != model.input_side or imgs.shape[2] != model.input_side:
        raise DimensionError(
            f"target expects {model.input_side}x{model.input_side}, got {imgs.shape[1:3]}"
        )
    model.eval()
    with torch.no_grad():
        probs = F.softmax(model(_to_batch_tensor(imgs)), dim=1)
    return probs.numpy()


def target_forward(model: TargetClassifier, img: np.ndarray) -> np.ndarray:
    return target_forward_batch(model, img[None])[0]


def predictor_forward_batch(model: LossPredictor, imgs: np.ndarray) -> np.ndarray:
    """Raw transform scores; lower score means lower expected loss."""
    _check_input(model, imgs)
    if imgs.shape[1] != model.input_side or imgs.shape[2] != model.input_side:
        imgs = resize_bicubic_batch(imgs, model.input_side, model.input_side)
    model.eval()
    with torch.no_grad():
        scores = model(_to_batch_tensor(imgs))
    return scores.numpy()


def predictor_forward(model: LossPredictor, img: np.ndarray) -> np.ndarray:
    return predictor_forward_batch(model, img[None])[0]


def param_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Optimization machinery
# ---------------------------------------------------------------------------

class _Ema:
    """Bias-corrected exponential moving average of parameters."""

    def __init__(self, model: nn.Module, momentum: float) -> None:
        self.momentum = momentum
        self.steps = 0
        self.shadow = [torch.zeros_like(p) for p in model.parameters()]

    def update(self, model: nn.Module) -> None:
        self.steps += 1
        with torch.no_grad():
            for s, p in zip(self.shadow, model.parameters()):
                s.mul_(self.momentum).add_(p, alpha=1.0 - self.momentum)

    def copy_to(self, model: nn.Module) -> None:
        if self.steps == 0:
            return
        correction = 1.0 - self.momentum ** self.steps
        with torch.no_grad():
            for s, p in zip(self.shadow, model.parameters()):
                p.copy_(s / correction)


def _cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _augment_light(imgs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip + 4-pixel reflect pad and random crop."""
    n, h, w, _ = imgs.shape
    out = imgs.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, ::-1, :]
    padded = np.pad(out, ((0, 0), (4, 4), (4, 4), (0, 0)), mode="reflect")
    tops = rng.integers(0, 9, size=n)
    lefts = rng.integers(0, 9, size=n)
    for i in range(n):
        out[i] = padded[i, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w, :]
    return out


def train_target(data: LabeledDataset, cfg: TrainConfig) -> TargetClassifier:
    """Cross-entropy training with light augmentation; frozen flag off."""
    cfg.validate()
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    side = data.images.shape[1]
    model = TargetClassifier(data.class_count, input_side=side, in_channels=data.images.shape[3], seed=cfg.seed)
    model.train_metrics = {"epoch_losses": []}
    if cfg.epochs == 0:
        return model
    torch.manual_seed(mix(cfg.seed, 0xA11) & (2**63 - 1))
    rng = np.random.default_rng(np.uint64(mix(cfg.seed, 0xA12)))
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    ema = _Ema(model, cfg.ema_momentum)
    steps_per_epoch = max(1, math.ceil(len(data) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    labels_t = torch.from_numpy(data.labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        model.train()
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            batch = _augment_light(data.images[idx], rng)
            for group in opt.param_groups:
                group["lr"] = _cosine_lr(cfg.learning_rate, step, total_steps)
            opt.zero_grad()
            loss = F.cross_entropy(model(_to_batch_tensor(batch)), labels_t[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"target training diverged: loss={loss.item()} at epoch {epoch}, step {step}"
                )
            loss.backward()
            opt.step()
            ema.update(model)
            epoch_loss += loss.item() * len(idx)
            step += 1
        model.train_metrics["epoch_losses"].append(epoch_loss / len(data))
    if cfg.ema_momentum > 0.0:
        ema.copy_to(model)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Predictor training
# ---------------------------------------------------------------------------

def _cutout(img: np.ndarray, rng: np.random.Generator, max_coverage: float) -> np.ndarray:
    h, w = img.shape[:2]
    ch = int(rng.integers(0, int(max_coverage * h) + 1))
    cw = int(rng.integers(0, int(max_coverage * w) + 1))
    if ch == 0 or cw == 0:
        return img
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = img.copy()
    out[top:top + ch, left:left + cw, :] = 0.0
    return out


def _reconstruct_state(data_img: np.ndarray, record) -> np.ndarray:
    pert = record.perturbation
    return state_image(data_img, pert.kind, pert.severity, pert.seed)


def _sample_copies(records, m: int, clean_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Pick m distinct state indices for one image (repeats only if m > states).

    The clean state carries probability ``clean_prob``; the remaining mass is
    spread uniformly over the corrupted states.
    """
    weights = np.array([clean_prob if r.perturbation.is_clean() else 0.0 for r in records])
    n_corrupt = sum(1 for r in records if not r.perturbation.is_clean())
    if n_corrupt:
        corrupt_w = (1.0 - weights.sum()) / n_corrupt
        weights += np.where(weights == 0.0, corrupt_w, 0.0)
    weights = np.maximum(weights, 0.0)
    weights /= weights.sum()
    take = min(m, len(records))
    picks = rng.choice(len(records), size=take, replace=False, p=weights)
    while len(picks) < m:  # fewer states than copies: reuse
        picks = np.concatenate([picks, picks[: m - len(picks)]])
    return picks


def train_predictor(
    store,
    data: LabeledDataset,
    cfg: TrainConfig,
    objective: RankingObjectiveConfig,
    space,
    input_side: int | None = None,
    channels: tuple[int, ...] = (8, 16, 32),
    tap_width: int = 32,
) -> LossPredictor:
    """Train the loss predictor against precomputed relative-loss labels.

    Each batch holds ``batch_repetition`` copies of every sampled image, each
    copy reconstructed in a different precomputed perturbed state and further
    masked by cutout; the ranking objective compares softmax-normalized
    scores with the stored relative losses.
    """
    cfg.validate()
    objective.validate()
    records_by_id = store.records_by_id()
    missing = [int(i) for i in data.ids if int(i) not in records_by_id]
    if missing:
        raise ConsistencyError(f"label store missing ids (first few): {missing[:5]}")
    # The store may cover more images than this fold; train on the fold only.
    records_by_id = {int(i): records_by_id[int(i)] for i in data.ids}
    side = input_side if input_side is not None else data.images.shape[1]
    model = LossPredictor(
        len(space),
        input_side=side,
        in_channels=data.images.shape[3],
        channels=channels,
        tap_width=tap_width,
        feature_dropout=cfg.dropout,
        seed=cfg.seed,
    )
    model.train_metrics = {"epoch_losses": [], "epoch_spearman": []}
    if cfg.epochs == 0:
        return model

    # Cache every (image, state) input once; reconstruction is deterministic.
    id_to_pos = {int(v): i for i, v in enumerate(data.ids)}
    state_images: dict[tuple[int, str], np.ndarray] = {}
    truths: dict[tuple[int, str], np.ndarray] = {}
    for img_id, records in records_by_id.items():
        pos = id_to_pos[img_id]
        for rec in records:
            img = _reconstruct_state(data.images[pos], rec)
            if img.shape[0] != side or img.shape[1] != side:
                img = resize_bicubic_batch(img[None], side, side)[0]
            key = (img_id, rec.perturbation.encode())
            state_images[key] = img
            truths[key] = rec.relative_losses.astype(np.float64)

    torch.manual_seed(mix(cfg.seed, 0xB11) & (2**63 - 1))
    rng = np.random.default_rng(np.uint64(mix(cfg.seed, 0xB12)))
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    ema = _Ema(model, cfg.ema_momentum)
    m = cfg.batch_repetition
    uniques = max(1, cfg.batch_size // m)
    ids = np.array(sorted(records_by_id), dtype=np.int64)
    steps_per_epoch = max(1, math.ceil(len(ids) / uniques))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        model.train()
        epoch_loss, epoch_loss_n = 0.0, 0
        epoch_rhos: list[float] = []
        for b in range(steps_per_epoch):
            chunk = ids[order[b * uniques:(b + 1) * uniques]]
            if len(chunk) == 0:
                continue
            batch_imgs, batch_truths = [], []
            for img_id in chunk:
                records = records_by_id[int(img_id)]
                keys = [(int(img_id), r.perturbation.encode()) for r in records]
                picks = _sample_copies(records, m, cfg.clean_prob, rng)
                for k in picks:
                    img = _cutout(state_images[keys[k]], rng, cfg.cutout_max_coverage)
                    batch_imgs.append(img)
                    batch_truths.append(truths[keys[k]])
            truth_arr = np.stack(batch_truths)
            valid = np.ptp(truth_arr, axis=1) > 0.0
            if not valid.any():
                warnings.warn("skipping degenerate batch: all truth vectors constant")
                continue
            for group in opt.param_groups:
                group["lr"] = _cosine_lr(cfg.learning_rate, step, total_steps)
            opt.zero_grad()
            scores = model(_to_batch_tensor(np.stack(batch_imgs)))
            pred_rel = F.softmax(scores, dim=1)
            losses = [
                ranking.objective_loss(pred_rel[i], truth_arr[i], objective)
                for i in np.flatnonzero(valid)
            ]
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"predictor training diverged: loss={loss.item()} at epoch {epoch}, step {step}"
                )
            loss.backward()
            opt.step()
            ema.update(model)
            step += 1
            epoch_loss += loss.item() * int(valid.sum())
            epoch_loss_n += int(valid.sum())
            detached = scores.detach().numpy()
            for i in np.flatnonzero(valid):
                rho = ranking.exact_spearman(detached[i], truth_arr[i])
                if not math.isnan(rho):
                    epoch_rhos.append(rho)
        model.train_metrics["epoch_losses"].append(
            epoch_loss / epoch_loss_n if epoch_loss_n else float("nan")
        )
        model.train_metrics["epoch_spearman"].append(
            float(np.mean(epoch_rhos)) if epoch_rhos else float("nan")
        )
    if cfg.ema_momentum > 0.0:
        ema.copy_to(model)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, seed: int = 0, metrics: dict | None = None) -> None:
    """TTAS format: magic, version, descriptor JSON, f32 payload, checksum."""
    desc = dict(model.descriptor())
    desc["seed"] = seed
    desc["metrics"] = metrics or {}
    desc_bytes = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(
        p.detach().numpy().astype("<f4").tobytes() for _, p in sorted(model.named_parameters())
    )
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<I", len(desc_bytes))
        + desc_bytes
        + struct.pack("<Q", len(payload) // 4)
        + payload
    )
    checksum = hashlib.sha256(blob).digest()[:8]
    with open(path, "wb") as f:
        f.write(blob + checksum)


def load_checkpoint(path):
    """Load a TTAS checkpoint; returns (model, descriptor dict)."""
    raw = open(path, "rb").read()
    if len(raw) < 24 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a TTAS checkpoint")
    if hashlib.sha256(raw[:-8]).digest()[:8] != raw[-8:]:
        raise FormatError(f"{path}: checksum mismatch")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    dlen = struct.unpack("<I", raw[8:12])[0]
    desc = json.loads(raw[12:12 + dlen].decode())
    (count,) = struct.unpack("<Q", raw[12 + dlen:20 + dlen])
    payload = np.frombuffer(raw[20 + dlen:-8], dtype="<f4")
    if len(payload) != count:
        raise FormatError(f"{path}: payload length {len(payload)} != declared {count}")
    model = _model_from_descriptor(desc)
    offset = 0
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            n = p.numel()
            p.copy_(torch.from_numpy(payload[offset:offset + n].copy()).view_as(p))
            offset += n
    if offset != count:
        raise FormatError(f"{path}: parameter count mismatch")
    model.eval()
    return model, desc


def checkpoint_fingerprint(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()[:16]
