"""TOML pipeline configuration.

Sections mirror the module layout; every default is the reference desk-scale
experiment, so an empty file (or no file) runs it unchanged.  Unknown keys
are rejected with the offending ``section.key`` named.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corrupt import CorruptionKind
from .errors import ConfigError
from .images import Transform, TransformKind, TransformSpace, default_space
from .models import TrainConfig
from .policy import PolicyKind, SelectionPolicy
from .ranking import ObjectiveKind, RankingObjectiveConfig
from .seeds import mix


@dataclass
class DataConfig:
    source: str = "synthetic"
    cifar_train: str = ""
    cifar_test: str = ""
    train_n: int = 2000
    test_n: int = 1000
    class_count: int = 10
    side: int = 32
    loss_train_fraction: float = 0.9


@dataclass
class CorruptionConfig:
    kinds: list[str] = field(default_factory=list)  # empty = all 12 kinds
    severities: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])


@dataclass
class LabelGenConfig:
    corrupted_per_image: int = 3
    block_size: int = 64


@dataclass
class PredictorNetConfig:
    input_side: int = 32
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    tap_width: int = 32


@dataclass
class EvalConfig:
    policies: list[str] = field(
        default_factory=lambda: [
            "identity", "hflip", "five_crop", "random:1", "ours:1", "oracle:1",
        ]
    )
    max_per_cell: int = 384
    heldout_spearman_states: int = 192


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    out: str = "runs/exp"
    dataio: DataConfig = field(default_factory=DataConfig)
    corruptions: CorruptionConfig = field(default_factory=CorruptionConfig)
    labelgen: LabelGenConfig = field(default_factory=LabelGenConfig)
    target_train: TrainConfig = field(default_factory=TrainConfig)
    predictor_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=0.02, epochs=30, batch_repetition=2
        )
    )
    predictor_net: PredictorNetConfig = field(default_factory=PredictorNetConfig)
    ranking: RankingObjectiveConfig = field(default_factory=RankingObjectiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    space_override: list[dict] | None = None

    # -- derived ----------------------------------------------------------

    def transform_space(self) -> TransformSpace:
        if not self.space_override:
            return default_space()
        transforms = []
        for row in self.space_override:
            try:
                kind = TransformKind(row["kind"])
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"imgcore.transforms: bad transform entry {row}") from exc
            transforms.append(Transform(kind, float(row.get("param", 0.0))))
        return TransformSpace(tuple(transforms))

    def corruption_kinds(self) -> list[CorruptionKind]:
        if not self.corruptions.kinds:
            return list(CorruptionKind)
        out = []
        for name in self.corruptions.kinds:
            try:
                out.append(CorruptionKind(name))
            except ValueError as exc:
                raise ConfigError(f"corruptions.kinds: unknown kind {name!r}") from exc
        return out

    def policies(self) -> list[SelectionPolicy]:
        return [parse_policy(p, seed=mix(self.seed, 8)) for p in self.eval.policies]

    def component_seed(self, tag: int) -> int:
        return mix(self.seed, tag)

    def finalize(self) -> "PipelineConfig":
        """Re-derive per-component seeds; call after overriding ``seed``."""
        self.target_train.seed = self.component_seed(4)
        self.predictor_train.seed = self.component_seed(6)
        return self

    def hash(self) -> str:
        payload = json.dumps(_as_plain(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _as_plain(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["ranking"]["kind"] = cfg.ranking.kind.value
    return d


_POLICY_NAMES = {
    "identity": PolicyKind.IDENTITY,
    "hflip": PolicyKind.HFLIP_ENSEMBLE,
    "five_crop": PolicyKind.FIVE_CROP,
    "ten_crop": PolicyKind.TEN_CROP,
    "random": PolicyKind.RANDOM_K,
    "ours": PolicyKind.OURS_K,
    "oracle": PolicyKind.ORACLE_K,
}


def parse_policy(text: str, seed: int = 0) -> SelectionPolicy:
    """Parse e.g. ``identity``, ``random:2``, ``ours:2+flip``."""
    name, _, arg = text.partition(":")
    if name not in _POLICY_NAMES:
        raise ConfigError(f"ttapolicy.policies: unknown policy {text!r}")
    kind = _POLICY_NAMES[name]
    k, compose_flip = 1, False
    if arg:
        if arg.endswith("+flip"):
            compose_flip = True
            arg = arg[: -len("+flip")]
        try:
            k = int(arg)
        except ValueError as exc:
            raise ConfigError(f"ttapolicy.policies: bad k in {text!r}") from exc
    elif kind in (PolicyKind.RANDOM_K, PolicyKind.OURS_K, PolicyKind.ORACLE_K):
        raise ConfigError(f"ttapolicy.policies: {text!r} needs :k (e.g. {name}:1)")
    if compose_flip and kind is not PolicyKind.OURS_K:
        raise ConfigError(f"ttapolicy.policies: +flip only applies to ours ({text!r})")
    return SelectionPolicy(kind, k=k, compose_flip=compose_flip, seed=seed)


# ---------------------------------------------------------------------------
# TOML loading
# ---------------------------------------------------------------------------

def _apply(obj, section: str, values: dict, allowed: set[str]) -> None:
    for key, value in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(obj, key, value)


def _train_fields() -> set[str]:
    return set(TrainConfig.__dataclass_fields__)


def load_config(path: str | None) -> PipelineConfig:
    """Parse a TOML config; missing path (None) yields pure defaults."""
    cfg = PipelineConfig()
    if path is None:
        return cfg
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc

    known_sections = {
        "cli", "dataio", "imgcore", "corruptions", "labelgen", "nets",
        "ranking", "ttapolicy", "evalbench",
    }
    for section in doc:
        if section not in known_sections:
            raise ConfigError(f"unknown config section [{section}]")

    if "cli" in doc:
        _apply(cfg, "cli", doc["cli"], {"seed", "threads", "out"})
    if "dataio" in doc:
        _apply(cfg.dataio, "dataio", doc["dataio"], set(DataConfig.__dataclass_fields__))
    if "imgcore" in doc:
        section = dict(doc["imgcore"])
        transforms = section.pop("transforms", None)
        if section:
            raise ConfigError(f"unknown config key imgcore.{next(iter(section))}")
        cfg.space_override = transforms
    if "corruptions" in doc:
        _apply(
            cfg.corruptions, "corruptions", doc["corruptions"],
            set(CorruptionConfig.__dataclass_fields__),
        )
    if "labelgen" in doc:
        _apply(
            cfg.labelgen, "labelgen", doc["labelgen"],
            set(LabelGenConfig.__dataclass_fields__),
        )
    if "nets" in doc:
        nets = dict(doc["nets"])
        target = nets.pop("target", {})
        predictor = dict(nets.pop("predictor", {}))
        if nets:
            raise ConfigError(f"unknown config key nets.{next(iter(nets))}")
        _apply(cfg.target_train, "nets.target", target, _train_fields())
        net_keys = set(PredictorNetConfig.__dataclass_fields__)
        net_part = {k: v for k, v in predictor.items() if k in net_keys}
        train_part = {k: v for k, v in predictor.items() if k not in net_keys}
        _apply(cfg.predictor_net, "nets.predictor", net_part, net_keys)
        _apply(cfg.predictor_train, "nets.predictor", train_part, _train_fields())
    if "ranking" in doc:
        section = dict(doc["ranking"])
        kind = section.pop("kind", None)
        if kind is not None:
            try:
                cfg.ranking = RankingObjectiveConfig(
                    ObjectiveKind(kind),
                    temperature=cfg.ranking.temperature,
                    margin=cfg.ranking.margin,
                )
            except ValueError as exc:
                raise ConfigError(f"ranking.kind: unknown objective {kind!r}") from exc
        for key, value in section.items():
            if key not in {"temperature", "margin"}:
                raise ConfigError(f"unknown config key ranking.{key}")
            cfg.ranking = RankingObjectiveConfig(
                cfg.ranking.kind,
                temperature=value if key == "temperature" else cfg.ranking.temperature,
                margin=value if key == "margin" else cfg.ranking.margin,
            )
    if "ttapolicy" in doc:
        _apply(cfg.eval, "ttapolicy", doc["ttapolicy"], {"policies"})
    if "evalbench" in doc:
        _apply(
            cfg.eval, "evalbench", doc["evalbench"],
            {"max_per_cell", "heldout_spearman_states"},
        )

    cfg.ranking.validate()
    for policy in cfg.policies():
        policy.validate(len(cfg.transform_space()))
    return cfg.finalize()
