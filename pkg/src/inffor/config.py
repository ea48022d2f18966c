"""One JSON document that fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attacks import DataSpec, TriggerSpec
from .errors import ConfigError
from .influence import GAS, EstimatorConfig, LissaConfig
from .mitigation import MitigationConfig
from .nn import ModelSpec
from .trainer import TrainConfig

ATTACK_KINDS = ("none", "group_flip", "backdoor", "availability", "single_target_poison")

_REQUIRED = {
    "": ("seed", "data", "model"),
    "data": ("kind",),
    "model": ("architecture",),
    "attack": ("kind",),
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    m: int = 20  # group_flip / single_target_poison
    y_targ: int = 0
    y_adv: int = 1
    rate: float = 0.015  # backdoor
    n_targets: int = 10
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    noise: float = 0.1  # single_target_poison

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack.kind: expected one of {ATTACK_KINDS}, got {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trigger"] = self.trigger.to_dict()
        return d


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataSpec
    model: ModelSpec
    attack: AttackSpec = field(default_factory=AttackSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: EstimatorConfig = GAS
    kappa: int = 5
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    out: str | None = None

    def to_dict(self) -> dict:
        m = self.mitigation
        return {
            "seed": self.seed,
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "attack": self.attack.to_dict(),
            "train": self.train.to_dict(),
            "estimator": self.estimator.to_dict(),
            "kappa": self.kappa,
            "mitigation": {f.name: getattr(m, f.name) for f in fields(m) if f.name not in ("estimator", "train")},
            "out": self.out,
        }

    def mitigation_config(self) -> MitigationConfig:
        """The mitigation settings with this run's estimator and training recipe."""
        return replace(self.mitigation, estimator=self.estimator, train=self.train)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _check_keys(section: str, d, cls_fields) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section or 'config'}: expected a JSON object")
    for key in _REQUIRED.get(section, ()):
        if key not in d:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"missing required field '{where}'")
    unknown = sorted(set(d) - set(cls_fields))
    if unknown:
        where = f"{section}.{unknown[0]}" if section else unknown[0]
        raise ConfigError(f"unknown field '{where}'")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _build(section: str, cls, d: dict):
    _check_keys(section, d, _names(cls))
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    _check_keys("", doc, _names(RunConfig))
    data_doc = dict(doc["data"])
    if "bump_width" in data_doc:
        data_doc["bump_width"] = tuple(data_doc["bump_width"])
    data = _build("data", DataSpec, data_doc)
    model_doc = dict(doc["model"])
    _check_keys("model", model_doc, _names(ModelSpec))
    model_doc.setdefault("input_dim", data.input_dim)
    model_doc.setdefault("num_classes", data.num_classes)
    model_doc["hidden_sizes"] = tuple(model_doc.get("hidden_sizes", ()))
    model = _build("model", ModelSpec, model_doc)
    if model.input_dim != data.input_dim:
        raise ConfigError(f"model.input_dim: {model.input_dim} does not match the data width {data.input_dim}")

    attack_doc = dict(doc.get("attack", {"kind": "none"}))
    _check_keys("attack", attack_doc, _names(AttackSpec))
    if "trigger" in attack_doc:
        trig = dict(attack_doc["trigger"])
        trig["positions"] = tuple(trig.get("positions", ()))
        attack_doc["trigger"] = _build("attack.trigger", TriggerSpec, trig)
    attack = _build("attack", AttackSpec, attack_doc)

    train = _build("train", TrainConfig, dict(doc.get("train", {})))
    est_doc = dict(doc.get("estimator", GAS.to_dict()))
    _check_keys("estimator", est_doc, _names(EstimatorConfig))
    if "lissa" in est_doc:
        est_doc["lissa"] = _build("estimator.lissa", LissaConfig, dict(est_doc["lissa"]))
    estimator = _build("estimator", EstimatorConfig, est_doc)

    mit_doc = dict(doc.get("mitigation", {}))
    _check_keys("mitigation", mit_doc, [n for n in _names(MitigationConfig) if n not in ("estimator", "train")])
    mitigation = _build("mitigation", MitigationConfig, mit_doc)

    kappa = doc.get("kappa", 5)
    if not isinstance(kappa, int) or kappa < 1:
        raise ConfigError("kappa: must be an integer >= 1")
    seed = doc["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    return RunConfig(seed, data, model, attack, train, estimator, kappa, mitigation, doc.get("out"))


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config: {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from exc
    return run_config_from_dict(doc)
