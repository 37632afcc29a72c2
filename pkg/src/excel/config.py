"""Pipeline configuration: one flat JSON object, validated strictly.

Path keys (weights, knowledge, dataset, out_dir) plus the policy selector
sit alongside every training field; unknown keys are rejected so typos
never silently fall back to defaults. The config hash in every artifact's
provenance is the digest of the full flat mapping.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import UsageError
from .hashing import config_digest
from .training_eval import TrainConfig

PATH_KEYS = ("weights", "knowledge", "dataset", "out_dir")


@dataclass
class PipelineConfig:
    weights: str = ""
    knowledge: str = ""
    dataset: str = ""
    out_dir: str = ""
    policy: str = "intra_correlation"
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def __getattr__(self, name):
        # convenience passthrough: config.tau_fg etc. read the train block
        train = object.__getattribute__(self, "train")
        if hasattr(train, name):
            return getattr(train, name)
        raise AttributeError(name)

    def validate(self):
        self.train.validate()
        if self.policy not in ("vanilla", "value_value", "intra_correlation"):
            raise UsageError(f"unknown attention policy '{self.policy}'")
        for key in PATH_KEYS:
            if not getattr(self, key):
                raise UsageError(f"config is missing required path '{key}'")

    def to_dict(self) -> dict:
        out = {"policy": self.policy, "seed": self.train.seed}
        for key in PATH_KEYS:
            out[key] = getattr(self, key)
        train = self.train.to_dict()
        train.pop("seed")
        out.update(train)
        return out

    def digest(self) -> str:
        # identifies the computation: out_dir is where results land, not
        # part of what they are, so identical runs into different
        # directories stamp identical provenance
        mapping = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return config_digest(mapping)


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def parse_config(mapping: dict) -> PipelineConfig:
    known = set(PATH_KEYS) | {"policy", "seed"} | _TRAIN_FIELDS
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    train_kwargs = {k: mapping[k] for k in _TRAIN_FIELDS if k in mapping}
    if "seed" in mapping:
        train_kwargs["seed"] = int(mapping["seed"])
    if "calib_weights" in train_kwargs:
        train_kwargs["calib_weights"] = tuple(train_kwargs["calib_weights"])
    cfg = PipelineConfig(
        weights=str(mapping.get("weights", "")),
        knowledge=str(mapping.get("knowledge", "")),
        dataset=str(mapping.get("dataset", "")),
        out_dir=str(mapping.get("out_dir", "")),
        policy=str(mapping.get("policy", "intra_correlation")),
        train=TrainConfig(**train_kwargs),
    )
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        mapping = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(mapping, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    cfg = parse_config(mapping)
    base = path.parent
    for key in PATH_KEYS:
        value = getattr(cfg, key)
        if value and not Path(value).is_absolute():
            setattr(cfg, key, str(base / value))
    return cfg


def save_config(path, cfg: PipelineConfig):
    Path(path).write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return Path(path)
