"""One JSON run config driving data generation, training, and evaluation.

Every field is optional and falls back to the declared default; unknown keys
are rejected so a typo cannot silently run a different experiment.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .toy_domains import DatasetSpec
from .trainer import TrainConfig


@dataclass
class EvalOptions:
    split: str = "target-eval"
    n_feats: int = 50
    tol_px: int = 1
    sl_thresholds: tuple = (0.0, 0.5, 0.9)

    def validate(self) -> None:
        if self.n_feats < 20:
            raise ValueError(
                f"n_feats must be >= 20 for the domain classifier, got {self.n_feats}")
        if self.tol_px < 0:
            raise ValueError(f"tol_px must be >= 0, got {self.tol_px}")
        for t in self.sl_thresholds:
            if not 0.0 <= t < 1.0:
                raise ValueError(f"sl_thresholds must lie in [0, 1), got {t}")

    def to_dict(self) -> dict:
        return {"split": self.split, "n_feats": self.n_feats, "tol_px": self.tol_px,
                "sl_thresholds": list(self.sl_thresholds)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalOptions":
        d = dict(d)
        d["sl_thresholds"] = tuple(d.get("sl_thresholds", cls.sl_thresholds))
        opts = cls(**d)
        opts.validate()
        return opts


def _merge(defaults: dict, given, path: str = "") -> dict:
    if not isinstance(given, dict):
        raise ValueError(f"config section '{path or '<root>'}' must be a JSON object")
    out = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ValueError(f"unknown config key '{path}{key}'")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        if self.data.num_classes != self.train.net.num_classes:
            raise ValueError(
                f"data.num_classes ({self.data.num_classes}) and "
                f"train.net.num_classes ({self.train.net.num_classes}) disagree")
        stride = 2 ** len(self.train.net.encoder_widths)
        if self.data.height % stride or self.data.width % stride:
            raise ValueError(
                f"dataset resolution {self.data.height}x{self.data.width} must be "
                f"divisible by the encoder stride {stride}")

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict(),
                "eval": self.eval.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        merged = _merge(cls().to_dict(), d)
        cfg = cls(data=DatasetSpec.from_dict(merged["data"]),
                  train=TrainConfig.from_dict(merged["train"]),
                  eval=EvalOptions.from_dict(merged["eval"]))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
