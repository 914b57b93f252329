"""Run configuration files (JSON) covering every tunable knob.

A file holds up to five sections; omitted sections and keys take defaults,
unknown ones are rejected::

    {"reconstruction": {"weight_bits": 3, "loss_kind": "aph", ...},
     "mlp": {"alpha": 2.0, ...},
     "perturbation": {"delta": 1e-06, ...},
     "drop": {"drop_probability": 0.5},
     "paths": {"model": "...", "calibration": "...", "eval": "...", "output": "...", "report": "..."}}
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .hessian import PerturbationConfig
from .mlp_recon import MlpReconConfig
from .pipeline import ReconstructionConfig, config_hash


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    model: str = None
    calibration: str = None
    eval: str = None
    output: str = None
    report: str = None


@dataclass(frozen=True)
class RunConfig:
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    mlp: MlpReconConfig = field(default_factory=MlpReconConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    enable_mr: bool = False
    paths: Paths = field(default_factory=Paths)

    SECTIONS = ("reconstruction", "mlp", "perturbation", "drop", "paths", "enable_mr")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        recon = d.get("reconstruction", {})
        if not isinstance(recon, dict):
            raise ConfigError("section 'reconstruction' must be an object")
        recon = dict(recon)
        drop = _section(d, "drop", {"drop_probability"})
        if "drop_probability" in drop:
            if "drop_probability" in recon:
                raise ConfigError("drop_probability given in both 'drop' and 'reconstruction'")
            recon["drop_probability"] = drop["drop_probability"]
        d = dict(d, reconstruction=recon)
        try:
            return cls(reconstruction=_build(ReconstructionConfig, d, "reconstruction"),
                       mlp=_build(MlpReconConfig, d, "mlp"),
                       perturbation=_build(PerturbationConfig, d, "perturbation"),
                       enable_mr=_flag(d.get("enable_mr", False)),
                       paths=_build(Paths, d, "paths"))
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def to_dict(self):
        return {"reconstruction": asdict(self.reconstruction), "mlp": asdict(self.mlp),
                "perturbation": asdict(self.perturbation), "enable_mr": self.enable_mr,
                "paths": asdict(self.paths)}

    def digest(self):
        """Hash of everything that affects results (paths excluded)."""
        d = self.to_dict()
        del d["paths"]
        return config_hash(d)

    def with_seed(self, seed):
        return replace(self, reconstruction=replace(self.reconstruction, seed=seed),
                       mlp=replace(self.mlp, seed=seed), perturbation=replace(self.perturbation, seed=seed))

    def override(self, section, **values):
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            return replace(self, **{section: replace(getattr(self, section), **values)})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def _flag(v):
    if not isinstance(v, bool):
        raise ConfigError("enable_mr must be true or false")
    return v


def _section(d, name, allowed):
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def _build(cls, d, name):
    sec = _section(d, name, {f.name for f in fields(cls)})
    return cls(**sec)
