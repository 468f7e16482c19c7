"""The run configuration document shared by every pipeline stage.

A config file is JSON with one object per section.  Missing keys take the
defaults below, unknown keys are rejected, and ``config_hash`` digests the
canonical (sorted-key) form of the fully resolved document, so two files
that differ only in key order or in spelling out defaults hash alike.
"""

import copy
import hashlib
import json
from dataclasses import asdict

from .boxes import make_anchors
from .exceptions import ConfigError, InputError
from .losses import LossHyperparams
from .scenes import GeneratorConfig
from .semisup import MixConfig
from .teacher import InferenceConfig
from .training import AssignConfig, TrainerConfig

CONFIG_VERSION = 1

# The pinned benchmark world.  Object signatures sit at amplitude 3 over
# unit noise, which a 3x3 window separates well but a single cell does not.
_GENERATOR = asdict(GeneratorConfig(amplitude=3.0))
_TRAINER = {k: v for k, v in asdict(TrainerConfig()).items() if k != "workers"}
_TRAINER["lr_drop_points"] = list(_TRAINER["lr_drop_points"])

DEFAULTS = {
    "version": CONFIG_VERSION,
    "generator": _GENERATOR,
    "anchors": {"scales": [1.5, 2.5, 4.0], "t_pos": 0.5, "t_neg": 0.4},
    "model": {"teacher_window": 3, "student_window": 1},
    "loss": asdict(LossHyperparams()),
    "trainer": _TRAINER,
    "inference": asdict(InferenceConfig()),
    "calibration": {"tolerance": 0.02, "max_iter": 50},
    "mixing": {"rho": 1.0, "total_count": 0, "seed": 0},
    "paths": {"labeled": "", "unlabeled": "", "records": "", "out": ""},
}


def _merge(defaults, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, f"{where}.{key}" if where else key)
        else:
            out[key] = value
    return out


class RunConfig:
    """Resolved configuration with typed accessors for each stage."""

    def __init__(self, document=None):
        doc = _merge(DEFAULTS, document or {}, "")
        if doc["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {doc['version']}")
        self._doc = doc
        try:
            self.generator_config().validate()
            self.loss_hyperparams()
            self.trainer_config().validate()
            self.mix_config()
            self.inference_config()
            make_anchors(4, 4, self.scales)
        except (TypeError, InputError) as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("teacher_window", "student_window"):
            k = doc["model"][key]
            if not isinstance(k, int) or k < 1 or k % 2 == 0:
                raise ConfigError(f"model.{key} must be a positive odd integer")
        if not 0 <= doc["anchors"]["t_neg"] <= doc["anchors"]["t_pos"] <= 1:
            raise ConfigError("anchor thresholds need 0 <= t_neg <= t_pos <= 1")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls(doc)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self._doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_dict(self):
        return copy.deepcopy(self._doc)

    def override(self, section, **values):
        """A new config with ``values`` replacing keys of ``section``."""
        doc = self.to_dict()
        unknown = sorted(set(values) - set(doc[section]))
        if unknown:
            raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
        doc[section].update(values)
        return RunConfig(doc)

    @property
    def config_hash(self):
        canonical = json.dumps(self._doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def __getitem__(self, section):
        return copy.deepcopy(self._doc[section])

    @property
    def scales(self):
        return tuple(float(s) for s in self._doc["anchors"]["scales"])

    def generator_config(self, **overrides) -> GeneratorConfig:
        return GeneratorConfig(**{**self._doc["generator"], **overrides})

    def anchors(self):
        g = self._doc["generator"]
        return make_anchors(g["height"], g["width"], self.scales)

    def assign_config(self) -> AssignConfig:
        return AssignConfig(self._doc["anchors"]["t_pos"], self._doc["anchors"]["t_neg"])

    def loss_hyperparams(self) -> LossHyperparams:
        return LossHyperparams(**self._doc["loss"])

    def trainer_config(self, **overrides) -> TrainerConfig:
        d = {**self._doc["trainer"], **overrides}
        d["lr_drop_points"] = tuple(d["lr_drop_points"])
        return TrainerConfig(**d)

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(**self._doc["inference"])

    def mix_config(self) -> MixConfig:
        return MixConfig(**self._doc["mixing"])

    @property
    def calibration(self):
        return dict(self._doc["calibration"])

    def window(self, role):
        return self._doc["model"][f"{role}_window"]
