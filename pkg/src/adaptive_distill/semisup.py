"""Transfer-set construction for semi-supervised distillation.

The transfer set is the labeled set plus teacher-annotated unlabeled
images.  Unlabeled images are split into a positive pool (at least one
hard target) and a negative pool; ``mix_pools`` draws a rho fraction from
the positive pool.  The manifest records, per image, which losses it feeds.
"""

import json
from dataclasses import dataclass, field, asdict
from typing import Dict, List

import numpy as np

from .exceptions import InputError
from .training import Route

MANIFEST_FORMAT = "adaptive-distill/manifest"
MANIFEST_VERSION = 1
MODES = ("supervised", "distill", "semisup-hard-only", "semisup-full")
FLAG_NAMES = ("use_gt_focal", "use_gt_loc", "use_soft_adl", "use_hard_focal", "use_hard_loc")


@dataclass(frozen=True)
class MixConfig:
    rho: float
    total_count: int
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise InputError(f"rho must lie in [0, 1], got {self.rho}")
        if self.total_count < 0:
            raise InputError("total_count must be non-negative")

    @property
    def num_positive(self):
        return int(round(self.rho * self.total_count))

    @property
    def num_negative(self):
        return self.total_count - self.num_positive


@dataclass
class TransferSetManifest:
    mode: str
    labeled_ids: List[str]
    unlabeled_ids: List[str]
    flags: Dict[str, Dict[str, bool]]
    provenance: Dict[str, str] = field(default_factory=dict)

    def validate(self, soft_ids=None):
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise InputError(f"ids both labeled and unlabeled: {sorted(overlap)[:3]}")
        for sid in self.labeled_ids:
            f = self.flags[sid]
            if not (f["use_gt_focal"] and f["use_gt_loc"]):
                raise InputError(f"labeled image {sid} must use ground-truth focal and box losses")
        if soft_ids is not None:
            for sid in self.unlabeled_ids:
                if self.flags[sid]["use_soft_adl"] and sid not in soft_ids:
                    raise InputError(f"no soft-target record for {sid}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["format"] = MANIFEST_FORMAT
        d["version"] = MANIFEST_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MANIFEST_FORMAT:
            raise InputError("not a transfer-set manifest")
        if d.get("version") != MANIFEST_VERSION:
            raise InputError(f"unsupported manifest version {d.get('version')}")
        return cls(d["mode"], list(d["labeled_ids"]), list(d["unlabeled_ids"]),
                   {k: dict(v) for k, v in d["flags"].items()}, dict(d.get("provenance", {})))


def filter_unlabeled(records):
    """Split records into ids with at least one hard target and the rest.

    Both pools are sorted by scene id, so the split does not depend on the
    order of ``records``.
    """
    positive = sorted(r.scene_id for r in records if len(r.hard_targets) > 0)
    negative = sorted(r.scene_id for r in records if len(r.hard_targets) == 0)
    return positive, negative


def mix_pools(positive_pool, negative_pool, mix: MixConfig):
    """Sample ``round(rho * total)`` positive and the remaining negative ids
    uniformly without replacement.  Returns the positive draws followed by
    the negative ones."""
    n_pos, n_neg = mix.num_positive, mix.num_negative
    if n_pos > len(positive_pool):
        raise InputError(f"positive pool has {len(positive_pool)} images, {n_pos} requested")
    if n_neg > len(negative_pool):
        raise InputError(f"negative pool has {len(negative_pool)} images, {n_neg} requested")
    rng = np.random.default_rng([mix.seed, 2])
    pos = sorted(positive_pool)
    neg = sorted(negative_pool)
    picked_pos = [pos[i] for i in rng.choice(len(pos), n_pos, replace=False)] if n_pos else []
    picked_neg = [neg[i] for i in rng.choice(len(neg), n_neg, replace=False)] if n_neg else []
    return picked_pos + picked_neg


def _flags(mode, labeled):
    f = dict.fromkeys(FLAG_NAMES, False)
    if labeled:
        f["use_gt_focal"] = f["use_gt_loc"] = True
        f["use_soft_adl"] = mode in ("distill", "semisup-full")
    else:
        f["use_hard_focal"] = f["use_hard_loc"] = True
        f["use_soft_adl"] = mode == "semisup-full"
    return f


def assemble_manifest(labeled_ids, unlabeled_ids, mode, record_ids=None, provenance=None):
    """Build the per-image loss routing for one of the four ablation modes.

    ``record_ids`` are the unlabeled ids that have target records; every
    unlabeled image needs one (for its hard targets and soft map).
    Labeled images take their soft targets from the teacher directly.
    """
    if mode not in MODES:
        raise InputError(f"unknown manifest mode {mode!r}; choose from {MODES}")
    labeled_ids = list(labeled_ids)
    unlabeled_ids = [] if mode in ("supervised", "distill") else list(unlabeled_ids)
    if record_ids is not None:
        known = set(record_ids)
        for sid in unlabeled_ids:
            if sid not in known:
                raise InputError(f"missing target record for scene {sid}")
    flags = {sid: _flags(mode, True) for sid in labeled_ids}
    flags.update({sid: _flags(mode, False) for sid in unlabeled_ids})
    manifest = TransferSetManifest(mode, labeled_ids, unlabeled_ids, flags, dict(provenance or {}))
    return manifest.validate(None if record_ids is None else set(record_ids))


def write_manifest(path, manifest: TransferSetManifest):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> TransferSetManifest:
    with open(path) as fh:
        return TransferSetManifest.from_dict(json.load(fh))


def build_routes(manifest: TransferSetManifest, scenes_by_id, records_by_id):
    """Scenes and training routes: labeled ids first, then unlabeled.

    The trainer draws batches from per-epoch permutations of this list, so
    labeled and unlabeled images interleave uniformly.
    """
    scenes, routes = [], []
    for sid in manifest.labeled_ids:
        f = manifest.flags[sid]
        s = scenes_by_id[sid]
        scenes.append(s)
        routes.append(Route(s.boxes, s.classes, f["use_gt_focal"], f["use_gt_loc"], f["use_soft_adl"]))
    for sid in manifest.unlabeled_ids:
        f = manifest.flags[sid]
        rec = records_by_id[sid]
        boxes = np.array([d.box for d in rec.hard_targets], dtype=np.float64).reshape(-1, 4)
        classes = np.array([d.class_id for d in rec.hard_targets], dtype=np.int64)
        scenes.append(scenes_by_id[sid])
        routes.append(Route(boxes, classes, f["use_hard_focal"], f["use_hard_loc"], f["use_soft_adl"]))
    return scenes, routes
