"""Synthetic detection scenes and their line-delimited file format.

A scene is an ``H x W`` grid of ``F``-dimensional feature vectors.  Each
object adds its class signature to the cells it covers, scaled by the
covered fraction of the cell, on top of Gaussian noise.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np

from .exceptions import ConfigError, InputError

SCENES_FORMAT = "adaptive-distill/scenes"
SCENES_VERSION = 1
SPLITS = ("labeled", "unlabeled")


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic world settings.  Object counts are Poisson(``mean_objects``)
    truncated at ``max_objects``, with an extra ``empty_prob`` chance of an
    empty scene; ``align`` puts object centres on cell centres."""

    height: int = 12
    width: int = 12
    num_features: int = 8
    num_classes: int = 3
    mean_objects: float = 2.0
    max_objects: int = 6
    empty_prob: float = 0.0
    min_size: float = 1.5
    max_size: float = 4.5
    amplitude: float = 1.0
    noise_sigma: float = 1.0
    signature_seed: int = 0
    decimals: int = 4
    align: bool = False

    def validate(self):
        if self.height < 4 or self.width < 4:
            raise ConfigError("grid must be at least 4x4")
        if self.num_features < 4:
            raise ConfigError("need at least 4 features per cell")
        if self.num_classes < 1:
            raise ConfigError("need at least one class")
        if not 0 < self.min_size < self.max_size:
            raise ConfigError(f"degenerate size range [{self.min_size}, {self.max_size}]")
        if self.max_size > min(self.height, self.width):
            raise ConfigError("objects larger than the grid")
        if self.mean_objects < 0 or self.max_objects < 0:
            raise ConfigError("object counts must be non-negative")
        if not 0 <= self.empty_prob <= 1:
            raise ConfigError("empty_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        return self

    def signatures(self):
        """Unit-norm class signatures shared by every scene of this world."""
        rng = np.random.default_rng([self.signature_seed, 7919])
        sig = rng.normal(size=(self.num_classes, self.num_features))
        return sig / np.linalg.norm(sig, axis=1, keepdims=True)


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def coords(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Scene:
    scene_id: str
    grid: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    split_tag: str = "labeled"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).ravel()
        if self.grid.ndim != 3:
            raise InputError("grid must be H x W x F")
        if len(self.boxes) != len(self.classes):
            raise InputError("one class id per box")
        if self.split_tag not in SPLITS:
            raise InputError(f"unknown split tag {self.split_tag!r}")

    @property
    def shape(self):
        return self.grid.shape

    @property
    def gt_boxes(self) -> List[GroundTruthBox]:
        return [GroundTruthBox(int(c), *map(float, b)) for b, c in zip(self.boxes, self.classes)]


def _coverage(lo, hi, n):
    cells = np.arange(n)
    return np.clip(np.minimum(hi, cells + 1.0) - np.maximum(lo, cells), 0.0, 1.0)


def sample_object_count(config: GeneratorConfig, rng) -> int:
    if config.empty_prob > 0 and rng.random() < config.empty_prob:
        return 0
    return int(min(rng.poisson(config.mean_objects), config.max_objects))


def generate_scene(config: GeneratorConfig, rng_seed, scene_id=None, split_tag="labeled",
                   num_objects: Optional[int] = None) -> Scene:
    """Draw one scene; identical ``rng_seed`` gives an identical scene.

    ``rng_seed`` is anything :func:`numpy.random.default_rng` accepts.
    ``num_objects`` overrides the sampled object count.
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)
    h, w = config.height, config.width
    count = sample_object_count(config, rng) if num_objects is None else int(num_objects)
    sig = config.signatures()

    grid = config.noise_sigma * rng.normal(size=(h, w, config.num_features))
    boxes = np.zeros((count, 4))
    classes = np.zeros(count, dtype=np.int64)
    for i in range(count):
        c = int(rng.integers(config.num_classes))
        bw, bh = rng.uniform(config.min_size, config.max_size, size=2)
        if config.align:
            # centres on cell centres, box still inside the grid
            cx = rng.integers(math.ceil(bw / 2 - 0.5), math.floor(w - 0.5 - bw / 2) + 1) + 0.5
            cy = rng.integers(math.ceil(bh / 2 - 0.5), math.floor(h - 0.5 - bh / 2) + 1) + 0.5
            x1, y1 = cx - bw / 2, cy - bh / 2
        else:
            x1 = rng.uniform(0.0, w - bw)
            y1 = rng.uniform(0.0, h - bh)
        boxes[i] = (x1, y1, x1 + bw, y1 + bh)
        classes[i] = c
        cover = np.outer(_coverage(y1, y1 + bh, h), _coverage(x1, x1 + bw, w))
        grid += config.amplitude * cover[:, :, None] * sig[c]
    grid = np.round(grid, config.decimals)
    if scene_id is None:
        scene_id = f"scene-{rng_seed}"
    return Scene(scene_id, grid, boxes, classes, split_tag)


def generate_dataset(config: GeneratorConfig, count: int, seed: int, split_tag="labeled"):
    prefix = "L" if split_tag == "labeled" else "U"
    return [generate_scene(config, [seed, i], f"{prefix}{seed}-{i:06d}", split_tag)
            for i in range(count)]


# ---------------------------------------------------------------------------
# line-delimited dataset files


def scene_to_record(scene: Scene) -> dict:
    h, w, f = scene.grid.shape
    return {
        "scene_id": scene.scene_id,
        "split_tag": scene.split_tag,
        "h": h,
        "w": w,
        "f": f,
        "grid": scene.grid.ravel().tolist(),
        "boxes": [asdict(b) for b in scene.gt_boxes],
    }


def scene_from_record(rec: dict) -> Scene:
    try:
        h, w, f = int(rec["h"]), int(rec["w"]), int(rec["f"])
        grid = np.asarray(rec["grid"], dtype=np.float64)
        if grid.size != h * w * f:
            raise InputError(f"scene {rec['scene_id']}: grid has {grid.size} values, expected {h * w * f}")
        boxes = [(b["x1"], b["y1"], b["x2"], b["y2"]) for b in rec["boxes"]]
        classes = [b["class_id"] for b in rec["boxes"]]
        return Scene(rec["scene_id"], grid.reshape(h, w, f), boxes, classes, rec.get("split_tag", "labeled"))
    except KeyError as exc:
        raise InputError(f"scene record missing field {exc}") from None


def write_scenes(path, scenes, config_hash=""):
    header = {"format": SCENES_FORMAT, "version": SCENES_VERSION, "count": len(scenes),
              "config_hash": config_hash}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), sort_keys=True) + "\n")


def read_scenes(path):
    """Read a dataset file; returns ``(header, scenes)``."""
    with open(path) as fh:
        first = fh.readline()
        if not first:
            raise InputError(f"{path}: empty file")
        header = json.loads(first)
        if header.get("format") != SCENES_FORMAT:
            raise InputError(f"{path}: not a scene dataset")
        if header.get("version") != SCENES_VERSION:
            raise InputError(f"{path}: unsupported version {header.get('version')}")
        scenes = [scene_from_record(json.loads(line)) for line in fh if line.strip()]
    if len(scenes) != header["count"]:
        raise InputError(f"{path}: header says {header['count']} scenes, found {len(scenes)}")
    return header, scenes
