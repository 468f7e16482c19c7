"""Drivers for the desk-scale experiments.

Each experiment trains teachers and students on generated worlds and
reports per-seed APs on a fixed held-out set.  Data streams are derived
from the experiment seed ``s``:

* labeled training scenes: ``generate_dataset(.., seed=1000 + s)``
* unlabeled scenes: ``seed=2000 + s``
* the background-heavy pool of the rho sweep: ``seed=3000 + s``
* held-out test scenes: ``test_seed`` (shared by all seeds)

Teachers and baseline students are cached on the :class:`Benchmark`, so
the experiments can share them.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .config import RunConfig
from .metrics import EvalReport, evaluate
from .model import DenseModel
from .scenes import Scene, generate_dataset, generate_scene, sample_object_count
from .semisup import MixConfig, assemble_manifest, build_routes, filter_unlabeled, mix_pools
from .teacher import calibrate_threshold, detect, generate_targets
from .training import train

logger = logging.getLogger(__name__)

# One class, objects of side ~2 centred on cells, matching a single anchor
# scale: a linear 3x3 scorer can separate centre anchors from the rest.
SANITY_WORLD = {
    "generator": {"num_classes": 1, "amplitude": 8.0, "min_size": 1.95, "max_size": 2.05,
                  "align": True, "mean_objects": 1.0, "max_objects": 3},
    "anchors": {"scales": [2.0]},
}


def make_model(config: RunConfig, role="student") -> DenseModel:
    g = config.generator_config()
    return DenseModel(g.num_classes, g.num_features, len(config.scales), config.window(role))


def evaluate_model(model, anchors, scenes, inference, metadata=None) -> EvalReport:
    dets = [detect(model, anchors, s.grid, inference)[0] for s in scenes]
    return evaluate(dets, [s.boxes for s in scenes], [s.classes for s in scenes],
                    model.num_classes, metadata)


def background_pool(generator, count, seed, background_fraction=0.5, split_tag="unlabeled"):
    """Unlabeled scenes of which exactly ``round(fraction * count)`` are
    background-only; the others hold at least one object."""
    n_bg = int(round(background_fraction * count))
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 1])
        if i < n_bg:
            k = 0
        else:
            k = 0
            while k == 0:
                k = sample_object_count(generator, rng) if generator.mean_objects > 0 else 1
        scenes.append(generate_scene(generator, [seed, i], f"P{seed}-{i:06d}", split_tag, num_objects=k))
    return scenes


def mean_instances(scenes):
    return float(np.mean([len(s.classes) for s in scenes]))


@dataclass
class Benchmark:
    """The pinned synthetic benchmark and its cached intermediate models."""

    config: RunConfig = field(default_factory=RunConfig)
    num_labeled: int = 2000
    num_unlabeled: int = 4000
    num_test: int = 500
    test_seed: int = 99
    seeds: Sequence[int] = (1, 2, 3)
    workers: int = 1

    def __post_init__(self):
        self.generator = self.config.generator_config()
        self.anchors = self.config.anchors()
        self.inference = self.config.inference_config()
        self.hp = self.config.loss_hyperparams()
        self._cache = {}

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # data ------------------------------------------------------------------

    def test_set(self) -> List[Scene]:
        return self._cached("test", lambda: generate_dataset(self.generator, self.num_test, self.test_seed))

    def labeled(self, seed) -> List[Scene]:
        return self._cached(("labeled", seed),
                            lambda: generate_dataset(self.generator, self.num_labeled, 1000 + seed))

    def unlabeled(self, seed) -> List[Scene]:
        return self._cached(("unlabeled", seed), lambda: generate_dataset(
            self.generator, self.num_unlabeled, 2000 + seed, "unlabeled"))

    # models ----------------------------------------------------------------

    def train(self, scenes, role, mode, seed, teacher=None, routes=None):
        model = make_model(self.config, role)
        cfg = self.config.trainer_config(seed=seed, loss_mode=mode, workers=self.workers)
        train(model, scenes, self.anchors, cfg, self.hp, teacher, routes, self.config.assign_config())
        return model

    def ap(self, model):
        return evaluate_model(model, self.anchors, self.test_set(), self.inference).ap

    def teacher(self, seed):
        return self._cached(("teacher", seed),
                            lambda: self.train(self.labeled(seed), "teacher", "baseline", seed))

    def student_baseline(self, seed):
        return self._cached(("baseline", seed),
                            lambda: self.train(self.labeled(seed), "student", "baseline", seed))

    def annotation(self, seed):
        """Calibration and target records of the unlabeled set."""
        def build():
            cal = self.config.calibration
            teacher = self.teacher(seed)
            unlabeled = self.unlabeled(seed)
            calibration = calibrate_threshold(teacher, self.anchors, [s.grid for s in unlabeled],
                                              mean_instances(self.labeled(seed)), self.inference,
                                              cal["tolerance"], cal["max_iter"])
            records = generate_targets(teacher, self.anchors, unlabeled, calibration, self.inference)
            return calibration, records
        return self._cached(("annotation", seed), build)

    def transfer_train(self, seed, mode, unlabeled_scenes, records, loss_mode="adl_distill"):
        labeled = self.labeled(seed)
        ids = [s.scene_id for s in unlabeled_scenes]
        manifest = assemble_manifest([s.scene_id for s in labeled], ids, mode,
                                     [r.scene_id for r in records])
        by_id = {s.scene_id: s for s in labeled}
        by_id.update({s.scene_id: s for s in unlabeled_scenes})
        scenes, routes = build_routes(manifest, by_id, {r.scene_id: r for r in records})
        soft = any(r.use_soft for r in routes)
        mode_used = loss_mode if soft else "baseline"
        teacher = self.teacher(seed) if soft else None
        return self.train(scenes, "student", mode_used, seed, teacher, routes)


def sanity_run(seed=0, num_train=1000, num_test=300):
    """Baseline teacher-window model on the sanity world; returns
    ``(model, loss_log, report)``."""
    config = RunConfig(SANITY_WORLD)
    gen = config.generator_config()
    anchors = config.anchors()
    model = make_model(config, "teacher")
    result = train(model, generate_dataset(gen, num_train, 1000 + seed), anchors,
                   config.trainer_config(seed=seed), config.loss_hyperparams(),
                   assign_cfg=config.assign_config())
    test = generate_dataset(gen, num_test, 99)
    return model, result.loss_log, evaluate_model(model, anchors, test, config.inference_config())


def _mean(values):
    return float(np.mean(values))


def distillation_benefit(bench: Benchmark, modes=("adl_distill",)) -> Dict:
    """Teacher, baseline student and distilled students on labeled data only."""
    rows = []
    for s in bench.seeds:
        row = {"seed": s, "teacher": bench.ap(bench.teacher(s)),
               "baseline": bench.ap(bench.student_baseline(s))}
        for mode in modes:
            row[mode] = bench.ap(bench.train(bench.labeled(s), "student", mode, s, bench.teacher(s)))
        logger.info("distillation seed %d: %s", s, row)
        rows.append(row)
    return {"rows": rows, "mean": {k: _mean([r[k] for r in rows]) for k in rows[0] if k != "seed"}}


def semisup_ablation(bench: Benchmark) -> Dict:
    """Supervised, hard-targets-only and hard+soft students."""
    rows = []
    for s in bench.seeds:
        _, records = bench.annotation(s)
        unlabeled = bench.unlabeled(s)
        row = {"seed": s, "supervised": bench.ap(bench.student_baseline(s)),
               "hard_only": bench.ap(bench.transfer_train(s, "semisup-hard-only", unlabeled, records)),
               "hard_soft": bench.ap(bench.transfer_train(s, "semisup-full", unlabeled, records))}
        logger.info("semi-supervised seed %d: %s", s, row)
        rows.append(row)
    return {"rows": rows, "mean": {k: _mean([r[k] for r in rows]) for k in rows[0] if k != "seed"}}


def rho_sweep(bench: Benchmark, rhos=(0.0, 0.25, 0.5, 0.75, 1.0), pool_size=4000, total=1000,
              background_fraction=0.5, mode="semisup-full") -> List[Dict]:
    """AP as a function of the positive-pool fraction of the unlabeled set.

    The teacher threshold is the one calibrated on the regular unlabeled
    set; the pool is annotated with it and split by teacher response.
    """
    by_rho = {rho: {} for rho in rhos}
    for s in bench.seeds:
        calibration, _ = bench.annotation(s)
        pool = background_pool(bench.generator, pool_size, 3000 + s, background_fraction)
        records = generate_targets(bench.teacher(s), bench.anchors, pool, calibration, bench.inference)
        positive, negative = filter_unlabeled(records)
        logger.info("rho pool seed %d: %d positive, %d negative", s, len(positive), len(negative))
        pool_by_id = {p.scene_id: p for p in pool}
        for rho in rhos:
            ids = mix_pools(positive, negative, MixConfig(rho, total, s))
            chosen = [pool_by_id[i] for i in ids]
            by_rho[rho][s] = bench.ap(bench.transfer_train(s, mode, chosen, records))
            logger.info("rho %.2f seed %d: %.4f", rho, s, by_rho[rho][s])
    return [{"rho": rho, "ap_by_seed": by_rho[rho], "ap_mean": _mean(list(by_rho[rho].values()))}
            for rho in rhos]


def self_distillation(bench: Benchmark) -> Dict:
    """A trained student distilled into an identically parameterized copy."""
    rows = []
    for s in bench.seeds:
        teacher = bench.student_baseline(s)
        student = bench.train(bench.labeled(s), "student", "self_distill", s, teacher)
        rows.append({"seed": s, "baseline": bench.ap(teacher), "self_distill": bench.ap(student)})
        logger.info("self distillation seed %d: %s", s, rows[-1])
    return {"rows": rows, "mean": {k: _mean([r[k] for r in rows]) for k in rows[0] if k != "seed"}}
