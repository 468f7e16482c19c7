"""Command-line driver for the teacher / annotate / filter / distill pipeline.

Exit codes: 0 success, 1 a check failed (gradcheck), 2 configuration or
input error, 3 numerical abort during training.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import experiments
from .config import RunConfig
from .exceptions import ConfigError, InputError, NumericalAbort, OracleFailure, UsageError
from .gradcheck import check_kernels, format_table
from .metrics import emit_report, evaluate, write_loss_csv, write_sweep_csv
from .model import DenseModel, load_checkpoint, save_checkpoint
from .scenes import SPLITS, generate_dataset, read_scenes, write_scenes
from .semisup import (
    MODES,
    MixConfig,
    assemble_manifest,
    build_routes,
    filter_unlabeled,
    mix_pools,
    read_manifest,
    write_manifest,
)
from .teacher import CalibrationResult, calibrate_threshold, detect, generate_targets, read_records, write_records
from .training import DISTILL_MODES, LOSS_MODES, train

logger = logging.getLogger("adaptive_distill")

SELECTION_FORMAT = "adaptive-distill/selection"


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _config(args):
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _scenes(path):
    if not os.path.exists(path):
        raise InputError(f"no such dataset: {path}")
    return read_scenes(path)[1]


def _checkpoint(path):
    if not os.path.exists(path):
        raise InputError(f"no such checkpoint: {path}")
    return load_checkpoint(path)


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _check_model(model, config):
    g = config.generator_config()
    if model.num_slots != len(config.scales) or model.num_classes != g.num_classes:
        raise InputError("checkpoint does not match the configured classes or anchor scales")


def _save_training(out, config, result, seed, window):
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(ckpt, result.model)
    write_loss_csv(os.path.join(out, "loss.csv"), result.loss_log)
    last = result.loss_log[-1] if result.loss_log else {}
    _write_json(os.path.join(out, "run.json"), {
        "config_hash": config.config_hash,
        "loss_mode": config["trainer"]["loss_mode"],
        "seed": seed,
        "window": window,
        "iterations": len(result.loss_log),
        "final_loss": last.get("total"),
        "checkpoint_sha256": _sha256(ckpt),
    })
    return ckpt


def _run_training(config, scenes, mode, window, out, seed, teacher_path=None, routes=None, workers=1):
    if seed is not None:
        config = config.override("trainer", seed=seed)
    config = config.override("trainer", loss_mode=mode)
    seed = config["trainer"]["seed"]
    teacher = None
    if mode != "baseline":
        if not teacher_path:
            raise UsageError(f"--mode {mode} needs --teacher")
        teacher = _checkpoint(teacher_path)
        _check_model(teacher, config)
    g = config.generator_config()
    if mode == "self_distill" and teacher is not None:
        window = teacher.window
    model = DenseModel(g.num_classes, g.num_features, len(config.scales), window)
    result = train(model, scenes, config.anchors(), config.trainer_config(workers=workers),
                   config.loss_hyperparams(), teacher, routes, config.assign_config())
    ckpt = _save_training(out, config, result, seed, window)
    print(f"wrote {ckpt} ({len(result.loss_log)} iterations, final loss "
          f"{result.loss_log[-1]['total'] if result.loss_log else float('nan'):.6f})")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    config = _config(args)
    if args.count < 0:
        raise InputError("--count must be non-negative")
    gen = config.generator_config()
    if args.background_fraction is not None:
        scenes = experiments.background_pool(gen, args.count, args.seed, args.background_fraction, args.split)
    else:
        scenes = generate_dataset(gen, args.count, args.seed, args.split)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_scenes(args.out, scenes, config.config_hash)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_train(args):
    config = _config(args)
    scenes = _scenes(args.data)
    window = args.window if args.window is not None else config.window(args.role)
    _run_training(config, scenes, args.mode, window, args.out, args.seed, args.teacher, None, args.workers)


def _labeled_average(value):
    try:
        return float(value)
    except ValueError:
        return experiments.mean_instances(_scenes(value))


def cmd_annotate(args):
    config = _config(args)
    teacher = _checkpoint(args.teacher)
    _check_model(teacher, config)
    scenes = _scenes(args.data)
    if not scenes:
        raise InputError("no scenes to annotate")
    anchors = config.anchors()
    inference = config.inference_config()
    if args.calibration:
        calibration = CalibrationResult(**_read_json(args.calibration))
    else:
        cal = config.calibration
        calibration = calibrate_threshold(teacher, anchors, [s.grid for s in scenes],
                                          _labeled_average(args.labeled_stats), inference,
                                          cal["tolerance"], cal["max_iter"])
    records = generate_targets(teacher, anchors, scenes, calibration, inference)
    write_records(args.out, records, calibration, config.config_hash)
    _write_json(os.path.join(args.out, "calibration.json"), calibration.__dict__)
    avg = float(np.mean([len(r.hard_targets) for r in records]))
    print(f"threshold {calibration.threshold:.6f}  labeled avg {calibration.avg_instances_labeled:.4f}  "
          f"unlabeled avg {avg:.4f}")
    if calibration.boundary:
        print("warning: calibration target unreachable; threshold left at the score floor (boundary)")
    elif not calibration.within_tolerance:
        print("warning: calibration did not reach the tolerance")


def cmd_filter(args):
    header, records = read_records(args.records)
    positive, negative = filter_unlabeled(records)
    selected = mix_pools(positive, negative, MixConfig(args.rho, args.total, args.seed))
    _write_json(args.out, {
        "format": SELECTION_FORMAT,
        "config_hash": header.get("config_hash", ""),
        "records": os.path.abspath(args.records),
        "rho": args.rho,
        "total": args.total,
        "seed": args.seed,
        "positive_pool": len(positive),
        "negative_pool": len(negative),
        "selected": selected,
    })
    n_pos = sum(1 for s in selected if s in set(positive))
    print(f"positive pool {len(positive)}  negative pool {len(negative)}  "
          f"selected {len(selected)} ({n_pos} positive, {len(selected) - n_pos} negative)")


def cmd_manifest(args):
    config = _config(args)
    labeled = _scenes(args.labeled)
    unlabeled_ids, record_ids, provenance = [], None, {"labeled": os.path.abspath(args.labeled)}
    if args.mode.startswith("semisup"):
        if not (args.unlabeled and args.records):
            raise UsageError(f"mode {args.mode} needs --unlabeled and --records")
        provenance["unlabeled"] = os.path.abspath(args.unlabeled)
        provenance["records"] = os.path.abspath(args.records)
        _, records = read_records(args.records)
        record_ids = [r.scene_id for r in records]
        if args.selection:
            unlabeled_ids = _read_json(args.selection)["selected"]
        else:
            unlabeled_ids = [s.scene_id for s in _scenes(args.unlabeled)]
    provenance["config_hash"] = config.config_hash
    manifest = assemble_manifest([s.scene_id for s in labeled], unlabeled_ids, args.mode, record_ids, provenance)
    write_manifest(args.out, manifest)
    print(f"manifest {args.mode}: {len(manifest.labeled_ids)} labeled, {len(manifest.unlabeled_ids)} unlabeled")


def cmd_distill(args):
    config = _config(args)
    manifest = read_manifest(args.manifest)
    prov = manifest.provenance
    scenes_by_id = {s.scene_id: s for s in _scenes(prov["labeled"])}
    records_by_id = {}
    if manifest.unlabeled_ids:
        scenes_by_id.update({s.scene_id: s for s in _scenes(prov["unlabeled"])})
        records_by_id = {r.scene_id: r for r in read_records(prov["records"])[1]}
    missing = [i for i in manifest.labeled_ids + manifest.unlabeled_ids if i not in scenes_by_id]
    if missing:
        raise InputError(f"manifest references unknown scene {missing[0]}")
    manifest.validate(set(records_by_id))
    scenes, routes = build_routes(manifest, scenes_by_id, records_by_id)
    soft = any(r.use_soft for r in routes)
    if args.mode:
        mode = args.mode
    elif soft:
        configured = config["trainer"]["loss_mode"]
        mode = configured if configured in DISTILL_MODES else "adl_distill"
    else:
        mode = "baseline"
    _run_training(config, scenes, mode, config.window("student"), args.out, args.seed, args.teacher,
                  routes, args.workers)


def cmd_eval(args):
    config = _config(args)
    model = _checkpoint(args.model)
    _check_model(model, config)
    scenes = _scenes(args.data)
    anchors = config.anchors()
    inference = config.inference_config()
    dets = [detect(model, anchors, s.grid, inference)[0] for s in scenes]
    meta = {"config_hash": config.config_hash, "seed": config["trainer"]["seed"],
            "model_sha256": _sha256(args.model), "num_scenes": len(scenes)}
    report = evaluate(dets, [s.boxes for s in scenes], [s.classes for s in scenes], model.num_classes, meta)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "detections.jsonl"), "w") as fh:
        for s, d in zip(scenes, dets):
            fh.write(json.dumps({"scene_id": s.scene_id,
                                 "detections": [{"class_id": x.class_id, "x1": x.box[0], "y1": x.box[1],
                                                 "x2": x.box[2], "y2": x.box[3], "score": x.score}
                                                for x in d.to_list()]}, sort_keys=True) + "\n")
    emit_report(args.out, report)
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"AP {fmt(report.ap)}  AP50 {fmt(report.ap50)}  AP75 {fmt(report.ap75)}")


def cmd_gradcheck(args):
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    reports = check_kernels(args.trials, args.seed, perturb=args.perturb)
    print(format_table(reports))
    return 0 if all(r.passed for r in reports) else 1


def cmd_experiment(args):
    config = _config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    bench = experiments.Benchmark(config, seeds=seeds, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    if args.name == "rho":
        rhos = tuple(float(r) for r in args.rhos.split(","))
        rows = experiments.rho_sweep(bench, rhos)
        write_sweep_csv(os.path.join(args.out, "rho_sweep.csv"), rows)
        result = {"rows": [dict(r, ap_by_seed={str(k): v for k, v in r["ap_by_seed"].items()}) for r in rows]}
    else:
        run = {"distill": lambda: experiments.distillation_benefit(bench, ("adl_distill", "fdl_baseline",
                                                                           "mimic_baseline")),
               "semisup": lambda: experiments.semisup_ablation(bench),
               "self": lambda: experiments.self_distillation(bench)}[args.name]
        result = run()
    result["config_hash"] = config.config_hash
    _write_json(os.path.join(args.out, f"{args.name}.json"), result)
    print(json.dumps(result.get("mean", result.get("rows")), indent=1, sort_keys=True))


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="adistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration (JSON); defaults when omitted")
        return sp

    g = with_config(sub.add_parser("gen-data", help="generate a synthetic scene dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--split", choices=SPLITS, default="labeled")
    g.add_argument("--background-fraction", type=float, default=None,
                   help="make exactly this fraction of scenes background-only")
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("train", help="train a detector on labeled scenes"))
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=LOSS_MODES, default="baseline")
    t.add_argument("--out", required=True)
    t.add_argument("--role", choices=("teacher", "student"), default="teacher",
                   help="which configured window size to use")
    t.add_argument("--window", type=int, default=None)
    t.add_argument("--teacher", help="teacher checkpoint for the distillation modes")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    a = with_config(sub.add_parser("annotate", help="calibrate the teacher and write target records"))
    a.add_argument("--teacher", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--labeled-stats", help="mean boxes per labeled image, or a labeled dataset file")
    a.add_argument("--calibration", help="reuse a calibration.json instead of calibrating")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_annotate)

    f = sub.add_parser("filter", help="split records by teacher response and draw a rho mix")
    f.add_argument("--records", required=True)
    f.add_argument("--rho", type=float, required=True)
    f.add_argument("--total", type=int, required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter)

    m = with_config(sub.add_parser("manifest", help="assemble a transfer-set manifest"))
    m.add_argument("--labeled", required=True)
    m.add_argument("--unlabeled")
    m.add_argument("--records")
    m.add_argument("--selection", help="output of `filter`; all unlabeled scenes when omitted")
    m.add_argument("--mode", choices=MODES, required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_manifest)

    d = with_config(sub.add_parser("distill", help="train a student on a transfer-set manifest"))
    d.add_argument("--manifest", required=True)
    d.add_argument("--teacher")
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=LOSS_MODES, default=None)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_distill)

    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"))
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss kernel")
    gc.add_argument("--trials", type=int, default=1000)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    x = with_config(sub.add_parser("experiment", help="run a desk-scale benchmark experiment"))
    x.add_argument("name", choices=("distill", "semisup", "rho", "self"))
    x.add_argument("--out", required=True)
    x.add_argument("--seeds", default="1,2,3")
    x.add_argument("--rhos", default="0,0.25,0.5,0.75,1")
    x.add_argument("--workers", type=int, default=1)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} (scene_id={exc.scene_id}, term={exc.term})", file=sys.stderr)
        return 3
    except (ConfigError, InputError, UsageError, OracleFailure, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
