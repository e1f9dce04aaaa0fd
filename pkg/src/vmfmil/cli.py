"""Command-line entry point: synth, fit-background, col, wsod, eval, kappa-table.

Exit codes: 0 success, 2 usage error (argparse default), 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from functools import partial
from pathlib import Path

import numpy as np

from . import bench
from .background import (
    ObjectnessBackground,
    UniformBackground,
    fit_background,
    load_background,
    save_background,
)
from .baseline import train_objectness
from .col import ColConfig, Gaussian, Prototypical, RandomInit, TukeyGaussian, Vmf
from .dataio import (
    DatasetIndex,
    PlantedTruth,
    ProposalReader,
    SyntheticWorldSpec,
    generate_synthetic,
    read_index,
    write_index,
    write_manifest,
    write_proposals,
)
from .directional import EXACT, KappaRule, estimate_kappa, ResultantSummary
from .episodes import save_episodes
from .errors import VmfMilError
from .metrics import average_precision, corloc, mean_ap
from .wsod import TrainConfig, load_detections, save_detections

log = logging.getLogger("vmfmil")

KAPPA_RULES = {
    "order0": KappaRule("order0"),
    "order1": KappaRule("order1"),
    "order2": KappaRule("order2"),
    "order3": KappaRule("order3"),
    "orderinf": KappaRule("orderinf"),
    "exact": EXACT,
}


def _kappa_rule(name: str, constant: float | None = None) -> KappaRule | None:
    if name == "constant":
        return None if constant is None else KappaRule.constant(constant)
    return KAPPA_RULES[name]


def _load_dataset(dataset: str):
    index = read_index(dataset)
    reader = ProposalReader(index.proposals_path)
    proposals = {i: reader.read(i) for i in reader.image_ids}
    return index, proposals


def _col_config(args, d: int) -> ColConfig:
    model = {
        "vmf": Vmf(),
        "gaussian": Gaussian(sigma=args.sigma),
        "tukey-gaussian": TukeyGaussian(beta=args.tukey_beta, sigma=args.sigma),
    }[args.model]
    init = RandomInit(seed=args.seed) if args.init == "random" else Prototypical()
    rule = _kappa_rule(args.kappa_rule)
    return ColConfig(
        kappa_rule=rule,
        kappa_init=args.kappa if args.kappa is not None else 0.1 * d,
        max_iters=args.em_iters,
        lam=args.lam,
        model=model,
        init=init,
    )


def cmd_synth(args) -> int:
    spec = SyntheticWorldSpec(
        d=args.d,
        num_classes=args.classes,
        kappa_class=args.kappa_class,
        kappa_background=args.kappa_background,
        proposals_per_image=args.proposals,
        positives_per_image=args.positives,
        full_image_mix=args.full_image_mix,
        seed=args.seed,
        num_base_classes=args.base_classes,
    )
    index, sets, truth = generate_synthetic(spec, args.images_per_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_proposals(sets, out / "proposals.bin")
    write_manifest(index.records, out / "manifest.jsonl")
    index.proposals_path = "proposals.bin"
    index.manifest_path = "manifest.jsonl"
    write_index(index, out / "index.json")
    truth_path = out / "planted.json"
    truth_path.write_text(json.dumps(truth.to_json(), indent=2))
    print(json.dumps({"dataset": str(out / "index.json"), "planted": str(truth_path)}))
    return 0


def cmd_fit_background(args) -> int:
    index, proposals = _load_dataset(args.dataset)
    model = fit_background(
        index, proposals, iou_threshold=args.iou_thresh,
        kappa_rule=KAPPA_RULES[args.kappa_rule],
    )
    save_background(model, args.out)
    print(json.dumps({"background": args.out}))
    return 0


def _background_for(args, index, proposals):
    if args.background == "uniform":
        return UniformBackground()
    if args.background == "objectness":
        return ObjectnessBackground(alpha=args.alpha)
    return load_background(args.background)


def cmd_col(args) -> int:
    index, proposals = _load_dataset(args.dataset)
    d = next(iter(proposals.values())).d
    bg = _background_for(args, index, proposals)
    config = _col_config(args, d)
    episodes = bench.sample_episode_list(
        index, 1, args.k, args.episodes, args.seed, num_query=args.num_query
    )
    job = partial(
        bench.run_col_episode, index, proposals, bg, config,
        nms_iou=None if args.no_nms else args.nms_iou, ap_interp=args.ap_interp,
    )
    outcomes = bench.map_episodes(job, episodes, workers=args.workers)
    report = bench.aggregate(outcomes)
    if args.pooled and outcomes:
        report["map_pooled"] = bench.pooled_map(outcomes, index, args.ap_interp)
    _emit(args, episodes, outcomes, report)
    return 0


def cmd_wsod(args) -> int:
    index, proposals = _load_dataset(args.dataset)
    d = next(iter(proposals.values())).d
    bg = _background_for(args, index, proposals)
    config = _col_config(args, d)
    if args.method == "proto-init":
        config = ColConfig(
            kappa_rule=config.kappa_rule, kappa_init=config.kappa_init, max_iters=0,
            lam=config.lam, model=config.model, init=config.init,
        )
    episodes = bench.sample_episode_list(
        index, args.n, args.k, args.episodes, args.seed, num_query=args.num_query,
        with_extra_negatives=(args.method == "misvm" and args.n == 1),
    )
    if args.method == "misvm":
        if args.n != 1:
            raise VmfMilError("misvm method currently supports N=1 (COL-mode) episodes")
        objectness = train_objectness(index.base_records(), proposals)
        job = partial(
            bench.run_misvm_episode, index, proposals, objectness,
            gamma=args.gamma, nms_iou=None if args.no_nms else args.nms_iou,
            ap_interp=args.ap_interp,
        )
    else:
        train_config = TrainConfig(
            tau=args.tau, l2_reg=args.l2_reg,
            nms_iou=None if args.no_nms else args.nms_iou,
            score_thresh=args.score_thresh,
        )
        job = partial(
            bench.run_wsod_episode, index, proposals, bg, config, train_config,
            ap_interp=args.ap_interp,
        )
    outcomes = bench.map_episodes(job, episodes, workers=args.workers)
    report = bench.aggregate(outcomes)
    if args.pooled and outcomes:
        report["map_pooled"] = bench.pooled_map(outcomes, index, args.ap_interp)
    _emit(args, episodes, outcomes, report)
    return 0


def _emit(args, episodes, outcomes, report) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text)
        save_episodes(episodes, out / "episodes.json")
        dets = [d for o in outcomes for d in o.detections]
        save_detections(dets, out / "detections.jsonl")
    print(text)


def cmd_eval(args) -> int:
    index, _ = _load_dataset(args.dataset)
    detections = load_detections(args.detections)
    classes = sorted({d.class_id for d in detections})
    per_class: dict[str, float | None] = {}
    corlocs = {}
    for class_id in classes:
        gt = {
            r.image_id: r.gt_for(class_id)
            for r in index.records
            if class_id in r.labels and r.gt_boxes
        }
        dets = [d for d in detections if d.class_id == class_id]
        for d in dets:
            if d.image_id not in index.by_id:
                raise VmfMilError(f"detection references unknown image {d.image_id!r}")
        per_class[class_id] = average_precision(dets, gt, iou_thresh=args.iou_thresh,
                                                interpolation=args.ap_interp)
        top: dict[str, np.ndarray] = {}
        best: dict[str, float] = {}
        for d in dets:
            if d.image_id in gt and d.score > best.get(d.image_id, -np.inf):
                best[d.image_id] = d.score
                top[d.image_id] = d.box
        if top and all(gt.get(i) for i in top):
            corlocs[class_id] = corloc(top, {i: gt[i] for i in top}, args.iou_thresh)
    report = {
        "per_class": {
            c: {"ap": per_class[c], "corloc": corlocs.get(c)} for c in classes
        },
        "map": mean_ap(per_class) if per_class else None,
        "corloc_mean": float(np.mean(list(corlocs.values()))) if corlocs else None,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_kappa_table(args) -> int:
    rows = []
    rules = ["order0", "order1", "order2", "order3", "orderinf", "exact"]
    for rbar in np.linspace(args.rbar_min, args.rbar_max, args.points):
        row = {"rbar": f"{rbar:.6f}"}
        summary = ResultantSummary(np.zeros(2), float(min(rbar, 1.0)), 1.0)
        for name in rules:
            if rbar >= 1.0 and name in ("orderinf", "exact"):
                row[name] = "saturated"
            else:
                row[name] = f"{estimate_kappa(summary, args.d, KAPPA_RULES[name]):.6f}"
        rows.append(row)
    writer = csv.DictWriter(
        open(args.out, "w", newline="") if args.out else sys.stdout,
        fieldnames=["rbar"] + rules,
    )
    writer.writeheader()
    writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmfmil",
        description="Few-shot common-object localization and weakly-supervised "
        "detection over precomputed proposal embeddings.",
    )
    parser.add_argument("--log-level", default=os.environ.get("VMFMIL_LOG", "WARNING"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-world dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--base-classes", type=int, default=4)
    p.add_argument("--images-per-class", type=int, default=20)
    p.add_argument("--kappa-class", type=float, default=50.0)
    p.add_argument("--kappa-background", type=float, default=5.0)
    p.add_argument("--proposals", type=int, default=20)
    p.add_argument("--positives", type=int, default=1)
    p.add_argument("--full-image-mix", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-background", help="fit the vMF background on the base split")
    p.add_argument("--dataset", required=True, help="path to index.json")
    p.add_argument("--out", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.3)
    p.add_argument("--kappa-rule", choices=sorted(KAPPA_RULES), default="exact")
    p.set_defaults(func=cmd_fit_background)

    def add_common(p, with_n=False):
        p.add_argument("--dataset", required=True)
        p.add_argument("--background", default="uniform",
                       help="'uniform', 'objectness', or a background JSON path")
        p.add_argument("--alpha", type=float, default=1.0)
        if with_n:
            p.add_argument("--n", type=int, default=5)
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--episodes", type=int, default=100)
        p.add_argument("--num-query", type=int, default=5)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--kappa", type=float, default=None, help="constant kappa")
        p.add_argument("--kappa-rule", choices=["constant"] + sorted(KAPPA_RULES),
                       default="constant")
        p.add_argument("--em-iters", type=int, default=8)
        p.add_argument("--lam", type=float, default=1.0)
        p.add_argument("--model", choices=["vmf", "gaussian", "tukey-gaussian"],
                       default="vmf")
        p.add_argument("--sigma", type=float, default=0.1)
        p.add_argument("--tukey-beta", type=float, default=0.5)
        p.add_argument("--init", choices=["prototypical", "random"],
                       default="prototypical")
        p.add_argument("--nms-iou", type=float, default=0.5)
        p.add_argument("--no-nms", action="store_true")
        p.add_argument("--ap-interp", choices=["all", "11pt"], default="all")
        p.add_argument("--pooled", action="store_true")
        p.add_argument("--out", default=None)

    p = sub.add_parser("col", help="episodic common-object localization benchmark")
    add_common(p)
    p.set_defaults(func=cmd_col)

    p = sub.add_parser("wsod", help="episodic weakly-supervised detection benchmark")
    add_common(p, with_n=True)
    p.add_argument("--method", choices=["vmf", "misvm", "proto-init"], default="vmf")
    p.add_argument("--tau", type=float, default=20.0)
    p.add_argument("--l2-reg", type=float, default=1e-3)
    p.add_argument("--score-thresh", type=float, default=None)
    p.add_argument("--gamma", type=float, default=0.5)
    p.set_defaults(func=cmd_wsod)

    p = sub.add_parser("eval", help="recompute metrics from serialized detections")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--ap-interp", choices=["all", "11pt"], default="all")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kappa-table", help="CSV of all concentration estimators")
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--rbar-min", type=float, default=0.0)
    p.add_argument("--rbar-max", type=float, default=0.99)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_kappa_table)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    try:
        return args.func(args)
    except VmfMilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
