"""Episode-level benchmark orchestration shared by the CLI and the test suite.

Each episode is a pure function of (dataset, background, config, episode seed),
so episodes parallelize across processes with no shared mutable state; results
are identical for any worker count, only completion order can differ and the
implementation re-sorts by episode index.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .background import BackgroundModel
from .baseline import ObjectnessScorer, run_misvm
from .col import ColConfig, run_col, score_query
from .dataio import DatasetIndex, ProposalSet
from .episodes import Episode, sample_benchmark
from .errors import ValidationError
from .metrics import Detection, average_precision, corloc, mean_ap, nms
from .wsod import TrainConfig, run_wsod


@dataclass
class EpisodeOutcome:
    episode: Episode
    corloc: float | None  # query CorLoc (N=1 modes)
    ap: float | None  # episode mAP over target classes
    support_top: dict[str, int] = field(default_factory=dict)
    detections: list[Detection] = field(default_factory=list)
    per_class_ap: dict[str, float | None] = field(default_factory=dict)


def _query_eval_n1(
    index: DatasetIndex,
    proposals: dict[str, ProposalSet],
    episode: Episode,
    class_id: str,
    score_fn,
    nms_iou: float | None = 0.5,
    ap_interp: str = "all",
) -> tuple[float | None, float | None, list[Detection]]:
    """CorLoc and AP for a single-class episode from a proposal-score function."""
    top_boxes: dict[str, np.ndarray] = {}
    gt: dict[str, list[np.ndarray]] = {}
    detections: list[Detection] = []
    for image_id in episode.query:
        rec = index.by_id[image_id]
        if class_id not in rec.labels:
            continue
        pset = proposals[image_id]
        scores = np.asarray(score_fn(pset), dtype=np.float64)
        top_boxes[image_id] = pset.boxes[int(np.argmax(scores))].astype(np.float64)
        gt[image_id] = rec.gt_for(class_id)
        keep = nms(pset.boxes, scores, nms_iou) if nms_iou is not None else range(
            pset.num_proposals
        )
        for idx in keep:
            detections.append(
                Detection(image_id, class_id, pset.boxes[idx].astype(np.float64),
                          float(scores[idx]))
            )
    if not top_boxes:
        return None, None, []
    cl = corloc(top_boxes, gt)
    ap = average_precision(detections, gt, interpolation=ap_interp)
    return cl, ap, detections


def run_col_episode(
    index: DatasetIndex,
    proposals: dict[str, ProposalSet],
    bg: BackgroundModel,
    config: ColConfig,
    episode: Episode,
    nms_iou: float | None = 0.5,
    ap_interp: str = "all",
) -> EpisodeOutcome:
    (class_id,) = episode.target_classes
    support = [proposals[i] for i in episode.support[class_id]]
    result = run_col(config, support, bg)
    cl, ap, dets = _query_eval_n1(
        index, proposals, episode, class_id,
        lambda pset: score_query(result.theta, result.kappa_final, bg, config.lam,
                                 pset, config.model)[1],
        nms_iou=nms_iou, ap_interp=ap_interp,
    )
    return EpisodeOutcome(
        episode=episode, corloc=cl, ap=ap,
        support_top=dict(zip(result.image_ids, result.top_index)),
        detections=dets,
    )


def run_misvm_episode(
    index: DatasetIndex,
    proposals: dict[str, ProposalSet],
    objectness: ObjectnessScorer | None,
    episode: Episode,
    gamma: float = 0.5,
    c_reg: float = 1.0,
    max_rounds: int = 10,
    nms_iou: float | None = 0.5,
    ap_interp: str = "all",
) -> EpisodeOutcome:
    """MI-SVM on a single-class episode, using the sampler's extra negatives."""
    (class_id,) = episode.target_classes
    positives = [proposals[i] for i in episode.support[class_id]]
    neg_ids = episode.extra_negatives.get(class_id, [])
    if not neg_ids:
        raise ValidationError("MI-SVM needs an episode with extra negatives")
    negatives = [proposals[i] for i in neg_ids]
    result = run_misvm(
        class_id, positives, negatives, objectness=objectness,
        gamma=gamma, c_reg=c_reg, max_rounds=max_rounds,
    )
    cl, ap, dets = _query_eval_n1(
        index, proposals, episode, class_id,
        lambda pset: result.svm.scores(pset.features),
        nms_iou=nms_iou, ap_interp=ap_interp,
    )
    return EpisodeOutcome(
        episode=episode, corloc=cl, ap=ap, support_top=dict(result.selections),
        detections=dets,
    )


def run_wsod_episode(
    index: DatasetIndex,
    proposals: dict[str, ProposalSet],
    bg: BackgroundModel,
    col_config: ColConfig,
    train_config: TrainConfig,
    episode: Episode,
    ap_interp: str = "all",
) -> EpisodeOutcome:
    support_by_class = {
        c: [proposals[i] for i in episode.support[c]] for c in episode.target_classes
    }
    query_sets = [proposals[i] for i in episode.query]
    result = run_wsod(support_by_class, query_sets, col_config, train_config, bg)
    per_class: dict[str, float | None] = {}
    for class_id in episode.target_classes:
        gt = {
            i: index.by_id[i].gt_for(class_id)
            for i in episode.query
            if class_id in index.by_id[i].labels
        }
        dets = [d for d in result.detections if d.class_id == class_id]
        per_class[class_id] = (
            average_precision(dets, gt, interpolation=ap_interp) if gt else None
        )
    defined = [v for v in per_class.values() if v is not None]
    support_top = {
        img: idx
        for cres in result.col_results.values()
        for img, idx in zip(cres.image_ids, cres.top_index)
    }
    return EpisodeOutcome(
        episode=episode,
        corloc=None,
        ap=float(np.mean(defined)) if defined else None,
        support_top=support_top,
        detections=result.detections,
        per_class_ap=per_class,
    )


# --- parallel driver -------------------------------------------------------

_WORKER_JOB = None


def _init_worker(job):
    global _WORKER_JOB
    _WORKER_JOB = job


def _run_indexed(args):
    i, episode = args
    return i, _WORKER_JOB(episode)


def map_episodes(job, episodes: list[Episode], workers: int = 1):
    """Apply `job` to every episode; result order always matches input order."""
    if workers <= 1:
        return [job(e) for e in episodes]
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_init_worker, initargs=(job,)
    ) as pool:
        results = list(pool.map(_run_indexed, list(enumerate(episodes))))
    results.sort(key=lambda pair: pair[0])
    return [r for _, r in results]


def aggregate(outcomes: list[EpisodeOutcome]) -> dict:
    """Mean CorLoc / mAP over episodes with normal-approximation 95% CIs."""
    corlocs = [o.corloc for o in outcomes if o.corloc is not None]
    aps = [o.ap for o in outcomes if o.ap is not None]
    per_class: dict[str, list[float]] = {}
    for o in outcomes:
        for cls, ap in o.per_class_ap.items():
            if ap is not None:
                per_class.setdefault(cls, []).append(ap)

    def ci(values):
        if len(values) < 2:
            return float("nan")
        return 1.96 * float(np.std(values, ddof=1)) / math.sqrt(len(values))

    report = {
        "n_episodes": len(outcomes),
        "corloc_mean": float(np.mean(corlocs)) if corlocs else None,
        "corloc_ci95": ci(corlocs) if corlocs else None,
        "map": float(np.mean(aps)) if aps else None,
        "map_ci95": ci(aps) if aps else None,
        "per_class": {
            cls: {"ap": float(np.mean(vals)), "n": len(vals)}
            for cls, vals in sorted(per_class.items())
        },
    }
    return report


def pooled_map(outcomes: list[EpisodeOutcome], index: DatasetIndex,
               ap_interp: str = "all") -> float:
    """Alternative mAP: pool detections across episodes before averaging classes."""
    by_class: dict[str, list[Detection]] = {}
    gt_by_class: dict[str, dict[str, list[np.ndarray]]] = {}
    for k, o in enumerate(outcomes):
        for det in o.detections:
            # disambiguate repeated query images across episodes
            tagged = Detection(f"{k}:{det.image_id}", det.class_id, det.box, det.score)
            by_class.setdefault(det.class_id, []).append(tagged)
        for class_id in o.episode.target_classes:
            for image_id in o.episode.query:
                rec = index.by_id[image_id]
                if class_id in rec.labels:
                    gt_by_class.setdefault(class_id, {})[f"{k}:{image_id}"] = rec.gt_for(
                        class_id
                    )
    per_class = {
        cls: average_precision(dets, gt_by_class.get(cls, {}), interpolation=ap_interp)
        for cls, dets in by_class.items()
    }
    return mean_ap(per_class)


def sample_episode_list(
    index: DatasetIndex,
    n_way: int,
    k_shot: int,
    num_episodes: int,
    seed: int,
    num_query: int = 5,
    with_extra_negatives: bool = False,
) -> list[Episode]:
    return list(
        sample_benchmark(
            index, n_way, k_shot, num_episodes, seed,
            num_query=num_query, with_extra_negatives=with_extra_negatives,
        )
    )
