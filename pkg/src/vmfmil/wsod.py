"""N-class weakly-supervised detection on top of the COL module.

Per class: COL pseudo-labels the positive support images, a cosine classifier
is trained with sigmoid cross-entropy (quasi-Newton, strong Wolfe), and query
proposals are scored class-wise with optional greedy NMS.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .background import BackgroundModel, UniformBackground
from .col import ColConfig, ColResult, run_col
from .dataio import ProposalSet
from .errors import DimensionMismatchError, ValidationError
from .metrics import Detection, nms
from .optim import minimize_lbfgs

log = logging.getLogger(__name__)


@dataclass
class CosineClassifier:
    v: np.ndarray
    tau: float
    class_id: str

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.tau <= 0:
            raise ValidationError("tau must be > 0")
        if np.linalg.norm(self.v) <= 0:
            raise ValidationError("classifier weight must be nonzero")

    def scores(self, features: np.ndarray) -> np.ndarray:
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape[-1] != self.v.size:
            raise DimensionMismatchError(
                f"features have dim {feats.shape[-1]}, classifier has {self.v.size}"
            )
        return self.tau * (feats @ self.v) / np.linalg.norm(self.v)

    def to_json(self) -> dict:
        return {"class": self.class_id, "v": self.v.tolist(), "tau": self.tau}

    @classmethod
    def from_json(cls, obj: dict) -> "CosineClassifier":
        return cls(v=np.asarray(obj["v"]), tau=float(obj["tau"]), class_id=obj["class"])


@dataclass
class PseudoLabelSet:
    class_id: str
    positives: list[tuple[str, int, np.ndarray]]  # (image_id, proposal idx, feature)
    negatives: np.ndarray  # (n_neg, d)


@dataclass
class TrainConfig:
    tau: float = 20.0
    l2_reg: float = 1e-3
    gtol: float = 1e-6
    max_iters: int = 200
    nms_iou: float | None = 0.5
    score_thresh: float | None = None


def build_pseudo_labels(
    class_id: str,
    positive_sets: list[ProposalSet],
    negative_sets: list[ProposalSet],
    col_result: ColResult,
) -> PseudoLabelSet:
    """Top soft-label proposal per positive image; all negative-image proposals."""
    if not positive_sets:
        raise ValidationError(f"class {class_id} has no positive images")
    if col_result.image_ids != [p.image_id for p in positive_sets]:
        raise ValidationError("col_result does not match the positive images")
    positives = [
        (pset.image_id, idx, pset.features[idx].astype(np.float64))
        for pset, idx in zip(positive_sets, col_result.top_index)
    ]
    if negative_sets:
        negatives = np.vstack([p.features.astype(np.float64) for p in negative_sets])
    else:
        negatives = np.zeros((0, positive_sets[0].d))
        log.warning("class %s: no negative images; training against l2 only", class_id)
    return PseudoLabelSet(class_id=class_id, positives=positives, negatives=negatives)


def _bce_loss_grad(v, x, y, tau, l2_reg):
    n2 = float(v @ v) + 1e-12
    n = np.sqrt(n2)
    s = tau * (x @ v) / n
    # softplus(s) - y*s, stable form
    loss = float(np.mean(np.logaddexp(0.0, s) - y * s)) + 0.5 * l2_reg * n2
    resid = expit(s) - y  # dloss/ds
    # ds/dv = tau * (x/n - (x.v) v / n^3)
    coeff = resid / len(y)
    grad = tau * (coeff @ x) / n - tau * float(coeff @ (x @ v)) * v / (n2 * n)
    grad += l2_reg * v
    return loss, grad


def train_classifier(
    labels: PseudoLabelSet, config: TrainConfig = TrainConfig()
) -> CosineClassifier:
    """Fit the cosine-head weight by minimizing mean sigmoid cross-entropy."""
    if not labels.positives:
        raise ValidationError(f"class {labels.class_id}: need at least one positive")
    pos = np.stack([f for _, _, f in labels.positives])
    x = np.vstack([pos, labels.negatives]) if labels.negatives.size else pos
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(labels.negatives))])
    v0 = pos.mean(axis=0)
    if np.linalg.norm(v0) < 1e-9:
        v0 = np.ones(pos.shape[1]) / np.sqrt(pos.shape[1])
    else:
        v0 = v0 / np.linalg.norm(v0)
    result = minimize_lbfgs(
        lambda v: _bce_loss_grad(v, x, y, config.tau, config.l2_reg),
        v0,
        gtol=config.gtol,
        max_iters=config.max_iters,
    )
    if not np.isfinite(result.fun):
        raise FloatingPointError(
            f"class {labels.class_id}: non-finite loss (|v|={np.linalg.norm(result.x)})"
        )
    return CosineClassifier(v=result.x, tau=config.tau, class_id=labels.class_id)


def detect(
    classifiers: list[CosineClassifier],
    query: ProposalSet,
    nms_iou: float | None = 0.5,
    score_thresh: float | None = None,
) -> list[Detection]:
    """Class-wise sigmoid scoring with optional greedy NMS per class."""
    detections: list[Detection] = []
    for clf in classifiers:
        probs = expit(clf.scores(query.features))
        if nms_iou is not None:
            keep = nms(query.boxes, probs, nms_iou)
        else:
            keep = list(range(query.num_proposals))
        for idx in keep:
            score = float(probs[idx])
            if score_thresh is not None and score < score_thresh:
                continue
            detections.append(
                Detection(
                    image_id=query.image_id,
                    class_id=clf.class_id,
                    box=query.boxes[idx].astype(np.float64),
                    score=score,
                )
            )
    return detections


@dataclass
class WsodResult:
    classifiers: dict[str, CosineClassifier]
    col_results: dict[str, ColResult]
    pseudo_labels: dict[str, PseudoLabelSet]
    detections: list[Detection] = field(default_factory=list)


def run_wsod(
    support_by_class: dict[str, list[ProposalSet]],
    query_sets: list[ProposalSet],
    col_config: ColConfig,
    train_config: TrainConfig = TrainConfig(),
    bg: BackgroundModel = UniformBackground(),
) -> WsodResult:
    """One class at a time: COL -> pseudo labels -> classifier; then detect."""
    classifiers: dict[str, CosineClassifier] = {}
    col_results: dict[str, ColResult] = {}
    pseudo: dict[str, PseudoLabelSet] = {}
    classes = list(support_by_class)
    for class_id in classes:
        positives = support_by_class[class_id]
        pos_ids = {p.image_id for p in positives}
        negatives = [
            p
            for other in classes
            if other != class_id
            for p in support_by_class[other]
            if p.image_id not in pos_ids
        ]
        # an image may support several classes; dedupe negatives by id and fix
        # their order so results are invariant to class processing order
        seen: set[str] = set()
        negatives = [p for p in negatives if not (p.image_id in seen or seen.add(p.image_id))]
        negatives.sort(key=lambda p: p.image_id)
        col_result = run_col(col_config, positives, bg)
        labels = build_pseudo_labels(class_id, positives, negatives, col_result)
        classifiers[class_id] = train_classifier(labels, train_config)
        col_results[class_id] = col_result
        pseudo[class_id] = labels
    detections: list[Detection] = []
    for query in query_sets:
        detections.extend(
            detect(
                list(classifiers.values()),
                query,
                nms_iou=train_config.nms_iou,
                score_thresh=train_config.score_thresh,
            )
        )
    return WsodResult(
        classifiers=classifiers,
        col_results=col_results,
        pseudo_labels=pseudo,
        detections=detections,
    )


def save_classifiers(classifiers: dict[str, CosineClassifier], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([c.to_json() for c in classifiers.values()], indent=2)
    )


def save_detections(detections: list[Detection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_json()) + "\n")


def load_detections(path: str | Path) -> list[Detection]:
    dets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                dets.append(Detection.from_json(json.loads(line)))
    return dets
