"""MI-SVM knowledge-transfer baseline: feature-space objectness, alternating
re-training / re-localization with objectness guidance, hard negative mining.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dataio import ImageRecord, ProposalSet
from .errors import ValidationError
from .metrics import iou_matrix
from .optim import minimize_lbfgs

log = logging.getLogger(__name__)


@dataclass
class LinearSvm:
    w: np.ndarray
    b: float
    c_reg: float = 1.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ValidationError("SVM parameters must be finite")

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.w + self.b


@dataclass
class ObjectnessScorer:
    w: np.ndarray
    b: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)

    def scores(self, features: np.ndarray) -> np.ndarray:
        return expit(np.asarray(features, dtype=np.float64) @ self.w + self.b)


def _logistic_loss_grad(params, x, y, l2_reg):
    w, b = params[:-1], params[-1]
    z = x @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2_reg * float(w @ w)
    resid = (expit(z) - y) / len(y)
    grad = np.concatenate([resid @ x + l2_reg * w, [resid.sum()]])
    return loss, grad


def train_objectness(
    records: list[ImageRecord],
    proposals: dict[str, ProposalSet],
    iou_pos: float = 0.5,
    iou_neg: float = 0.3,
    l2_reg: float = 1e-4,
) -> ObjectnessScorer:
    """Class-agnostic logistic objectness from IoU-labeled base proposals."""
    xs, ys = [], []
    for rec in records:
        if not rec.gt_boxes or rec.image_id not in proposals:
            continue
        pset = proposals[rec.image_id]
        gt = np.stack([b for _, b in rec.gt_boxes])
        max_iou = iou_matrix(pset.boxes.astype(np.float64), gt).max(axis=1)
        pos = max_iou >= iou_pos
        neg = max_iou < iou_neg
        keep = pos | neg
        if keep.any():
            xs.append(pset.features[keep].astype(np.float64))
            ys.append(pos[keep].astype(np.float64))
    if not xs:
        raise ValidationError("no labeled proposals for objectness training")
    x = np.vstack(xs)
    y = np.concatenate(ys)
    if y.min() == y.max():
        raise ValidationError("objectness labels are single-class; cannot train")
    params0 = np.zeros(x.shape[1] + 1)
    result = minimize_lbfgs(lambda p: _logistic_loss_grad(p, x, y, l2_reg), params0)
    return ObjectnessScorer(w=result.x[:-1], b=float(result.x[-1]))


def _squared_hinge_loss_grad(params, x, y, c_reg):
    w, b = params[:-1], params[-1]
    margin = 1.0 - y * (x @ w + b)
    active = np.maximum(margin, 0.0)
    loss = 0.5 * c_reg * float(w @ w) + float(np.mean(active * active))
    coeff = -2.0 * active * y / len(y)
    grad = np.concatenate([coeff @ x + c_reg * w, [coeff.sum()]])
    return loss, grad


def misvm_retrain(
    positives: np.ndarray,
    negatives: np.ndarray,
    c_reg: float = 1.0,
    warm_start: LinearSvm | None = None,
) -> LinearSvm:
    """Binary SVM with squared hinge loss via the shared quasi-Newton routine."""
    if len(positives) < 1 or len(negatives) < 1:
        raise ValidationError("need at least one positive and one negative")
    x = np.vstack([positives, negatives])
    y = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
    if warm_start is not None:
        params0 = np.concatenate([warm_start.w, [warm_start.b]])
    else:
        params0 = np.zeros(x.shape[1] + 1)
    result = minimize_lbfgs(lambda p: _squared_hinge_loss_grad(p, x, y, c_reg), params0)
    if not np.isfinite(result.fun):
        raise FloatingPointError("non-finite SVM loss")
    return LinearSvm(w=result.x[:-1], b=float(result.x[-1]), c_reg=c_reg)


def misvm_relocalize(
    svm: LinearSvm,
    objectness: ObjectnessScorer | None,
    gamma: float,
    pset: ProposalSet,
) -> int:
    """argmax over proposals of SVM score + gamma * objectness; lowest index wins ties."""
    scores = svm.scores(pset.features)
    if objectness is not None and gamma != 0.0:
        scores = scores + gamma * objectness.scores(pset.features)
    return int(np.argmax(scores))  # argmax returns the first (lowest) maximizer


@dataclass
class MisvmResult:
    class_id: str
    svm: LinearSvm
    selections: dict[str, int]  # positive image_id -> selected proposal index
    rounds: int
    converged: bool
    negative_pool_sizes: list[int] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)


def run_misvm(
    class_id: str,
    positive_sets: list[ProposalSet],
    negative_sets: list[ProposalSet],
    objectness: ObjectnessScorer | None = None,
    gamma: float = 0.5,
    c_reg: float = 1.0,
    max_rounds: int = 10,
) -> MisvmResult:
    """Alternate retrain/relocalize with per-image hard negative mining.

    Selections start at the full-image proposal (index 0); the negative pool
    starts with each negative image's full-image feature and grows by the
    hardest proposal per negative image after each retraining, deduplicated by
    (image, proposal).
    """
    if not positive_sets or not negative_sets:
        raise ValidationError(f"class {class_id}: need positive and negative images")
    selections = {p.image_id: 0 for p in positive_sets}
    pool_keys: set[tuple[str, int]] = {(p.image_id, 0) for p in negative_sets}
    neg_feats = [p.features[0].astype(np.float64) for p in negative_sets]
    svm = None
    converged = False
    rounds = 0
    pool_sizes = [len(neg_feats)]
    loss_trace: list[float] = []
    for rounds in range(1, max_rounds + 1):
        pos_feats = np.stack(
            [p.features[selections[p.image_id]].astype(np.float64) for p in positive_sets]
        )
        svm = misvm_retrain(pos_feats, np.stack(neg_feats), c_reg=c_reg, warm_start=svm)
        x = np.vstack([pos_feats, np.stack(neg_feats)])
        y = np.concatenate([np.ones(len(pos_feats)), -np.ones(len(neg_feats))])
        loss_trace.append(
            _squared_hinge_loss_grad(np.concatenate([svm.w, [svm.b]]), x, y, c_reg)[0]
        )
        # Hard negative mining: per negative image, add its top-scoring proposal.
        for pset in negative_sets:
            hard = int(np.argmax(svm.scores(pset.features)))
            key = (pset.image_id, hard)
            if key not in pool_keys:
                pool_keys.add(key)
                neg_feats.append(pset.features[hard].astype(np.float64))
        pool_sizes.append(len(neg_feats))
        new_selections = {
            p.image_id: misvm_relocalize(svm, objectness, gamma, p) for p in positive_sets
        }
        if new_selections == selections:
            converged = True
            break
        selections = new_selections
    if len(loss_trace) >= 2 and loss_trace[-1] > loss_trace[-2]:
        log.debug("class %s: retraining objective rose after selection change", class_id)
    return MisvmResult(
        class_id=class_id,
        svm=svm,
        selections=selections,
        rounds=rounds,
        converged=converged,
        negative_pool_sizes=pool_sizes,
        loss_trace=loss_trace,
    )
