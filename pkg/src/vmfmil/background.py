"""Unnormalized background scorers steering EM away from non-object proposals.

Only log u^-(x) matters downstream: additive constants (including the vMF
normalizer) cancel inside the per-image softmax, so none are computed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DatasetIndex, ImageRecord, ProposalSet
from .directional import EXACT, KappaRule, VmfParams, fit_vmf
from .errors import ValidationError
from .metrics import iou_matrix

log = logging.getLogger(__name__)

OBJECTNESS_EPS = 1e-9


@dataclass(frozen=True)
class VmfBackground:
    params: VmfParams


@dataclass(frozen=True)
class ObjectnessBackground:
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha must be > 0")


@dataclass(frozen=True)
class UniformBackground:
    pass


BackgroundModel = VmfBackground | ObjectnessBackground | UniformBackground


def bg_log_score(
    model: BackgroundModel,
    features: np.ndarray,
    objectness: np.ndarray | None = None,
) -> np.ndarray:
    """log u^-(x) for one feature row or a (P, d) matrix, up to a constant."""
    features = np.asarray(features, dtype=np.float64)
    squeeze = features.ndim == 1
    feats = features[None, :] if squeeze else features
    if isinstance(model, UniformBackground):
        out = np.zeros(feats.shape[0])
    elif isinstance(model, VmfBackground):
        # Features may be stored in single precision; score the unit-projected
        # rows so foreground and background see the same vectors.
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        out = model.params.kappa * ((feats / norms) @ model.params.theta)
    elif isinstance(model, ObjectnessBackground):
        if objectness is None:
            raise ValidationError("objectness scores required for ObjectnessBackground")
        obj = np.atleast_1d(np.asarray(objectness, dtype=np.float64))
        if obj.shape[0] != feats.shape[0]:
            raise ValidationError("objectness length must match number of proposals")
        out = np.log(model.alpha * (1.0 - obj) + OBJECTNESS_EPS)
    else:
        raise ValidationError(f"unknown background model {model!r}")
    return out[0] if squeeze else out


def bg_log_score_set(model: BackgroundModel, pset: ProposalSet) -> np.ndarray:
    return bg_log_score(model, pset.features, pset.objectness)


def collect_background_features(
    records: list[ImageRecord],
    proposals: dict[str, ProposalSet],
    iou_threshold: float = 0.3,
) -> np.ndarray:
    """Features of all proposals whose max IoU with any gt box is < threshold."""
    chunks = []
    for rec in records:
        if not rec.gt_boxes or rec.image_id not in proposals:
            continue
        pset = proposals[rec.image_id]
        gt = np.stack([b for _, b in rec.gt_boxes])
        max_iou = iou_matrix(pset.boxes.astype(np.float64), gt).max(axis=1)
        keep = max_iou < iou_threshold
        if keep.any():
            chunks.append(pset.features[keep].astype(np.float64))
    if not chunks:
        raise ValidationError("no background proposals collected (check iou_threshold)")
    return np.vstack(chunks)


def fit_background(
    index: DatasetIndex,
    proposals: dict[str, ProposalSet],
    iou_threshold: float = 0.3,
    kappa_rule: KappaRule = EXACT,
) -> VmfBackground:
    """Fit a vMF background on low-IoU proposals from the base split."""
    feats = collect_background_features(index.base_records(), proposals, iou_threshold)
    log.info("fit_background: collected %d negative proposals", feats.shape[0])
    params, _ = fit_vmf(feats, rule=kappa_rule)
    return VmfBackground(params=params)


def background_to_json(model: BackgroundModel) -> dict:
    if isinstance(model, VmfBackground):
        return {
            "variant": "vmf",
            "theta": model.params.theta.tolist(),
            "kappa": model.params.kappa,
        }
    if isinstance(model, ObjectnessBackground):
        return {"variant": "objectness", "alpha": model.alpha}
    return {"variant": "uniform"}


def background_from_json(obj: dict) -> BackgroundModel:
    variant = obj.get("variant")
    if variant == "vmf":
        return VmfBackground(VmfParams(np.asarray(obj["theta"]), float(obj["kappa"])))
    if variant == "objectness":
        return ObjectnessBackground(alpha=float(obj["alpha"]))
    if variant == "uniform":
        return UniformBackground()
    raise ValidationError(f"unknown background variant {variant!r}")


def save_background(model: BackgroundModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(background_to_json(model), indent=2))


def load_background(path: str | Path) -> BackgroundModel:
    return background_from_json(json.loads(Path(path).read_text()))
