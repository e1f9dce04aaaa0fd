"""On-disk dataset representation and a synthetic world generator.

Proposal file layout (little-endian):
    magic "VMF1" | u32 version=1 | u32 d | u64 image count |
    per image: u32 id length, UTF-8 id, u32 P, u8 has_objectness,
               P*4 f32 boxes, P*d f32 features, optional P f32 objectness.

The manifest is JSON-lines (one ImageRecord per line); the dataset index is a
small JSON file tying the class split to the proposal file and manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .directional import VmfParams, sample_uniform_sphere, sample_vmf
from .errors import DataError, DimensionMismatchError, ValidationError

MAGIC = b"VMF1"
VERSION = 1
FEATURE_NORM_TOL = 1e-5


@dataclass
class ProposalSet:
    """All proposals of one image; row 0 is the full-image box and feature."""

    image_id: str
    boxes: np.ndarray  # (P, 4) float32, (x_min, y_min, x_max, y_max)
    features: np.ndarray  # (P, d) float32, unit rows
    objectness: np.ndarray | None = None  # (P,) in [0, 1]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.objectness is not None:
            self.objectness = np.asarray(self.objectness, dtype=np.float32)
        self.validate()

    @property
    def num_proposals(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValidationError(f"{self.image_id}: boxes must be (P, 4)")
        if self.features.ndim != 2 or self.features.shape[0] != self.boxes.shape[0]:
            raise ValidationError(f"{self.image_id}: features must be (P, d) matching boxes")
        if self.features.shape[0] < 1:
            raise ValidationError(f"{self.image_id}: need at least one proposal")
        norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
        bad = np.nonzero(np.abs(norms - 1.0) > FEATURE_NORM_TOL)[0]
        if bad.size:
            raise ValidationError(
                f"{self.image_id}: feature row {int(bad[0])} has norm {norms[bad[0]]:.6f}"
            )
        if np.any(self.boxes[:, 0] >= self.boxes[:, 2]) or np.any(
            self.boxes[:, 1] >= self.boxes[:, 3]
        ):
            raise ValidationError(f"{self.image_id}: degenerate box (min >= max)")
        if self.objectness is not None:
            if self.objectness.shape != (self.features.shape[0],):
                raise ValidationError(f"{self.image_id}: objectness must be length P")
            if np.any(self.objectness < 0) or np.any(self.objectness > 1):
                raise ValidationError(f"{self.image_id}: objectness outside [0, 1]")


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    labels: set[str]
    gt_boxes: list[tuple[str, np.ndarray]] | None = None

    def __post_init__(self):
        self.labels = set(self.labels)
        if self.gt_boxes is not None:
            self.gt_boxes = [(lbl, np.asarray(b, dtype=np.float64)) for lbl, b in self.gt_boxes]
            for lbl, _ in self.gt_boxes:
                if lbl not in self.labels:
                    raise ValidationError(
                        f"{self.image_id}: gt class {lbl!r} missing from labels"
                    )

    def gt_for(self, class_id: str) -> list[np.ndarray]:
        if not self.gt_boxes:
            return []
        return [b for lbl, b in self.gt_boxes if lbl == class_id]


@dataclass
class DatasetIndex:
    records: list[ImageRecord]
    base_classes: set[str]
    novel_classes: set[str]
    proposals_path: str
    manifest_path: str = ""
    by_id: dict[str, ImageRecord] = field(default_factory=dict)

    def __post_init__(self):
        self.base_classes = set(self.base_classes)
        self.novel_classes = set(self.novel_classes)
        if self.base_classes & self.novel_classes:
            raise ValidationError("base and novel class sets must be disjoint")
        self.by_id = {r.image_id: r for r in self.records}
        if len(self.by_id) != len(self.records):
            raise ValidationError("image_ids must be unique")

    def base_records(self) -> list[ImageRecord]:
        return [r for r in self.records if r.labels & self.base_classes]

    def novel_records(self) -> list[ImageRecord]:
        return [r for r in self.records if r.labels & self.novel_classes]


@dataclass(frozen=True)
class SyntheticWorldSpec:
    d: int
    num_classes: int
    kappa_class: float
    kappa_background: float
    proposals_per_image: int
    positives_per_image: int = 1
    full_image_mix: float = 0.6
    seed: int = 0
    num_base_classes: int = 0  # first classes form the base split
    with_objectness: bool = True

    def __post_init__(self):
        if self.d < 2:
            raise ValidationError("d must be >= 2")
        if self.kappa_class < 0 or self.kappa_background < 0:
            raise ValidationError("kappa values must be >= 0")
        if not (0.0 <= self.full_image_mix <= 1.0):
            raise ValidationError("full_image_mix must be in [0, 1]")
        if self.positives_per_image < 1:
            raise ValidationError("positives_per_image must be >= 1")
        if self.positives_per_image >= self.proposals_per_image:
            raise ValidationError("positives_per_image must be < proposals_per_image")
        if not (0 <= self.num_base_classes <= self.num_classes):
            raise ValidationError("num_base_classes outside [0, num_classes]")


@dataclass
class PlantedTruth:
    """Ground truth of the synthetic generator, for oracle-style tests."""

    class_directions: dict[str, np.ndarray]
    background_direction: np.ndarray
    positive_indices: dict[str, list[int]]  # image_id -> planted positive rows
    image_class: dict[str, str]

    def to_json(self) -> dict:
        return {
            "class_directions": {c: v.tolist() for c, v in self.class_directions.items()},
            "background_direction": self.background_direction.tolist(),
            "positive_indices": self.positive_indices,
            "image_class": self.image_class,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlantedTruth":
        return cls(
            class_directions={c: np.asarray(v) for c, v in obj["class_directions"].items()},
            background_direction=np.asarray(obj["background_direction"]),
            positive_indices={k: list(v) for k, v in obj["positive_indices"].items()},
            image_class=dict(obj["image_class"]),
        )


# ---------------------------------------------------------------------------
# Proposal file I/O


def write_proposals(sets: list[ProposalSet], path: str | Path) -> None:
    """Write proposal sets in the binary format; all sets must share d."""
    if not sets:
        raise ValidationError("cannot write an empty proposal file")
    d = sets[0].d
    for ps in sets:
        if ps.d != d:
            raise DimensionMismatchError(
                f"{ps.image_id}: feature dimension {ps.d} != {d}"
            )
        ps.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, d, len(sets)))
        for ps in sets:
            ident = ps.image_id.encode("utf-8")
            has_obj = 1 if ps.objectness is not None else 0
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<IB", ps.num_proposals, has_obj))
            fh.write(np.ascontiguousarray(ps.boxes, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ps.features, dtype="<f4").tobytes())
            if has_obj:
                fh.write(np.ascontiguousarray(ps.objectness, dtype="<f4").tobytes())


class ProposalReader:
    """Lazy random-access reader over a proposal file.

    Immutable after open; safe to share across parallel workers (each read
    re-seeks on its own handle offset, guarded by the GIL for this file object).
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        data = self.path.read_bytes()
        if len(data) < 20 or data[:4] != MAGIC:
            raise DataError(f"{path}: bad magic")
        version, d, count = struct.unpack_from("<IIQ", data, 4)
        if version != VERSION:
            raise DataError(f"{path}: unknown version {version}")
        self.d = int(d)
        self._data = data
        self._offsets: dict[str, int] = {}
        self.image_ids: list[str] = []
        pos = 20
        for _ in range(count):
            start = pos
            try:
                (id_len,) = struct.unpack_from("<I", data, pos)
                pos += 4
                image_id = data[pos : pos + id_len].decode("utf-8")
                if len(data[pos : pos + id_len]) != id_len:
                    raise struct.error("truncated id")
                pos += id_len
                p, has_obj = struct.unpack_from("<IB", data, pos)
                pos += 5
                payload = p * 4 * 4 + p * self.d * 4 + (p * 4 if has_obj else 0)
                if pos + payload > len(data):
                    raise struct.error("truncated record")
                pos += payload
            except struct.error as exc:
                raise DataError(f"{path}: truncated record at offset {start}: {exc}") from exc
            self._offsets[image_id] = start
            self.image_ids.append(image_id)

    def read(self, image_id: str) -> ProposalSet:
        if image_id not in self._offsets:
            raise DataError(f"{self.path}: unknown image_id {image_id!r}")
        data = self._data
        pos = self._offsets[image_id]
        (id_len,) = struct.unpack_from("<I", data, pos)
        pos += 4 + id_len
        p, has_obj = struct.unpack_from("<IB", data, pos)
        pos += 5
        boxes = np.frombuffer(data, dtype="<f4", count=p * 4, offset=pos).reshape(p, 4)
        pos += p * 16
        feats = np.frombuffer(data, dtype="<f4", count=p * self.d, offset=pos).reshape(
            p, self.d
        )
        pos += p * self.d * 4
        obj = None
        if has_obj:
            obj = np.frombuffer(data, dtype="<f4", count=p, offset=pos)
        return ProposalSet(
            image_id=image_id, boxes=boxes.copy(), features=feats.copy(),
            objectness=None if obj is None else obj.copy(),
        )


def read_proposals(path: str | Path, image_ids: list[str] | None = None) -> list[ProposalSet]:
    reader = ProposalReader(path)
    ids = reader.image_ids if image_ids is None else list(image_ids)
    return [reader.read(i) for i in ids]


# ---------------------------------------------------------------------------
# Manifest / index I/O


def write_manifest(records: list[ImageRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "image_id": r.image_id,
                "width": r.width,
                "height": r.height,
                "labels": sorted(r.labels),
                "gt": [
                    {"label": lbl, "box": [float(v) for v in box]}
                    for lbl, box in (r.gt_boxes or [])
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def read_manifest(path: str | Path) -> list[ImageRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON") from exc
            records.append(
                ImageRecord(
                    image_id=obj["image_id"],
                    width=obj["width"],
                    height=obj["height"],
                    labels=set(obj["labels"]),
                    gt_boxes=[(g["label"], np.asarray(g["box"])) for g in obj.get("gt", [])]
                    or None,
                )
            )
    return records


def write_index(index: DatasetIndex, path: str | Path) -> None:
    obj = {
        "base_classes": sorted(index.base_classes),
        "novel_classes": sorted(index.novel_classes),
        "proposals": index.proposals_path,
        "manifest": index.manifest_path,
    }
    Path(path).write_text(json.dumps(obj, indent=2))


def read_index(path: str | Path) -> DatasetIndex:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid index JSON") from exc
    base = path.parent
    manifest_path = str((base / obj["manifest"]))
    records = read_manifest(manifest_path)
    return DatasetIndex(
        records=records,
        base_classes=set(obj["base_classes"]),
        novel_classes=set(obj["novel_classes"]),
        proposals_path=str(base / obj["proposals"]),
        manifest_path=manifest_path,
    )


# ---------------------------------------------------------------------------
# Synthetic worlds


def _synthetic_boxes(spec: SyntheticWorldSpec):
    """Canonical geometry: one gt box, full-image box, disjoint background tiles."""
    n_bg = spec.proposals_per_image - 1 - spec.positives_per_image
    cell, stride, x0 = 8, 10, 56
    cols = 7
    rows = max(1, -(-max(n_bg, 1) // cols))
    height = max(128, rows * stride + 2)
    width = 128
    gt_box = np.array([8.0, 8.0, 40.0, 40.0])
    full_box = np.array([0.0, 0.0, float(width), float(height)])
    bg_boxes = []
    for i in range(n_bg):
        r, c = divmod(i, cols)
        x = x0 + c * stride
        y = 1 + r * stride
        bg_boxes.append([float(x), float(y), float(x + cell), float(y + cell)])
    return width, height, full_box, gt_box, np.asarray(bg_boxes).reshape(n_bg, 4)


def generate_synthetic(
    spec: SyntheticWorldSpec, num_images_per_class: int
) -> tuple[DatasetIndex, list[ProposalSet], PlantedTruth]:
    """Generate a planted-world dataset of vMF foreground/background draws.

    Each class gets a uniformly random direction; each image holds
    positives_per_image foreground draws (IoU 1 with the gt box), background
    draws on disjoint boxes (IoU 0), and a full-image proposal whose feature is
    the normalized mix of the positive and background means.
    """
    rng = np.random.default_rng(spec.seed)
    class_ids = [f"class{c:03d}" for c in range(spec.num_classes)]
    class_dirs = {c: sample_uniform_sphere(spec.d, 1, rng)[0] for c in class_ids}
    # Keep the background direction out of the span of the class directions when
    # possible, so foreground/background separation is governed by the kappa
    # values rather than by chance collinearity of the planted directions.
    bg_dir = sample_uniform_sphere(spec.d, 1, rng)[0]
    basis = np.linalg.qr(np.stack(list(class_dirs.values())).T)[0]
    residual = bg_dir - basis @ (basis.T @ bg_dir)
    if np.linalg.norm(residual) > 1e-6:
        bg_dir = residual / np.linalg.norm(residual)
    width, height, full_box, gt_box, bg_boxes = _synthetic_boxes(spec)
    n_pos = spec.positives_per_image
    n_bg = spec.proposals_per_image - 1 - n_pos

    records, sets = [], []
    positive_indices: dict[str, list[int]] = {}
    image_class: dict[str, str] = {}
    for ci, cid in enumerate(class_ids):
        fg_params = VmfParams(class_dirs[cid], spec.kappa_class)
        for k in range(num_images_per_class):
            image_id = f"{cid}_img{k:04d}"
            pos_feats = sample_vmf(fg_params, n_pos, rng)
            pos_mean = pos_feats.mean(axis=0)
            if n_bg > 0:
                bg_feats = sample_vmf(VmfParams(bg_dir, spec.kappa_background), n_bg, rng)
                bg_mean = bg_feats.mean(axis=0)
                mix = spec.full_image_mix * pos_mean + (1.0 - spec.full_image_mix) * bg_mean
            else:
                bg_feats = np.zeros((0, spec.d))
                mix = pos_mean.copy()
            mix = mix / np.linalg.norm(mix)
            # Shuffle positive/background rows among indices 1..P-1.
            order = rng.permutation(n_pos + n_bg)
            body = np.vstack([pos_feats, bg_feats])[order]
            body_boxes = np.vstack([np.tile(gt_box, (n_pos, 1)), bg_boxes])[order]
            is_pos = np.concatenate([np.ones(n_pos, bool), np.zeros(n_bg, bool)])[order]
            feats = np.vstack([mix[None, :], body]).astype(np.float32)
            boxes = np.vstack([full_box[None, :], body_boxes]).astype(np.float32)
            objectness = None
            if spec.with_objectness:
                # Tight gt-overlapping boxes score high; loose boxes — including
                # the full-image box, whose IoU with any gt is tiny — score low.
                obj_body = np.where(
                    is_pos, rng.uniform(0.85, 1.0, n_pos + n_bg),
                    rng.uniform(0.0, 0.3, n_pos + n_bg),
                )
                obj_full = rng.uniform(0.0, 0.3)
                objectness = np.concatenate([[obj_full], obj_body]).astype(np.float32)
            sets.append(
                ProposalSet(image_id=image_id, boxes=boxes, features=feats,
                            objectness=objectness)
            )
            positive_indices[image_id] = (np.nonzero(is_pos)[0] + 1).tolist()
            image_class[image_id] = cid
            records.append(
                ImageRecord(
                    image_id=image_id, width=width, height=height, labels={cid},
                    gt_boxes=[(cid, gt_box.copy())],
                )
            )
    index = DatasetIndex(
        records=records,
        base_classes=set(class_ids[: spec.num_base_classes]),
        novel_classes=set(class_ids[spec.num_base_classes :]),
        proposals_path="",
    )
    truth = PlantedTruth(
        class_directions=class_dirs,
        background_direction=bg_dir,
        positive_indices=positive_indices,
        image_class=image_class,
    )
    return index, sets, truth
