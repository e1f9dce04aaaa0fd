"""N-way K-shot episodic sampling over a dataset index."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetIndex
from .errors import CapacityError, ValidationError


@dataclass
class Episode:
    target_classes: list[str]
    support: dict[str, list[str]]  # class -> K image_ids (image-level labels only)
    query: list[str]  # image_ids with gt boxes retained
    extra_negatives: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.target_classes)) != len(self.target_classes):
            raise ValidationError("target classes must be distinct")
        for cls, ids in self.support.items():
            if len(set(ids)) != len(ids):
                raise ValidationError(f"support of {cls} repeats an image")

    def support_images(self) -> list[str]:
        seen: list[str] = []
        for cls in self.target_classes:
            for i in self.support[cls]:
                if i not in seen:
                    seen.append(i)
        return seen

    def to_json(self) -> dict:
        return {
            "target_classes": self.target_classes,
            "support": self.support,
            "query": self.query,
            "extra_negatives": self.extra_negatives,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Episode":
        return cls(
            target_classes=list(obj["target_classes"]),
            support={k: list(v) for k, v in obj["support"].items()},
            query=list(obj["query"]),
            extra_negatives={k: list(v) for k, v in obj.get("extra_negatives", {})
                             .items()},
        )


def save_episodes(episodes: list[Episode], path: str | Path) -> None:
    Path(path).write_text(json.dumps([e.to_json() for e in episodes], indent=2))


def load_episodes(path: str | Path) -> list[Episode]:
    return [Episode.from_json(o) for o in json.loads(Path(path).read_text())]


def sample_episode(
    index: DatasetIndex,
    n_way: int,
    k_shot: int,
    num_query: int,
    rng: np.random.Generator,
    with_extra_negatives: bool = False,
) -> Episode:
    """One N-way K-shot episode: support without replacement, query from the rest."""
    novel = sorted(index.novel_classes)
    eligible = {c: [r.image_id for r in index.records if c in r.labels] for c in novel}
    candidates = [c for c in novel if len(eligible[c]) >= k_shot]
    if len(candidates) < n_way:
        raise CapacityError(
            f"need {n_way} novel classes with >= {k_shot} images, have {len(candidates)}"
        )
    targets = [candidates[i] for i in rng.choice(len(candidates), n_way, replace=False)]
    support: dict[str, list[str]] = {}
    used: set[str] = set()
    for cls in targets:
        pool = [i for i in eligible[cls] if i not in used]
        if len(pool) < k_shot:
            raise CapacityError(f"class {cls} has only {len(pool)} unused images")
        picks = [pool[i] for i in rng.choice(len(pool), k_shot, replace=False)]
        support[cls] = picks
        used.update(picks)
    # num_query images per target class, each with gt boxes for that class.
    query: list[str] = []
    chosen: set[str] = set()
    for cls in targets:
        pool = [
            r.image_id
            for r in index.records
            if r.image_id not in used
            and r.image_id not in chosen
            and any(c == cls for c, _ in r.gt_boxes)
        ]
        n_q = min(num_query, len(pool))
        if n_q:
            picks = [pool[i] for i in rng.choice(len(pool), n_q, replace=False)]
            query.extend(picks)
            chosen.update(picks)
    extra: dict[str, list[str]] = {}
    if with_extra_negatives:
        for cls in targets:
            neg_pool = [
                r.image_id
                for r in index.records
                if cls not in r.labels and r.image_id not in used
            ]
            if len(neg_pool) < k_shot:
                raise CapacityError(f"class {cls}: only {len(neg_pool)} negative images")
            picks = [neg_pool[i] for i in rng.choice(len(neg_pool), k_shot, replace=False)]
            extra[cls] = picks
            used.update(picks)
    return Episode(target_classes=targets, support=support, query=query,
                   extra_negatives=extra)


def episode_seeds(seed: int, num_episodes: int) -> list[np.random.SeedSequence]:
    """Independent per-episode seed streams via SeedSequence spawning."""
    return np.random.SeedSequence(seed).spawn(num_episodes)


def sample_benchmark(
    index: DatasetIndex,
    n_way: int,
    k_shot: int,
    num_episodes: int,
    seed: int,
    num_query: int = 5,
    with_extra_negatives: bool = False,
):
    """Stream of independent episodes from split seeds."""
    for ss in episode_seeds(seed, num_episodes):
        rng = np.random.default_rng(ss)
        yield sample_episode(
            index, n_way, k_shot, num_query, rng,
            with_extra_negatives=with_extra_negatives,
        )
