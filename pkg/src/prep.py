"""
Edcurate Prep - Class balancing, label encoding and stratified splitting

Sampling is independent of input order: each class is sorted by post id before
its seeded shuffle, and every class draws from its own Philox stream.
"""

import math
import os
from fractions import Fraction
from typing import Dict, List, Mapping, Tuple
import logging

import pandas as pd

from .types import DataError, Dataset, InsufficientDataError, Label, Post, SplitSpec
from .utils import ArtifactWriter, make_rng

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")

_BALANCE_STREAM = 1
_SPLIT_STREAM = 2


def encode_label(label: Label) -> int:
    return label.code


def decode_label(code: int) -> Label:
    return Label.from_code(code)


def _by_class(d: Dataset) -> Dict[Label, List[Post]]:
    groups: Dict[Label, List[Post]] = {label: [] for label in Label}
    for post in d.posts:
        if post.label is None:
            raise DataError(f"Post '{post.id}' is unlabeled")
        groups[post.label].append(post)
    for label in groups:
        groups[label].sort(key=lambda post: post.id)
    return groups


def balance(d: Dataset, seed: int = 0) -> Dataset:
    """Undersample every class to the minority class count"""
    if len(set(d.ids())) != len(d):
        raise DataError("Post ids must be unique before balancing")
    groups = _by_class(d)
    empty = [label.value for label, posts in groups.items() if not posts]
    if empty:
        raise InsufficientDataError(
            f"Cannot balance: no posts for class(es) {', '.join(empty)}"
        )

    minority = min(len(posts) for posts in groups.values())
    selected = set()
    for label, posts in groups.items():
        rng = make_rng(seed, _BALANCE_STREAM, label.code)
        chosen = rng.permutation(len(posts))[:minority]
        selected.update(posts[i].id for i in chosen)

    kept = [post for post in d.posts if post.id in selected]
    logger.info(
        f"Balanced to {minority} posts per class ({len(kept)} total) from "
        + ", ".join(f"{label.value}={len(posts)}" for label, posts in groups.items())
    )
    return d.derive(kept, f"balance(seed={seed})")


def split_cuts(n: int, spec: SplitSpec) -> Tuple[int, int]:
    """Train and train+val boundaries in exact decimal arithmetic"""
    train = Fraction(repr(spec.train_frac))
    val = Fraction(repr(spec.val_frac))
    return math.floor(train * n), math.floor((train + val) * n)


def split(d: Dataset, spec: SplitSpec = SplitSpec()) -> Tuple[Dataset, Dataset, Dataset]:
    """Stratified seeded split; partitions are disjoint and exhaustive"""
    if len(d) < 5:
        raise InsufficientDataError(f"Need at least 5 posts to split, got {len(d)}")
    if len(set(d.ids())) != len(d):
        raise DataError("Post ids must be unique before splitting")

    membership: Dict[str, str] = {}
    for label, posts in _by_class(d).items():
        rng = make_rng(spec.seed, _SPLIT_STREAM, label.code)
        order = rng.permutation(len(posts))
        first, second = split_cuts(len(posts), spec)
        for rank, index in enumerate(order):
            name = "train" if rank < first else "val" if rank < second else "test"
            membership[posts[index].id] = name

    parts = apply_split(d, membership)
    logger.info(
        "Split sizes: " + ", ".join(f"{name}={len(part)}" for name, part in zip(SPLIT_NAMES, parts))
    )
    return parts


def apply_split(
    d: Dataset, membership: Mapping[str, str]
) -> Tuple[Dataset, Dataset, Dataset]:
    buckets: Dict[str, List[Post]] = {name: [] for name in SPLIT_NAMES}
    for post in d.posts:
        name = membership.get(post.id)
        if name is None:
            continue
        if name not in buckets:
            raise DataError(f"Unknown split '{name}' for post '{post.id}'")
        buckets[name].append(post)
    return tuple(d.derive(buckets[name], name) for name in SPLIT_NAMES)


def membership_frame(parts: Tuple[Dataset, Dataset, Dataset]) -> pd.DataFrame:
    rows = [
        {"id": post.id, "split": name}
        for name, part in zip(SPLIT_NAMES, parts)
        for post in part.posts
    ]
    return pd.DataFrame(rows, columns=["id", "split"])


def read_split_csv(path: str) -> Dict[str, str]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot read split file {path}: {e}") from None
    if list(frame.columns[:2]) != ["id", "split"]:
        raise DataError(f"Split file {path} must have columns id,split")
    return dict(zip(frame["id"], frame["split"]))


def write_split_csv(parts: Tuple[Dataset, Dataset, Dataset], path: str) -> str:
    directory, name = os.path.split(os.path.abspath(path))
    with ArtifactWriter(directory) as writer:
        return writer.write_csv(name, membership_frame(parts))
