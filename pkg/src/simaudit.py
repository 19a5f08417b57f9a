"""
Edcurate SimAudit - Embedding signatures, similarity retrieval and label auditing
"""

import heapq
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple
import logging

import numpy as np

from .dedup import hash_post_image
from .types import (
    DataError,
    Dataset,
    FlaggedItem,
    FlagReport,
    ImageHash,
    IndexParams,
    InsufficientDataError,
    Label,
    Post,
    Signature,
    SimIndex,
    UnknownItemError,
)
from .utils import feature_hash, make_rng, parallel_map

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 768


def stub_embed(
    post: Post,
    seed: int = 0,
    image_hash: Optional[ImageHash] = None,
    dim: int = EMBEDDING_DIM,
) -> np.ndarray:
    """Deterministic stand-in embedding from hashed text tokens and image hash bits.

    Each feature adds +/-1 to one seeded coordinate. A post with neither text
    nor image maps to the zero vector.
    """
    vector = np.zeros(dim, dtype=np.float64)
    for token in post.text.casefold().split():
        index, sign = feature_hash(f"t:{token}", seed, dim)
        vector[index] += sign

    if image_hash is None and post.image is not None:
        image_hash = hash_post_image(post)
    if image_hash is not None:
        for position in range(64):
            bit = (image_hash.bits >> (63 - position)) & 1
            index, sign = feature_hash(f"i:{position}:{bit}", seed, dim)
            vector[index] += sign
    return vector


def embed_dataset(d: Dataset, seed: int = 0, workers: int = 1) -> np.ndarray:
    rows = parallel_map(lambda post: stub_embed(post, seed), d.posts, workers)
    if not rows:
        return np.zeros((0, EMBEDDING_DIM))
    return np.vstack(rows)


def load_embeddings(path: str, count: int, dim: int = EMBEDDING_DIM) -> np.ndarray:
    """Flat little-endian float32 records, one per post in dataset order"""
    try:
        values = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise DataError(f"Cannot read embeddings file {path}: {e}") from None
    if values.size != count * dim:
        raise DataError(
            f"Embeddings file {path} holds {values.size / dim:g} records of {dim} "
            f"floats, expected {count}"
        )
    vectors = values.reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        raise DataError(f"Embeddings file {path} contains non-finite values")
    return vectors


def make_hyperplanes(params: IndexParams) -> np.ndarray:
    """tables x bits x dim random unit normals fixed by the seed"""
    rng = make_rng(params.seed, 0x5147)
    planes = rng.standard_normal((params.tables, params.bits, params.dim))
    return planes / np.linalg.norm(planes, axis=2, keepdims=True)


def _pack_keys(bit_rows: np.ndarray) -> List[int]:
    keys = []
    for row in bit_rows:
        key = 0
        for bit in row:
            key = (key << 1) | int(bit)
        keys.append(key)
    return keys


def signature(v: np.ndarray, hyperplanes: np.ndarray) -> Signature:
    """Per table, bit j is set when v lies on the non-negative side of plane j"""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (hyperplanes.shape[2],):
        raise DataError(
            f"Embedding must have {hyperplanes.shape[2]} components, got {v.shape}"
        )
    if not np.all(np.isfinite(v)):
        raise DataError("Embedding contains non-finite components")
    bits = hyperplanes @ v >= 0
    return Signature(frozenset(enumerate(_pack_keys(bits))))


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def build_index(
    ids: Sequence[str],
    vectors: np.ndarray,
    labels: Sequence[Optional[Label]],
    params: IndexParams = IndexParams(),
    workers: int = 1,
) -> SimIndex:
    if not (len(ids) == len(labels) == len(vectors)):
        raise DataError(
            f"Index inputs disagree in length: {len(ids)} ids, "
            f"{len(vectors)} vectors, {len(labels)} labels"
        )
    if len(set(ids)) != len(ids):
        raise DataError("Index item ids must be unique")

    hyperplanes = make_hyperplanes(params)
    signatures = parallel_map(lambda v: signature(v, hyperplanes), list(vectors), workers)

    entries = {}
    buckets: Dict[Tuple[int, int], List[str]] = {}
    for item_id, sig, label in zip(ids, signatures, labels):
        entries[item_id] = (sig, label)
        for token in sig.tokens:
            buckets.setdefault(token, []).append(item_id)

    logger.info(
        f"Built similarity index: {len(entries)} items, {params.tables} tables x "
        f"{params.bits} bits, {len(buckets)} occupied buckets"
    )
    return SimIndex(
        entries=entries,
        hyperplanes=hyperplanes,
        params=params,
        buckets={token: tuple(members) for token, members in buckets.items()},
    )


def index_dataset(
    d: Dataset,
    params: IndexParams = IndexParams(),
    vectors: Optional[np.ndarray] = None,
    workers: int = 1,
) -> SimIndex:
    if vectors is None:
        vectors = embed_dataset(d, params.seed, workers)
    return build_index(d.ids(), vectors, [post.label for post in d.posts], params, workers)


def query_similar(idx: SimIndex, item_id: str, k: int = 5) -> List[Tuple[str, float]]:
    """Top-k items by signature Jaccard, bucket-mates first.

    Candidates are the items sharing at least one bucket with the query; if
    there are fewer than k of them the ranking is filled from the rest of the
    index (Jaccard 0, id order).
    """
    if item_id not in idx.entries:
        raise UnknownItemError(f"Item '{item_id}' is not in the similarity index")
    if len(idx) <= k:
        raise InsufficientDataError(
            f"Index holds {len(idx)} items; at least {k + 1} needed for top-{k}"
        )

    query_tokens = idx.entries[item_id][0].tokens
    candidates: Set[str] = set()
    for token in query_tokens:
        candidates.update(idx.buckets.get(token, ()))
    candidates.discard(item_id)

    ranked = sorted(
        ((other, jaccard(query_tokens, idx.entries[other][0].tokens)) for other in candidates),
        key=lambda pair: (-pair[1], pair[0]),
    )
    if len(ranked) < k:
        # items outside every query bucket share no token, so their Jaccard is 0
        backfill = heapq.nsmallest(
            k - len(ranked),
            (other for other in idx.entries if other != item_id and other not in candidates),
        )
        ranked.extend((other, 0.0) for other in backfill)
    return ranked[:k]


def is_flagged(item_label: Label, neighbor_labels: Sequence[Label], flag_min_disagree: int = 3) -> bool:
    disagree = sum(1 for label in neighbor_labels if label != item_label)
    return disagree >= flag_min_disagree


def audit_labels(idx: SimIndex, k: int = 5, flag_min_disagree: int = 3) -> FlagReport:
    """Flag items whose neighbourhood mostly carries another label"""
    unlabeled = [item_id for item_id, (_, label) in idx.entries.items() if label is None]
    if unlabeled:
        raise DataError(
            f"{len(unlabeled)} indexed item(s) lack a label, e.g. '{unlabeled[0]}'"
        )

    report = FlagReport(k=k, flag_min_disagree=flag_min_disagree, params=idx.params)
    for item_id in sorted(idx.entries):
        label = idx.entries[item_id][1]
        neighbors = query_similar(idx, item_id, k)
        neighbor_labels = [idx.entries[other][1] for other, _ in neighbors]
        report.examined += 1
        if is_flagged(label, neighbor_labels, flag_min_disagree):
            report.flagged.append(
                FlaggedItem(
                    item_id=item_id,
                    label=label,
                    neighbor_ids=[other for other, _ in neighbors],
                    neighbor_labels=neighbor_labels,
                    scores=[score for _, score in neighbors],
                )
            )

    logger.info(f"Label audit flagged {len(report.flagged)} of {report.examined} items")
    return report


def apply_removals(d: Dataset, ids: Iterable[str]) -> Dataset:
    """Remove the posts confirmed for removal after manual review"""
    removal = set(ids)
    present = set(d.ids())
    unknown = removal - present
    if unknown:
        logger.warning(f"{len(unknown)} removal id(s) not found in dataset")
    kept = [post for post in d.posts if post.id not in removal]
    logger.info(f"Removed {len(d) - len(kept)} reviewed post(s)")
    return d.derive(kept, "apply_removals")
