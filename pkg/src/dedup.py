"""
Edcurate Dedup - Difference hashing and duplicate removal

The dHash recipe is pinned: BT.601 luma, area-average resize to 9x8, one bit per
horizontally adjacent pair (set when the left pixel is darker), packed row-major
with the most significant bit first.

Area averaging is carried out in exact integer arithmetic: luma is scaled by
1000 and every output cell shares the same denominator, so comparisons between
neighbouring cells never depend on floating point rounding.
"""

from typing import Dict, List, Optional, Tuple, Union
import logging

import numpy as np
from PIL import Image

from .corpus import open_image, sanitize_text
from .types import DataError, Dataset, DedupReport, ImageHash, Post
from .utils import parallel_map

logger = logging.getLogger(__name__)

HASH_WIDTH = 9
HASH_HEIGHT = 8
HASH_BITS = 64

_LUMA_WEIGHTS = np.array([299, 587, 114], dtype=np.int64)


def _overlap_matrix(source: int, target: int) -> np.ndarray:
    """Integer area weights mapping `source` samples onto `target` cells.

    Source sample i spans [i*target, (i+1)*target) and output cell r spans
    [r*source, (r+1)*source) on a common integer grid; the weight is the length
    of the overlap. Every row sums to `source`.
    """
    starts = np.arange(source, dtype=np.int64) * target
    cell_starts = np.arange(target, dtype=np.int64)[:, None] * source
    lo = np.maximum(starts[None, :], cell_starts)
    hi = np.minimum(starts[None, :] + target, cell_starts + source)
    return np.clip(hi - lo, 0, None)


def luma_area_grid(pixels: np.ndarray) -> np.ndarray:
    """8x9 grid of area-summed integer luma (common denominator per cell)"""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"Expected an HxWx3 raster, got shape {pixels.shape}")
    height, width = pixels.shape[:2]
    if height < 1 or width < 1:
        raise DataError("Image must have at least one pixel")

    luma = pixels.astype(np.int64) @ _LUMA_WEIGHTS
    rows = _overlap_matrix(height, HASH_HEIGHT)
    cols = _overlap_matrix(width, HASH_WIDTH)
    return rows @ luma @ cols.T


def dhash(image: Union[Image.Image, np.ndarray]) -> ImageHash:
    """64-bit difference hash of a decoded raster"""
    if isinstance(image, Image.Image):
        pixels = np.asarray(image.convert("RGB"))
    else:
        pixels = np.asarray(image)
    grid = luma_area_grid(pixels)

    bits = 0
    for increasing in (grid[:, :-1] < grid[:, 1:]).ravel():
        bits = (bits << 1) | int(increasing)
    return ImageHash(bits)


def hash_post_image(post: Post) -> ImageHash:
    if post.image is None:
        raise DataError(f"Post '{post.id}' has no image to hash")
    return dhash(open_image(post.image))


def hamming(a: ImageHash, b: ImageHash) -> int:
    return (a.bits ^ b.bits).bit_count()


def hash_similarity(a: ImageHash, b: ImageHash) -> float:
    return 1.0 - hamming(a, b) / HASH_BITS


def max_near_distance(threshold: float) -> int:
    """Largest Hamming distance whose similarity is strictly above threshold; -1 if none"""
    distance = -1
    for candidate in range(HASH_BITS + 1):
        if 1.0 - candidate / HASH_BITS > threshold:
            distance = candidate
    return distance


def hash_images(d: Dataset, workers: int = 1) -> List[ImageHash]:
    """Hash every post image, order preserved"""
    return parallel_map(hash_post_image, d.posts, workers)


class SegmentIndex:
    """Exact near-duplicate lookup by pigeonhole over hash segments.

    Two 64-bit hashes within Hamming distance d agree exactly on at least one of
    d+1 disjoint segments, so candidates are gathered per segment and confirmed
    with the full similarity test.
    """

    def __init__(self, max_distance: int):
        self.max_distance = max_distance
        pieces = max_distance + 1
        bounds = np.linspace(0, HASH_BITS, pieces + 1).round().astype(int)
        self.segments: List[Tuple[int, int]] = [
            (int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
        ]
        self.tables: List[Dict[int, List[int]]] = [{} for _ in self.segments]
        self.hashes: List[ImageHash] = []

    def _segment_keys(self, h: ImageHash) -> List[int]:
        return [
            (h.bits >> (HASH_BITS - hi)) & ((1 << (hi - lo)) - 1)
            for lo, hi in self.segments
        ]

    def add(self, h: ImageHash) -> None:
        slot = len(self.hashes)
        self.hashes.append(h)
        for table, key in zip(self.tables, self._segment_keys(h)):
            table.setdefault(key, []).append(slot)

    def candidates(self, h: ImageHash) -> List[int]:
        found = set()
        for table, key in zip(self.tables, self._segment_keys(h)):
            found.update(table.get(key, ()))
        return sorted(found)


class _KeptImages:
    """Image hashes of kept posts with an optional segment index"""

    def __init__(self, threshold: float, accelerate: bool):
        self.threshold = threshold
        self.hashes: List[ImageHash] = []
        max_distance = max_near_distance(threshold)
        self.never_near = max_distance < 0
        # With no admissible distance nothing is ever a near duplicate; with a
        # very loose threshold segments get too short to be selective.
        self.index: Optional[SegmentIndex] = None
        if accelerate and 0 <= max_distance < 16:
            self.index = SegmentIndex(max_distance)

    def has_near(self, h: ImageHash) -> bool:
        if self.never_near:
            return False
        pool = self.hashes
        if self.index is not None:
            pool = [self.hashes[i] for i in self.index.candidates(h)]
        return any(hash_similarity(h, kept) > self.threshold for kept in pool)

    def add(self, h: ImageHash) -> None:
        self.hashes.append(h)
        if self.index is not None:
            self.index.add(h)


def remove_duplicates(
    d: Dataset,
    threshold: float = 0.95,
    workers: int = 1,
    accelerate: bool = True,
    hashes: Optional[List[ImageHash]] = None,
) -> Tuple[Dataset, DedupReport]:
    """Drop later posts duplicating a kept post by id, text or image.

    Rules are checked in that order against posts already kept; the first
    occurrence in dataset order always wins.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"Near-duplicate threshold must be in [0, 1], got {threshold}")
    if hashes is None:
        hashes = hash_images(d, workers)
    elif len(hashes) != len(d):
        raise DataError(f"Expected {len(d)} image hashes, got {len(hashes)}")

    report = DedupReport(threshold=threshold)
    kept_ids = set()
    kept_texts = set()
    kept_images = _KeptImages(threshold, accelerate)
    kept = []

    for post, image_hash in zip(d.posts, hashes):
        text_key = sanitize_text(post.text).casefold()
        if post.id in kept_ids:
            report.removed_exact_id += 1
        elif text_key in kept_texts:
            report.removed_exact_text += 1
        elif kept_images.has_near(image_hash):
            report.removed_near_image += 1
        else:
            kept.append(post)
            kept_ids.add(post.id)
            kept_texts.add(text_key)
            kept_images.add(image_hash)
            continue
        logger.debug(f"Removed duplicate post '{post.id}'")

    report.kept = len(kept)
    logger.info(
        f"Dedup kept {report.kept} of {len(d)} posts "
        f"(id={report.removed_exact_id}, text={report.removed_exact_text}, "
        f"image={report.removed_near_image})"
    )
    return d.derive(kept, f"remove_duplicates({threshold})"), report
