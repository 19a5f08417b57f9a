"""
Edcurate Corpus - Post ingestion, text sanitization and multimodal filtering
"""

import io
import json
import os
import re
from dataclasses import replace
from datetime import datetime, timezone
from typing import Any, Dict, Mapping, Optional, Union
import logging

import pandas as pd
from PIL import Image

from .types import (
    DataError,
    Dataset,
    ImageDecodeError,
    IngestReport,
    Label,
    Post,
)
from .utils import parallel_map

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ("jsonl",)

# scheme-prefixed URLs, plus bare shortener / www links as they appear in exports
_URL_TOKEN = re.compile(
    r"^(?:[a-z][a-z0-9+.\-]*://|www\.|t\.co/|pic\.twitter\.com/)", re.IGNORECASE
)
_RFC3339 = re.compile(
    r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:\d{2})?", re.IGNORECASE
)


def is_removable_token(token: str) -> bool:
    """Hyperlink, @-mention or #-hashtag token"""
    return token.startswith(("@", "#")) or bool(_URL_TOKEN.match(token))


def sanitize_text(raw: str) -> str:
    """Drop link, mention and hashtag tokens and normalize whitespace"""
    if not raw:
        return ""
    return " ".join(token for token in raw.split() if not is_removable_token(token))


def parse_label(raw: Optional[str]) -> Optional[Label]:
    if raw is None:
        return None
    if not isinstance(raw, str):
        raise DataError(f"Label must be a string or null, got {type(raw).__name__}")
    try:
        return Label(raw.strip().lower())
    except ValueError:
        raise DataError(
            f"Unknown label '{raw}', expected one of: "
            + ", ".join(label.value for label in Label)
        ) from None


def parse_timestamp(raw: Any) -> datetime:
    """RFC 3339 timestamp to an aware UTC datetime"""
    if not isinstance(raw, str) or not raw.strip():
        raise DataError(f"posted_at must be an RFC 3339 string, got {raw!r}")
    text = raw.strip().upper()
    if not _RFC3339.fullmatch(text):
        raise DataError(f"Unparseable posted_at '{raw}'")
    try:
        moment = pd.Timestamp(text)
    except ValueError:
        raise DataError(f"Unparseable posted_at '{raw}'") from None
    if moment.tzinfo is None:
        moment = moment.tz_localize("UTC")
    # sub-microsecond digits are dropped
    return moment.floor("us").to_pydatetime().astimezone(timezone.utc)


def _require_str(record: Mapping[str, Any], key: str, default: Optional[str] = None) -> str:
    value = record.get(key, default)
    if not isinstance(value, str):
        raise DataError(f"Field '{key}' must be a string, got {type(value).__name__}")
    return value


def post_from_record(record: Any, base_dir: str = "") -> Post:
    """Build a Post from one decoded JSON-Lines object"""
    if not isinstance(record, dict):
        raise DataError(f"Expected a JSON object, got {type(record).__name__}")

    image_path = record.get("image_path")
    if image_path is not None:
        if not isinstance(image_path, str):
            raise DataError("Field 'image_path' must be a string or null")
        if image_path and not os.path.isabs(image_path):
            image_path = os.path.normpath(os.path.join(base_dir, image_path))

    return Post(
        id=_require_str(record, "id"),
        posted_at=parse_timestamp(record.get("posted_at")),
        source=_require_str(record, "source", ""),
        text=_require_str(record, "text", ""),
        image=image_path or None,
        label=parse_label(record.get("label")),
    )


def post_to_record(post: Post) -> Dict[str, Any]:
    image_path = None
    if isinstance(post.image, str):
        image_path = os.path.abspath(post.image)
    elif post.image is not None:
        logger.debug(f"Post '{post.id}' carries inline image bytes; not serialized")
    return {
        "id": post.id,
        "posted_at": post.posted_at.astimezone(timezone.utc).strftime(
            "%Y-%m-%dT%H:%M:%SZ"
        ),
        "source": post.source,
        "text": post.text,
        "image_path": image_path,
        "label": post.label.value if post.label else None,
    }


def load_posts(
    path: str, format: str = "jsonl", report: Optional[IngestReport] = None
) -> Dataset:
    """Load posts in file order; malformed lines are skipped and counted"""
    if format not in SUPPORTED_FORMATS:
        raise DataError(f"Unsupported posts format '{format}', expected jsonl")

    try:
        with open(path, "rb") as f:
            raw_lines = f.read().splitlines()
    except OSError as e:
        raise DataError(f"Cannot read posts file {path}: {e.strerror or e}") from None

    report = report if report is not None else IngestReport()
    base_dir = os.path.dirname(os.path.abspath(path))
    posts = []

    for line_number, raw_line in enumerate(raw_lines, start=1):
        if not raw_line.strip():
            continue
        report.read += 1
        try:
            record = json.loads(raw_line.decode("utf-8"))
            posts.append(post_from_record(record, base_dir))
        except (UnicodeDecodeError, json.JSONDecodeError, DataError) as e:
            report.skipped_malformed += 1
            logger.debug(f"{path}:{line_number}: skipped malformed line ({e})")

    if report.skipped_malformed:
        logger.warning(
            f"Skipped {report.skipped_malformed} malformed line(s) in {path}"
        )
    logger.info(f"Loaded {len(posts)} posts from {path}")
    return Dataset(posts=posts, provenance=f"load_posts({os.path.basename(path)})")


def posts_to_jsonl(d: Dataset) -> str:
    return "".join(
        json.dumps(post_to_record(post), ensure_ascii=False, sort_keys=True) + "\n"
        for post in d.posts
    )


def write_posts(d: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(posts_to_jsonl(d))


def open_image(ref: Union[str, bytes]) -> Image.Image:
    """Decode an image reference into an RGB raster"""
    try:
        source = io.BytesIO(ref) if isinstance(ref, (bytes, bytearray)) else ref
        with Image.open(source) as image:
            image.load()
            return image.convert("RGB")
    except (OSError, ValueError, SyntaxError, Image.DecompressionBombError) as e:
        label = "<inline bytes>" if isinstance(ref, (bytes, bytearray)) else ref
        raise ImageDecodeError(f"Cannot decode image {label}: {e}") from None


def is_decodable(ref: Optional[Union[str, bytes]]) -> bool:
    if ref is None:
        return False
    try:
        open_image(ref)
        return True
    except ImageDecodeError:
        return False


def sanitize_dataset(d: Dataset) -> Dataset:
    return d.derive(
        [replace(post, text=sanitize_text(post.text)) for post in d.posts],
        "sanitize_text",
    )


def filter_multimodal(
    d: Dataset, report: Optional[IngestReport] = None, workers: int = 1
) -> Dataset:
    """Keep posts with non-empty sanitized text and a decodable image"""
    report = report if report is not None else IngestReport()
    decodable = parallel_map(
        lambda post: is_decodable(post.image) if post.image is not None else False,
        d.posts,
        workers,
    )

    kept = []
    for post, image_ok in zip(d.posts, decodable):
        if not sanitize_text(post.text):
            report.excluded_no_text += 1
        elif post.image is None:
            report.excluded_no_image += 1
        elif not image_ok:
            report.excluded_undecodable += 1
            logger.debug(f"Excluded post '{post.id}': undecodable image")
        else:
            kept.append(post)

    report.kept = len(kept)
    if report.excluded_undecodable:
        logger.warning(f"Excluded {report.excluded_undecodable} undecodable image(s)")
    logger.info(f"Multimodal filter kept {len(kept)} of {len(d)} posts")
    return d.derive(kept, "filter_multimodal")


def normalize_source(source: str) -> str:
    """Case-fold a hashtag or subreddit tag and strip its prefix"""
    tag = source.strip().casefold()
    if tag.startswith("#"):
        tag = tag[1:]
    elif tag.startswith("r/"):
        tag = tag[2:]
    return tag


def label_by_source(
    d: Dataset, mapping: Mapping[str, Union[str, Label]], overwrite: bool = False
) -> Dataset:
    """Assign the label implied by each post's source community"""
    resolved = {
        normalize_source(source): label if isinstance(label, Label) else parse_label(label)
        for source, label in mapping.items()
    }
    assigned = 0
    posts = []
    for post in d.posts:
        label = resolved.get(normalize_source(post.source))
        if label is not None and (post.label is None or overwrite):
            if post.label != label:
                assigned += 1
            post = replace(post, label=label)
        posts.append(post)
    logger.info(f"Assigned source-derived labels to {assigned} post(s)")
    return d.derive(posts, "label_by_source")


def class_counts(d: Dataset) -> Dict[Label, int]:
    counts = {label: 0 for label in Label}
    for post in d.posts:
        if post.label is not None:
            counts[post.label] += 1
    return counts
