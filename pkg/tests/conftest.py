"""
Shared fixtures: synthetic rasters with chosen dHash bits, post factories and
JSON-Lines writers.
"""

import io
import json
import os
from datetime import datetime, timezone

import numpy as np
import pytest
from PIL import Image

from src.types import Label, Post


def raster_for_bits(bits: int) -> np.ndarray:
    """8x9 gray raster whose difference hash is exactly `bits`"""
    pixels = np.zeros((8, 9, 3), dtype=np.uint8)
    for row in range(8):
        value = 128
        pixels[row, 0] = value
        for col in range(8):
            bit = (bits >> (63 - (row * 8 + col))) & 1
            value += 1 if bit else -1
            pixels[row, col + 1] = value
    return pixels


def png_bytes(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buffer, format="PNG")
    return buffer.getvalue()


def save_png(path, pixels: np.ndarray) -> str:
    Image.fromarray(pixels, "RGB").save(str(path), format="PNG")
    return str(path)


def noise_raster(seed: int, size: int = 16) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def make_post(
    post_id: str,
    text: str = "some words",
    image=None,
    label=None,
    posted_at: datetime = datetime(2020, 1, 15, tzinfo=timezone.utc),
    source: str = "",
) -> Post:
    if isinstance(label, str):
        label = Label(label)
    return Post(id=post_id, posted_at=posted_at, source=source, text=text, image=image, label=label)


def write_jsonl(path, records) -> str:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write((record if isinstance(record, str) else json.dumps(record)) + "\n")
    return str(path)


def post_record(post_id, text="hello world", image_path=None, label=None, posted_at="2020-01-15T12:00:00Z", source="test"):
    return {
        "id": post_id,
        "posted_at": posted_at,
        "source": source,
        "text": text,
        "image_path": image_path,
        "label": label,
    }


@pytest.fixture
def image_dir(tmp_path):
    path = tmp_path / "images"
    os.makedirs(path)
    return path


@pytest.fixture
def labeled_corpus(tmp_path, image_dir):
    """Sixty labeled multimodal posts with distinct noise images and texts"""
    records = []
    labels = [label.value for label in Label]
    for i in range(60):
        image = save_png(image_dir / f"p{i:03d}.png", noise_raster(1000 + i))
        records.append(
            post_record(
                f"p{i:03d}",
                text=f"post number {i} about topic {i % 7} #tag @someone",
                image_path=os.path.relpath(image, tmp_path),
                label=labels[i % 3],
                posted_at=f"2019-{1 + i % 12:02d}-{1 + i % 28:02d}T08:00:00Z",
                source="corpus",
            )
        )
    return write_jsonl(tmp_path / "posts.jsonl", records)


@pytest.fixture
def trend_corpus(tmp_path, image_dir):
    """Unlabeled posts over eighteen months, two per month"""
    records = []
    for m in range(18):
        year, month = 2018 + m // 12, 1 + m % 12
        for k in range(2):
            i = m * 2 + k
            image = save_png(image_dir / f"t{i:03d}.png", noise_raster(5000 + i))
            records.append(
                post_record(
                    f"t{i:03d}",
                    text=f"trend post {i} words here",
                    image_path=image,
                    posted_at=f"{year}-{month:02d}-{10 + k * 5:02d}T12:00:00Z",
                    source="tumblr" if k else "reddit",
                )
            )
    return write_jsonl(tmp_path / "trend_posts.jsonl", records)


def v_shape_abundance(months: int = 112, knee: int = 48) -> list:
    """Percent series falling until the knee month, rising after it"""
    return [80.0 - 0.5 * i if i < knee else 56.0 + 0.3 * (i - knee) for i in range(months)]
