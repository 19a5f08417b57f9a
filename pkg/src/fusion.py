"""
Edcurate Fusion - Modality encoders and the trainable late-fusion head

Each modality encoder emits three class logits per post. The fusion head merges
them after classification with a linear map over the concatenated logits,
trained by plain mini-batch gradient descent on cross-entropy with validation
early stopping.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union
import logging
import os

import numpy as np
import pandas as pd
from PIL import Image

from .corpus import open_image
from .dedup import dhash
from .types import (
    NUM_CLASSES,
    DataError,
    Dataset,
    FusionHead,
    InsufficientDataError,
    Label,
    MissingModalityError,
    Post,
    TrainConfig,
)
from .utils import ArtifactWriter, FileUtils, feature_hash, make_rng, parallel_map

logger = logging.getLogger(__name__)

LOGIT_CLIP = 50.0
PROB_FLOOR = 1e-12
GRADIENT_CHECK_STEP = 1e-5
_TRAIN_STREAM = 3


# Numerics


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax; max-shifted logits are floored at -LOGIT_CLIP"""
    z = np.asarray(z, dtype=np.float64)
    shifted = np.exp(np.maximum(z - z.max(axis=-1, keepdims=True), -LOGIT_CLIP))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, true_code: int) -> float:
    return float(-np.log(max(float(probs[true_code]), PROB_FLOOR)))


def mean_cross_entropy(probs: np.ndarray, codes: np.ndarray) -> float:
    picked = probs[np.arange(len(codes)), codes]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def fuse(text: np.ndarray, image: np.ndarray, head: FusionHead) -> np.ndarray:
    """Fused logits W . [text, image] + b (rows for batched input)"""
    features = np.concatenate(
        [np.asarray(text, dtype=np.float64), np.asarray(image, dtype=np.float64)],
        axis=-1,
    )
    return features @ head.W.T + head.b


def mean_fuse(text: np.ndarray, image: np.ndarray) -> np.ndarray:
    return (np.asarray(text, dtype=np.float64) + np.asarray(image, dtype=np.float64)) / 2.0


def argmax_codes(scores: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties go to the lowest label code"""
    return np.argmax(np.atleast_2d(scores), axis=1)


# Encoders


@dataclass(frozen=True)
class ImageTransform:
    """Resize shorter side, center crop to a square, per-channel normalize"""

    size: int = 224
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    def crop(self, image: Image.Image) -> Image.Image:
        width, height = image.size
        scale = self.size / min(width, height)
        resized = image.convert("RGB").resize(
            (max(self.size, round(width * scale)), max(self.size, round(height * scale))),
            Image.Resampling.BILINEAR,
        )
        left = (resized.width - self.size) // 2
        top = (resized.height - self.size) // 2
        return resized.crop((left, top, left + self.size, top + self.size))

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """HxWx3 uint8 raster to a 3xHxW normalized float tensor"""
        scaled = np.asarray(pixels, dtype=np.float64) / 255.0
        scaled = (scaled - np.array(self.mean)) / np.array(self.std)
        return scaled.transpose(2, 0, 1)

    def apply(self, image: Image.Image) -> np.ndarray:
        return self.normalize(np.asarray(self.crop(image)))


@dataclass(frozen=True)
class TextTokenizer:
    """Case-folded whitespace tokens hashed to ids in a fixed vocabulary"""

    vocab_size: int = 4096
    seed: int = 0

    def encode(self, text: str) -> List[int]:
        return [
            feature_hash(token, self.seed, self.vocab_size)[0]
            for token in text.casefold().split()
        ]


class ModalityEncoder(ABC):
    """Maps a post to three class logits for one modality"""

    modality: str = ""

    @property
    def name(self) -> str:
        return type(self).__name__

    @abstractmethod
    def encode(self, post: Post) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {"modality": self.modality, "name": self.name}


class HashedTextEncoder(ModalityEncoder):
    """Seeded hashed bag-of-words with a fixed random linear readout"""

    modality = "text"

    def __init__(self, seed: int = 0, vocab_size: int = 4096):
        self.seed = seed
        self.tokenizer = TextTokenizer(vocab_size=vocab_size, seed=seed)
        self.weights = make_rng(seed, 0x7E47).standard_normal((NUM_CLASSES, vocab_size))

    def encode(self, post: Post) -> np.ndarray:
        ids = self.tokenizer.encode(post.text)
        if not ids:
            raise MissingModalityError("text", post.id)
        counts = np.bincount(ids, minlength=self.tokenizer.vocab_size)
        return self.weights @ counts / np.sqrt(len(ids))

    def describe(self) -> Dict[str, Any]:
        return {**super().describe(), "seed": self.seed, "vocab_size": self.tokenizer.vocab_size}


class DHashImageEncoder(ModalityEncoder):
    """Fixed random linear readout of dHash bits and normalized channel means"""

    modality = "image"

    def __init__(self, seed: int = 0, transform: ImageTransform = ImageTransform()):
        self.seed = seed
        self.transform = transform
        self.weights = make_rng(seed, 0x1A6E).standard_normal((NUM_CLASSES, 64 + 3))

    def features(self, image: Image.Image) -> np.ndarray:
        cropped = self.transform.crop(image)
        bits = dhash(cropped).bits
        signs = np.array([1.0 if (bits >> (63 - i)) & 1 else -1.0 for i in range(64)])
        channel_means = self.transform.normalize(np.asarray(cropped)).mean(axis=(1, 2))
        return np.concatenate([signs, channel_means])

    def encode(self, post: Post) -> np.ndarray:
        if post.image is None:
            raise MissingModalityError("image", post.id)
        return self.weights @ self.features(open_image(post.image)) / 8.0

    def describe(self) -> Dict[str, Any]:
        return {**super().describe(), "seed": self.seed, "crop": self.transform.size}


class ScoreTableEncoder(ModalityEncoder):
    """Precomputed backbone logits read from an id,s0,s1,s2 table"""

    def __init__(self, modality: str, table: Union[str, Mapping[str, np.ndarray]]):
        self.modality = modality
        self.source = table if isinstance(table, str) else "<memory>"
        if isinstance(table, str):
            table = read_score_csv(table)
        self.table = {key: np.asarray(value, dtype=np.float64) for key, value in table.items()}

    def encode(self, post: Post) -> np.ndarray:
        scores = self.table.get(post.id)
        if scores is None:
            raise MissingModalityError(self.modality, post.id)
        return scores

    def describe(self) -> Dict[str, Any]:
        return {**super().describe(), "source": self.source}


def read_score_csv(path: str) -> Dict[str, np.ndarray]:
    try:
        frame = pd.read_csv(path, dtype={"id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read score file {path}: {e}") from None
    columns = ["id", "s0", "s1", "s2"]
    if list(frame.columns[:4]) != columns:
        raise DataError(f"Score file {path} must have columns {','.join(columns)}")
    values = frame[columns[1:]].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"Score file {path} contains non-finite scores")
    if frame["id"].duplicated().any():
        raise DataError(f"Score file {path} repeats post ids")
    return dict(zip(frame["id"], values))


@dataclass
class FusionEncoders:
    text: ModalityEncoder
    image: ModalityEncoder

    def describe(self) -> Dict[str, Any]:
        return {"text": self.text.describe(), "image": self.image.describe()}


@dataclass
class ScoreBatch:
    """Per-modality logits for a batch of posts with optional true codes"""

    text: np.ndarray
    image: np.ndarray
    codes: Optional[np.ndarray] = None
    ids: Optional[List[str]] = None

    def __len__(self) -> int:
        return len(self.text)

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.text, self.image], axis=1)

    def subset(self, index: np.ndarray) -> "ScoreBatch":
        return ScoreBatch(
            text=self.text[index],
            image=self.image[index],
            codes=None if self.codes is None else self.codes[index],
            ids=None if self.ids is None else [self.ids[i] for i in index],
        )


def encode_dataset(d: Dataset, encoders: FusionEncoders, workers: int = 1) -> ScoreBatch:
    """Encode every post with both modality encoders"""
    pairs = parallel_map(
        lambda post: (encoders.text.encode(post), encoders.image.encode(post)),
        d.posts,
        workers,
    )
    text = np.array([p[0] for p in pairs], dtype=np.float64).reshape(-1, NUM_CLASSES)
    image = np.array([p[1] for p in pairs], dtype=np.float64).reshape(-1, NUM_CLASSES)
    codes = None
    if all(post.label is not None for post in d.posts):
        codes = np.array([post.label.code for post in d.posts], dtype=np.int64)
    return ScoreBatch(text=text, image=image, codes=codes, ids=d.ids())


# Head training


def initial_head() -> FusionHead:
    """Mean fusion: W = [I | I] / 2, b = 0"""
    eye = np.eye(NUM_CLASSES)
    return FusionHead(W=np.hstack([eye, eye]) / 2.0, b=np.zeros(NUM_CLASSES))


def loss_and_gradients(
    W: np.ndarray, b: np.ndarray, features: np.ndarray, codes: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to W and b"""
    n = len(codes)
    logits = features @ W.T + b
    probs = softmax(logits)
    loss = mean_cross_entropy(probs, codes)

    grad = probs.copy()
    grad[np.arange(n), codes] -= 1.0
    # clipped logits and floored probabilities contribute no slope
    grad[logits - logits.max(axis=1, keepdims=True) < -LOGIT_CLIP] = 0.0
    grad[probs[np.arange(n), codes] < PROB_FLOOR] = 0.0
    grad /= n
    return loss, grad.T @ features, grad.sum(axis=0)


def head_loss(head: FusionHead, batch: ScoreBatch) -> float:
    return mean_cross_entropy(softmax(fuse(batch.text, batch.image, head)), batch.codes)


def train_on_scores(train: ScoreBatch, val: ScoreBatch, cfg: TrainConfig = TrainConfig()) -> FusionHead:
    """Gradient descent from mean fusion, keeping the best validation parameters"""
    if len(train) == 0 or len(val) == 0:
        raise InsufficientDataError(
            f"Training needs non-empty train and val sets, got {len(train)} and {len(val)}"
        )
    if train.codes is None or val.codes is None:
        raise DataError("Training and validation posts must all be labeled")

    head = initial_head()
    W, b = head.W.copy(), head.b.copy()
    features, codes = train.features, train.codes
    rng = make_rng(cfg.seed, _TRAIN_STREAM)

    best_loss = head_loss(head, val)
    best_W, best_b, best_epoch = W.copy(), b.copy(), 0
    stale = 0
    epoch = 0
    logger.debug(f"Initial validation loss {best_loss:.6f}")

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grad_W, grad_b = loss_and_gradients(W, b, features[batch], codes[batch])
            W -= cfg.learning_rate * grad_W
            b -= cfg.learning_rate * grad_b

        val_loss = head_loss(FusionHead(W=W, b=b), val)
        if val_loss < best_loss:
            best_loss, best_W, best_b, best_epoch = val_loss, W.copy(), b.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Early stop at epoch {epoch} (best epoch {best_epoch})")
                break

    logger.info(f"Trained fusion head: best validation loss {best_loss:.6f} at epoch {best_epoch}")
    return FusionHead(
        W=best_W, b=best_b, epochs_run=epoch, best_epoch=best_epoch, best_val_loss=best_loss
    )


def train_fusion(
    train: Dataset,
    val: Dataset,
    encoders: FusionEncoders,
    cfg: TrainConfig = TrainConfig(),
    workers: int = 1,
) -> FusionHead:
    if len(train) == 0 or len(val) == 0:
        raise InsufficientDataError(
            f"Training needs non-empty train and val sets, got {len(train)} and {len(val)}"
        )
    return train_on_scores(
        encode_dataset(train, encoders, workers), encode_dataset(val, encoders, workers), cfg
    )


def gradient_check(head: FusionHead, batch: ScoreBatch, step: float = GRADIENT_CHECK_STEP) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Each gap is taken relative to max(|analytic|, |numeric|, 1e-4).
    """
    if len(batch) == 0 or batch.codes is None:
        raise InsufficientDataError("Gradient check needs a non-empty labeled batch")

    features, codes = batch.features, batch.codes
    _, grad_W, grad_b = loss_and_gradients(head.W, head.b, features, codes)

    def loss_at(W: np.ndarray, b: np.ndarray) -> float:
        return loss_and_gradients(W, b, features, codes)[0]

    worst = 0.0
    for params, analytic, is_bias in ((head.W, grad_W, False), (head.b, grad_b, True)):
        for index in np.ndindex(params.shape):
            plus, minus = params.copy(), params.copy()
            plus[index] += step
            minus[index] -= step
            if is_bias:
                numeric = (loss_at(head.W, plus) - loss_at(head.W, minus)) / (2 * step)
            else:
                numeric = (loss_at(plus, head.b) - loss_at(minus, head.b)) / (2 * step)
            gap = abs(analytic[index] - numeric)
            worst = max(worst, gap / max(abs(analytic[index]), abs(numeric), 1e-4))
    return worst


# Prediction


def predict_scores(batch: ScoreBatch, head: FusionHead) -> Tuple[np.ndarray, np.ndarray]:
    probs = softmax(fuse(batch.text, batch.image, head))
    return argmax_codes(probs), probs


def predict(post: Post, encoders: FusionEncoders, head: FusionHead) -> Tuple[Label, np.ndarray]:
    """Fused label and class probabilities for one multimodal post"""
    text = encoders.text.encode(post)
    image = encoders.image.encode(post)
    probs = softmax(fuse(text, image, head))
    return Label.from_code(int(np.argmax(probs))), probs


def unimodal_predictions(batch: ScoreBatch, head: Optional[FusionHead] = None) -> Dict[str, np.ndarray]:
    """Text-only, image-only, mean-fusion and (if given) trained-fusion codes"""
    predictions = {
        "text": argmax_codes(batch.text),
        "image": argmax_codes(batch.image),
        "mean_fusion": argmax_codes(mean_fuse(batch.text, batch.image)),
    }
    if head is not None:
        predictions["fusion"] = predict_scores(batch, head)[0]
    return predictions


# Persistence


def head_to_dict(head: FusionHead, encoders: Optional[FusionEncoders] = None) -> Dict[str, Any]:
    return {
        "W": [[float(v) for v in row] for row in head.W],
        "b": [float(v) for v in head.b],
        "meta": {
            "epochs_run": head.epochs_run,
            "best_epoch": head.best_epoch,
            "best_val_loss": head.best_val_loss,
            "encoders": encoders.describe() if encoders else None,
        },
    }


def head_from_dict(data: Mapping[str, Any]) -> FusionHead:
    try:
        meta = data.get("meta") or {}
        return FusionHead(
            W=np.array(data["W"], dtype=np.float64),
            b=np.array(data["b"], dtype=np.float64),
            epochs_run=int(meta.get("epochs_run", 0)),
            best_epoch=int(meta.get("best_epoch", 0)),
            best_val_loss=meta.get("best_val_loss"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Invalid fusion head data: {e}") from None


def save_head(head: FusionHead, path: str, encoders: Optional[FusionEncoders] = None) -> str:
    """Write the head as JSON with W in row-major order"""
    directory, name = os.path.split(os.path.abspath(path))
    with ArtifactWriter(directory) as writer:
        return writer.write_json(name, head_to_dict(head, encoders))


def load_head(path: str) -> FusionHead:
    try:
        data = FileUtils.read_json(path)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read fusion head {path}: {e}") from None
    return head_from_dict(data)
