"""
Edcurate Types - Core data structures for curation, fusion and trend analysis
"""

from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np


class EdcurateError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(EdcurateError, ValueError):
    """Invalid configuration; the message names the offending field"""


class DataError(EdcurateError, ValueError):
    """Input data violates an operation's preconditions"""


class ImageDecodeError(DataError):
    pass


class MissingModalityError(DataError):
    def __init__(self, modality: str, post_id: str = ""):
        self.modality = modality
        self.post_id = post_id
        where = f" for post '{post_id}'" if post_id else ""
        super().__init__(f"Missing {modality} modality{where}")


class UnknownItemError(DataError):
    pass


class RankDeficientError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class Label(Enum):
    PRO_ED = "pro_ed"
    NEUTRAL = "neutral"
    PRO_RECOVERY = "pro_recovery"

    @property
    def code(self) -> int:
        return _LABEL_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "Label":
        if isinstance(code, bool) or code not in (0, 1, 2):
            raise DataError(f"Label code must be 0, 1 or 2, got {code!r}")
        return _LABEL_ORDER[code]


_LABEL_ORDER = (Label.PRO_ED, Label.NEUTRAL, Label.PRO_RECOVERY)
NUM_CLASSES = 3

# Hashtags whose posts start out labeled by the community they were scraped from.
# Pro-ED labels are assigned upstream after manual review.
DEFAULT_SOURCE_LABELS: Dict[str, str] = {
    "anorexiarecovery": "pro_recovery",
    "recoveryfromanorexia": "pro_recovery",
    "edrecovery": "pro_recovery",
    "eatingdisorderrecovery": "pro_recovery",
    "recovered": "pro_recovery",
    "bodypositivity": "pro_recovery",
    "selflove": "pro_recovery",
    "edwarrior": "pro_recovery",
    "outfit": "neutral",
    "boldmodel": "neutral",
    "landscape": "neutral",
    "candid": "neutral",
    "photography": "neutral",
    "news": "neutral",
}


@dataclass(frozen=True)
class Post:
    """One social-media item after normalization by the exporter"""

    id: str
    posted_at: datetime
    source: str = ""
    text: str = ""
    image: Optional[Union[str, bytes]] = None  # path or inline encoded bytes
    label: Optional[Label] = None

    def __post_init__(self):
        if not self.id:
            raise DataError("Post id must be non-empty")
        if self.posted_at.tzinfo is None:
            object.__setattr__(
                self, "posted_at", self.posted_at.replace(tzinfo=timezone.utc)
            )
        if not 1970 <= self.posted_at.year < 2100:
            raise DataError(
                f"Post '{self.id}' posted_at {self.posted_at.isoformat()} outside [1970, 2100)"
            )


@dataclass
class Dataset:
    """Ordered collection of posts with a provenance note"""

    posts: List[Post] = field(default_factory=list)
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    def ids(self) -> List[str]:
        return [post.id for post in self.posts]

    def derive(self, posts: List[Post], step: str) -> "Dataset":
        """New dataset from a subset of posts, provenance extended by step"""
        provenance = f"{self.provenance} | {step}" if self.provenance else step
        return Dataset(posts=list(posts), provenance=provenance)


@dataclass
class IngestReport:
    read: int = 0
    skipped_malformed: int = 0
    excluded_no_text: int = 0
    excluded_no_image: int = 0
    excluded_undecodable: int = 0
    kept: int = 0

    def to_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ImageHash:
    """64-bit difference hash"""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < 1 << 64:
            raise ValueError(f"ImageHash bits out of 64-bit range: {self.bits}")

    def __str__(self) -> str:
        return f"{self.bits:016x}"


@dataclass
class DedupReport:
    removed_exact_id: int = 0
    removed_exact_text: int = 0
    removed_near_image: int = 0
    kept: int = 0
    threshold: float = 0.95

    @property
    def input_size(self) -> int:
        return (
            self.kept
            + self.removed_exact_id
            + self.removed_exact_text
            + self.removed_near_image
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kept": self.kept,
            "removed_exact_id": self.removed_exact_id,
            "removed_exact_text": self.removed_exact_text,
            "removed_near_image": self.removed_near_image,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class IndexParams:
    tables: int = 8
    bits: int = 16
    seed: int = 0
    dim: int = 768

    def __post_init__(self):
        if self.tables < 1:
            raise ConfigError(f"audit.tables must be >= 1, got {self.tables}")
        if not 1 <= self.bits <= 63:
            raise ConfigError(f"audit.bits must be in [1, 63], got {self.bits}")
        if self.dim < 1:
            raise ConfigError(f"Embedding dimension must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class Signature:
    """One (table_id, bucket_key) token per hash table"""

    tokens: FrozenSet[Tuple[int, int]]

    def keys(self) -> List[int]:
        return [key for _, key in sorted(self.tokens)]


@dataclass(frozen=True)
class SimIndex:
    entries: Dict[str, Tuple[Signature, Optional[Label]]]
    hyperplanes: np.ndarray  # tables x bits x dim unit normals
    params: IndexParams
    buckets: Dict[Tuple[int, int], Tuple[str, ...]]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class FlaggedItem:
    item_id: str
    label: Label
    neighbor_ids: List[str]
    neighbor_labels: List[Label]
    scores: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "item_id": self.item_id,
            "label": self.label.value,
            "neighbor_ids": list(self.neighbor_ids),
            "neighbor_labels": [label.value for label in self.neighbor_labels],
            "scores": list(self.scores),
        }


@dataclass
class FlagReport:
    flagged: List[FlaggedItem] = field(default_factory=list)
    examined: int = 0
    k: int = 5
    flag_min_disagree: int = 3
    params: Optional[IndexParams] = None

    def flagged_ids(self) -> List[str]:
        return [item.item_id for item in self.flagged]

    def to_dict(self) -> Dict[str, Any]:
        params = self.params.__dict__ if self.params else None
        return {
            "examined": self.examined,
            "k": self.k,
            "flag_min_disagree": self.flag_min_disagree,
            "index": dict(params) if params else None,
            "flagged": [item.to_dict() for item in self.flagged],
        }


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train_frac, self.val_frac, self.test_frac)
        if any(frac <= 0 for frac in fractions):
            raise ConfigError(f"split.fractions must all be positive, got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split.fractions must sum to 1.0, got {sum(fractions)}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 200
    batch_size: int = 32
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "max_epochs", "batch_size", "patience"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigError(f"train.{name} must be positive, got {value}")


@dataclass
class FusionHead:
    """Linear late-fusion head over concatenated (text, image) logits"""

    W: np.ndarray  # 3 x 6
    b: np.ndarray  # 3
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_loss: Optional[float] = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.shape != (NUM_CLASSES, 2 * NUM_CLASSES) or self.b.shape != (
            NUM_CLASSES,
        ):
            raise DataError(
                f"FusionHead expects W 3x6 and b 3, got {self.W.shape} and {self.b.shape}"
            )
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise DataError("FusionHead parameters must be finite")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true code, cols = predicted code

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> List[List[int]]:
        return [[int(v) for v in row] for row in self.counts]


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: List[ClassMetrics]
    confusion: ConfusionMatrix

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                label.value: dict(metrics.__dict__)
                for label, metrics in zip(_LABEL_ORDER, self.per_class)
            },
            "confusion": self.confusion.to_list(),
        }


@dataclass
class Curve:
    """One ROC (x=FPR, y=TPR) or PR (x=recall, y=precision) curve"""

    name: str
    defined: bool = True
    thresholds: List[float] = field(default_factory=list)
    xs: List[float] = field(default_factory=list)
    ys: List[float] = field(default_factory=list)
    area: Optional[float] = None


@dataclass
class OvrCurves:
    roc: Dict[str, Curve] = field(default_factory=dict)
    pr: Dict[str, Curve] = field(default_factory=dict)


@dataclass(frozen=True, order=True)
class MonthKey:
    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise DataError(f"Month must be in 1..12, got {self.month}")

    @classmethod
    def parse(cls, text: str) -> "MonthKey":
        try:
            year, month = str(text).strip().split("-")
            return cls(int(year), int(month))
        except (ValueError, DataError):
            raise ConfigError(f"Invalid month '{text}', expected YYYY-MM") from None

    @classmethod
    def of(cls, moment: datetime) -> "MonthKey":
        return cls(moment.year, moment.month)

    @property
    def ordinal(self) -> int:
        return self.year * 12 + self.month - 1

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"


@dataclass
class MonthlyPoint:
    month: MonthKey
    examined: int
    pro_ed: int

    @property
    def abundance(self) -> float:
        return 100.0 * self.pro_ed / self.examined


@dataclass
class MonthlySeries:
    series_id: str = "all"
    points: List[MonthlyPoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PolyFit:
    degree: int
    coefficients: List[float]  # ascending powers, original x units
    rss: float
    tss: float
    r2: float
    n: int
    p_value: Optional[float] = None


# Pipeline configuration


@dataclass
class InputsConfig:
    posts: Optional[str] = None
    trend_posts: Optional[str] = None
    embeddings: Optional[str] = None
    text_scores: Optional[str] = None
    image_scores: Optional[str] = None
    removals: Optional[str] = None


@dataclass
class DedupConfig:
    near_threshold: float = 0.95
    accelerate: bool = True


@dataclass
class AuditConfig:
    tables: int = 8
    bits: int = 16
    k: int = 5
    flag_min_disagree: int = 3


@dataclass
class LabelingConfig:
    enabled: bool = True
    overwrite: bool = False
    by_source: Dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_SOURCE_LABELS)
    )


@dataclass
class SplitConfig:
    fractions: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])


@dataclass
class TrainSettings:
    learning_rate: float = 0.1
    max_epochs: int = 200
    batch_size: int = 32
    patience: int = 10


@dataclass
class TrendConfig:
    window_start: str = "2014-01"
    window_end: str = "2023-04"
    linear_from: str = "2018-01"
    degree: int = 3
    sample_days: bool = False


@dataclass
class StageDefinition:
    needs: Union[str, List[str]] = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.needs, str):
            self.needs = [self.needs]
        elif self.needs is None:
            self.needs = []
        if not isinstance(self.needs, list) or not all(isinstance(n, str) for n in self.needs):
            raise ConfigError(f"Stage 'needs' must be a stage name or a list of names, got {self.needs!r}")


CONFIG_SECTIONS = {
    "inputs": InputsConfig,
    "dedup": DedupConfig,
    "audit": AuditConfig,
    "labeling": LabelingConfig,
    "split": SplitConfig,
    "train": TrainSettings,
    "trend": TrendConfig,
}


@dataclass
class PipelineConfig:
    """Complete run configuration; every random choice flows from seed"""

    name: Optional[str] = None
    seed: int = 0
    workdir: str = "artifacts"
    workers: int = 1
    inputs: InputsConfig = field(default_factory=InputsConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    trend: TrendConfig = field(default_factory=TrendConfig)
    stages: Dict[str, StageDefinition] = field(default_factory=dict)

    def __post_init__(self):
        # Convert section dicts to objects
        for section, cls in CONFIG_SECTIONS.items():
            value = getattr(self, section)
            if value is None:
                setattr(self, section, cls())
            elif isinstance(value, dict):
                setattr(
                    self, section, cls(**{k.replace("-", "_"): v for k, v in value.items()})
                )

        converted_stages = {}
        for stage_id, stage in (self.stages or {}).items():
            if stage is None:
                stage = StageDefinition()
            elif isinstance(stage, dict):
                stage = StageDefinition(**stage)
            converted_stages[stage_id] = stage
        self.stages = converted_stages

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "name": self.name,
            "seed": self.seed,
            "workdir": self.workdir,
            "workers": self.workers,
        }
        for section in CONFIG_SECTIONS:
            data[section] = dict(getattr(self, section).__dict__)
        data["stages"] = {
            stage_id: {"needs": list(stage.needs)}
            for stage_id, stage in self.stages.items()
        }
        return data

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train.__dict__)

    def split_spec(self) -> SplitSpec:
        fractions = list(self.split.fractions)
        if len(fractions) != 3:
            raise ConfigError(
                f"split.fractions must have three entries, got {len(fractions)}"
            )
        return SplitSpec(*[float(f) for f in fractions], seed=self.seed)

    def index_params(self) -> IndexParams:
        return IndexParams(
            tables=self.audit.tables, bits=self.audit.bits, seed=self.seed
        )


# Pipeline results


class StageStatus(Enum):
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class StageOutcome:
    stage: str
    status: str = StageStatus.COMPLETED.value
    outputs: Dict[str, str] = field(default_factory=dict)  # artifact name -> sha256
    summary: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class PipelineResult:
    name: str
    status: str
    stages: Dict[str, StageOutcome] = field(default_factory=dict)


@dataclass
class ReplayReport:
    stage: str
    matched: List[str] = field(default_factory=list)
    mismatched: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    changed_inputs: List[str] = field(default_factory=list)

    @property
    def identical(self) -> bool:
        return not (self.mismatched or self.missing or self.changed_inputs)
