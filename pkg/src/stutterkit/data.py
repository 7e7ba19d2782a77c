"""Manifest ingestion, split protocols, pseudo-labelling and synthetic data.

A manifest is a CSV with header ``clip_id,podcast_id,label`` plus optional
``audio_path,start_ms,stop_ms`` (audio-backed clips) or ``feature_path``
(precomputed feature matrices). The five accepted labels are the class names
Fluent, Repetition, Prolongation, Block, Interjection; anything else is an
error, non-stuttering annotations are filtered upstream.

The binary pseudo label (fluent vs disfluent) is always derived from the
class label, never stored, so the two can not disagree.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptyPodcast, ParseError, TooFewPodcasts, UnknownLabel
from .features import read_fmat
from .model import CLASS_NAMES, DISFLUENT_CLASSES, StutterClass

log = logging.getLogger(__name__)

_LABEL_BY_NAME = {name.lower(): StutterClass(i) for i, name in enumerate(CLASS_NAMES)}

# Column aliases accepted by the annotation-table adapter. Sound and word
# repetitions both count toward Repetition.
SEP28K_CLASS_COLUMNS = {
    "fluent": StutterClass.FLUENT,
    "nostutteredwords": StutterClass.FLUENT,
    "repetition": StutterClass.REPETITION,
    "soundrep": StutterClass.REPETITION,
    "wordrep": StutterClass.REPETITION,
    "prolongation": StutterClass.PROLONGATION,
    "block": StutterClass.BLOCK,
    "interjection": StutterClass.INTERJECTION,
}
SEP28K_NONSTUTTER_COLUMNS = (
    "unsure",
    "pooraudioquality",
    "difficulttounderstand",
    "nospeech",
    "music",
    "naturalpause",
)


@dataclass
class ClipRecord:
    """One labeled 3-second segment.

    ``fluent_label`` is the derived binary pseudo label: 0 for fluent clips,
    1 for every disfluent class.
    """

    clip_id: str
    podcast_id: str
    label: StutterClass
    audio_path: str | None = None
    start_ms: float | None = None
    stop_ms: float | None = None
    feature_path: str | None = None
    features: np.ndarray | None = field(default=None, repr=False)

    @property
    def fluent_label(self) -> int:
        return 0 if self.label == StutterClass.FLUENT else 1

    @property
    def is_disfluent(self) -> bool:
        return self.label != StutterClass.FLUENT


@dataclass
class DatasetSplit:
    train: list[ClipRecord]
    valid: list[ClipRecord]
    test: list[ClipRecord]
    mode: str = ""

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


def features_of(rec: ClipRecord) -> np.ndarray:
    """Feature matrix (n_mfcc, frames) for a record, loading from disk if needed."""
    if rec.features is not None:
        return rec.features
    if rec.feature_path:
        rec.features = read_fmat(rec.feature_path)
        return rec.features
    raise DataError(
        f"clip {rec.clip_id} carries no features; extract them from audio first"
    )


def parse_label(text: str) -> StutterClass:
    label = _LABEL_BY_NAME.get(text.strip().lower())
    if label is None:
        raise UnknownLabel(f"unknown label {text!r}; expected one of {CLASS_NAMES}")
    return label


def load_manifest(path) -> list[ClipRecord]:
    """Parse a manifest CSV into clip records; labels are validated strictly."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            log.warning("%s: empty manifest", path)
            return records
        required = {"clip_id", "podcast_id", "label"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise ParseError(f"{path}: manifest header missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = ClipRecord(
                    clip_id=row["clip_id"].strip(),
                    podcast_id=row["podcast_id"].strip(),
                    label=parse_label(row["label"]),
                    audio_path=(row.get("audio_path") or "").strip() or None,
                    start_ms=float(row["start_ms"]) if row.get("start_ms") else None,
                    stop_ms=float(row["stop_ms"]) if row.get("stop_ms") else None,
                    feature_path=(row.get("feature_path") or "").strip() or None,
                )
            except UnknownLabel:
                raise
            except (KeyError, ValueError, AttributeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed row ({exc})") from exc
            if not rec.clip_id or not rec.podcast_id:
                raise ParseError(f"{path}:{lineno}: empty clip_id or podcast_id")
            records.append(rec)
    if not records:
        log.warning("%s: manifest has no data rows", path)
    return records


def write_manifest(path, records: list[ClipRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["clip_id", "podcast_id", "label", "audio_path", "start_ms", "stop_ms", "feature_path"]
        )
        for r in records:
            writer.writerow(
                [
                    r.clip_id,
                    r.podcast_id,
                    CLASS_NAMES[r.label],
                    r.audio_path or "",
                    "" if r.start_ms is None else r.start_ms,
                    "" if r.stop_ms is None else r.stop_ms,
                    r.feature_path or "",
                ]
            )


def adapt_annotation_table(rows: list[dict]) -> tuple[list[ClipRecord], list[tuple[str, str]]]:
    """Resolve per-class annotator counts into single labels.

    A row keeps the class with the strictly largest count among the five
    stuttering classes; ties and rows with any non-stuttering flag set are
    excluded. Returns (records, exclusions) where exclusions is a list of
    (clip_id, reason).

    Rows either carry ``clip_id``/``podcast_id`` directly or the SEP-28k
    style ``Show``/``EpId``/``ClipId`` triple (podcast = Show_EpId).
    """
    records = []
    exclusions = []
    for lineno, raw in enumerate(rows, start=2):
        row = {k.strip().lower(): v for k, v in raw.items() if k is not None}
        if "clip_id" in row:
            clip_id = str(row["clip_id"]).strip()
            podcast_id = str(row.get("podcast_id", "")).strip()
        elif {"show", "epid", "clipid"} <= set(row):
            podcast_id = f"{str(row['show']).strip()}_{str(row['epid']).strip()}"
            clip_id = f"{podcast_id}_{str(row['clipid']).strip()}"
        else:
            raise ParseError(f"annotation row {lineno}: no clip identifier columns")
        if not clip_id or not podcast_id:
            raise ParseError(f"annotation row {lineno}: empty identifier")

        try:
            counts = {c: 0 for c in StutterClass}
            for col, cls in SEP28K_CLASS_COLUMNS.items():
                if col in row and str(row[col]).strip() != "":
                    counts[cls] += int(float(row[col]))
            nonstutter = sum(
                int(float(row[col]))
                for col in SEP28K_NONSTUTTER_COLUMNS
                if col in row and str(row[col]).strip() != ""
            )
        except ValueError as exc:
            raise ParseError(f"annotation row {lineno}: bad count ({exc})") from exc

        if nonstutter > 0:
            exclusions.append((clip_id, "non-stuttering annotation"))
            continue
        best = max(counts.values())
        winners = [c for c, n in counts.items() if n == best]
        if best <= 0:
            exclusions.append((clip_id, "no annotations"))
            continue
        if len(winners) > 1:
            exclusions.append((clip_id, "tie"))
            continue
        start = row.get("start")
        stop = row.get("stop")
        records.append(
            ClipRecord(
                clip_id=clip_id,
                podcast_id=podcast_id,
                label=winners[0],
                audio_path=str(row["audio_path"]).strip() if row.get("audio_path") else None,
                start_ms=float(start) if start not in (None, "") else None,
                stop_ms=float(stop) if stop not in (None, "") else None,
            )
        )
    return records, exclusions


def adapt_sep28k(path) -> tuple[list[ClipRecord], list[tuple[str, str]]]:
    """Read a raw annotation CSV and resolve it into a manifest."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return adapt_annotation_table(rows)


def _largest_remainder(total: int, ratios) -> list[int]:
    """Integer seat counts per ratio summing to total; ties go to earlier entries."""
    exact = [total * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _podcast_groups(records):
    groups: dict[str, list[ClipRecord]] = {}
    for r in records:
        groups.setdefault(r.podcast_id, []).append(r)
    return groups


def split_by_podcast(records, ratios=(0.8, 0.1, 0.1), seed=0) -> DatasetSplit:
    """Partition whole podcasts into train/valid/test (largest-remainder sizes)."""
    groups = _podcast_groups(records)
    podcasts = sorted(groups)
    if len(podcasts) < 3:
        raise TooFewPodcasts(f"need >= 3 podcasts, got {len(podcasts)}")
    rng = np.random.default_rng(seed)
    rng.shuffle(podcasts)
    n_train, n_valid, n_test = _largest_remainder(len(podcasts), ratios)
    buckets = (
        podcasts[:n_train],
        podcasts[n_train : n_train + n_valid],
        podcasts[n_train + n_valid :],
    )
    parts = [[r for p in bucket for r in groups[p]] for bucket in buckets]
    return DatasetSplit(*parts, mode="podcast-disjoint")


def split_within_podcast(records, valid_fraction=0.1, seed=0, test=()) -> DatasetSplit:
    """Stratified per-(podcast, class) train/valid split; test is supplied fixed.

    Every (podcast, class) cell with at least 2 clips contributes at least
    one clip to each side; single-clip cells go to train with a warning.
    """
    groups = _podcast_groups(records)
    if not groups:
        raise EmptyPodcast("no records to split")
    for pid, clips in groups.items():
        if len(clips) < 2:
            raise EmptyPodcast(f"podcast {pid} has {len(clips)} clip(s); need >= 2")
    rng = np.random.default_rng(seed)
    train: list[ClipRecord] = []
    valid: list[ClipRecord] = []
    for pid in sorted(groups):
        cells: dict[StutterClass, list[ClipRecord]] = {}
        for r in groups[pid]:
            cells.setdefault(r.label, []).append(r)
        for cls in sorted(cells, key=int):
            cell = sorted(cells[cls], key=lambda r: r.clip_id)
            rng.shuffle(cell)
            if len(cell) < 2:
                log.warning(
                    "podcast %s class %s has a single clip; keeping it in train",
                    pid,
                    CLASS_NAMES[cls],
                )
                train.extend(cell)
                continue
            n_valid = int(round(len(cell) * valid_fraction))
            n_valid = min(max(n_valid, 1), len(cell) - 1)
            valid.extend(cell[:n_valid])
            train.extend(cell[n_valid:])
    return DatasetSplit(train, valid, list(test), mode="within-podcast")


def kfold(records, k=10, seed=0, by="podcast") -> list[DatasetSplit]:
    """k cross-validation splits; folds are podcast-disjoint by default.

    Clip-level folding is available behind ``by="clip"``.
    """
    rng = np.random.default_rng(seed)
    if by == "podcast":
        groups = _podcast_groups(records)
        units = sorted(groups)
        if len(units) < k:
            raise TooFewPodcasts(f"need >= {k} podcasts for {k}-fold, got {len(units)}")
        rng.shuffle(units)
        sizes = _largest_remainder(len(units), [1.0 / k] * k)
        folds, start = [], 0
        for s in sizes:
            folds.append([r for u in units[start : start + s] for r in groups[u]])
            start += s
    elif by == "clip":
        units = sorted(records, key=lambda r: r.clip_id)
        rng.shuffle(units)
        sizes = _largest_remainder(len(units), [1.0 / k] * k)
        folds, start = [], 0
        for s in sizes:
            folds.append(units[start : start + s])
            start += s
    else:
        raise ValueError(f"unknown fold granularity {by!r}")
    splits = []
    for i in range(k):
        train = [r for j, fold in enumerate(folds) if j != i for r in fold]
        splits.append(DatasetSplit(train, folds[i], [], mode=f"fold{i}"))
    return splits


@dataclass(frozen=True)
class SyntheticConfig:
    """Feature-space synthetic corpus with controllable class/podcast signals.

    Each clip is alpha * A[class] + beta * ((1-rho) * Bperp[podcast] +
    rho * Bpar[podcast]) + sigma * noise, where the A patterns are
    orthonormal, the Bperp patterns are orthonormal and orthogonal to every
    A, and the Bpar patterns are unit vectors inside the span of the A
    patterns. rho therefore controls how much podcast identity is entangled
    with the class-discriminative directions.
    """

    n_podcasts: int = 4
    clips_per_class: int | dict = 20  # total per class, spread over podcasts
    frames: int = 20
    n_mfcc: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 0.0
    sigma: float = 0.1
    seed: int = 0

    def validate(self):
        counts = self.class_counts()
        if self.n_podcasts < 1 or any(c < 1 for c in counts.values()):
            raise ValueError("counts must be >= 1")
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def class_counts(self) -> dict[StutterClass, int]:
        if isinstance(self.clips_per_class, dict):
            return {
                (c if isinstance(c, StutterClass) else parse_label(str(c))): int(n)
                for c, n in self.clips_per_class.items()
            }
        return {c: int(self.clips_per_class) for c in StutterClass}


def _patterns(cfg: SyntheticConfig, rng):
    # One QR factorization yields the class patterns and the podcast patterns
    # orthogonal to them; the entangled podcast patterns are unit combinations
    # of the class patterns.
    dim = cfg.n_mfcc * cfg.frames
    n_classes = len(StutterClass)
    basis = np.linalg.qr(rng.normal(size=(dim, n_classes + cfg.n_podcasts)))[0]
    class_patterns = basis[:, :n_classes].T
    podcast_perp = basis[:, n_classes:].T
    mix = rng.normal(size=(cfg.n_podcasts, n_classes))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    return class_patterns, podcast_perp, mix @ class_patterns


def generate_synthetic(cfg: SyntheticConfig) -> list[ClipRecord]:
    """Deterministically generate labeled clips with inline feature matrices."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    class_patterns, podcast_perp, podcast_par = _patterns(cfg, rng)
    dim = cfg.n_mfcc * cfg.frames

    records = []
    counts = cfg.class_counts()
    shape = (cfg.n_mfcc, cfg.frames)
    for cls in StutterClass:
        for i in range(counts[cls]):
            podcast = i % cfg.n_podcasts
            signal = (
                cfg.alpha * class_patterns[cls]
                + cfg.beta
                * ((1.0 - cfg.rho) * podcast_perp[podcast] + cfg.rho * podcast_par[podcast])
                + cfg.sigma * rng.normal(size=dim)
            )
            records.append(
                ClipRecord(
                    clip_id=f"syn_{CLASS_NAMES[cls].lower()}_{i:04d}",
                    podcast_id=f"pod{podcast}",
                    label=cls,
                    features=signal.reshape(shape).astype(np.float32),
                )
            )
    return records


def synthetic_patterns(cfg: SyntheticConfig):
    """Expose the generator's class/podcast patterns (for orthogonality checks)."""
    return _patterns(cfg, np.random.default_rng(cfg.seed))
