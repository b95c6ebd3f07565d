"""Event-clip extraction from per-frame room-prompt similarities.

Pipeline: softmax labeling with indoor filtering, merging of equal-label runs
into segments with a minimum-entropy representative frame, and emission of a
clip between every pair of successive representatives whose labels differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FeatureStore, row_entropies
from .errors import FormatError, InvalidConfig, InvalidSegments, InvalidTemperature

DEFAULT_TAU = 0.07
DEFAULT_THETA_INDOOR = 0.5
DEFAULT_MIN_SEG_LEN = 2
DEFAULT_FPS = 0.5


@dataclass(frozen=True)
class FrameLabeling:
    labels: np.ndarray
    entropies: np.ndarray
    kept: np.ndarray
    probs: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (len(self.labels) == len(self.entropies) == len(self.kept)):
            raise ValueError("labeling vectors must share one length")

    @property
    def frames(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> "FrameLabeling":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.float64), np.zeros(0, bool))


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    end: int
    rep_frame: int


@dataclass(frozen=True)
class EventClip:
    start_frame: int
    end_frame: int
    src_label: int
    dst_label: int
    duration_s: float


@dataclass(frozen=True)
class SegmenterConfig:
    label_names: tuple[str, ...] = ()
    tau: float = DEFAULT_TAU
    theta_indoor: float = DEFAULT_THETA_INDOOR
    # None selects every label
    indoor_labels: tuple[int | str, ...] | None = None
    min_seg_len: int = DEFAULT_MIN_SEG_LEN
    fps: float = DEFAULT_FPS
    labels_path: str | None = None

    def resolve_indoor(self, k: int) -> list[int]:
        if self.indoor_labels is None:
            return list(range(k))
        out = []
        for lab in self.indoor_labels:
            if isinstance(lab, str) and not lab.isdigit():
                if lab not in self.label_names:
                    raise InvalidConfig(f"unknown indoor label {lab!r}")
                out.append(self.label_names.index(lab))
            else:
                out.append(int(lab))
        return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def label_frames(sims, tau: float = DEFAULT_TAU, indoor_labels: Sequence[int] | None = None,
                 theta_indoor: float = DEFAULT_THETA_INDOOR) -> FrameLabeling:
    """Label every frame with its most probable room prompt.

    ``kept`` marks frames whose total probability on ``indoor_labels`` reaches
    ``theta_indoor``. Labels and entropies come from the full softmax row.
    """
    if not tau > 0:
        raise InvalidTemperature(f"tau must be positive, got {tau}")
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2:
        raise FormatError(f"similarity matrix must be 2-D, got shape {sims.shape}")
    k = sims.shape[1]
    if indoor_labels is None:
        indoor_labels = range(k)
    indoor = sorted(set(int(i) for i in indoor_labels))
    if not indoor:
        raise InvalidConfig("indoor label set is empty")
    if indoor[0] < 0 or indoor[-1] >= k:
        raise InvalidConfig(f"indoor label index out of range for {k} labels")
    if not 0.0 <= theta_indoor <= 1.0:
        raise InvalidConfig(f"theta_indoor must lie in [0, 1], got {theta_indoor}")
    if sims.shape[0] == 0:
        return FrameLabeling.empty()
    if not np.isfinite(sims).all():
        raise FormatError("similarity matrix has non-finite entries")

    probs = softmax_rows(sims / tau)
    # np.argmax returns the first maximum, i.e. lowest label index on ties
    labels = probs.argmax(axis=1).astype(np.int64)
    entropies = row_entropies(probs)
    kept = probs[:, indoor].sum(axis=1) >= theta_indoor
    return FrameLabeling(labels, entropies, kept, probs)


def select_representatives(labeling: FrameLabeling, min_seg_len: int = DEFAULT_MIN_SEG_LEN) -> list[Segment]:
    """Merge equal-label runs of kept frames into segments.

    A run shorter than ``min_seg_len`` is absorbed into the segment before
    it, and a run whose label matches the preceding segment extends it. A
    leading segment still shorter than ``min_seg_len`` after absorption is
    dropped. The representative frame is the
    minimum-entropy frame of the segment (earliest on ties).
    """
    if min_seg_len < 1:
        raise InvalidConfig("min_seg_len must be a positive integer")
    frames = np.flatnonzero(labeling.kept)
    if frames.size == 0:
        return []

    runs: list[tuple[int, list[int]]] = []
    for t in frames:
        lab = int(labeling.labels[t])
        if runs and runs[-1][0] == lab:
            runs[-1][1].append(int(t))
        else:
            runs.append((lab, [int(t)]))

    merged: list[tuple[int, list[int]]] = []
    for lab, members in runs:
        if merged and (len(members) < min_seg_len or merged[-1][0] == lab):
            merged[-1][1].extend(members)
        else:
            merged.append((lab, list(members)))
    # the leading segment has nothing to be absorbed into
    if merged and len(merged[0][1]) < min_seg_len:
        merged.pop(0)

    segments = []
    for lab, members in merged:
        rep = members[int(np.argmin(labeling.entropies[members]))]
        segments.append(Segment(label=lab, start=members[0], end=members[-1], rep_frame=rep))
    return segments


def extract_event_clips(segments: Sequence[Segment], fps: float = DEFAULT_FPS) -> list[EventClip]:
    if not fps > 0:
        raise InvalidConfig(f"fps must be positive, got {fps}")
    for a, b in zip(segments, segments[1:]):
        if not (a.start <= a.end < b.start <= b.end and a.rep_frame < b.rep_frame):
            raise InvalidSegments(f"segments out of order: {a} then {b}")
    clips = []
    for a, b in zip(segments, segments[1:]):
        if a.label == b.label:
            continue
        clips.append(EventClip(
            start_frame=a.rep_frame,
            end_frame=b.rep_frame,
            src_label=a.label,
            dst_label=b.label,
            duration_s=(b.rep_frame - a.rep_frame) / fps,
        ))
    return clips


def read_label_names(path: str | Path) -> tuple[str, ...]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read label names {path}: {exc}") from exc
    return tuple(line.strip() for line in lines if line.strip())


def labels_sidecar(sims_file: str | Path) -> Path:
    return Path(str(sims_file) + ".labels")


def run_pipeline(sims_file: str | Path, config: SegmenterConfig) -> tuple[list[EventClip], FrameLabeling]:
    store = FeatureStore.load(sims_file)
    names = config.label_names
    if not names:
        names = read_label_names(config.labels_path or labels_sidecar(sims_file))
    if store.dim != len(names):
        raise FormatError(f"{sims_file} has {store.dim} columns but {len(names)} label names")
    cfg = config if config.label_names else replace(config, label_names=names)
    labeling = label_frames(store.data, cfg.tau, cfg.resolve_indoor(len(names)), cfg.theta_indoor)
    segments = select_representatives(labeling, cfg.min_seg_len)
    return extract_event_clips(segments, cfg.fps), labeling

