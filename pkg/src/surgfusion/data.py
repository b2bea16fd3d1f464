"""Record types shared across training, evaluation and I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("rgb", "flow", "mask")


@dataclass
class FeatureSequence:
    """Per-segment features ``[T, d]`` of one modality of one video."""

    data: np.ndarray
    modality: str
    video_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"feature sequence must be [T, d], got {self.data.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass
class VideoRecord:
    video_id: str
    user_id: str
    supertrial_id: str
    task: str
    raw_label: float
    features: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    paths: dict[str, str] = field(default_factory=dict, repr=False)

    def sequence(self, modality: str) -> FeatureSequence:
        return FeatureSequence(self.features[modality], modality, self.video_id)


def fit_length(x: np.ndarray, length: int) -> np.ndarray:
    """Crop to the first ``length`` segments or zero-pad at the end."""
    t = x.shape[0]
    if t >= length:
        return x[:length]
    return np.concatenate([x, np.zeros((length - t,) + x.shape[1:])], axis=0)


def stack_modality(records, modality: str, length: int | None = None) -> np.ndarray:
    """Batch ``[B, T, d]`` of one modality; ``length`` crops/pads every video."""
    seqs = [np.asarray(r.features[modality], dtype=np.float64) for r in records]
    if length is None:
        length = max(s.shape[0] for s in seqs)
    return np.stack([fit_length(s, length) for s in seqs])
