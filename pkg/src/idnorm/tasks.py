"""Task descriptors: AU detection, AU intensity estimation, emotion recognition."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError

AU_DETECT = "au-detect"
AU_INTENSITY = "au-intensity"
FER = "fer"
TASK_KINDS = (AU_DETECT, AU_INTENSITY, FER)
DEFAULT_LABELS = {AU_DETECT: 12, AU_INTENSITY: 5, FER: 7}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_labels: int = 0
    intensity_scale_max: int = 5

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.n_labels == 0:
            object.__setattr__(self, "n_labels", DEFAULT_LABELS[self.kind])
        if self.n_labels < 1:
            raise ConfigurationError("n_labels must be >= 1")

    @classmethod
    def from_name(cls, name):
        return cls(kind=name.replace("_", "-").lower())

    @property
    def label_names(self):
        if self.kind == FER:
            return list(EMOTIONS[: self.n_labels]) if self.n_labels <= len(EMOTIONS) else \
                [f"class_{j}" for j in range(self.n_labels)]
        return [f"AU_{j}" for j in range(self.n_labels)]


EMOTIONS = ("neutral", "happy", "sad", "surprise", "fear", "disgust", "anger")
