from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from pemma.exceptions import DataError

BACKGROUND, TUMOR, LYMPH = 0, 1, 2
CLASS_NAMES = {TUMOR: "tumor", LYMPH: "lymph"}


@dataclass
class Volume:
    grid: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "ct"

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise DataError(f"volume grid must be 3-D, got shape {self.grid.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape


@dataclass
class SurvivalRecord:
    """Observed follow-up in months; ``event`` is False for censored subjects."""

    time: float
    event: bool
    bin: int | None = None


@dataclass
class Case:
    ct: Volume
    mask: np.ndarray
    pet: Volume | None = None
    survival: SurvivalRecord | None = None
    ehr: dict[str, Any] | None = None
    center: str = ""
    case_id: str = ""
    processed: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.shape != self.ct.shape:
            raise DataError(f"mask shape {self.mask.shape} != CT shape {self.ct.shape}")
        if self.pet is not None:
            if self.pet.shape != self.ct.shape:
                raise DataError("CT and PET grids must share shape")
            if not np.allclose(self.pet.spacing, self.ct.spacing):
                raise DataError("CT and PET grids must share spacing")

    @property
    def has_pet(self) -> bool:
        return self.pet is not None

    @property
    def side(self) -> int:
        return self.ct.shape[0]

    def replace(self, **changes) -> "Case":
        return replace(self, **changes)
