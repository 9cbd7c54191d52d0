from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class TPSTransform(BaseModel):
    """
    Fitted thin-plate spline mapping control_src onto control_dst.

    f(p) = affine @ [1, x, y] + sum_i radial_weights[i] * U(|p - control_src[i]|)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    control_src: np.ndarray  # (N, 2) pixels, (x, y)
    control_dst: np.ndarray  # (N, 2)
    affine: np.ndarray  # (2, 3): rows are x' and y', columns are [1, x, y]
    radial_weights: np.ndarray  # (N, 2)
    regularization: float = Field(0.0, ge=0)

    @property
    def n_points(self) -> int:
        return int(self.control_src.shape[0])


class TPSDiagnostics(BaseModel):
    n_control_points: int = 0
    regularization: float = 0.0
    bending_energy: Optional[float] = None
    max_control_residual: Optional[float] = None
    skipped_reason: Optional[str] = None
