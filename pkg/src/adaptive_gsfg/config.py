"""Configuration models for learning and simulation."""

from dataclasses import dataclass
from enum import Enum

DEFAULT_Y_FLOOR = 1e-6
DEFAULT_BLOWUP_THRESHOLD = 1e12
DET_TOL_PER_BRANCH = 1e-9

DEFAULT_DT = 1e-3
DEFAULT_DURATION = 200.0
DEFAULT_WINDOW = 20.0
DEFAULT_ACCEPTANCE_RATIO = 0.10


class LearningMode(str, Enum):
    """How downstream weight rates feed back into upstream ones."""

    TRUNCATED = "truncated"
    FULL_SOLVE = "full"


class IntegrationScheme(str, Enum):
    """Fixed-step scheme used for node states."""

    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class LearningConfig:
    """
    Weight adaptation configuration.

    Attributes:
        gamma: Adaptation rate (non-negative; 0 freezes the weights)
        mode: Truncated recursion stopping at output nodes, or full linear solve
        y_floor: Magnitude floor applied to node outputs used as denominators
        det_tol: Singularity tolerance for |det(I - Phi)| (None: 1e-9 per branch)
        blowup_threshold: Magnitude above which signals and weights count as diverged
    """

    gamma: float = 1.0
    mode: LearningMode = LearningMode.TRUNCATED
    y_floor: float = DEFAULT_Y_FLOOR
    det_tol: float | None = None
    blowup_threshold: float = DEFAULT_BLOWUP_THRESHOLD

    def effective_det_tol(self, branch_count: int) -> float:
        """Resolve the singularity tolerance for a system with ``branch_count`` rows."""
        if self.det_tol is not None:
            return self.det_tol
        return DET_TOL_PER_BRANCH * max(branch_count, 1)


@dataclass(frozen=True)
class SimulationConfig:
    """
    Fixed-step simulation configuration.

    Attributes:
        duration: Simulated horizon in seconds
        dt: Step size in seconds
        scheme: Integration scheme for node and reference-model states
        window: Length in seconds of the first/last metrics windows
        acceptance_ratio: Final-window rms over first-window rms regarded as converged
    """

    duration: float = DEFAULT_DURATION
    dt: float = DEFAULT_DT
    scheme: IntegrationScheme = IntegrationScheme.RK4
    window: float = DEFAULT_WINDOW
    acceptance_ratio: float = DEFAULT_ACCEPTANCE_RATIO

    @property
    def steps(self) -> int:
        """Number of recorded samples ``t_k = k * dt``."""
        return max(int(round(self.duration / self.dt)), 1)
