"""Per-iteration training record and its CSV layout."""
from __future__ import annotations

from dataclasses import astuple, dataclass

COLUMNS = (
    "iter", "steps", "ret_mean", "ret_min", "ret_max", "bonus_mean", "sigma",
    "epochs_run", "kl", "loss_pi", "loss_v", "loss_intrinsic", "seconds",
)


@dataclass
class MetricsRow:
    iteration: int
    env_steps: int
    ret_mean: float
    ret_min: float
    ret_max: float
    bonus_mean: float
    sigma: float
    epochs_run: int
    kl: float
    loss_pi: float
    loss_v: float
    loss_intrinsic: float
    seconds: float

    def values(self) -> tuple:
        return astuple(self)

    def csv_fields(self) -> list[str]:
        # repr round-trips floats exactly
        return [repr(v) if isinstance(v, float) else str(v) for v in self.values()]

    @classmethod
    def from_csv_fields(cls, fields) -> "MetricsRow":
        ints = {0, 1, 7}
        return cls(*(int(f) if i in ints else float(f) for i, f in enumerate(fields)))


@dataclass
class EpisodeRecord:
    episode: int
    end_step: int  # cumulative env steps when the episode finished
    length: int
    ret: float
    terminated: bool


EPISODE_COLUMNS = ("episode", "end_step", "length", "return", "terminated")
