from pathlib import Path
from typing import Tuple

from pydantic_settings import BaseSettings, SettingsConfigDict

from occ4d.grid import GridSpec


class Settings(BaseSettings):
    # grid
    X_RANGE: Tuple[float, float] = (-51.2, 51.2)
    Y_RANGE: Tuple[float, float] = (-51.2, 51.2)
    Z_RANGE: Tuple[float, float] = (-5.0, 3.0)
    RESOLUTION: float = 0.2
    N_PAST: int = 2
    N_FUTURE: int = 4

    # dataset construction
    VISIBILITY_THRESHOLD: float = 0.40

    # evaluation / instance association
    VPQ_IOU_THRESHOLD: float = 0.2
    NMS_RADIUS: float = 2.0
    MIN_PROB: float = 0.5
    ASSOC_RADIUS: float = 2.0

    # BEV lifting baseline
    BEV_Z_GROUND: float = -2.0
    BEV_HEIGHT: float = 2.0

    WORKERS: int = 1
    LOG_LEVEL: str = "INFO"
    FILE_WRITE_LOG: str = "logs/file_writes.log"

    model_config = SettingsConfigDict(env_prefix="OCC4D_", env_file=None, extra="ignore")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls,
        init_settings,
        env_settings,
        dotenv_settings,
        file_secret_settings,
    ):
        # Flags and settings files only; the process environment is never read.
        return init_settings, dotenv_settings

    def grid_spec(self) -> GridSpec:
        return GridSpec(
            x_min=self.X_RANGE[0],
            x_max=self.X_RANGE[1],
            y_min=self.Y_RANGE[0],
            y_max=self.Y_RANGE[1],
            z_min=self.Z_RANGE[0],
            z_max=self.Z_RANGE[1],
            resolution=self.RESOLUTION,
            n_past=self.N_PAST,
            n_future=self.N_FUTURE,
        )


def load_settings(env_file: str | Path | None = None, **overrides) -> Settings:
    """Build settings from an optional dotenv-format file plus explicit overrides."""
    return Settings(_env_file=env_file, **overrides)
