"""Degeneration-aware LiDAR-inertial odometry with gated relative-pose fusion."""

from .config import CampaignSpec, RunConfig
from .io import Dataset, generate_dataset, read_dataset, write_dataset
from .pipeline import run_campaign, run_crlb_cert, run_filter

__version__ = "0.1.0"

__all__ = [
    "CampaignSpec", "Dataset", "RunConfig", "generate_dataset", "read_dataset", "run_campaign",
    "run_crlb_cert", "run_filter", "write_dataset",
]
