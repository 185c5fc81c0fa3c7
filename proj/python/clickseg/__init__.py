"""Interactive multi-class segmentation refinement."""

import json

from ._core import (
    Checkpoint,
    Error,
    encode_clicks,
    generate_synthetic,
    load_dataset,
    mean_iou,
)
from . import _core

__all__ = [
    "Checkpoint",
    "Error",
    "encode_clicks",
    "generate_synthetic",
    "load_dataset",
    "mean_iou",
    "refine",
    "run_suite",
]


def refine(checkpoint, image, ground_truth, clicker="independent", budget=20, seed=0):
    """Automatic refinement loop; returns the trajectory as a dict."""
    return json.loads(checkpoint.refine(image, ground_truth, clicker, budget, seed))


def run_suite(suite, out=None, workers=None):
    """Runs an experiment suite file; returns a summary dict."""
    return json.loads(_core.run_suite(str(suite), out, workers))
