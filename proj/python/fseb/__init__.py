"""Python front end for the FS-EB toolkit."""

import json
from importlib import resources
from pathlib import Path

from ._fseb import (
    RESULTS_SCHEMA_VERSION,
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
    auroc_from_entropy,
    config_hash,
    context_kernel,
    ece,
    gaussian_blobs,
    mahalanobis_sq,
    nll_and_accuracy,
    predict_proba,
    predictive_entropy,
    selective_auc,
    two_moons,
    version,
)
from . import _fseb

__all__ = [
    "RESULTS_SCHEMA_VERSION", "ConfigError", "DataError", "NumericalError", "ShapeError",
    "auroc_from_entropy", "config_hash", "context_kernel", "ece", "gaussian_blobs", "load_config",
    "mahalanobis_sq", "nll_and_accuracy", "predict_proba", "predictive_entropy", "results_schema",
    "run", "selective_auc", "two_moons", "version",
]


def load_config(path):
    """Resolved config as a dict."""
    return json.loads(_fseb.load_config_json(str(path)))


def run(config_path, output_dir=None, workers=None):
    """Run every seed of a config; returns (results dict, results.json path)."""
    text, path = _fseb.run(str(config_path), None if output_dir is None else str(output_dir), workers)
    return json.loads(text), Path(path)


def results_schema():
    """The JSON schema that results files follow."""
    return json.loads(resources.files(__package__).joinpath("results.schema.json").read_text())
