"""Joint registration and segmentation on synthetic 2-D scenes.

Arrays are float64 numpy arrays shaped (H, W) or (C, H, W). Configs are
plain dicts; missing keys take their defaults.
"""

import json

from . import _core
from ._core import __version__, dice, gradient_suite, local_cc, smoothness, warp_image

__all__ = [
    "__version__",
    "default_dataset_config",
    "default_train_config",
    "dice",
    "evaluate",
    "generate_sample",
    "gradient_suite",
    "local_cc",
    "make_dataset",
    "smoothness",
    "train",
    "warp_image",
]


def default_train_config():
    return json.loads(_core.default_train_config())


def default_dataset_config():
    return json.loads(_core.default_dataset_config())


def _merged(defaults, overrides):
    for key, value in (overrides or {}).items():
        if key not in defaults:
            raise KeyError(f"unknown config key {key!r}")
        if isinstance(value, dict) and isinstance(defaults[key], dict):
            _merged(defaults[key], value)
        else:
            defaults[key] = value
    return defaults


def generate_sample(seed, config=None):
    """Returns (image [1,H,W], one-hot label [C,H,W])."""
    cfg = _merged(default_dataset_config(), config)
    return _core.generate_sample(seed, json.dumps(cfg))


def make_dataset(out_dir, config=None, force=False):
    cfg = _merged(default_dataset_config(), config)
    return json.loads(_core.make_dataset(json.dumps(cfg), str(out_dir), force))


def train(data_dir, out_dir, config=None):
    cfg = _merged(default_train_config(), config)
    return json.loads(_core.train(json.dumps(cfg), str(data_dir), str(out_dir)))


def evaluate(data_dir, checkpoint):
    return json.loads(_core.evaluate(str(data_dir), str(checkpoint)))
