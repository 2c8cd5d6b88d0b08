"""Named experiment presets: architecture + training recipe as plain dicts.

The full-scale recipes (modelnet-like, s3dis-like, cdformer-s/b/l, the
table4/table5/table7 ablation rows) record the reference configurations this
architecture ships with; the toy-* presets are desk-scale runs on the
synthetic datasets. A preset is a pair of dicts merged under config-file
values and command-line flags, so any field can be overridden. num_classes
always follows the dataset manifest at train time.
"""

from __future__ import annotations

import copy

from .errors import ConfigError

_S3DIS_MODEL = {
    "blocks": [2, 2, 6, 2],
    "channels": [48, 96, 192, 384],
    "heads": [3, 6, 12, 24],
    "k_neighbors": 16,
    "scale_s": 8,
    "task": "segmentation",
    "num_classes": 13,
}
_S3DIS_TRAIN = {
    "epochs": 100,
    "batch_size": 8,
    "lr": 0.01,
    "schedule": "step",
    "milestones": [60, 80],
    "weight_decay": 0.01,
    "label_smoothing": 0.1,
    "augment": {
        "jitter_sigma": 0.005,
        "jitter_clip": 0.02,
        "scale_lo": 0.9,
        "scale_hi": 1.1,
        "rotate_axis": "z",
        "rotate_max": 3.141592653589793,
        "shift_range": 0.1,
        "color_drop": 0.2,
    },
}

_TOY_AUGMENT = {
    "scale_lo": 0.95,
    "scale_hi": 1.05,
    "shift_range": 0.05,
    "jitter_sigma": 0.005,
    "jitter_clip": 0.02,
}

PRESETS: dict = {
    "modelnet-like": {
        "model": {
            "blocks": [1, 1, 3, 1],
            "channels": [64, 128, 256, 512],
            "heads": [4, 8, 16, 32],
            "k_neighbors": 16,
            "scale_s": 4,
            "task": "classification",
            "num_classes": 40,
        },
        "train": {
            "epochs": 600,
            "batch_size": 32,
            "lr": 0.001,
            "schedule": "cosine",
            "weight_decay": 0.05,
            "label_smoothing": 0.1,
            "resample_points": 1024,
            "augment": {"scale_lo": 0.9, "scale_hi": 1.1, "shift_range": 0.1},
        },
    },
    "s3dis-like": {"model": dict(_S3DIS_MODEL), "train": dict(_S3DIS_TRAIN)},
    "cdformer-s": {
        "model": {**_S3DIS_MODEL, "channels": [16, 32, 64, 128], "heads": [1, 2, 4, 8]},
        "train": dict(_S3DIS_TRAIN),
    },
    "cdformer-b": {
        "model": {**_S3DIS_MODEL, "channels": [32, 64, 128, 256], "heads": [2, 4, 8, 16]},
        "train": dict(_S3DIS_TRAIN),
    },
    "cdformer-l": {"model": dict(_S3DIS_MODEL), "train": dict(_S3DIS_TRAIN)},
    # collect/distribute ablation rows
    "table4-i": {"model": {**_S3DIS_MODEL, "collect": False, "distribute": False}, "train": dict(_S3DIS_TRAIN)},
    "table4-ii": {"model": {**_S3DIS_MODEL, "collect": True, "distribute": False}, "train": dict(_S3DIS_TRAIN)},
    "table4-iii": {"model": {**_S3DIS_MODEL, "collect": False, "distribute": True}, "train": dict(_S3DIS_TRAIN)},
    "table4-iv": {"model": {**_S3DIS_MODEL, "collect": True, "distribute": True}, "train": dict(_S3DIS_TRAIN)},
    # position-encoding ablation rows
    "table5-i": {"model": {**_S3DIS_MODEL, "cape_mode": "none"}, "train": dict(_S3DIS_TRAIN)},
    "table5-ii": {"model": {**_S3DIS_MODEL, "cape_mode": "bias"}, "train": dict(_S3DIS_TRAIN)},
    "table5-iii": {"model": {**_S3DIS_MODEL, "cape_mode": "context"}, "train": dict(_S3DIS_TRAIN)},
    "table5-iv": {"model": {**_S3DIS_MODEL, "cape_mode": "plain"}, "train": dict(_S3DIS_TRAIN)},
    # neighbor-count ablation rows
    "table7-k4": {"model": {**_S3DIS_MODEL, "k_neighbors": 4}, "train": dict(_S3DIS_TRAIN)},
    "table7-k8": {"model": {**_S3DIS_MODEL, "k_neighbors": 8}, "train": dict(_S3DIS_TRAIN)},
    "table7-k16": {"model": {**_S3DIS_MODEL, "k_neighbors": 16}, "train": dict(_S3DIS_TRAIN)},
    # desk-scale toys (synthetic data)
    "toy-cls": {
        "model": {
            "blocks": [1, 1, 1, 1],
            "channels": [16, 32, 64, 128],
            "heads": [1, 2, 4, 8],
            "k_neighbors": 8,
            "scale_s": 3,
            "task": "classification",
            "num_classes": 8,
            "cape_hidden_ratio": 1,
        },
        "train": {
            "epochs": 200,
            "batch_size": 16,
            "lr": 0.001,
            "schedule": "cosine",
            "weight_decay": 0.05,
            "label_smoothing": 0.1,
            "augment": dict(_TOY_AUGMENT),
        },
    },
    "toy-seg": {
        "model": {
            "blocks": [1, 1],
            "channels": [16, 32],
            "heads": [2, 4],
            "k_neighbors": 8,
            "scale_s": 3,
            "task": "segmentation",
            "num_classes": 4,
            "cape_hidden_ratio": 1,
        },
        "train": {
            "epochs": 100,
            "batch_size": 4,
            "lr": 0.0015,
            "schedule": "cosine",
            "weight_decay": 0.05,
            "label_smoothing": 0.1,
            "augment": dict(_TOY_AUGMENT),
        },
    },
}


def get_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name])
