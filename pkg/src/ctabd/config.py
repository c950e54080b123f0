"""Pipeline configuration: JSON document, strict validation, digest.

The default document holds the published hyperparameters where they exist
(1.5 mm resampling target, 0.6/0.4 loss weights, 100-voxel component
threshold, Adam betas, dropout 0.2/0.3, the per-head schedules) and
desk-scale structure sizes everywhere else. Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .grid import OrganId, Spacing
from .phantom import PhantomSpec
from .preprocess import PatchSpec
from .rpn import MeasureNetConfig
from .segnet import SegNetConfig

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "out",
    "phantom": {
        "train_count": 40,
        "eval_count": 10,
        "dims": [64, 64, 64],
        "spacing_mm": [3.0, 3.0, 3.0],
        "noise_sigma": 5.0,
    },
    "preprocess": {
        "target_mm": 1.5,
    },
    "segnet": {
        "depth": 3,
        "base_channels": 8,
        "max_channels": 256,
        "deep_supervision": True,
        "patch_dims": [64, 64, 32],
        "patch_stride": [32, 32, 16],
        "batch_size": 2,
        "w_dice": 0.6,
        "w_ce": 0.4,
        "lr0": 0.01,
        "lr_min": 0.0,
        "total_steps": 300,
        "steps_per_epoch": 25,
        "val_fraction": 0.2,
    },
    "postproc": {
        "min_voxels": 100,
        "connectivity": 26,
    },
    "measure": {
        "patch_dims": [64, 64, 32],
        "channels": [16, 32, 64, 128],
        "anchor_scales": [12.0, 18.0, 26.0],
        "roi_grid": [4, 4, 2],
        "hidden": 128,
        "dropout_liver": 0.2,
        "dropout_prostate": 0.3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "iou_positive": 0.5,
        "iou_negative": 0.2,
        "nms_iou": 0.5,
        "score_threshold": 0.5,
        "infer_stride": [64, 64, 16],
        "total_steps": 400,
        "steps_per_epoch": 50,
        "patches_per_organ": 2,
    },
    "eval": {
        "scales": {
            "volume_cc": 1000.0,
            "lobe_right_cc": 1000.0,
            "lobe_left_cc": 1000.0,
            "length_mm": 200.0,
            "cortical_thickness_mm": 200.0,
            "ap_diameter_mm": 200.0,
            "surface_area_cm2": 500.0,
        },
    },
}


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path + key + ".")
        else:
            expected = type(defaults[key])
            if expected in (int, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
                out[key] = expected(value)
            elif isinstance(value, expected) and not (expected is not bool and isinstance(value, bool)):
                out[key] = copy.deepcopy(value)
            else:
                raise ConfigError(
                    f"config key {path + key!r} expects {expected.__name__}, got {type(value).__name__}"
                )
    return out


def resolve_config(user_doc: dict | None = None, *, seed=None, out_dir=None) -> dict:
    """Apply defaults, validate, and apply CLI overrides."""
    cfg = _merge(DEFAULTS, user_doc or {})
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return cfg


def load_config(path=None, *, seed=None, out_dir=None) -> dict:
    doc = None
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return resolve_config(doc, seed=seed, out_dir=out_dir)


def config_digest(cfg: dict) -> str:
    """Stable digest over every hyperparameter (out_dir excluded)."""
    doc = {k: v for k, v in cfg.items() if k != "out_dir"}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def phantom_spec_from(cfg: dict) -> PhantomSpec:
    p = cfg["phantom"]
    return PhantomSpec(
        dims=tuple(p["dims"]),
        spacing=Spacing(*p["spacing_mm"]),
        noise_sigma=p["noise_sigma"],
    )


def segnet_config_from(cfg: dict) -> SegNetConfig:
    s = cfg["segnet"]
    return SegNetConfig(
        depth=s["depth"],
        base_channels=s["base_channels"],
        max_channels=s["max_channels"],
        deep_supervision=s["deep_supervision"],
        patch=PatchSpec(tuple(s["patch_dims"]), tuple(s["patch_stride"])),
        batch_size=s["batch_size"],
        w_dice=s["w_dice"],
        w_ce=s["w_ce"],
        lr0=s["lr0"],
        lr_min=s["lr_min"],
        total_steps=s["total_steps"],
        steps_per_epoch=s["steps_per_epoch"],
        val_fraction=s["val_fraction"],
    )


def measure_config_from(cfg: dict) -> MeasureNetConfig:
    from .diff import AdamConfig

    m = cfg["measure"]
    return MeasureNetConfig(
        patch=tuple(m["patch_dims"]),
        channels=tuple(m["channels"]),
        anchor_scales=tuple(m["anchor_scales"]),
        roi_grid=tuple(m["roi_grid"]),
        hidden=m["hidden"],
        dropout_rates={
            OrganId.LIVER: m["dropout_liver"],
            OrganId.PROSTATE: m["dropout_prostate"],
        },
        iou_positive=m["iou_positive"],
        iou_negative=m["iou_negative"],
        nms_iou=m["nms_iou"],
        score_threshold=m["score_threshold"],
        infer_stride=tuple(m["infer_stride"]),
        total_steps=m["total_steps"],
        steps_per_epoch=m["steps_per_epoch"],
        adam=AdamConfig(beta1=m["adam_beta1"], beta2=m["adam_beta2"]),
    )
