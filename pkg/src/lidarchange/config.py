"""Pipeline configuration: a flat ``key = value`` text format.

Lines are ``key = value`` with ``#`` comments and blank lines allowed.  Keys
map one-to-one onto :class:`PipelineConfig` fields; unknown keys and
unparseable values are rejected with the offending line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    """All tunables of the detection / map-maintenance pipelines."""

    # quantization and cross-visibility confidence
    voxel_size: float = 0.1
    conf_lambda: float = 10.0
    tau_vox: float = 0.1
    tau_ocl: float = 3.0
    # gating and map update
    tau_scan: float = 0.5
    tau_map: float = 0.7
    gate_source: str = "predicted"      # "predicted" | "oracle"
    conf_smoothing_radius: float = 0.3
    decision_threshold: float = 0.5
    logodds_clamp: float = 10.0
    # training schedule
    alpha: float = 0.01
    epochs: int = 50
    batch_pairs: int = 2
    lr: float = 1e-3
    val_split: float = 0.1
    class_weights: bool = True
    class_rows_per_frame: int = 3000
    conf_pairs_per_frame: int = 1200
    # augmentation
    n_pc: int = 2
    n_nc: int = 3
    pairs: int = 50
    eval_pairs: int = 10
    # mapping
    dedup_map: bool = True
    hd_removal: bool = True
    ground_threshold: float = 0.1
    # classical baselines
    range_margin: float = 0.1
    angular_res_deg: float = 0.5
    # synthetic sensor + trajectory
    sensor_channels: int = 16
    sensor_vfov_deg: float = 30.0
    sensor_hres_deg: float = 0.5
    sensor_range: float = 30.0
    sensor_sigma: float = 0.01
    traj_frames: int = 6
    traj_radius: float = 3.0
    traj_height: float = 1.2
    # synthetic world
    world_size: float = 12.0
    world_statics: int = 8
    world_occluders: int = 2
    world_changes: int = 0
    # registration-noise injection
    perturb_level: float = 0.0
    perturb_sigma_t: float = 0.05
    perturb_sigma_rp_deg: float = 1.0
    perturb_sigma_yaw_deg: float = 2.0
    bound_t: float = 0.05
    bound_rp_deg: float = 1.0
    bound_yaw_deg: float = 2.0
    # evaluation / reporting
    micro_iou: bool = False
    report_timing: bool = True
    # execution
    seed: int = 0
    threads: int = 0                    # 0 = auto (min(8, cpu count))


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _parse_value(field, raw: str, line: int):
    if field.type == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"line {line}: boolean expected for {field.name!r}, got {raw!r}", line)
    try:
        if field.type == "int":
            return int(raw)
        if field.type == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {line}: bad {field.type} for {field.name!r}: {raw!r}", line)
    return raw


def parse_config(path) -> PipelineConfig:
    """Read a config file; unknown keys or bad values raise ConfigError."""
    cfg = PipelineConfig()
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"line {ln}: expected 'key = value', got {raw.strip()!r}", ln)
            key, value = (part.strip() for part in text.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"line {ln}: unknown key {key!r}", ln)
            if not value:
                raise ConfigError(f"line {ln}: empty value for {key!r}", ln)
            setattr(cfg, key, _parse_value(_FIELDS[key], value, ln))
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
