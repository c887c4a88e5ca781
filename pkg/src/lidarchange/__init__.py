"""Online LiDAR change detection and long-term map maintenance.

Core flow: build a prior map from one session, synthesize pseudo-change
training pairs from that same session, train a dual-head classifier
(change class + cross-visibility confidence), then per incoming scan detect
changes, gate them by confidence, and fuse them into a per-point log-odds
map state whose negative changes are eventually removed.
"""

from .confidence import ConfidenceParams, confidence_of, cross_confidence
from .detect import (DualHeadModel, detect_occupancy, detect_visibility,
                     extract_features, infer, init_model, load_model, loss_cls,
                     loss_conf, save_model, train)
from .errors import LidarChangeError
from .evaluation import (MapScores, SweepConfig, map_scores, scan_iou, sweep,
                         write_report)
from .geometry import (NEGATIVE, POSITIVE, STATIC, PerturbationSpec, Pose,
                       PointCloud, nearest_neighbor, perturb_pose, quantize,
                       transform)
from .io import Session, load_ply, load_session, save_ply, save_session
from .mapping import GroundModel, build_static_map, segment_ground, voxel_dedup
from .mapupdate import (GateThresholds, LogOddsMap, extract_scan_changes,
                        finalize_map, update_map)
from .augment import ObjectDatabase, extract_objects, generate_pair
from .config import PipelineConfig, parse_config
from .pipeline import evaluate_pair, evaluate_sessions, prepare_scene
from .synthscene import (SensorSpec, generate_sessions, inject_hd_clutter,
                         occlusion_world, random_world)

__version__ = "0.1.0"

__all__ = [
    "ConfidenceParams", "confidence_of", "cross_confidence",
    "DualHeadModel", "detect_occupancy", "detect_visibility",
    "extract_features", "infer", "init_model", "load_model", "loss_cls",
    "loss_conf", "save_model", "train",
    "LidarChangeError",
    "MapScores", "SweepConfig", "map_scores", "scan_iou", "sweep",
    "write_report",
    "NEGATIVE", "POSITIVE", "STATIC", "PerturbationSpec", "Pose",
    "PointCloud", "nearest_neighbor", "perturb_pose", "quantize", "transform",
    "Session", "load_ply", "load_session", "save_ply", "save_session",
    "GroundModel", "build_static_map", "segment_ground", "voxel_dedup",
    "GateThresholds", "LogOddsMap", "extract_scan_changes", "finalize_map",
    "update_map",
    "ObjectDatabase", "extract_objects", "generate_pair",
    "PipelineConfig", "parse_config",
    "evaluate_pair", "evaluate_sessions", "prepare_scene",
    "SensorSpec", "generate_sessions", "inject_hd_clutter",
    "occlusion_world", "random_world",
]
