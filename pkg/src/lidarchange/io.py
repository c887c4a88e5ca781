"""File formats: PLY point clouds, session manifests, binary sidecars.

PLY files carry float32 x/y/z plus optional uchar label, uchar visibility and
float32 confidence properties, in ASCII or binary little-endian form.  A
session manifest is a plain-text file with one scan per line: the PLY path,
12 pose floats (row-major [R | t]), a timestamp, and an optional mask file of
0/1 bytes marking high-dynamic points.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .geometry import PointCloud, Pose

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4",
}


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write a cloud to ``path``; optional attributes are written when present."""
    n = len(cloud)
    names = ["x", "y", "z"]
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    types = ["float", "float", "float"]
    if cloud.labels is not None:
        names.append("label"); cols.append(cloud.labels); types.append("uchar")
    if cloud.visibility is not None:
        names.append("visibility"); cols.append(cloud.visibility); types.append("uchar")
    if cloud.confidences is not None:
        names.append("confidence"); cols.append(cloud.confidences); types.append("float")

    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {t} {name}" for t, name in zip(types, names)]
    header.append("end_header")

    rec = np.empty(n, dtype=[(name, _PLY_TYPES[t]) for name, t in zip(names, types)])
    for name, col in zip(names, cols):
        rec[name] = col
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            fmt = " ".join("%d" if t == "uchar" else "%.9g" for t in types)
            for row in rec:
                f.write((fmt % tuple(row) + "\n").encode("ascii"))


def load_ply(path) -> PointCloud:
    """Read a PLY written by :func:`save_ply` (or any single-vertex-element file
    using the supported scalar property types)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if end < 0:
        raise InvalidInputError(f"{path}: not a PLY file (no end_header)")
    body_start = data.find(b"\n", end) + 1
    header = data[:end].decode("ascii", "replace").splitlines()
    if not header or header[0].strip() != "ply":
        raise InvalidInputError(f"{path}: missing ply magic")

    fmt = None
    n = None
    props = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise InvalidInputError(f"{path}: list properties unsupported")
            if tok[1] not in _PLY_TYPES:
                raise InvalidInputError(f"{path}: unsupported property type {tok[1]}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian") or n is None:
        raise InvalidInputError(f"{path}: unsupported PLY format")

    dtype = np.dtype(props)
    if fmt == "binary_little_endian":
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=body_start)
    else:
        text = data[body_start:].decode("ascii")
        flat = np.array(text.split(), dtype=np.float64)
        if flat.size != n * len(props):
            raise InvalidInputError(f"{path}: expected {n * len(props)} ascii values")
        mat = flat.reshape(n, len(props))
        rec = np.empty(n, dtype=dtype)
        for i, (name, _) in enumerate(props):
            rec[name] = mat[:, i]

    have = {name for name, _ in props}
    if not {"x", "y", "z"} <= have:
        raise InvalidInputError(f"{path}: missing coordinate properties")
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    return PointCloud(
        pts,
        rec["label"] if "label" in have else None,
        rec["visibility"] if "visibility" in have else None,
        rec["confidence"].astype(np.float64) if "confidence" in have else None,
    )


class Session:
    """Posed scan sequence from one mapping run.

    Attributes:
        scans: list of (PointCloud in sensor frame, Pose, timestamp) triples,
            timestamps strictly increasing.
        dynamic_masks: optional list of boolean arrays (True = high-dynamic
            point, to be removed before mapping); entries may be None.
    """

    def __init__(self, scans, dynamic_masks=None):
        self.scans = list(scans)
        ts = [t for _, _, t in self.scans]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidInputError("timestamps must be strictly increasing")
        if dynamic_masks is None:
            dynamic_masks = [None] * len(self.scans)
        if len(dynamic_masks) != len(self.scans):
            raise InvalidInputError("one mask entry per scan required")
        for (cloud, _, _), m in zip(self.scans, dynamic_masks):
            if m is not None and len(np.asarray(m)) != len(cloud):
                raise InvalidInputError("mask length does not match scan length")
        self.dynamic_masks = [None if m is None else np.asarray(m, dtype=bool)
                              for m in dynamic_masks]

    def __len__(self):
        return len(self.scans)


def save_session(session: Session, out_dir, stem: str = "scan",
                 instance_ids=None, binary: bool = True) -> str:
    """Write scans + manifest into ``out_dir``; returns the manifest path.

    ``instance_ids`` (optional, one uint32 array per scan) are written as
    ``<scan>.iid`` sidecars next to each PLY.
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, (cloud, pose, t) in enumerate(session.scans):
        name = f"{stem}{i:03d}.ply"
        save_ply(cloud, os.path.join(out_dir, name), binary=binary)
        entry = [name] + ["%.17g" % v for v in pose.matrix34().ravel()] + ["%.17g" % t]
        mask = session.dynamic_masks[i]
        if mask is not None:
            mname = f"{stem}{i:03d}.mask"
            with open(os.path.join(out_dir, mname), "wb") as f:
                f.write(mask.astype(np.uint8).tobytes())
            entry.append(mname)
        if instance_ids is not None and instance_ids[i] is not None:
            with open(os.path.join(out_dir, f"{stem}{i:03d}.iid"), "wb") as f:
                f.write(np.asarray(instance_ids[i], dtype="<u4").tobytes())
        lines.append(" ".join(entry))
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


def load_session(manifest_path) -> Session:
    base = os.path.dirname(os.path.abspath(manifest_path))
    scans, masks = [], []
    with open(manifest_path) as f:
        for ln, raw in enumerate(f, start=1):
            tok = raw.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) not in (14, 15):
                raise InvalidInputError(
                    f"{manifest_path}:{ln}: expected 14 or 15 fields, got {len(tok)}")
            cloud = load_ply(os.path.join(base, tok[0]))
            pose = Pose.from_rt(np.array(tok[1:13], dtype=np.float64).reshape(3, 4))
            scans.append((cloud, pose, float(tok[13])))
            if len(tok) == 15:
                raw_mask = np.fromfile(os.path.join(base, tok[14]), dtype=np.uint8)
                if raw_mask.size != len(cloud):
                    raise InvalidInputError(f"{manifest_path}:{ln}: mask length mismatch")
                masks.append(raw_mask.astype(bool))
            else:
                masks.append(None)
    return Session(scans, masks)


def load_session_instances(manifest_path) -> list:
    """Instance-id sidecars (``.iid``) for each manifest scan, or None entries."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    with open(manifest_path) as f:
        for raw in f:
            tok = raw.split()
            if not tok or tok[0].startswith("#"):
                continue
            sidecar = os.path.join(base, os.path.splitext(tok[0])[0] + ".iid")
            out.append(np.fromfile(sidecar, dtype="<u4") if os.path.exists(sidecar) else None)
    return out


def save_logodds(state: np.ndarray, path) -> None:
    """Persist (N, 3) log-odds as little-endian float32 triples."""
    a = np.ascontiguousarray(state, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InvalidInputError("log-odds state must be (N, 3)")
    with open(path, "wb") as f:
        f.write(a.astype("<f4").tobytes())


def load_logodds(path, n_points: Optional[int] = None) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 3:
        raise InvalidInputError(f"{path}: size not a multiple of 3 floats")
    state = raw.reshape(-1, 3).astype(np.float64)
    if n_points is not None and state.shape[0] != n_points:
        raise InvalidInputError(f"{path}: {state.shape[0]} entries for {n_points} points")
    return state
