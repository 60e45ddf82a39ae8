"""On-disk formats: embeddings, checkpoints, poses, images, reports.

Every binary format here is little-endian and versioned by an 8-byte
magic so files identify themselves. Readers validate sizes strictly and
refuse truncated or oversized payloads; writers produce byte-stable
output so that write -> read -> write round-trips are identical. JSON
documents keep insertion order and full float precision for the same
reason.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .core import CameraView, GaussianCloud, quat_to_rotmat, rotmat_to_quat
from .train import AdamState

# ── patch embedding files ──────────────────────────────────────────────

EMB_MAGIC = b"SPLTEMB1"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<8sIIII")  # magic, version, rows, cols, dim


def write_patch_embeddings(path, data: NDArray) -> None:
    """Write a rows x cols x dim patch feature grid as float32."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("patch embeddings must be rows x cols x dim")
    rows, cols, dim = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, rows, cols, dim))
        fh.write(payload.tobytes())


def read_patch_embeddings(path) -> NDArray[np.float32]:
    """Read a patch feature grid; strict on magic, version, and size."""
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, rows, cols, dim = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if rows < 1 or cols < 1 or dim < 1:
        raise ValueError(f"{path}: degenerate shape {(rows, cols, dim)}")
    expected = _EMB_HEADER.size + rows * cols * dim * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_EMB_HEADER.size)
    return flat.reshape(rows, cols, dim).copy()


# ── splat checkpoints ──────────────────────────────────────────────────

CKPT_MAGIC = b"SPLATR1\x00"  # the 7-char magic, NUL-padded to 8 bytes on disk
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIII")  # magic, version, count, sh_degree, flags
_CKPT_HAS_OPTIMIZER = 1
_ADAM_META = struct.Struct("<Qddd")  # step_count, beta1, beta2, eps
# per-gaussian float32 lanes, in header order, shapes given (count, coeffs)
_CKPT_GROUPS = ("means", "log_scales", "rotations", "opacities", "sh")


def _group_shapes(count: int, sh_degree: int) -> dict[str, tuple[int, ...]]:
    coeffs = (sh_degree + 1) ** 2
    return {
        "means": (count, 3),
        "log_scales": (count, 3),
        "rotations": (count, 4),
        "opacities": (count,),
        "sh": (count, coeffs, 3),
    }


def write_checkpoint(
    path, cloud: GaussianCloud, optimizer: AdamState | None = None
) -> None:
    """Serialize a cloud (and optionally its Adam moments) as float32.

    The optimizer section exists so long runs can resume without
    restarting moment estimation; omitting it keeps viewer-bound
    checkpoints small.
    """
    flags = _CKPT_HAS_OPTIMIZER if optimizer is not None else 0
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(cloud), cloud.sh_degree, flags)
        )
        for group in _CKPT_GROUPS:
            fh.write(np.ascontiguousarray(getattr(cloud, group), dtype="<f4").tobytes())
        if optimizer is not None:
            fh.write(
                _ADAM_META.pack(
                    optimizer.step_count, optimizer.beta1, optimizer.beta2, optimizer.eps
                )
            )
            for moments in (optimizer.m, optimizer.v):
                for group in _CKPT_GROUPS:
                    fh.write(np.ascontiguousarray(moments[group], dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[GaussianCloud, AdamState | None]:
    """Read a checkpoint; strict on magic, version, flags, and size."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, count, sh_degree, flags = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if flags & ~_CKPT_HAS_OPTIMIZER:
        raise ValueError(f"{path}: unknown flags {flags:#x}")
    shapes = _group_shapes(count, sh_degree)
    lane = sum(int(np.prod(s)) for s in shapes.values()) * 4
    expected = _CKPT_HEADER.size + lane
    if flags & _CKPT_HAS_OPTIMIZER:
        expected += _ADAM_META.size + 2 * lane
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, expected {expected}")

    offset = _CKPT_HEADER.size

    def take(shape: tuple[int, ...]) -> NDArray[np.float64]:
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        offset += n * 4
        return arr.astype(np.float64).reshape(shape)

    groups = {g: take(shapes[g]) for g in _CKPT_GROUPS}
    cloud = GaussianCloud(sh_degree=sh_degree, **groups)
    if not flags & _CKPT_HAS_OPTIMIZER:
        return cloud, None
    step_count, beta1, beta2, eps = _ADAM_META.unpack_from(raw, offset)
    offset += _ADAM_META.size
    m = {g: take(shapes[g]) for g in _CKPT_GROUPS}
    v = {g: take(shapes[g]) for g in _CKPT_GROUPS}
    return cloud, AdamState(
        m=m, v=v, step_count=step_count, beta1=beta1, beta2=beta2, eps=eps
    )


# ── camera poses ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class PoseRecord:
    """One camera pose as stored on disk: intrinsics plus a world->camera
    rotation quaternion (scalar-first) and translation.

    Records keep the exact parsed floats so rewriting a file reproduces
    it byte for byte; the matrix form is derived on demand.
    """

    frame: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4)
        )
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )
        if self.frame < 0:
            raise ValueError("frame index must be non-negative")
        if abs(float(np.linalg.norm(self.rotation)) - 1.0) > 1e-6:
            raise ValueError("pose rotation must be a unit quaternion")

    @staticmethod
    def from_view(frame: int, view: CameraView) -> "PoseRecord":
        return PoseRecord(
            frame=frame,
            fx=view.fx,
            fy=view.fy,
            cx=view.cx,
            cy=view.cy,
            width=view.width,
            height=view.height,
            rotation=rotmat_to_quat(view.rotation),
            translation=view.translation.copy(),
        )

    def view(self) -> CameraView:
        return CameraView(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
            rotation=quat_to_rotmat(self.rotation),
            translation=self.translation.copy(),
        )


def write_poses(path, records: list[PoseRecord]) -> None:
    """Write poses as JSON lines, one record per frame, ascending."""
    frames = [r.frame for r in records]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValueError("pose frames must be strictly increasing")
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "frame": r.frame,
                        "fx": r.fx,
                        "fy": r.fy,
                        "cx": r.cx,
                        "cy": r.cy,
                        "width": r.width,
                        "height": r.height,
                        "rotation": list(r.rotation),
                        "translation": list(r.translation),
                    }
                )
                + "\n"
            )


def read_poses(path) -> list[PoseRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            records.append(
                PoseRecord(
                    frame=int(doc["frame"]),
                    fx=float(doc["fx"]),
                    fy=float(doc["fy"]),
                    cx=float(doc["cx"]),
                    cy=float(doc["cy"]),
                    width=int(doc["width"]),
                    height=int(doc["height"]),
                    rotation=doc["rotation"],
                    translation=doc["translation"],
                )
            )
    frames = [r.frame for r in records]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValueError(f"{path}: pose frames must be strictly increasing")
    return records


# ── images ─────────────────────────────────────────────────────────────


def write_image(path, rgb: NDArray[np.float64]) -> None:
    """Write an H x W x 3 float image in [0, 1] as an 8-bit RGB PNG."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 rgb, got {rgb.shape}")
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError("rgb values must be finite and within [0, 1]")
    Image.fromarray(np.round(rgb * 255.0).astype(np.uint8), "RGB").save(path)


def read_image(path) -> NDArray[np.float64]:
    """Read an 8-bit RGB PNG back to floats in [0, 1]."""
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise ValueError(f"{path}: expected an RGB image, got mode {img.mode}")
        return np.asarray(img, dtype=np.float64) / 255.0


def write_depth(path, depth: NDArray[np.float64]) -> None:
    """Write metric depth as a 16-bit grayscale PNG in millimeters.

    0 stays 0 (the invalid sentinel); anything past 65.535 m does not
    fit the encoding and is refused rather than silently clipped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"expected an H x W depth map, got {depth.shape}")
    if not np.all(np.isfinite(depth)) or depth.min() < 0.0:
        raise ValueError("depth must be finite and non-negative")
    mm = np.round(depth * 1000.0)
    if mm.max() > 65535:
        raise ValueError("depth beyond 65.535 m does not fit 16-bit millimeters")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_depth(path) -> NDArray[np.float64]:
    """Read a 16-bit millimeter depth PNG back to metric floats."""
    with Image.open(path) as img:
        if img.mode not in ("I", "I;16"):
            raise ValueError(f"{path}: expected a 16-bit depth image, got {img.mode}")
        return np.asarray(img, dtype=np.float64) / 1000.0


# ── splat PLY export ───────────────────────────────────────────────────


def export_ply(path, cloud: GaussianCloud) -> None:
    """Write the community splat PLY layout for external viewers.

    Fields are stored raw exactly as optimized: log scales, logit
    opacities, scalar-first quaternions, and SH with the DC term in
    f_dc and higher orders channel-major in f_rest.
    """
    n = len(cloud)
    rest = (cloud.sh_degree + 1) ** 2 - 1
    names = (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(3 * rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )
    header = (
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        + [f"property float {name}" for name in names]
        + ["end_header"]
    )
    data = np.zeros((n, len(names)), dtype="<f4")
    data[:, 0:3] = cloud.means
    data[:, 6:9] = cloud.sh[:, 0, :]
    if rest:
        # channel-major: all R coefficients, then G, then B
        data[:, 9 : 9 + 3 * rest] = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    data[:, 9 + 3 * rest] = cloud.opacities
    data[:, 10 + 3 * rest : 13 + 3 * rest] = cloud.log_scales
    data[:, 13 + 3 * rest :] = cloud.rotations
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


# ── json documents ─────────────────────────────────────────────────────


def write_json(path, doc: Any) -> None:
    """Write a JSON document: insertion order, 2-space indent, newline."""
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ── workspace layout ───────────────────────────────────────────────────

WORKSPACE_FORMAT = "splatr-workspace"
WORKSPACE_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Workspace:
    """Directory layout for one scene: dataset frames and poses, the
    trained splat checkpoint, node and embedding files, and the episode
    report. A versioned manifest marks the root."""

    root: Path

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))

    # -- locations ------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def nodes_dir(self) -> Path:
        return self.root / "nodes"

    @property
    def embeddings_dir(self) -> Path:
        return self.root / "embeddings"

    @property
    def checkpoint_path(self) -> Path:
        return self.root / "splat.ckpt"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    @property
    def walkthrough_report_path(self) -> Path:
        return self.root / "walkthrough.json"

    @property
    def poses_path(self) -> Path:
        return self.dataset_dir / "poses.jsonl"

    def frame_path(self, frame: int) -> Path:
        return self.dataset_dir / f"frame_{frame:06d}.png"

    def depth_path(self, frame: int) -> Path:
        return self.dataset_dir / f"depth_{frame:06d}.png"

    def embedding_path(self, frame: int) -> Path:
        return self.embeddings_dir / f"frame_{frame:06d}.emb"

    # -- lifecycle ------------------------------------------------------

    @staticmethod
    def create(root) -> "Workspace":
        """Make (or re-open) a workspace, laying out directories and the
        manifest. Creating over an existing valid workspace is a no-op."""
        ws = Workspace(Path(root))
        if ws.manifest_path.exists():
            return Workspace.open(root)
        for d in (ws.root, ws.dataset_dir, ws.nodes_dir, ws.embeddings_dir):
            d.mkdir(parents=True, exist_ok=True)
        write_json(ws.manifest_path, {"format": WORKSPACE_FORMAT, "version": WORKSPACE_VERSION})
        return ws

    @staticmethod
    def open(root) -> "Workspace":
        ws = Workspace(Path(root))
        if not ws.manifest_path.exists():
            raise ValueError(f"{ws.root} is not a workspace (no {MANIFEST_NAME})")
        manifest = read_json(ws.manifest_path)
        if manifest.get("format") != WORKSPACE_FORMAT:
            raise ValueError(f"{ws.root}: unrecognized manifest format")
        if manifest.get("version") != WORKSPACE_VERSION:
            raise ValueError(f"{ws.root}: unsupported workspace version")
        return ws
