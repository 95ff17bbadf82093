"""Lift 2-d waypoints into an SE(3) trajectory.

Pixel convention: integer pixel coordinates sit at pixel centers, so a
normalized coordinate ``u`` on a canvas ``W`` pixels wide maps to
``u * W - 0.5``. The camera frame is x right, y down, z along the optical
axis; an "above-target" waypoint is offset along +z by the clearance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .netpbm import read_pgm, write_pgm16

AT_TARGET = "at-target-level"
ABOVE_TARGET = "above-target"
HEIGHT_CATEGORIES = (AT_TARGET, ABOVE_TARGET)
DEFAULT_CLEARANCE = 0.10
FALLBACK_RADIUS = 5


class DepthError(ValueError):
    pass


class HeightSelectionError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in meters; ``values[v, u]``. Non-positive or non-finite entries are holes."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("depth map must be a nonempty 2-d array")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values > 0)

    def lookup(self, u: int, v: int, radius: int = FALLBACK_RADIUS) -> float:
        """Depth at ``(u, v)``, or at the nearest valid pixel within ``radius``."""
        if not (0 <= u < self.width and 0 <= v < self.height):
            raise DepthError(f"pixel ({u}, {v}) outside the {self.width}x{self.height} depth map")
        valid = self.valid
        if valid[v, u]:
            return float(self.values[v, u])
        v0, v1 = max(0, v - radius), min(self.height, v + radius + 1)
        u0, u1 = max(0, u - radius), min(self.width, u + radius + 1)
        vs, us = np.nonzero(valid[v0:v1, u0:u1])
        if len(vs) == 0:
            raise DepthError(f"no valid depth within {radius} px of ({u}, {v})")
        d2 = (vs + v0 - v) ** 2 + (us + u0 - u) ** 2
        ok = d2 <= radius * radius
        if not ok.any():
            raise DepthError(f"no valid depth within {radius} px of ({u}, {v})")
        # nonzero scans row-major, so argmin breaks ties toward the top-left neighbour
        best = np.flatnonzero(ok)[np.argmin(d2[ok])]
        return float(self.values[vs[best] + v0, us[best] + u0])


@dataclass(frozen=True)
class SE3Pose:
    position: tuple[float, float, float]
    quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)  # w, x, y, z

    def __post_init__(self):
        p = tuple(float(x) for x in self.position)
        q = tuple(float(x) for x in self.quaternion)
        if len(p) != 3 or len(q) != 4:
            raise ValueError("pose needs a 3-vector position and a 4-vector quaternion")
        if abs(math.sqrt(sum(x * x for x in q)) - 1.0) > 1e-6:
            raise ValueError("orientation quaternion must have unit norm")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "quaternion", q)

    def to_dict(self) -> dict:
        return {"position": list(self.position), "quaternion": list(self.quaternion)}

    @classmethod
    def from_dict(cls, d: dict) -> "SE3Pose":
        return cls(tuple(d["position"]), tuple(d.get("quaternion", (1.0, 0.0, 0.0, 0.0))))


@dataclass
class ExecutionPlan:
    grasp: SE3Pose
    waypoints3d: np.ndarray  # height-adjusted, T x 3
    heights: list[str]
    poses: list[SE3Pose] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "grasp": self.grasp.to_dict(),
            "waypoints3d": np.asarray(self.waypoints3d).tolist(),
            "heights": list(self.heights),
            "poses": [p.to_dict() for p in self.poses],
        }


def deproject(p, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """``depth * K^-1 (u, v, 1)`` for pixel coordinates ``p = (u, v)``; vectorized over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (p[..., 0] - K.cx) * depth / K.fx
    y = (p[..., 1] - K.cy) * depth / K.fy
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def project(X, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixel coordinates."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    if np.any(z <= 0):
        raise ValueError("points must lie in front of the camera")
    return np.stack([K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy], axis=-1)


def deproject_pixel(p, depth_map: DepthMap, K: CameraIntrinsics, radius: int = FALLBACK_RADIUS) -> np.ndarray:
    """Deproject a pixel, reading depth at the nearest pixel center (with hole fallback)."""
    u, v = float(p[0]), float(p[1])
    iu, iv = int(np.rint(u)), int(np.rint(v))
    if not (0 <= iu < depth_map.width and 0 <= iv < depth_map.height):
        raise DepthError(f"pixel ({u:.2f}, {v:.2f}) outside the {depth_map.width}x{depth_map.height} depth map")
    return deproject((u, v), depth_map.lookup(iu, iv, radius), K)


def normalized_to_pixels(waypoints, resolution) -> np.ndarray:
    w, h = resolution
    wp = np.asarray(waypoints, dtype=np.float64)
    return wp * np.array([w, h], dtype=np.float64) - 0.5


def lift_waypoints(waypoints, resolution, depth_map: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Normalized ``[T, 2]`` waypoints to camera-frame ``[T, 3]`` points."""
    out = []
    for i, p in enumerate(normalized_to_pixels(waypoints, resolution)):
        try:
            out.append(deproject_pixel(p, depth_map, K))
        except DepthError as exc:
            raise DepthError(f"waypoint {i}: {exc}") from None
    return np.array(out)


def select_grasp(candidates: Sequence[SE3Pose], target) -> SE3Pose:
    if not candidates:
        raise ValueError("no grasp candidates")
    pos = np.array([c.position for c in candidates])
    dist = np.linalg.norm(pos - np.asarray(target, dtype=np.float64), axis=1)
    return candidates[int(np.argmin(dist))]  # argmin returns the first minimum


class HeightSelector(Protocol):
    def __call__(self, waypoints3d: np.ndarray) -> Sequence[str]: ...


def rule_selector(waypoints3d: np.ndarray) -> list[str]:
    """Contact and final waypoints stay at target level; the ones between are lifted."""
    n = len(waypoints3d)
    return [AT_TARGET if i in (0, n - 1) else ABOVE_TARGET for i in range(n)]


class FixedSelector:
    """Categories decided elsewhere (for instance supplied in the plan input)."""

    def __init__(self, categories: Sequence[str]):
        self.categories = list(categories)

    def __call__(self, waypoints3d: np.ndarray) -> list[str]:
        if len(self.categories) != len(waypoints3d):
            raise HeightSelectionError(
                f"{len(self.categories)} categories supplied for {len(waypoints3d)} waypoints")
        return self.categories


class ConstantSelector:
    def __init__(self, category: str):
        self.category = category

    def __call__(self, waypoints3d: np.ndarray) -> list[str]:
        return [self.category] * len(waypoints3d)


def assign_heights(waypoints3d, selector: HeightSelector = rule_selector,
                   clearance: float = DEFAULT_CLEARANCE) -> tuple[np.ndarray, list[str]]:
    """Apply the selector's categories; returns height-adjusted points and the categories."""
    pts = np.array(waypoints3d, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a nonempty [T, 3] waypoint array")
    try:
        cats = list(selector(pts))
    except HeightSelectionError:
        raise
    except Exception as exc:
        raise HeightSelectionError(f"height selector failed: {exc}") from exc
    if len(cats) != len(pts):
        raise HeightSelectionError(f"selector returned {len(cats)} categories for {len(pts)} waypoints")
    for i, c in enumerate(cats):
        if c not in HEIGHT_CATEGORIES:
            raise HeightSelectionError(f"waypoint {i}: unknown height category {c!r}")
        if c == ABOVE_TARGET:
            pts[i, 2] += clearance
    return pts, cats


def densify(points, max_step: float) -> np.ndarray:
    """Linear interpolation so that no step exceeds ``max_step``; input points are kept exactly."""
    if not max_step > 0:
        raise ValueError("max step must be positive")
    pts = np.asarray(points, dtype=np.float64)
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        dist = float(np.linalg.norm(b - a))
        if dist == 0.0:
            continue
        n = max(1, math.ceil(dist / max_step - 1e-9))
        for j in range(1, n):
            out.append(a + (b - a) * (j / n))
        out.append(b.copy())
    return np.array(out)


def build_trajectory(grasp: SE3Pose, waypoints3d, max_step: float, heights: Sequence[str] | None = None) -> ExecutionPlan:
    """Densified pose sequence from the grasp through each (height-adjusted) waypoint."""
    if not max_step > 0:
        raise ValueError("max step must be positive")
    pts = np.asarray(waypoints3d, dtype=np.float64).reshape(-1, 3)
    path = densify(np.vstack([np.asarray(grasp.position)[None], pts]), max_step)
    poses = [SE3Pose(tuple(p), grasp.quaternion) for p in path]
    return ExecutionPlan(grasp, pts, list(heights or [AT_TARGET] * len(pts)), poses)


def plan(waypoints, resolution, depth_map: DepthMap, K: CameraIntrinsics, candidates: Sequence[SE3Pose],
         max_step: float = 0.01, selector: HeightSelector = rule_selector,
         clearance: float = DEFAULT_CLEARANCE) -> ExecutionPlan:
    """Full pipeline: lift, pick the grasp nearest the contact point, lift heights, densify."""
    lifted = lift_waypoints(waypoints, resolution, depth_map, K)
    grasp = select_grasp(candidates, lifted[0])
    adjusted, cats = assign_heights(lifted, selector, clearance)
    return build_trajectory(grasp, adjusted, max_step, cats)


# file formats -----------------------------------------------------------

def load_intrinsics(path) -> CameraIntrinsics:
    d = json.loads(Path(path).read_text())
    return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def load_candidates(path) -> list[SE3Pose]:
    return [SE3Pose.from_dict(c) for c in json.loads(Path(path).read_text())]


def load_waypoints(path) -> tuple[np.ndarray, tuple[int, int], list[str] | None]:
    """``{"waypoints": [[u, v], ...], "resolution": [w, h], "heights": [...]?}``."""
    d = json.loads(Path(path).read_text())
    wp = np.asarray(d["waypoints"], dtype=np.float64)
    if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) == 0:
        raise ValueError("waypoints must be a nonempty list of [u, v] pairs")
    res = tuple(int(x) for x in d["resolution"])
    return wp, res, d.get("heights")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_depth(path, depth_map: DepthMap, scale: float = 1e-3) -> None:
    """16-bit graymap of ``depth / scale`` with a ``{"scale": ...}`` sidecar; holes store 0."""
    path = Path(path)
    vals = np.where(depth_map.valid, depth_map.values, 0.0) / scale
    if vals.max() > 65535:
        raise ValueError("depth exceeds the 16-bit range at this scale")
    write_pgm16(path, np.rint(vals).astype(np.uint16))
    _sidecar(path).write_text(json.dumps({"scale": scale}) + "\n")


def load_depth(path) -> DepthMap:
    path = Path(path)
    scale = float(json.loads(_sidecar(path).read_text())["scale"])
    raw = read_pgm(path).astype(np.float64)
    return DepthMap(np.where(raw > 0, raw * scale, 0.0))
