"""
Camera geometry for SpinFlow
Pinhole projection, DLT triangulation and reprojection-gated stereo matching.
World frame: right-handed, x and y parallel to the ground, z up, players along y.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from utils.config import FRAME_DT, IMAGE_SIZE
from utils.errors import DegenerateRays, PointBehindCamera, SchemaError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
PARALLEL_RAY_TOL = 1e-9


def _frozen(array, shape) -> np.ndarray:
    out = np.array(array, dtype=float).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    camera_id: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: Tuple[int, int] = IMAGE_SIZE

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", _frozen(self.intrinsics, (3, 3)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError(f"camera {self.camera_id}: rotation is not orthonormal")
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"camera {self.camera_id}: focal lengths must be positive")
        cx, cy = self.intrinsics[0, 2], self.intrinsics[1, 2]
        width, height = self.image_size
        if not (0 <= cx < width and 0 <= cy < height):
            raise ValueError(f"camera {self.camera_id}: principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates"""
        return -self.rotation.T @ self.translation

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def in_image(self, pixel: np.ndarray) -> bool:
        width, height = self.image_size
        return bool(0 <= pixel[0] < width and 0 <= pixel[1] < height)

    def to_dict(self) -> Dict:
        return {
            "camera_id": self.camera_id,
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CameraCalibration":
        return cls(
            camera_id=str(data["camera_id"]),
            intrinsics=data["intrinsics"],
            rotation=data["rotation"],
            translation=data["translation"],
            image_size=tuple(data.get("image_size", IMAGE_SIZE)),
        )


@dataclass(frozen=True)
class Detection2D:
    """One ball detection; the pixel is checked against the image where the camera is known"""
    camera_id: str
    frame_index: int
    pixel: Tuple[float, float]
    confidence: float = 1.0

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def time(self) -> float:
        return self.frame_index * FRAME_DT


@dataclass(frozen=True, eq=False)
class Point3D:
    position: np.ndarray
    time: float

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        if not np.all(np.isfinite(self.position)):
            raise ValueError("Point3D components must be finite")


@dataclass(frozen=True, eq=False)
class StereoMatch:
    point: Point3D
    reproj_error: float
    frame_index: int
    left: Detection2D = field(repr=False)
    right: Detection2D = field(repr=False)


PointLike = Union[Point3D, np.ndarray, Sequence[float]]


def _position(point: PointLike) -> np.ndarray:
    if isinstance(point, Point3D):
        return point.position
    return np.asarray(point, dtype=float).reshape(3)


def project(point: PointLike, camera: CameraCalibration) -> np.ndarray:
    """Pinhole projection of a world point to pixel coordinates"""
    p_cam = camera.rotation @ _position(point) + camera.translation
    if p_cam[2] <= 0:
        raise PointBehindCamera(f"point has depth {p_cam[2]:.6g} m in camera {camera.camera_id}")
    uvw = camera.intrinsics @ p_cam
    return uvw[:2] / uvw[2]


def project_many(positions: np.ndarray, camera: CameraCalibration) -> Tuple[np.ndarray, np.ndarray]:
    """Project an (N, 3) array; returns pixels (N, 2) and camera depths (N,)"""
    p_cam = positions @ camera.rotation.T + camera.translation
    depth = p_cam[:, 2]
    uvw = p_cam @ camera.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = uvw[:, :2] / uvw[:, 2:3]
    return pixels, depth


def viewing_ray(pixel: Sequence[float], camera: CameraCalibration) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame origin and unit direction of the ray through a pixel"""
    direction = camera.rotation.T @ np.linalg.solve(camera.intrinsics, np.array([pixel[0], pixel[1], 1.0]))
    return camera.center, direction / np.linalg.norm(direction)


def ray_angle(pixel_a, camera_a: CameraCalibration, pixel_b, camera_b: CameraCalibration) -> float:
    _, d_a = viewing_ray(pixel_a, camera_a)
    _, d_b = viewing_ray(pixel_b, camera_b)
    return math.atan2(np.linalg.norm(np.cross(d_a, d_b)), float(np.dot(d_a, d_b)))


def triangulate_pixels(pixel_l: Sequence[float], pixel_r: Sequence[float],
                       cam_l: CameraCalibration, cam_r: CameraCalibration) -> Tuple[np.ndarray, float]:
    """Linear DLT triangulation; returns the world point and mean reprojection error in pixels"""
    views = [(np.asarray(pixel_l, dtype=float), cam_l), (np.asarray(pixel_r, dtype=float), cam_r)]
    # fixed view order keeps the result bit-identical when the pair is swapped
    views.sort(key=lambda view: view[1].camera_id)

    angle = ray_angle(views[0][0], views[0][1], views[1][0], views[1][1])
    if angle < PARALLEL_RAY_TOL:
        raise DegenerateRays(f"viewing rays are parallel ({angle:.3g} rad)")

    rows = []
    for pixel, camera in views:
        P = camera.projection_matrix
        rows.append(pixel[0] * P[2] - P[0])
        rows.append(pixel[1] * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)

    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-15:
        raise DegenerateRays("triangulated point lies at infinity")
    position = X[:3] / X[3]

    errors = []
    for pixel, camera in views:
        p_cam = camera.rotation @ position + camera.translation
        if p_cam[2] <= 0:
            errors.append(math.inf)
            continue
        uvw = camera.intrinsics @ p_cam
        errors.append(float(np.linalg.norm(uvw[:2] / uvw[2] - pixel)))
    return position, 0.5 * (errors[0] + errors[1])


def triangulate(left: Detection2D, right: Detection2D,
                cam_l: CameraCalibration, cam_r: CameraCalibration) -> Tuple[Point3D, float]:
    if left.frame_index != right.frame_index:
        raise ValueError(f"stereo pair spans frames {left.frame_index} and {right.frame_index}")
    position, error = triangulate_pixels(left.pixel, right.pixel, cam_l, cam_r)
    return Point3D(position=position, time=left.time), error


def _inside(detections: List[Detection2D], camera: CameraCalibration) -> List[Detection2D]:
    kept = [d for d in detections if camera.in_image(d.pixel)]
    if len(kept) < len(detections):
        logger.warning(f"Camera {camera.camera_id}: {len(detections) - len(kept)} detections outside the "
                       f"{camera.image_size[0]}x{camera.image_size[1]} image dropped")
    return kept


def match_stereo_pairs(left: List[Detection2D], right: List[Detection2D],
                       cam_l: CameraCalibration, cam_r: CameraCalibration,
                       gate_px: float = 3.0) -> List[StereoMatch]:
    """Gate every cross pair of one frame by reprojection error, then match one-to-one greedily;
    detections outside their camera's image are dropped"""
    left = _inside(left, cam_l)
    right = _inside(right, cam_r)
    candidates = []
    for i, det_l in enumerate(left):
        for j, det_r in enumerate(right):
            try:
                point, error = triangulate(det_l, det_r, cam_l, cam_r)
            except DegenerateRays:
                continue
            if error <= gate_px:
                candidates.append((error, i, j, point))

    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    used_l, used_r = set(), set()
    matches = []
    for error, i, j, point in candidates:
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        matches.append(StereoMatch(point=point, reproj_error=error, frame_index=left[i].frame_index,
                                   left=left[i], right=right[j]))
    rejected = len(left) * len(right) - len(candidates)
    if rejected:
        logger.debug(f"Frame {left[0].frame_index}: {rejected} stereo pairs above {gate_px} px gate")
    return matches


def look_at_camera(camera_id: str, center: Sequence[float], target: Sequence[float],
                   focal: float = 800.0, image_size: Tuple[int, int] = IMAGE_SIZE) -> CameraCalibration:
    """Camera at `center` looking at `target` with z up in the world and y down in the image"""
    center = np.asarray(center, dtype=float)
    forward = np.asarray(target, dtype=float) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.vstack([right, down, forward])
    width, height = image_size
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraCalibration(camera_id=camera_id, intrinsics=K, rotation=R,
                             translation=-R @ center, image_size=image_size)


def default_test_rig() -> Tuple[CameraCalibration, CameraCalibration]:
    """Side-on stereo pair, 2 m baseline along the table's long axis"""
    target = (0.0, 0.0, 0.9)
    cam_l = look_at_camera("left", (3.5, -1.0, 2.0), target)
    cam_r = look_at_camera("right", (3.5, 1.0, 2.0), target)
    return cam_l, cam_r


def load_rig(path: str) -> List[CameraCalibration]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise SchemaError("file not found", path=path)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", path=path, line=e.lineno)
    cameras = data.get("cameras") if isinstance(data, dict) else None
    if not isinstance(cameras, list) or not cameras:
        raise SchemaError("expected a non-empty 'cameras' list", path=path)
    rig = []
    for entry in cameras:
        try:
            rig.append(CameraCalibration.from_dict(entry))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"bad camera entry: {e}", path=path)
    logger.info(f"Loaded {len(rig)} cameras from {path}")
    return rig


def save_rig(path: str, cameras: Sequence[CameraCalibration]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump({"cameras": [cam.to_dict() for cam in cameras]}, handle, indent=2)
        handle.write("\n")
