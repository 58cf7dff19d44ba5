"""RGB-D capture ingestion and synthetic data generation.

A *capture* is one object's full observation set: n depth/mask/pose
frames sharing pinhole intrinsics, plus an optional ground-truth cloud.
This module back-projects masked depth into world-frame point clouds,
fuses frame subsets (the random partial-sampling training strategy),
resamples clouds to a fixed size, reads/writes the on-disk capture
layout, and renders synthetic superellipsoid "fruits" whose analytic
surface provides exact ground truth.

Depth maps are millimeters in uint16 with 0 marking invalid pixels;
poses are 4x4 row-major camera-to-world transforms (x right, y down,
z forward in the camera frame).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, EmptyInputError, ParameterError
from .geom import PointCloud, read_ply, write_ply


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )


@dataclass
class Pose:
    """Rigid camera-to-world transform as a 4x4 row-major matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(4, 4)
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-4:
            raise ParameterError("pose rotation block is not orthonormal (tol 1e-4)")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ParameterError("pose last row must be (0, 0, 0, 1)")
        self.matrix = m

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]


@dataclass
class Observation:
    """One frame: uint16 depth (mm, 0 = invalid), 0/255 mask, pose, optional color."""

    depth: np.ndarray
    mask: np.ndarray
    pose: Pose
    color: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.uint16)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.depth.ndim != 2 or self.depth.shape != self.mask.shape:
            raise DimensionError(
                f"depth {self.depth.shape} and mask {self.mask.shape} must share H x W"
            )
        if not np.isin(self.mask, (0, 255)).all():
            raise DimensionError("mask values must be 0 or 255")
        if self.color is not None:
            self.color = np.ascontiguousarray(self.color, dtype=np.uint8)
            if self.color.shape != self.depth.shape + (3,):
                raise DimensionError(f"color shape {self.color.shape} must be H x W x 3")


@dataclass
class Capture:
    observations: list
    intrinsics: CameraIntrinsics
    gt: PointCloud | None = None

    def __post_init__(self):
        if len(self.observations) < 1:
            raise ParameterError("a capture needs at least one observation")
        hw = (self.intrinsics.height, self.intrinsics.width)
        for k, obs in enumerate(self.observations):
            if obs.depth.shape != hw:
                raise DimensionError(
                    f"observation {k} is {obs.depth.shape}, intrinsics say {hw}"
                )

    @property
    def n_frames(self) -> int:
        return len(self.observations)


# ---------------------------------------------------------------------------
# back-projection and fusion
# ---------------------------------------------------------------------------

def backproject(obs: Observation, intr: CameraIntrinsics) -> PointCloud:
    """Lift masked, valid-depth pixels to a world-frame point cloud.

    Output rows follow row-major pixel order.  An all-masked frame
    yields an empty cloud.
    """
    valid = (obs.mask == 255) & (obs.depth > 0)
    v_idx, u_idx = np.nonzero(valid)
    z = obs.depth[v_idx, u_idx].astype(np.float64) / 1000.0
    x = (u_idx - intr.cx) * z / intr.fx
    y = (v_idx - intr.cy) * z / intr.fy
    cam = np.stack([x, y, z], axis=1)
    world = cam @ obs.pose.rotation.T + obs.pose.translation
    colors = obs.color[v_idx, u_idx] if obs.color is not None else None
    return PointCloud(world.astype(np.float32), colors)


def fuse(capture: Capture, frame_indices) -> PointCloud:
    """Concatenate per-frame world clouds in the given index order."""
    idx = list(frame_indices)
    if not idx:
        raise ParameterError("fuse needs at least one frame index")
    for i in idx:
        if not 0 <= i < capture.n_frames:
            raise ParameterError(f"frame index {i} out of range [0, {capture.n_frames})")
    clouds = [backproject(capture.observations[i], capture.intrinsics) for i in idx]
    points = np.concatenate([c.points for c in clouds])
    if all(c.colors is not None for c in clouds):
        colors = np.concatenate([c.colors for c in clouds])
    else:
        colors = None
    return PointCloud(points, colors)


def sample_training_input(capture: Capture, rng: np.random.Generator,
                          k_min: int = 1, k_max: int | None = None) -> PointCloud:
    """Fuse a uniformly random subset of k frames, k ~ U[k_min, k_max].

    Frame indices are drawn without replacement; the result is a pure
    function of the capture and the generator state.
    """
    n = capture.n_frames
    if k_max is None:
        k_max = n
    if not 1 <= k_min <= k_max <= n:
        raise ParameterError(f"need 1 <= k_min <= k_max <= {n}, got [{k_min}, {k_max}]")
    k = int(rng.integers(k_min, k_max + 1))
    idx = rng.choice(n, size=k, replace=False)
    return fuse(capture, idx.tolist())


def resample(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Return exactly n points: subsample without replacement, or pad by
    re-drawing existing points with replacement when the cloud is small."""
    m = len(cloud)
    if m == 0:
        raise EmptyInputError("cannot resample an empty point cloud")
    if n < 1:
        raise ParameterError(f"resample target must be >= 1, got {n}")
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(m), rng.choice(m, size=n - m, replace=True)])
    colors = cloud.colors[idx] if cloud.colors is not None else None
    return PointCloud(cloud.points[idx], colors)


# ---------------------------------------------------------------------------
# on-disk capture layout
# ---------------------------------------------------------------------------

def _write_pnm(path: str, data: np.ndarray, maxval: int) -> None:
    magic = "P6" if data.ndim == 3 else "P5"
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            f.write(data.astype(">u2").tobytes())
        else:
            f.write(data.astype("u1").tobytes())


def _read_pnm(path: str) -> tuple[np.ndarray, int]:
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
            if magic not in (b"P5", b"P6"):
                raise DataError(f"{path}: expected binary PGM/PPM, got magic {magic!r}")
            fields = []
            while len(fields) < 3:
                tok = b""
                ch = f.read(1)
                while ch.isspace():
                    ch = f.read(1)
                if ch == b"#":
                    f.readline()
                    continue
                while ch and not ch.isspace():
                    tok += ch
                    ch = f.read(1)
                if not tok.isdigit():
                    raise DataError(f"{path}: malformed PNM header token {tok!r}")
                fields.append(int(tok))
            w, h, maxval = fields
            channels = 3 if magic == b"P6" else 1
            dtype = ">u2" if maxval > 255 else "u1"
            count = w * h * channels
            buf = f.read(count * np.dtype(dtype).itemsize)
            if len(buf) != count * np.dtype(dtype).itemsize:
                raise DataError(f"{path}: truncated pixel data")
            arr = np.frombuffer(buf, dtype=dtype).reshape(
                (h, w, 3) if channels == 3 else (h, w)
            )
            return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval
    except OSError as e:
        raise DataError(f"{path}: {e}") from e


def save_capture(capture: Capture, dir_path: str) -> None:
    """Write a capture in the standard directory layout."""
    frames_dir = os.path.join(dir_path, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    intr = capture.intrinsics
    with open(os.path.join(dir_path, "intrinsics.json"), "w") as f:
        json.dump({"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                   "width": intr.width, "height": intr.height}, f, indent=2)
        f.write("\n")
    for k, obs in enumerate(capture.observations):
        _write_pnm(os.path.join(frames_dir, f"{k:04d}.depth.pgm"), obs.depth, 65535)
        _write_pnm(os.path.join(frames_dir, f"{k:04d}.mask.pgm"), obs.mask, 255)
        with open(os.path.join(frames_dir, f"{k:04d}.pose.json"), "w") as f:
            json.dump(obs.pose.matrix.reshape(-1).tolist(), f)
            f.write("\n")
        if obs.color is not None:
            _write_pnm(os.path.join(frames_dir, f"{k:04d}.color.ppm"), obs.color, 255)
    if capture.gt is not None:
        write_ply(os.path.join(dir_path, "gt.ply"), capture.gt.points, capture.gt.colors)


def load_capture(dir_path: str) -> Capture:
    """Load and validate a capture directory; gt.ply is optional."""
    intr_path = os.path.join(dir_path, "intrinsics.json")
    try:
        with open(intr_path) as f:
            d = json.load(f)
        intr = CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                                int(d["width"]), int(d["height"]))
    except OSError as e:
        raise DataError(f"{intr_path}: {e}") from e
    except (KeyError, ValueError, ParameterError) as e:
        raise DataError(f"{intr_path}: invalid intrinsics ({e})") from e

    frames_dir = os.path.join(dir_path, "frames")
    if not os.path.isdir(frames_dir):
        raise DataError(f"{frames_dir}: missing frames directory")
    depth_files = sorted(f for f in os.listdir(frames_dir) if f.endswith(".depth.pgm"))
    if not depth_files:
        raise DataError(f"{frames_dir}: no *.depth.pgm frames found")

    observations = []
    for depth_name in depth_files:
        stem = depth_name[: -len(".depth.pgm")]
        depth_path = os.path.join(frames_dir, depth_name)
        mask_path = os.path.join(frames_dir, f"{stem}.mask.pgm")
        pose_path = os.path.join(frames_dir, f"{stem}.pose.json")
        color_path = os.path.join(frames_dir, f"{stem}.color.ppm")
        depth, maxval = _read_pnm(depth_path)
        if maxval != 65535:
            raise DataError(f"{depth_path}: depth PGM must have maxval 65535")
        if not os.path.exists(mask_path):
            raise DataError(f"{mask_path}: missing mask file")
        mask, _ = _read_pnm(mask_path)
        try:
            with open(pose_path) as f:
                nums = json.load(f)
            if not isinstance(nums, list) or len(nums) != 16:
                raise DataError(f"{pose_path}: pose must be a list of 16 numbers")
            pose = Pose(np.array(nums, dtype=np.float64).reshape(4, 4))
        except OSError as e:
            raise DataError(f"{pose_path}: {e}") from e
        except ParameterError as e:
            raise DataError(f"{pose_path}: {e}") from e
        color = None
        if os.path.exists(color_path):
            color, _ = _read_pnm(color_path)
        try:
            observations.append(Observation(depth, mask.astype(np.uint8), pose, color))
        except DimensionError as e:
            raise DataError(f"{frames_dir}/{stem}.*: {e}") from e

    gt = None
    gt_path = os.path.join(dir_path, "gt.ply")
    if os.path.exists(gt_path):
        pts, cols, _ = read_ply(gt_path)
        gt = PointCloud(pts, cols)
    try:
        return Capture(observations, intr, gt)
    except (DimensionError, ParameterError) as e:
        raise DataError(f"{dir_path}: {e}") from e


# ---------------------------------------------------------------------------
# synthetic superellipsoid captures
# ---------------------------------------------------------------------------

@dataclass
class Superellipsoid:
    """Analytic fruit model: |x/a|^p + |y/b|^p + |z/c|^p = 1 in its local
    frame (p = 2/exponent), rigidly posed in the world frame."""

    axes: np.ndarray        # (3,) semi-axes, meters
    exponent: float         # shape exponent; 1.0 gives an ellipsoid
    rotation: np.ndarray    # (3,3) local-to-world
    translation: np.ndarray  # (3,) world offset, meters

    @property
    def power(self) -> float:
        return 2.0 / self.exponent

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def implicit(self, points_world: np.ndarray) -> np.ndarray:
        """Implicit field in the world frame; the surface is the 1-level set."""
        q = np.abs(self.to_local(points_world)) / self.axes
        return (q ** self.power).sum(axis=-1)

    def surface_from_directions(self, dirs_local: np.ndarray) -> np.ndarray:
        """Radially project unit local directions onto the surface (world frame)."""
        u = np.asarray(dirs_local, dtype=np.float64)
        f1 = (np.abs(u / self.axes) ** self.power).sum(axis=-1)
        q = u * (f1 ** (-1.0 / self.power))[:, None]
        return q @ self.rotation.T + self.translation

    def normals_world(self, points_world: np.ndarray) -> np.ndarray:
        q = self.to_local(points_world)
        g = (self.power / self.axes) * np.sign(q) * (np.abs(q) / self.axes) ** (self.power - 1.0)
        g = g @ self.rotation.T
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.axes))


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def make_fruit(rng: np.random.Generator, jitter_mm: float = 5.0) -> Superellipsoid:
    """Draw a random fruit: semi-axes U(30, 60) mm, exponent U(0.7, 1.3),
    uniform rotation, and a small translation jitter around the origin."""
    axes = rng.uniform(0.030, 0.060, size=3)
    exponent = float(rng.uniform(0.7, 1.3))
    rotation = _random_rotation(rng)
    translation = rng.uniform(-jitter_mm, jitter_mm, size=3) / 1000.0
    return Superellipsoid(axes, exponent, rotation, translation)


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose with +z toward `target` and +y pointing down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along world z
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return Pose(m)


def ring_poses(n_frames: int, distance: float, elevation_deg: float) -> list:
    """Poses on a viewing ring, alternating above and below the equator."""
    poses = []
    for k in range(n_frames):
        az = 2.0 * np.pi * k / n_frames
        el = np.deg2rad(elevation_deg if k % 2 == 0 else -elevation_deg)
        eye = distance * np.array([np.cos(el) * np.cos(az),
                                   np.cos(el) * np.sin(az),
                                   np.sin(el)])
        poses.append(look_at_pose(eye, np.zeros(3)))
    return poses


def render_observation(fruit: Superellipsoid, pose: Pose, intr: CameraIntrinsics,
                       albedo: np.ndarray | None = None) -> Observation:
    """Ray-cast the fruit to a depth/mask (and optionally shaded color) frame.

    The implicit field is convex along each ray, so the entry point is
    found by a vectorized ternary search for the ray minimum followed by
    bisection; depth is the camera-frame z in integer millimeters.
    """
    h, w = intr.height, intr.width
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(u - intr.cx) / intr.fx,
                         (v - intr.cy) / intr.fy,
                         np.ones_like(u, dtype=np.float64)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    eye = pose.translation

    # candidate pixels: rays that enter the bounding sphere
    oc = eye - fruit.translation
    b = dirs @ oc
    disc = b * b - (oc @ oc - fruit.bounding_radius ** 2)
    cand = disc > 0.0
    depth = np.zeros(h * w, dtype=np.uint16)
    mask = np.zeros(h * w, dtype=np.uint8)
    color = None
    if albedo is not None:
        color = np.zeros((h * w, 3), dtype=np.uint8)

    if cand.any():
        d = dirs[cand]
        sq = np.sqrt(disc[cand])
        t_lo = -b[cand] - sq
        t_hi = -b[cand] + sq

        def g(t):
            return fruit.implicit(eye + t[:, None] * d)

        lo, hi = t_lo.copy(), t_hi.copy()
        for _ in range(60):  # interval shrinks by 2/3 per iteration
            m1 = lo + (hi - lo) / 3.0
            m2 = hi - (hi - lo) / 3.0
            left = g(m1) < g(m2)
            hi = np.where(left, m2, hi)
            lo = np.where(left, m1, lo)
        t_min = 0.5 * (lo + hi)
        hit = g(t_min) <= 1.0
        if hit.any():
            a_t = t_lo[hit]
            b_t = t_min[hit]
            dh = d[hit]

            def gh(t):
                return fruit.implicit(eye + t[:, None] * dh)

            for _ in range(52):  # bisect the entry crossing of the 1-level set
                mid = 0.5 * (a_t + b_t)
                inside = gh(mid) <= 1.0
                b_t = np.where(inside, mid, b_t)
                a_t = np.where(inside, a_t, mid)
            t_surf = 0.5 * (a_t + b_t)
            p_surf = eye + t_surf[:, None] * dh
            z = (p_surf - eye) @ pose.rotation[:, 2]
            full_idx = np.nonzero(cand)[0][hit]
            depth[full_idx] = np.clip(np.rint(z * 1000.0), 1, 65535).astype(np.uint16)
            mask[full_idx] = 255
            if albedo is not None:
                n = fruit.normals_world(p_surf)
                shade = np.clip(-(dh * n).sum(axis=1), 0.0, 1.0) * 0.75 + 0.25
                color[full_idx] = np.clip(shade[:, None] * albedo * 255.0, 0, 255)

    return Observation(depth.reshape(h, w), mask.reshape(h, w), pose,
                       color.reshape(h, w, 3) if color is not None else None)


DEFAULT_INTRINSICS = CameraIntrinsics(fx=150.0, fy=150.0, cx=79.5, cy=59.5,
                                      width=160, height=120)


def gen_synthetic(seed: int, count: int, n_frames: int = 12,
                  intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                  gt_points: int = 8192, distance: float = 0.30,
                  elevation_deg: float = 25.0, with_color: bool = True) -> list:
    """Generate `count` seed-deterministic synthetic captures.

    Each capture renders one random superellipsoid fruit from `n_frames`
    ring poses and carries a ground-truth cloud of `gt_points` points
    sampled from the analytic surface.
    """
    if count < 1:
        raise ParameterError(f"capture count must be >= 1, got {count}")
    poses = ring_poses(n_frames, distance, elevation_deg)
    captures = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        fruit = make_fruit(rng)
        albedo = rng.uniform(0.25, 0.95, size=3) if with_color else None
        observations = [render_observation(fruit, pose, intrinsics, albedo)
                        for pose in poses]
        dirs = rng.normal(size=(gt_points, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        gt = PointCloud(fruit.surface_from_directions(dirs).astype(np.float32))
        captures.append(Capture(observations, intrinsics, gt))
    return captures
