"""Deterministic software rasterizer, image-set generation, self-occlusion.

Rendering is a classic z-buffer pipeline: world -> camera transform, near
plane clipping, perspective projection, per-triangle scanline fill with
inverse-depth interpolation. Shading is flat (per-triangle) from the angle
between the surface normal and the view direction, with no shadows; the
background is white and gripper triangles use one fixed distinct gray, so an
image pixel can always be attributed to background, object, or gripper.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import scene as sc

NEAR_PLANE = 1e-3

# Shading bands. Object shades stay strictly below the gripper gray which
# stays strictly below the white background.
OBJECT_SHADE_BASE = 0.12
OBJECT_SHADE_SPAN = 0.58
GRIPPER_SHADE = 0.85
BACKGROUND = 1.0


# ---------------------------------------------------------------------------
# Camera and images
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Camera:
    """Pinhole camera: position, forward/up axes, vertical FOV, resolution."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    fov_y: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.array(self.position, dtype=np.float64).reshape(3)
        self.forward = np.array(self.forward, dtype=np.float64).reshape(3)
        self.up = np.array(self.up, dtype=np.float64).reshape(3)
        self.fov_y = float(self.fov_y)
        if not 0.0 < self.fov_y < math.pi:
            raise ValueError("vertical field of view must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        if np.linalg.norm(np.cross(self.forward, self.up)) < 1e-9:
            raise ValueError("camera forward and up axes are parallel")

    def basis(self):
        """Orthonormal (right, up, forward) triple."""
        fwd = self.forward / np.linalg.norm(self.forward)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd


def default_camera(width=64, height=64):
    """Static camera of the desk setup: horizontal view along -y, z up."""
    return Camera(
        position=np.array([0.003, 0.23, 0.53]),
        forward=np.array([0.0, -1.0, 0.0]),
        up=np.array([0.0, 0.0, 1.0]),
        fov_y=math.radians(60.0),
        width=width,
        height=height,
    )


@dataclass(eq=False)
class Image:
    """Grayscale raster; intensities in [0, 1], row-major, row 0 at the top."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width) float64

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError("pixel buffer does not match the declared resolution")


def write_pgm(image, path):
    """8-bit binary PGM (P5)."""
    data = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":  # comment runs to end of line
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace():
            i += 1
        tokens.append(blob[start:i])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    raster = np.frombuffer(blob[i + 1 :], dtype=np.uint8, count=width * height)
    pixels = raster.reshape(height, width).astype(np.float64) / 255.0
    return Image(width=width, height=height, pixels=pixels)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def _clip_near(tri_cam):
    """Sutherland-Hodgman clip of one camera-space triangle at the near plane."""
    out = []
    for i in range(3):
        a = tri_cam[i]
        b = tri_cam[(i + 1) % 3]
        a_in = a[2] >= NEAR_PLANE
        b_in = b[2] >= NEAR_PLANE
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (NEAR_PLANE - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return out


def render_buffers(triangles, kinds, pose, cam):
    """Rasterize posed triangles; returns (shade, depth, ids) buffers.

    ``shade`` is the grayscale image (background 1.0), ``depth`` the camera
    z distance (+inf where empty), ``ids`` the per-pixel triangle kind
    (0 background). Deterministic: triangles are painted in order and only a
    strictly smaller depth overwrites a pixel.
    """
    width, height = cam.width, cam.height
    shade = np.full((height, width), BACKGROUND)
    depth = np.full((height, width), np.inf)
    ids = np.zeros((height, width), dtype=np.uint8)
    if len(triangles) == 0:
        return shade, depth, ids

    world = sc.transform_triangles(pose, triangles)
    right, up, fwd = cam.basis()
    rel = world.reshape(-1, 3) - cam.position
    cam_pts = np.stack([rel @ right, rel @ up, rel @ fwd], axis=1).reshape(-1, 3, 3)

    normals = sc.triangle_normals(world)
    centers = world.mean(axis=1)
    views = cam.position - centers
    views = views / np.maximum(np.linalg.norm(views, axis=1, keepdims=True), 1e-300)
    facing = np.abs(np.sum(normals * views, axis=1))
    shades = np.where(
        kinds == sc.GRIPPER_KIND,
        GRIPPER_SHADE,
        OBJECT_SHADE_BASE + OBJECT_SHADE_SPAN * facing,
    )

    tan_half = math.tan(cam.fov_y / 2.0)
    aspect = width / height

    for t in range(len(cam_pts)):
        poly = _clip_near(cam_pts[t])
        if len(poly) < 3:
            continue
        poly = np.asarray(poly)
        z = poly[:, 2]
        px = (poly[:, 0] / (z * tan_half * aspect) + 1.0) * (width / 2.0)
        py = (1.0 - poly[:, 1] / (z * tan_half)) * (height / 2.0)
        inv_z = 1.0 / z
        for k in range(1, len(poly) - 1):
            _fill_triangle(
                shade, depth, ids,
                (px[0], px[k], px[k + 1]),
                (py[0], py[k], py[k + 1]),
                (inv_z[0], inv_z[k], inv_z[k + 1]),
                shades[t], kinds[t],
            )
    return shade, depth, ids


def _fill_triangle(shade, depth, ids, px, py, inv_z, value, kind):
    height, width = shade.shape
    x0, x1, x2 = px
    y0, y1, y2 = py
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if abs(area) < 1e-14:
        return
    lo_x = max(0, int(math.ceil(min(px) - 0.5)))
    hi_x = min(width - 1, int(math.floor(max(px) - 0.5)))
    lo_y = max(0, int(math.ceil(min(py) - 0.5)))
    hi_y = min(height - 1, int(math.floor(max(py) - 0.5)))
    if lo_x > hi_x or lo_y > hi_y:
        return
    xs = np.arange(lo_x, hi_x + 1) + 0.5
    ys = (np.arange(lo_y, hi_y + 1) + 0.5)[:, None]
    # barycentric weights from edge functions, normalized by the signed area
    w0 = ((x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)) / area
    w1 = ((x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
    if not inside.any():
        return
    z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2])
    region = (slice(lo_y, hi_y + 1), slice(lo_x, hi_x + 1))
    win = inside & (z < depth[region])
    if not win.any():
        return
    depth[region] = np.where(win, z, depth[region])
    shade[region] = np.where(win, value, shade[region])
    ids[region][win] = kind


def rasterize(scene, object_pose, cam):
    """Render a posed scene to a grayscale image."""
    shade, _, _ = render_buffers(scene.triangles, scene.kinds, object_pose, cam)
    return Image(width=cam.width, height=cam.height, pixels=shade)


def rasterize_with_ids(scene, object_pose, cam):
    """Render and also return the per-pixel kind buffer (0 = background)."""
    shade, _, ids = render_buffers(scene.triangles, scene.kinds, object_pose, cam)
    return Image(width=cam.width, height=cam.height, pixels=shade), ids


# ---------------------------------------------------------------------------
# Image sets
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ManifestRecord:
    object_id: int
    pose: sc.Pose
    split: str
    path: str  # relative to the manifest directory


@dataclass(eq=False)
class DatasetManifest:
    mode: str  # "robot" | "objects"
    seed: int
    records: list
    root: str = "."

    def split_records(self, split):
        return [r for r in self.records if r.split == split]

    def object_ids(self):
        return sorted({r.object_id for r in self.records})

    def image_path(self, record):
        return os.path.join(self.root, record.path)


def split_counts(n_poses):
    """80/10/10 split sizes; remainders favor the training split."""
    n_val = n_poses // 10
    n_test = n_poses // 10
    return n_poses - n_val - n_test, n_val, n_test


def _split_of_index(index, n_train, n_val):
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def save_manifest(manifest, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# nbvlab image-set manifest\n")
        fh.write(f"# mode = {manifest.mode}\n")
        fh.write(f"# seed = {manifest.seed}\n")
        for r in manifest.records:
            pose = " ".join(format(v, ".17g") for v in r.pose.vec7())
            fh.write(f"{r.object_id} {pose} {r.split} {r.path}\n")


def load_manifest(path):
    mode, seed, records = "objects", 0, []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, _, value = line.lstrip("# ").partition("=")
                    key, value = key.strip(), value.strip()
                    if key == "mode":
                        mode = value
                    elif key == "seed":
                        seed = int(value)
                continue
            parts = line.split()
            if len(parts) != 10:
                raise ValueError(f"{path}: malformed manifest record: {line!r}")
            records.append(
                ManifestRecord(
                    object_id=int(parts[0]),
                    pose=sc.Pose.from_vec7([float(v) for v in parts[1:8]]),
                    split=parts[8],
                    path=parts[9],
                )
            )
    return DatasetManifest(mode=mode, seed=seed, records=records, root=os.path.dirname(path) or ".")


def generate_image_set(objects, mode, n_poses, cam, seed, out_dir,
                       box=None, gripper=None):
    """Render one image per (object, pose) and write a split manifest.

    The pose list depends only on ``seed`` and the workspace box, so robot
    and object-only sets generated with the same seed share identical poses.
    Splits are assigned by pose index (80/10/10).
    """
    if n_poses < 10:
        raise ValueError("need at least 10 poses to populate all three splits")
    if mode not in ("robot", "objects"):
        raise ValueError(f"unknown image-set mode {mode!r}")
    box = box if box is not None else sc.default_workspace()
    if mode == "robot" and gripper is None:
        gripper = sc.default_gripper()

    specs = [obj if isinstance(obj, sc.ObjectSpec) else sc.object_spec(obj) for obj in objects]
    rng = np.random.default_rng(seed)
    poses = [sc.sample_random_pose(rng, box) for _ in range(n_poses)]
    n_train, n_val, _ = split_counts(n_poses)

    os.makedirs(out_dir, exist_ok=True)
    records = []
    for spec in specs:
        mesh = sc.build_object(spec)
        model = sc.attach_gripper(mesh, gripper if mode == "robot" else None)
        obj_dir = f"obj{spec.object_id:02d}"
        os.makedirs(os.path.join(out_dir, obj_dir), exist_ok=True)
        for idx, pose in enumerate(poses):
            image = rasterize(model, pose, cam)
            rel = os.path.join(obj_dir, f"pose{idx:05d}.pgm")
            write_pgm(image, os.path.join(out_dir, rel))
            records.append(
                ManifestRecord(
                    object_id=spec.object_id,
                    pose=pose,
                    split=_split_of_index(idx, n_train, n_val),
                    path=rel,
                )
            )
    manifest = DatasetManifest(mode=mode, seed=seed, records=records, root=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    return manifest


# ---------------------------------------------------------------------------
# Self-occlusion
# ---------------------------------------------------------------------------

OCCLUSION_SAMPLES = 20000
OCCLUSION_RESOLUTION = 384
OCCLUSION_SAMPLE_SEED = 0xB10C
# Depth comparison bias: relative slack plus a slope-scaled footprint term,
# tuned so a convex body measures 0 while real occluders (>= one cell deep)
# stay detected. Samples on grazing faces are excluded from the facing set.
OCCLUSION_REL_BIAS = 0.01
OCCLUSION_FOOTPRINT_BIAS = 3.0
FACING_EPS = 0.03


def _bounding_sphere(mesh):
    verts = mesh.triangles.reshape(-1, 3)
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    radius = float(np.linalg.norm(verts - center, axis=1).max())
    return center, radius


def surface_samples(mesh, n_samples=OCCLUSION_SAMPLES, seed=OCCLUSION_SAMPLE_SEED):
    """Area-weighted uniform samples on the mesh surface, with face normals."""
    rng = np.random.default_rng(seed)
    areas = sc.triangle_areas(mesh.triangles)
    tri_idx = rng.choice(len(areas), size=n_samples, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n_samples))
    r2 = rng.random(n_samples)
    tris = mesh.triangles[tri_idx]
    points = (
        (1.0 - r1)[:, None] * tris[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tris[:, 1]
        + (r1 * r2)[:, None] * tris[:, 2]
    )
    normals = sc.triangle_normals(mesh.triangles)[tri_idx]
    return points, normals


def _occlusion_camera(center, radius, viewpoint, resolution):
    fwd = center - viewpoint
    dist = np.linalg.norm(fwd)
    fwd = fwd / dist
    up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    fov = 2.0 * math.asin(min(0.999, radius / dist)) * 1.1 + 1e-3
    return Camera(
        position=viewpoint, forward=fwd, up=up,
        fov_y=min(fov, math.pi * 0.9), width=resolution, height=resolution,
    )


def _occluded_fraction(mesh, viewpoint, points, normals, resolution):
    center, radius = _bounding_sphere(mesh)
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    if np.linalg.norm(viewpoint - center) <= radius:
        raise ValueError("viewpoint must lie outside the mesh bounding sphere")
    cam = _occlusion_camera(center, radius, viewpoint, resolution)
    kinds = np.full(len(mesh.triangles), sc.OBJECT_KIND, dtype=np.uint8)
    _, depth, _ = render_buffers(mesh.triangles, kinds, sc.Pose.identity(), cam)

    to_cam = viewpoint - points
    dist = np.linalg.norm(to_cam, axis=1)
    facing = np.sum(normals * to_cam, axis=1) / np.maximum(dist, 1e-300) > FACING_EPS
    if not facing.any():
        raise ValueError("no surface samples face the viewpoint")
    pts = points[facing]

    right, up, fwd = cam.basis()
    rel = pts - cam.position
    z = rel @ fwd
    tan_half = math.tan(cam.fov_y / 2.0)
    px = ((rel @ right) / (z * tan_half) + 1.0) * (cam.width / 2.0)
    py = (1.0 - (rel @ up) / (z * tan_half)) * (cam.height / 2.0)
    ix = np.clip(px.astype(np.int64), 0, cam.width - 1)
    iy = np.clip(py.astype(np.int64), 0, cam.height - 1)
    buffer_z = depth[iy, ix]
    footprint = 2.0 * tan_half * z / cam.height
    bias = OCCLUSION_REL_BIAS * z + OCCLUSION_FOOTPRINT_BIAS * footprint
    occluded = z > buffer_z + bias
    return float(np.count_nonzero(occluded)) / float(len(pts))


def self_occlusion(mesh, viewpoint, n_samples=OCCLUSION_SAMPLES,
                   resolution=OCCLUSION_RESOLUTION, seed=OCCLUSION_SAMPLE_SEED):
    """Fraction of camera-facing surface hidden by the object itself.

    Surface points are sampled uniformly by area; a point counts as occluded
    when its depth exceeds the z-buffer value at its pixel by more than the
    acne bias. The result lies in [0, 1].
    """
    points, normals = surface_samples(mesh, n_samples, seed)
    return _occluded_fraction(mesh, viewpoint, points, normals, resolution)


def fibonacci_sphere(n_views):
    """n points close to evenly distributed on the unit sphere."""
    i = np.arange(n_views)
    z = 1.0 - (2.0 * i + 1.0) / n_views
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def octant_of(directions):
    """Sphere octant index 1..8 from coordinate signs (x fastest)."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    return (
        (d[:, 0] < 0).astype(np.int64)
        + 2 * (d[:, 1] < 0).astype(np.int64)
        + 4 * (d[:, 2] < 0).astype(np.int64)
        + 1
    )


@dataclass(eq=False)
class OcclusionReport:
    """Per-viewpoint self-occlusion with octant aggregation."""

    viewpoints: np.ndarray  # (v, 3)
    ratios: np.ndarray  # (v,)
    octants: np.ndarray  # (v,) in 1..8
    octant_means: np.ndarray  # (8,)
    octant_ci95: np.ndarray  # (8,) half-widths

    @property
    def mean_ratio(self):
        return float(self.ratios.mean())


def occlusion_sweep(mesh, n_views, radius_scale=2.5, n_samples=OCCLUSION_SAMPLES,
                    resolution=OCCLUSION_RESOLUTION, seed=OCCLUSION_SAMPLE_SEED):
    """Self-occlusion from viewpoints evenly spread on a sphere (Fibonacci)."""
    if n_views < 8:
        raise ValueError("need at least 8 views to cover all octants")
    center, radius = _bounding_sphere(mesh)
    directions = fibonacci_sphere(n_views)
    viewpoints = center + directions * (radius * radius_scale)
    points, normals = surface_samples(mesh, n_samples, seed)
    ratios = np.array(
        [_occluded_fraction(mesh, vp, points, normals, resolution) for vp in viewpoints]
    )
    octants = octant_of(directions)
    means = np.zeros(8)
    ci = np.zeros(8)
    for o in range(1, 9):
        vals = ratios[octants == o]
        if len(vals):
            means[o - 1] = vals.mean()
        if len(vals) > 1:
            ci[o - 1] = 1.96 * vals.std(ddof=1) / math.sqrt(len(vals))
    return OcclusionReport(
        viewpoints=viewpoints, ratios=ratios, octants=octants,
        octant_means=means, octant_ci95=ci,
    )


def save_occlusion_report(report, path):
    """CSV: view_index, x, y, z, octant, ratio."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("view_index,x,y,z,octant,ratio\n")
        for i in range(len(report.ratios)):
            x, y, z = report.viewpoints[i]
            fh.write(
                f"{i},{x:.17g},{y:.17g},{z:.17g},"
                f"{int(report.octants[i])},{report.ratios[i]:.17g}\n"
            )
