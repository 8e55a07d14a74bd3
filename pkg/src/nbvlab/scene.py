"""Block objects, the gripper occluder, poses, and the reachable workspace.

Geometry is plain float64 numpy throughout: a mesh is an ``(n, 3, 3)`` array
of triangles (triangle, vertex, xyz) in meters. Objects are built from a flat
base plus a chain of arm cuboids laid out on a 0.02 m cell grid; the chain
layout is derived deterministically from the object id, so the same id always
yields byte-identical geometry. Complexity level ``k`` counts the base plus
the ``k - 1`` arm cuboids.

Everything here is a pure function over value types; RNG state is always
caller-owned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

K_MAX = 18
CELL = 0.02  # grid pitch (m); arm cuboids are 1x1x3 cells, the base is 3x3x1

OBJECT_KIND = 1
GRIPPER_KIND = 2

# Face / direction indices: +x, -x, +y, -y, +z, -z
AXIS_DIRS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z) and poses
# ---------------------------------------------------------------------------

def quat_normalize(q):
    """Return q scaled to unit norm. Raises for (near-)zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_rotate(q, points):
    """Rotate an (..., 3) array of points by a unit quaternion."""
    return np.asarray(points, dtype=np.float64) @ quat_to_matrix(q).T


def random_quaternion(rng):
    """Uniform random rotation via four normalized standard Gaussians."""
    while True:
        q = rng.standard_normal(4)
        n = np.linalg.norm(q)
        if n > 1e-12:
            return q / n


@dataclass(eq=False)
class Pose:
    """6-DOF pose: position in meters plus a (w, x, y, z) quaternion."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.array(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.array(self.orientation, dtype=np.float64).reshape(4)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_vec7(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).reshape(7)
        return cls(vec[:3], vec[3:])

    def vec7(self):
        return np.concatenate([self.position, self.orientation])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.orientation)))


def transform_points(pose, points):
    """Apply a pose (rotate, then translate) to an (..., 3) point array."""
    return quat_rotate(pose.orientation, points) + pose.position


def transform_triangles(pose, triangles):
    tris = np.asarray(triangles, dtype=np.float64)
    return transform_points(pose, tris.reshape(-1, 3)).reshape(tris.shape)


def compose_pose(outer, inner):
    """Pose of ``inner`` expressed through ``outer`` (outer applied last)."""
    return Pose(
        transform_points(outer, inner.position[None, :])[0],
        quat_multiply(outer.orientation, inner.orientation),
    )


# ---------------------------------------------------------------------------
# Workspace
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class WorkspaceBox:
    """Axis-aligned reachable region, contained in a reach sphere at origin."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    max_reach: float = 0.9

    def __post_init__(self):
        self.min_corner = np.array(self.min_corner, dtype=np.float64).reshape(3)
        self.max_corner = np.array(self.max_corner, dtype=np.float64).reshape(3)
        self.max_reach = float(self.max_reach)
        if not np.all(self.min_corner < self.max_corner):
            raise ValueError("workspace box needs min_corner < max_corner componentwise")
        far = np.maximum(np.abs(self.min_corner), np.abs(self.max_corner))
        if np.linalg.norm(far) > self.max_reach:
            raise ValueError("workspace box reaches outside the arm's reach sphere")

    @property
    def center(self):
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def half_extent(self):
        return 0.5 * (self.max_corner - self.min_corner)


def default_workspace():
    """The box in front of the camera that the end-effector may visit."""
    return WorkspaceBox(
        min_corner=np.array([-0.20, -0.35, 0.33]),
        max_corner=np.array([0.20, -0.05, 0.73]),
        max_reach=0.9,
    )


def sample_random_pose(rng, box):
    """Position uniform in the box, orientation uniform over rotations."""
    u = rng.random(3)
    position = box.min_corner + u * (box.max_corner - box.min_corner)
    return Pose(position, random_quaternion(rng))


def clamp_to_box(requested, box):
    """Componentwise position clamp; quaternion renormalized."""
    if not requested.is_finite():
        raise ValueError("cannot clamp a non-finite pose")
    position = np.clip(requested.position, box.min_corner, box.max_corner)
    return Pose(position, quat_normalize(requested.orientation))


def clamp_to_reachable(requested, box):
    """Clamp into the box, then pull inside the reach sphere if needed.

    Positions outside the reach sphere are projected radially onto it and
    re-clamped, so the result is always inside the box. Idempotent.
    """
    if not requested.is_finite():
        raise ValueError("cannot clamp a non-finite pose")
    position = np.clip(requested.position, box.min_corner, box.max_corner)
    radius = float(np.linalg.norm(position))
    if radius > box.max_reach:
        position = position * (box.max_reach / radius)
        position = np.clip(position, box.min_corner, box.max_corner)
    return Pose(position, quat_normalize(requested.orientation))


# ---------------------------------------------------------------------------
# Triangle helpers
# ---------------------------------------------------------------------------

def triangle_normals(triangles):
    """Unit normals of an (n, 3, 3) triangle array (zero for degenerates)."""
    tris = np.asarray(triangles, dtype=np.float64)
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.where(length > 1e-30, n / np.maximum(length, 1e-300), 0.0)


def triangle_areas(triangles):
    tris = np.asarray(triangles, dtype=np.float64)
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    return 0.5 * np.linalg.norm(n, axis=1)


def cuboid_triangles(lo, hi):
    """12 triangles of an axis-aligned cuboid with outward-facing winding."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    tris = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            corner = np.zeros((4, 3))
            corner[:, axis] = hi[axis] if sign > 0 else lo[axis]
            # walk the face CCW as seen from outside: (u, v) order flips with sign
            steps = [(0, 0), (1, 0), (1, 1), (0, 1)] if sign > 0 else [(0, 0), (0, 1), (1, 1), (1, 0)]
            for i, (su, sv) in enumerate(steps):
                corner[i, u] = hi[u] if su else lo[u]
                corner[i, v] = hi[v] if sv else lo[v]
            tris.append([corner[0], corner[1], corner[2]])
            tris.append([corner[0], corner[2], corner[3]])
    return np.array(tris)


# ---------------------------------------------------------------------------
# Block objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    """Recipe for one block object of complexity ``object_id``.

    ``attachment_plan`` holds one ``(face_index, orientation_index)`` pair per
    arm cuboid: the face of the previously placed element that the cuboid
    touches, and the direction its long axis grows in. Both indices address
    ``AXIS_DIRS``. The plan is a pure function of the id.
    """

    object_id: int
    cuboid_count: int
    attachment_plan: tuple = field(default_factory=tuple)

    @property
    def complexity(self):
        return self.cuboid_count + 1


def _plan_cells(plan):
    """Cells occupied by each arm cuboid, walking the plan from the base top."""
    cursor = np.array([0, 0, 0], dtype=np.int64)
    cuboids = []
    for face, orient in plan:
        start = cursor + AXIS_DIRS[face]
        cells = [start + AXIS_DIRS[orient] * step for step in range(3)]
        cuboids.append(cells)
        cursor = cells[-1]
    return cuboids


def object_spec(object_id, k_max=K_MAX):
    """Derive the deterministic attachment plan for one object id."""
    if not 1 <= object_id <= k_max:
        raise ValueError(f"object id {object_id} outside [1, {k_max}]")
    rng = np.random.default_rng(object_id)
    occupied = {(dx, dy, 0) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
    cursor = np.array([0, 0, 0], dtype=np.int64)
    plan = []
    for i in range(object_id - 1):
        faces = (4,) if i == 0 else range(len(AXIS_DIRS))  # first cuboid leaves the base top
        valid = []
        for face in faces:
            start = cursor + AXIS_DIRS[face]
            for orient in range(len(AXIS_DIRS)):
                cells = [tuple(start + AXIS_DIRS[orient] * step) for step in range(3)]
                if all(c not in occupied for c in cells):
                    valid.append((face, orient, cells))
        if not valid:
            raise RuntimeError(f"object {object_id}: chain walked itself into a corner")
        face, orient, cells = valid[rng.integers(len(valid))]
        plan.append((face, orient))
        occupied.update(cells)
        cursor = np.array(cells[-1], dtype=np.int64)
    return ObjectSpec(object_id=object_id, cuboid_count=object_id - 1, attachment_plan=tuple(plan))


@dataclass(eq=False)
class ObjectMesh:
    """Triangle soup of one block object, base centered at the frame origin."""

    triangles: np.ndarray  # (n, 3, 3)
    complexity: int
    surface_area: float

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.float64)
        if not np.all(np.isfinite(self.triangles)):
            raise ValueError("mesh has non-finite vertices")


def build_object(spec):
    """Base cuboid plus the arm chain described by the attachment plan."""
    if not 1 <= spec.complexity <= K_MAX:
        raise ValueError(f"complexity {spec.complexity} outside [1, {K_MAX}]")
    half = CELL / 2.0
    parts = [cuboid_triangles([-3 * half, -3 * half, -half], [3 * half, 3 * half, half])]
    for cells in _plan_cells(spec.attachment_plan):
        cells = np.array(cells, dtype=np.float64) * CELL
        parts.append(cuboid_triangles(cells.min(axis=0) - half, cells.max(axis=0) + half))
    triangles = np.concatenate(parts, axis=0)
    return ObjectMesh(
        triangles=triangles,
        complexity=spec.complexity,
        surface_area=float(triangle_areas(triangles).sum()),
    )


# ---------------------------------------------------------------------------
# Gripper and scene assembly
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GripperSpec:
    """Parallel-jaw occluder: a palm bridging two symmetric fingers.

    The gripper frame origin sits between the fingers where the object is
    held; ``grasp_offset`` is the object's pose in that frame and stays fixed
    across episodes.
    """

    palm_size: np.ndarray
    finger_size: np.ndarray
    finger_gap: float
    grasp_offset: Pose

    def __post_init__(self):
        self.palm_size = np.array(self.palm_size, dtype=np.float64).reshape(3)
        self.finger_size = np.array(self.finger_size, dtype=np.float64).reshape(3)
        self.finger_gap = float(self.finger_gap)
        if np.any(self.palm_size <= 0) or np.any(self.finger_size <= 0) or self.finger_gap <= 0:
            raise ValueError("gripper dimensions must be positive")


def default_gripper():
    return GripperSpec(
        palm_size=np.array([0.10, 0.04, 0.03]),
        finger_size=np.array([0.015, 0.04, 0.08]),
        finger_gap=0.063,
        grasp_offset=Pose.identity(),
    )


def gripper_triangles(g):
    """36 triangles (palm + two fingers) in the gripper frame."""
    fx, fy, fz = g.finger_size
    px, py, pz = g.palm_size
    inner = g.finger_gap / 2.0
    finger_top = fz / 2.0
    parts = [
        cuboid_triangles([-px / 2, -py / 2, finger_top], [px / 2, py / 2, finger_top + pz]),
        cuboid_triangles([inner, -fy / 2, -fz / 2], [inner + fx, fy / 2, fz / 2]),
        cuboid_triangles([-inner - fx, -fy / 2, -fz / 2], [-inner, fy / 2, fz / 2]),
    ]
    return np.concatenate(parts, axis=0)


@dataclass(eq=False)
class SceneModel:
    """Posable triangle set; ``kinds`` flags object vs gripper triangles."""

    triangles: np.ndarray  # (n, 3, 3) in the scene root frame
    kinds: np.ndarray  # (n,) uint8 of OBJECT_KIND / GRIPPER_KIND

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.float64)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8)
        if len(self.triangles) != len(self.kinds):
            raise ValueError("kinds length must match triangle count")

    @property
    def gripper_triangle_count(self):
        return int(np.sum(self.kinds == GRIPPER_KIND))


def attach_gripper(mesh, gripper):
    """Combine an object mesh with the gripper occluder into one scene.

    The scene root frame is the end-effector frame: the object sits at the
    grasp offset, the gripper at the origin. ``gripper=None`` yields the
    object-only scene (root frame = object frame, no gripper triangles).
    """
    if gripper is None:
        return SceneModel(
            triangles=mesh.triangles.copy(),
            kinds=np.full(len(mesh.triangles), OBJECT_KIND, dtype=np.uint8),
        )
    object_tris = transform_triangles(gripper.grasp_offset, mesh.triangles)
    grip_tris = gripper_triangles(gripper)
    return SceneModel(
        triangles=np.concatenate([object_tris, grip_tris], axis=0),
        kinds=np.concatenate(
            [
                np.full(len(object_tris), OBJECT_KIND, dtype=np.uint8),
                np.full(len(grip_tris), GRIPPER_KIND, dtype=np.uint8),
            ]
        ),
    )


# ---------------------------------------------------------------------------
# ASCII mesh files: one triangle per line, 9 floats
# ---------------------------------------------------------------------------

def save_mesh(mesh, path):
    with open(path, "w", encoding="ascii") as fh:
        for tri in mesh.triangles:
            fh.write(" ".join(format(v, ".17g") for v in tri.reshape(9)))
            fh.write("\n")


def load_mesh(path, complexity=0):
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            values = [float(tok) for tok in line.split()]
            if len(values) != 9:
                raise ValueError(f"{path}: expected 9 floats per line, got {len(values)}")
            rows.append(np.array(values).reshape(3, 3))
    triangles = np.array(rows).reshape(-1, 3, 3)
    return ObjectMesh(
        triangles=triangles,
        complexity=complexity,
        surface_area=float(triangle_areas(triangles).sum()),
    )
