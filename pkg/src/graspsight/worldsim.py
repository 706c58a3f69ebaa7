"""Planar grasping world: scenes, the analytic grasp rule, and the renderer.

World coordinates live in the unit square. The camera looks straight down and
the image spans the whole square, so a world point ``(x, y)`` lands in column
``x * R`` and row ``y * R`` (plus the per-scene camera jitter). The bin
interior is the square ``[bin_min, bin_max]^2``; its walls are a band of
``wall_thickness`` just outside it.

The gripper is parameterised by a :class:`GraspCommand`. Its fingers close
along the unit vector ``d = (-sin theta, cos theta)``; ``e = (cos theta,
sin theta)`` is the pad direction. Fingertip 1 sits at ``center + a/2 * d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage


class Vec2(NamedTuple):
    x: float
    y: float


class SceneDensityError(ValueError):
    """Raised when objects cannot be placed without overlap."""


@dataclass(frozen=True)
class WorldParams:
    bin_min: float = 0.1
    bin_max: float = 0.9
    wall_thickness: float = 0.04
    background: float = 0.1
    wall_intensity: float = 0.25
    n_objects_range: tuple[int, int] = (3, 8)
    disc_probability: float = 0.5
    size_range: tuple[float, float] = (0.02, 0.10)
    intensity_range: tuple[float, float] = (0.4, 0.9)
    jitter_max: float = 0.03
    min_gap: float = 0.005
    pad_half_length: float = 0.04
    aperture_range: tuple[float, float] = (0.04, 0.25)
    finger_thickness: float = 0.02
    crossbar_half_width: float = 0.008
    supersample: int = 4

    @property
    def a_max(self) -> float:
        return self.aperture_range[1]

    @property
    def bin_extent(self) -> float:
        return self.bin_max - self.bin_min

    def validate(self) -> None:
        lo, hi = self.n_objects_range
        if not 0 <= lo <= hi <= 8:
            raise ValueError(f"n_objects_range must satisfy 0 <= lo <= hi <= 8, got {self.n_objects_range}")
        if not 0.0 <= self.bin_min < self.bin_max <= 1.0:
            raise ValueError("bin must be a non-empty sub-square of [0, 1]")
        a_lo, a_hi = self.aperture_range
        if not 0.0 < a_lo <= a_hi:
            raise ValueError(f"aperture_range must be positive and ordered, got {self.aperture_range}")
        s_lo, s_hi = self.size_range
        if not 0.0 < s_lo <= s_hi:
            raise ValueError(f"size_range must be positive and ordered, got {self.size_range}")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")


@dataclass(frozen=True)
class ObjectInstance:
    """A disc (``half_w`` is the radius) or an oriented box."""

    kind: str
    center: Vec2
    half_w: float
    half_h: float = 0.0
    orientation: float = 0.0
    intensity: float = 0.6

    @classmethod
    def disc(cls, x: float, y: float, radius: float, intensity: float = 0.6) -> "ObjectInstance":
        return cls("disc", Vec2(x, y), radius, radius, 0.0, intensity)

    @classmethod
    def box(cls, x: float, y: float, half_w: float, half_h: float, orientation: float = 0.0,
            intensity: float = 0.6) -> "ObjectInstance":
        return cls("box", Vec2(x, y), half_w, half_h, orientation, intensity)

    @property
    def radius(self) -> float:
        return self.half_w

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        local = np.array([[-self.half_w, -self.half_h], [self.half_w, -self.half_h],
                          [self.half_w, self.half_h], [-self.half_w, self.half_h]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center)

    def bounding_radius(self) -> float:
        if self.kind == "disc":
            return self.half_w
        return math.hypot(self.half_w, self.half_h)

    def contains(self, px, py):
        """Strict interior membership; vectorised over array inputs."""
        dx = np.asarray(px) - self.center.x
        dy = np.asarray(py) - self.center.y
        if self.kind == "disc":
            return dx * dx + dy * dy < self.half_w * self.half_w
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) < self.half_w) & (np.abs(ly) < self.half_h)


@dataclass(frozen=True)
class Scene:
    objects: tuple[ObjectInstance, ...] = ()
    camera_jitter: Vec2 = Vec2(0.0, 0.0)


@dataclass(frozen=True)
class GraspCommand:
    x: float
    y: float
    theta: float
    aperture: float

    @property
    def axis(self) -> Vec2:
        """Closing direction, pointing from fingertip 2 to fingertip 1."""
        return Vec2(-math.sin(self.theta), math.cos(self.theta))

    @property
    def pad_direction(self) -> Vec2:
        return Vec2(math.cos(self.theta), math.sin(self.theta))


class Reason(str, Enum):
    MISS = "miss"
    COLLISION = "collision"
    MULTI_CONTACT = "multi_contact"
    OK = "ok"


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    grasped_index: Optional[int]
    reason: Reason
    # object whose pixels count for occlusion; None for misses
    target_index: Optional[int] = field(default=None, compare=False)
    extent: float = field(default=0.0, compare=False)


# --------------------------------------------------------------------------
# scene sampling


def _polygon_gap(p: np.ndarray, q: np.ndarray) -> float:
    """Distance between two convex polygons, or a negative number on overlap."""
    for poly in (p, q):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            normal = np.array([-edge[1], edge[0]])
            pa, pb = p @ normal, q @ normal
            if pa.max() < pb.min() or pb.max() < pa.min():
                break
        else:
            continue
        break
    else:
        return -1.0
    best = math.inf
    for a, b in ((p, q), (q, p)):
        for i in range(len(b)):
            s0, s1 = b[i], b[(i + 1) % len(b)]
            for v in a:
                best = min(best, _point_segment_distance(v, s0, s1))
    return best


def _point_segment_distance(v: np.ndarray, s0: np.ndarray, s1: np.ndarray) -> float:
    seg = s1 - s0
    t = float(np.clip((v - s0) @ seg / (seg @ seg), 0.0, 1.0))
    return float(np.hypot(*(v - s0 - t * seg)))


def _point_box_distance(x: float, y: float, box: ObjectInstance) -> float:
    c, s = math.cos(box.orientation), math.sin(box.orientation)
    dx, dy = x - box.center.x, y - box.center.y
    lx, ly = abs(c * dx + s * dy), abs(-s * dx + c * dy)
    ox, oy = max(lx - box.half_w, 0.0), max(ly - box.half_h, 0.0)
    if ox == 0.0 and oy == 0.0:
        return -min(box.half_w - lx, box.half_h - ly)
    return math.hypot(ox, oy)


def object_gap(a: ObjectInstance, b: ObjectInstance) -> float:
    """Euclidean gap between two shapes (negative when they overlap)."""
    if a.kind == "disc" and b.kind == "disc":
        return math.dist(a.center, b.center) - a.half_w - b.half_w
    if a.kind == "disc":
        return _point_box_distance(a.center.x, a.center.y, b) - a.half_w
    if b.kind == "disc":
        return _point_box_distance(b.center.x, b.center.y, a) - b.half_w
    return _polygon_gap(a.corners(), b.corners())


def inside_bin(obj: ObjectInstance, params: WorldParams) -> bool:
    if obj.kind == "disc":
        pts = np.array([[obj.center.x - obj.half_w, obj.center.y - obj.half_w],
                        [obj.center.x + obj.half_w, obj.center.y + obj.half_w]])
    else:
        pts = obj.corners()
    return bool(np.all(pts >= params.bin_min) and np.all(pts <= params.bin_max))


def _random_object(rng: np.random.Generator, params: WorldParams) -> ObjectInstance:
    lo, hi = params.size_range
    intensity = float(rng.uniform(*params.intensity_range))
    if rng.random() < params.disc_probability:
        r = float(rng.uniform(lo, hi))
        x, y = rng.uniform(params.bin_min + r, params.bin_max - r, size=2)
        return ObjectInstance.disc(float(x), float(y), r, intensity)
    hw, hh = (float(v) for v in rng.uniform(lo, hi, size=2))
    orient = float(rng.uniform(-math.pi / 2, math.pi / 2))
    x, y = rng.uniform(params.bin_min, params.bin_max, size=2)
    return ObjectInstance.box(float(x), float(y), hw, hh, orient, intensity)


def sample_scene(rng_seed: int, n_objects: int, params: WorldParams = WorldParams(),
                 max_rejections: int = 1000) -> Scene:
    """Place ``n_objects`` non-overlapping objects by rejection sampling."""
    if not 0 <= n_objects <= 8:
        raise ValueError(f"n_objects must be in [0, 8], got {n_objects}")
    rng = np.random.default_rng(rng_seed)
    jitter = Vec2(*(float(v) for v in rng.uniform(-params.jitter_max, params.jitter_max, size=2)))
    placed: list[ObjectInstance] = []
    for _ in range(n_objects):
        for _attempt in range(max_rejections):
            cand = _random_object(rng, params)
            if not inside_bin(cand, params):
                continue
            if all(object_gap(cand, o) >= params.min_gap for o in placed):
                placed.append(cand)
                break
        else:
            raise SceneDensityError(
                f"could not place object {len(placed) + 1} of {n_objects} after {max_rejections} rejections")
    return Scene(tuple(placed), jitter)


def sample_command(rng: np.random.Generator, params: WorldParams = WorldParams()) -> GraspCommand:
    """Uniform command over the bin; redraws until both fingertips are in frame."""
    while True:
        x, y = rng.uniform(params.bin_min, params.bin_max, size=2)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        aperture = rng.uniform(*params.aperture_range)
        c = GraspCommand(float(x), float(y), float(theta), float(aperture))
        f1, f2 = fingertips(c)
        if all(0.0 <= v <= 1.0 for v in (*f1, *f2)):
            return c


# --------------------------------------------------------------------------
# grasp rule


def fingertips(c: GraspCommand) -> tuple[Vec2, Vec2]:
    h = c.aperture / 2
    dx, dy = -math.sin(c.theta) * h, math.cos(c.theta) * h
    return Vec2(c.x + dx, c.y + dy), Vec2(c.x - dx, c.y - dy)


def _segment_interval(obj: ObjectInstance, p0: Vec2, p1: Vec2) -> Optional[tuple[float, float]]:
    """Parameter interval [t0, t1] of segment p0->p1 inside ``obj`` (closed shapes)."""
    vx, vy = p1.x - p0.x, p1.y - p0.y
    wx, wy = p0.x - obj.center.x, p0.y - obj.center.y
    if obj.kind == "disc":
        a = vx * vx + vy * vy
        b = 2 * (wx * vx + wy * vy)
        cc = wx * wx + wy * wy - obj.half_w ** 2
        disc = b * b - 4 * a * cc
        if disc <= 0:
            return None
        root = math.sqrt(disc)
        t0, t1 = (-b - root) / (2 * a), (-b + root) / (2 * a)
    else:
        c, s = math.cos(obj.orientation), math.sin(obj.orientation)
        ox, oy = c * wx + s * wy, -s * wx + c * wy
        dx, dy = c * vx + s * vy, -s * vx + c * vy
        t0, t1 = -math.inf, math.inf
        for o, d, h in ((ox, dx, obj.half_w), (oy, dy, obj.half_h)):
            if abs(d) < 1e-15:
                if abs(o) >= h:
                    return None
                continue
            ta, tb = (-h - o) / d, (h - o) / d
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
    t0, t1 = max(t0, 0.0), min(t1, 1.0)
    if t1 - t0 <= 0.0:
        return None
    return t0, t1


def grasp_outcome(scene: Scene, c: GraspCommand, params: WorldParams = WorldParams()) -> GraspOutcome:
    """Label a grasp: collision, then contacts along the closing segment, then pad offset."""
    f1, f2 = fingertips(c)
    for tip in (f1, f2):
        for i, obj in enumerate(scene.objects):
            if obj.contains(tip.x, tip.y):
                return GraspOutcome(False, None, Reason.COLLISION, target_index=i)
    hits = [(i, iv) for i, obj in enumerate(scene.objects)
            if (iv := _segment_interval(obj, f1, f2)) is not None]
    if not hits:
        return GraspOutcome(False, None, Reason.MISS)
    if len(hits) > 1:
        first = min(hits, key=lambda h: h[1][0])[0]
        return GraspOutcome(False, None, Reason.MULTI_CONTACT, target_index=first)
    i, (t0, t1) = hits[0]
    extent = (t1 - t0) * c.aperture
    if not 0.0 < extent <= c.aperture:
        return GraspOutcome(False, None, Reason.MISS)
    obj = scene.objects[i]
    e = c.pad_direction
    offset = abs((obj.center.x - c.x) * e.x + (obj.center.y - c.y) * e.y)
    if offset > params.pad_half_length:
        # the pads close on the rim and the part slips out
        return GraspOutcome(False, None, Reason.MISS, extent=extent)
    return GraspOutcome(True, i, Reason.OK, target_index=i, extent=extent)


# --------------------------------------------------------------------------
# rendering


def _pixel_window(xmin: float, xmax: float, ymin: float, ymax: float, resolution: int):
    c0 = max(int(math.floor(xmin * resolution)) - 1, 0)
    c1 = min(int(math.ceil(xmax * resolution)) + 1, resolution)
    r0 = max(int(math.floor(ymin * resolution)) - 1, 0)
    r1 = min(int(math.ceil(ymax * resolution)) + 1, resolution)
    return r0, r1, c0, c1


def _coverage(member, bbox, resolution: int, supersample: int, offset: Vec2) -> np.ndarray:
    """Fractional pixel coverage of a shape given as a membership predicate.

    ``offset`` is the camera shift: pixels sample world point ``p - offset``.
    Work is confined to the shape's bounding box.
    """
    cov = np.zeros((resolution, resolution))
    xmin, xmax, ymin, ymax = bbox
    r0, r1, c0, c1 = _pixel_window(xmin + offset.x, xmax + offset.x, ymin + offset.y, ymax + offset.y,
                                   resolution)
    if r0 >= r1 or c0 >= c1:
        return cov
    s = supersample
    sub = (np.arange(s) + 0.5) / s
    cols = ((np.arange(c0, c1)[:, None] + sub[None, :]).ravel()) / resolution - offset.x
    rows = ((np.arange(r0, r1)[:, None] + sub[None, :]).ravel()) / resolution - offset.y
    inside = member(cols[None, :], rows[:, None]).astype(np.float64)
    cov[r0:r1, c0:c1] = inside.reshape(r1 - r0, s, c1 - c0, s).mean(axis=(1, 3))
    return cov


def object_coverage(obj: ObjectInstance, resolution: int, supersample: int = 4,
                    offset: Vec2 = Vec2(0.0, 0.0)) -> np.ndarray:
    r = obj.bounding_radius()
    bbox = (obj.center.x - r, obj.center.x + r, obj.center.y - r, obj.center.y + r)
    return _coverage(obj.contains, bbox, resolution, supersample, offset)


def _gripper_member(c: GraspCommand, params: WorldParams):
    h = c.aperture / 2
    t = params.finger_thickness
    d, e = c.axis, c.pad_direction

    def member(px, py):
        rx, ry = px - c.x, py - c.y
        u = rx * d.x + ry * d.y
        v = rx * e.x + ry * e.y
        au, av = np.abs(u), np.abs(v)
        fingers = (au >= h) & (au <= h + t) & (av <= params.pad_half_length)
        bar = (au <= h + t) & (av <= params.crossbar_half_width)
        return fingers | bar

    return member


def gripper_coverage(c: GraspCommand, resolution: int, params: WorldParams = WorldParams(),
                     offset: Vec2 = Vec2(0.0, 0.0)) -> np.ndarray:
    reach = math.hypot(c.aperture / 2 + params.finger_thickness, params.pad_half_length)
    bbox = (c.x - reach, c.x + reach, c.y - reach, c.y + reach)
    return _coverage(_gripper_member(c, params), bbox, resolution, params.supersample, offset)


def _walls(resolution: int, params: WorldParams, offset: Vec2) -> np.ndarray:
    lo, hi, t = params.bin_min, params.bin_max, params.wall_thickness

    def member(px, py):
        outer = (px >= lo - t) & (px <= hi + t) & (py >= lo - t) & (py <= hi + t)
        inner = (px > lo) & (px < hi) & (py > lo) & (py < hi)
        return outer & ~inner

    return _coverage(member, (lo - t, hi + t, lo - t, hi + t), resolution, params.supersample, offset)


def render_before(scene: Scene, resolution: int = 64, params: WorldParams = WorldParams()) -> np.ndarray:
    """Grayscale ``(resolution, resolution)`` image of walls and objects, no gripper."""
    img = np.full((resolution, resolution), params.background)
    w = _walls(resolution, params, scene.camera_jitter)
    img = img * (1 - w) + params.wall_intensity * w
    for obj in scene.objects:
        cov = object_coverage(obj, resolution, params.supersample, scene.camera_jitter)
        img = img * (1 - cov) + obj.intensity * cov
    return img


def render_during(scene: Scene, c: GraspCommand, resolution: int = 64,
                  params: WorldParams = WorldParams()) -> np.ndarray:
    """``render_before`` with the open gripper composited on top at intensity 1."""
    img = render_before(scene, resolution, params)
    g = gripper_coverage(c, resolution, params, scene.camera_jitter)
    return img * (1 - g) + g


def occlusion_fraction(scene: Scene, c: GraspCommand, resolution: int = 64,
                       params: WorldParams = WorldParams()) -> float:
    """Share of the contacted object's rendered area hidden under the gripper sprite."""
    outcome = grasp_outcome(scene, c, params)
    if outcome.reason is Reason.MISS or outcome.target_index is None:
        return 0.0
    obj = scene.objects[outcome.target_index]
    o = object_coverage(obj, resolution, params.supersample, scene.camera_jitter)
    total = o.sum()
    if total <= 0:
        return 0.0
    g = gripper_coverage(c, resolution, params, scene.camera_jitter)
    return float(np.clip((o * g).sum() / total, 0.0, 1.0))


class Observation(NamedTuple):
    before: np.ndarray
    during: np.ndarray
    outcome: GraspOutcome
    occlusion: float


def observe(scene: Scene, c: GraspCommand, resolution: int = 64,
            params: WorldParams = WorldParams()) -> Observation:
    """Everything one recorded grasp needs, sharing the coverage rasters.

    Equivalent to calling ``render_before``, ``render_during``,
    ``grasp_outcome`` and ``occlusion_fraction`` separately.
    """
    jitter = scene.camera_jitter
    img = np.full((resolution, resolution), params.background)
    w = _walls(resolution, params, jitter)
    img = img * (1 - w) + params.wall_intensity * w
    covs = []
    for obj in scene.objects:
        cov = object_coverage(obj, resolution, params.supersample, jitter)
        covs.append(cov)
        img = img * (1 - cov) + obj.intensity * cov
    g = gripper_coverage(c, resolution, params, jitter)
    during = img * (1 - g) + g
    outcome = grasp_outcome(scene, c, params)
    occ = 0.0
    if outcome.reason is not Reason.MISS and outcome.target_index is not None:
        o = covs[outcome.target_index]
        if o.sum() > 0:
            occ = float(np.clip((o * g).sum() / o.sum(), 0.0, 1.0))
    return Observation(img, during, outcome, occ)


# --------------------------------------------------------------------------
# brute-force label oracle


def raster_grasp_oracle(scene: Scene, c: GraspCommand, resolution: int = 256,
                        params: WorldParams = WorldParams(), step: float = 0.25) -> bool:
    """Pixel-marching re-derivation of the grasp rule.

    The scene is rasterised (coverage, 4x supersampled) in the world frame and
    thresholded into connected components. Each fingertip marches towards the
    other in ``step``-pixel increments, reading bilinearly interpolated coverage.
    Success needs both fingers to start in free space, first touch the same
    component from opposite sides, and that component's centroid to lie within
    the pad half-length of the closing axis.
    """
    if resolution < 128:
        raise ValueError("raster oracle needs resolution >= 128")
    if not scene.objects:
        return False
    cov = np.zeros((resolution, resolution))
    for obj in scene.objects:
        cov = np.maximum(cov, object_coverage(obj, resolution, 4))
    labels, _ = ndimage.label(cov >= 0.5)

    def sample(px: float, py: float) -> tuple[float, int]:
        gx, gy = px * resolution - 0.5, py * resolution - 0.5
        j0, i0 = int(math.floor(gx)), int(math.floor(gy))
        fx, fy = gx - j0, gy - i0
        val, best, lab = 0.0, -1.0, 0
        for di, dj, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                            (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            i, j = i0 + di, j0 + dj
            if 0 <= i < resolution and 0 <= j < resolution:
                val += wgt * cov[i, j]
                if labels[i, j] and cov[i, j] * (wgt + 1e-9) > best:
                    best, lab = cov[i, j] * (wgt + 1e-9), int(labels[i, j])
        return val, lab

    f1, f2 = fingertips(c)
    length_px = c.aperture * resolution
    n_steps = int(math.floor(length_px / step))
    contacts = []
    for start, end in ((f1, f2), (f2, f1)):
        ux, uy = (end.x - start.x) / length_px, (end.y - start.y) / length_px
        hit = None
        for k in range(n_steps + 1):
            val, lab = sample(start.x + k * step * ux, start.y + k * step * uy)
            if val >= 0.5 and lab:
                if k == 0:
                    return False
                hit = (k * step, lab)
                break
        if hit is None:
            return False
        contacts.append(hit)
    (d1, lab1), (d2, lab2) = contacts
    if lab1 != lab2 or d1 + d2 >= length_px:
        return False
    mask = ndimage.binary_dilation(labels == lab1)
    weights = cov * mask
    rows, cols = np.indices(cov.shape)
    cx = ((cols + 0.5) * weights).sum() / weights.sum() / resolution
    cy = ((rows + 0.5) * weights).sum() / weights.sum() / resolution
    e = c.pad_direction
    offset = abs((cx - c.x) * e.x + (cy - c.y) * e.y)
    return offset <= params.pad_half_length


def mirror_scene(scene: Scene, params: WorldParams = WorldParams()) -> Scene:
    """Reflect a scene about the bin's vertical centre line."""
    s = params.bin_min + params.bin_max
    objs = tuple(replace(o, center=Vec2(s - o.center.x, o.center.y), orientation=-o.orientation)
                 for o in scene.objects)
    return Scene(objs, Vec2(-scene.camera_jitter.x, scene.camera_jitter.y))


def mirror_command(c: GraspCommand, params: WorldParams = WorldParams()) -> GraspCommand:
    theta = -c.theta
    if theta >= math.pi / 2:
        theta -= math.pi
    return GraspCommand(params.bin_min + params.bin_max - c.x, c.y, theta, c.aperture)


def rotate_about_center(scene: Scene, c: GraspCommand, quarter_turns: int,
                        params: WorldParams = WorldParams()) -> tuple[Scene, GraspCommand]:
    """Exact rotation by a multiple of pi/2 about the bin centre."""
    m = 0.5 * (params.bin_min + params.bin_max)
    k = quarter_turns % 4

    def rot(x: float, y: float) -> Vec2:
        dx, dy = x - m, y - m
        for _ in range(k):
            dx, dy = -dy, dx
        return Vec2(m + dx, m + dy)

    objs = tuple(replace(o, center=rot(*o.center), orientation=o.orientation + k * math.pi / 2)
                 for o in scene.objects)
    theta = (c.theta + k * math.pi / 2 + math.pi / 2) % math.pi - math.pi / 2
    return Scene(objs, scene.camera_jitter), GraspCommand(*rot(c.x, c.y), theta, c.aperture)
