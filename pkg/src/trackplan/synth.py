"""Synthetic rigid-body episodes with exact ground-truth tracks.

An episode is a short "video" of one object moving rigidly in front of a
fixed pinhole camera, plus a sparse static background. Tracks come straight
from the projection of the transformed first-frame points, so they are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import CameraIntrinsics, RigidTransform
from .seeding import child_seed, rng

SHAPES = ("box", "cylinder-shell", "planar-door", "handle-bar", "blob")
FAMILIES = ("translation-line", "rotation-about-scene-axis", "screw", "arc-pull", "pour-tilt")
SPLITS = ("train", "MG", "G", "CG", "TG")

OBJECT_INTENSITY = 1.0
BACKGROUND_INTENSITY = 0.35
EE_INTENSITY = 0.6
_KERNEL = np.outer([0.5, 1.0, 0.5], [0.5, 1.0, 0.5])


class DegenerateShape(ValueError):
    pass


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneSpec:
    object_shape: str
    shape_params: tuple
    n_object_points: int
    n_background_points: int = 0
    depth_range: tuple = (1.5, 3.0)
    seed: int = 0
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.default)
    margin_px: float = 48.0

    def __post_init__(self):
        if self.object_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.object_shape!r}")
        if self.n_object_points < 8:
            raise ValueError("n_object_points must be >= 8")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must satisfy 0 < min < max")


@dataclass
class Scene:
    points3d: np.ndarray  # (p, 3), object points first
    object_mask: np.ndarray  # (p,) bool
    center: np.ndarray  # object center, camera frame
    size: float  # object extent (largest dimension)

    @property
    def object_points(self):
        return self.points3d[self.object_mask]


def default_shape_params(shape):
    return {
        "box": (0.3, 0.25, 0.2),
        "cylinder-shell": (0.12, 0.3),
        "planar-door": (0.35, 0.4, 0.04),
        "handle-bar": (0.35, 0.02, 0.08),
        "blob": (0.15, 0.3),
    }[shape]


def instance_params(shape, instance_id, seed=0):
    """Shape parameters of a numbered object instance."""
    base = np.array(default_shape_params(shape))
    if instance_id == 0:
        return tuple(float(x) for x in base)
    g = rng(seed, "instance", shape, instance_id)
    return tuple(float(x) for x in base * g.uniform(0.7, 1.3, size=base.size))


def _box_surface(g, n, sx, sy, sz):
    half = np.array([sx, sy, sz]) / 2
    corners = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float) * half
    if n <= 8:
        return corners[:n]
    m = n - 8
    pts = g.uniform(-1, 1, size=(m, 3)) * half
    face = g.integers(0, 3, size=m)
    sign = np.where(g.random(m) < 0.5, -1.0, 1.0)
    pts[np.arange(m), face] = sign * half[face]
    return np.vstack([corners, pts])


def _shape_points(shape, params, n, g):
    if shape == "box":
        return _box_surface(g, n, *params)
    if shape == "planar-door":
        w, h, thick = params
        return _box_surface(g, n, w, h, thick)
    if shape == "cylinder-shell":
        r, h = params
        a = g.uniform(0, 2 * np.pi, n)
        y = g.uniform(-h / 2, h / 2, n)
        return np.stack([r * np.cos(a), y, r * np.sin(a)], axis=1)
    if shape == "handle-bar":
        length, radius, standoff = params
        n_bar = max(n - n // 3, 1)
        x = g.uniform(-length / 2, length / 2, n_bar)
        a = g.uniform(0, 2 * np.pi, n_bar)
        bar = np.stack([x, radius * np.cos(a), radius * np.sin(a) - standoff], axis=1)
        n_post = n - n_bar
        side = np.where(np.arange(n_post) % 2 == 0, -1.0, 1.0) * length * 0.45
        z = g.uniform(-standoff, 0.0, n_post)
        a = g.uniform(0, 2 * np.pi, n_post)
        posts = np.stack([side + radius * np.cos(a), radius * np.sin(a), z], axis=1)
        return np.vstack([bar, posts])
    if shape == "blob":
        r, bump = params
        v = g.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        k = g.normal(size=3)
        radial = r * (1.0 + bump * np.sin(3.0 * v @ k) * 0.5)
        return v * radial[:, None]
    raise ValueError(shape)


def _extent(pts):
    return float(np.max(np.ptp(pts, axis=0)))


def _non_coplanar(pts):
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[-1] > 1e-6 * s[0]


def sample_scene(spec: SceneSpec) -> Scene:
    """Object points (centered at a random in-frame location) + background."""
    K = spec.intrinsics
    g = np.random.default_rng(child_seed(spec.seed, "scene"))
    lo, hi = spec.depth_range
    for _ in range(100):
        local = _shape_points(spec.object_shape, spec.shape_params, spec.n_object_points, g)
        # the 8-point box keeps its corners exactly; otherwise apply a random yaw
        if not (spec.object_shape == "box" and spec.n_object_points == 8):
            local = local @ geo.rot_y(g.uniform(-0.6, 0.6)).T
        size = _extent(local)
        z = g.uniform(lo + size, max(lo + size, hi - size - 0.3 * (hi - lo)))
        uv = g.uniform([spec.margin_px, spec.margin_px],
                       [K.width - spec.margin_px, K.height - spec.margin_px])
        center = geo.backproject(K, uv, z)
        obj = local + center
        if not _non_coplanar(obj):
            continue
        if np.any(obj[:, 2] < lo) or np.any(obj[:, 2] > hi):
            continue
        if not np.all(K.in_frame(geo.project(K, obj))):
            continue
        nb = spec.n_background_points
        buv = g.uniform([0, 0], [K.width, K.height], size=(nb, 2))
        bz = g.uniform(lo + 0.5 * (hi - lo), hi, size=nb)
        bg = geo.backproject(K, buv, bz) if nb else np.zeros((0, 3))
        pts = np.vstack([obj, bg])
        mask = np.zeros(len(pts), dtype=bool)
        mask[: len(obj)] = True
        return Scene(pts, mask, center, size)
    raise DegenerateShape(f"could not sample a valid {spec.object_shape} after 100 attempts")


# ---------------------------------------------------------------- motion


@dataclass(frozen=True)
class MotionFamily:
    """A motion kind with parameter ranges ``name -> (lo, hi)``."""

    kind: str
    params: dict = field(default_factory=dict)
    step_bound: float = 0.25

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown motion family {self.kind!r}")

    @classmethod
    def default(cls, kind, scale=1.0, step_bound=0.25, **overrides):
        """Default amplitude ranges, multiplied by ``scale``."""
        ranges = {
            "translation-line": {"distance": (0.12, 0.25)},
            "rotation-about-scene-axis": {"angle": (np.radians(30), np.radians(70))},
            "screw": {"angle": (np.radians(25), np.radians(60)), "distance": (0.04, 0.12)},
            "arc-pull": {"distance": (0.12, 0.25), "curvature": (0.2, 0.5)},
            "pour-tilt": {"angle": (np.radians(30), np.radians(65)), "lift": (0.04, 0.1)},
        }[kind]
        cap = {"angle": np.radians(150), "curvature": np.inf}
        ranges = {k: (min(lo * scale, cap.get(k, np.inf)), min(hi * scale, cap.get(k, np.inf)))
                  if k != "curvature" else (lo, hi) for k, (lo, hi) in ranges.items()}
        ranges.update(overrides)
        return cls(kind, ranges, step_bound)


def _draw(g, rng_range):
    lo, hi = rng_range
    return float(lo) if lo == hi else float(g.uniform(lo, hi))


def _unit(v):
    return v / np.linalg.norm(v)


def _about_pivot(R, pivot):
    return RigidTransform(R, pivot - R @ pivot)


def _motion_fn(family: MotionFamily, g, center, size):
    """Returns ``f(s, amp) -> RigidTransform`` for s in [0, 1]."""
    p = family.params
    kind = family.kind
    if kind == "translation-line":
        d = _unit(np.array([g.normal(), g.normal(), 0.3 * g.normal()]))
        dist = _draw(g, p["distance"])
        return lambda s, a: RigidTransform(np.eye(3), s * a * dist * d)
    if kind == "rotation-about-scene-axis":
        # hinge along one camera axis, offset to the object's edge
        which = int(g.integers(3))
        axis = np.eye(3)[which]
        side = np.eye(3)[(which + 1 + int(g.integers(2))) % 3]
        pivot = center + (1 if g.random() < 0.5 else -1) * 0.5 * size * side
        ang = _draw(g, p["angle"]) * (1 if g.random() < 0.5 else -1)
        return lambda s, a: _about_pivot(geo.so3_exp(s * a * ang * axis), pivot)
    if kind == "screw":
        axis = _unit(g.normal(size=3))
        ang = _draw(g, p["angle"]) * (1 if g.random() < 0.5 else -1)
        dist = _draw(g, p["distance"])

        def f(s, a):
            T = _about_pivot(geo.so3_exp(s * a * ang * axis), center)
            return RigidTransform(T.rotation, T.translation + s * a * dist * axis)
        return f
    if kind == "arc-pull":
        d1 = _unit(np.array([0.3 * g.normal(), 0.3 * g.normal(), -1.0]))
        d2 = _unit(np.cross(d1, [0.0, 1.0, 0.0]))
        dist = _draw(g, p["distance"])
        curv = _draw(g, p["curvature"]) * (1 if g.random() < 0.5 else -1)
        return lambda s, a: RigidTransform(np.eye(3), a * dist * (s * d1 + curv * s * s * d2))
    if kind == "pour-tilt":
        axis = np.array([0.0, 0.0, 1.0]) if g.random() < 0.5 else np.array([1.0, 0.0, 0.0])
        pivot = center + np.array([0.0, -0.5 * size, 0.0])
        ang = _draw(g, p["angle"]) * (1 if g.random() < 0.5 else -1)
        lift = _draw(g, p["lift"])

        def f(s, a):
            T = _about_pivot(geo.so3_exp(s * a * ang * axis), pivot)
            return RigidTransform(T.rotation, T.translation + np.array([0.0, -s * a * lift, 0.0]))
        return f
    raise ValueError(kind)


def max_step_twist(transforms):
    worst = 0.0
    for a, b in zip(transforms[:-1], transforms[1:]):
        worst = max(worst, float(np.linalg.norm(geo.log_map(geo.compose(a.inverse(), b)))))
    return worst


def sample_motion(family: MotionFamily, H: int, seed: int, center=(0.0, 0.0, 2.0), size=0.3):
    """H transforms relative to the first frame; the first is the identity.

    If the sampled amplitude violates the family's step bound the whole
    trajectory is scaled down until it holds.
    """
    if H < 2:
        raise ValueError("H must be >= 2")
    g = np.random.default_rng(child_seed(seed, "motion"))
    f = _motion_fn(family, g, np.asarray(center, float), float(size))
    s = np.arange(H) / (H - 1)
    amp = 1.0
    for _ in range(20):
        traj = [f(si, amp) for si in s]
        worst = max_step_twist(traj)
        if worst <= family.step_bound:
            return traj
        amp *= 0.999 * family.step_bound / worst
    return traj


# ---------------------------------------------------------------- tracks


def render_tracks(points3d, transforms, K: CameraIntrinsics, object_mask=None):
    """Project every point at every step.

    Returns ``(tracks, out_of_frame)`` with shapes (p, H, 2) and (p, H).
    Background points (``object_mask == False``) stay at their first-frame
    projection.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    p, H = len(pts), len(transforms)
    if object_mask is None:
        object_mask = np.ones(p, dtype=bool)
    tracks = np.empty((p, H, 2))
    bg0 = geo.project(K, pts[~object_mask])
    obj = pts[object_mask]
    for t, T in enumerate(transforms):
        tracks[object_mask, t] = geo.project(K, geo.apply(T, obj))
        tracks[~object_mask, t] = bg0
    return tracks, ~K.in_frame(tracks)


def corrupt_tracks(tracks, noise_sigma, outlier_fraction, seed, width=256, height=256):
    """Gaussian jitter on inliers; uniform in-frame positions for outliers.

    Returns ``(corrupted, outlier_mask)``.
    """
    if not 0 <= outlier_fraction < 0.5:
        raise ValueError("outlier_fraction must be in [0, 0.5)")
    tracks = np.asarray(tracks, dtype=np.float64)
    p, H, _ = tracks.shape
    g = np.random.default_rng(child_seed(seed, "corrupt"))
    n_out = int(round(outlier_fraction * p))
    outliers = np.zeros(p, dtype=bool)
    outliers[g.choice(p, size=n_out, replace=False)] = True
    noise = g.normal(0.0, 1.0, size=tracks.shape)
    uniform = g.uniform([0.0, 0.0], [width, height], size=tracks.shape)
    out = tracks.copy()
    if noise_sigma > 0:
        out[~outliers] += noise_sigma * noise[~outliers]
    out[outliers] = uniform[outliers]
    return out, outliers


def rasterize(points2d, resolution=64, image_size=(256, 256), intensity=None):
    """Splat points into an r x r grayscale grid with a fixed 3x3 kernel."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    raster = np.zeros((resolution, resolution))
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if intensity is None:
        intensity = np.ones(len(pts))
    intensity = np.broadcast_to(np.asarray(intensity, dtype=np.float64), (len(pts),))
    W, Hh = image_size
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < W) & (pts[:, 1] >= 0) & (pts[:, 1] < Hh)
    col = np.floor(pts[ok, 0] * resolution / W).astype(int)
    row = np.floor(pts[ok, 1] * resolution / Hh).astype(int)
    w = intensity[ok]
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = row + dr, col + dc
            inside = (r >= 0) & (r < resolution) & (c >= 0) & (c < resolution)
            np.add.at(raster, (r[inside], c[inside]), _KERNEL[dr + 1, dc + 1] * w[inside])
    return np.clip(raster, 0.0, 1.0)


def scene_raster(points2d, object_mask, resolution, K, extra=None):
    """Raster of a scene state; ``extra`` is an optional (uv, intensity) pair."""
    inten = np.where(object_mask, OBJECT_INTENSITY, BACKGROUND_INTENSITY)
    pts = np.asarray(points2d)
    if extra is not None:
        pts = np.vstack([pts, np.asarray(extra[0]).reshape(-1, 2)])
        inten = np.concatenate([inten, np.broadcast_to(extra[1], (len(pts) - len(inten),))])
    return rasterize(pts, resolution, (K.width, K.height), inten)


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    episode_id: str
    split: str
    intrinsics: CameraIntrinsics
    points3d: np.ndarray  # (p, 3) first-frame points
    object_mask: np.ndarray  # (p,)
    gt_transforms: list  # H RigidTransforms
    gt_tracks: np.ndarray  # (p, H, 2)
    out_of_frame: np.ndarray  # (p, H)
    initial_raster: np.ndarray
    goal_raster: np.ndarray
    shape: str = ""
    shape_params: tuple = ()
    family: str = ""
    seed: int = 0

    @property
    def H(self):
        return len(self.gt_transforms)

    @property
    def p(self):
        return len(self.points3d)

    @property
    def p0(self):
        return self.gt_tracks[:, 0]

    @property
    def depth(self):
        return self.points3d[:, 2]

    @property
    def object_centroid(self):
        return self.points3d[self.object_mask].mean(axis=0)

    @property
    def object_depth(self):
        return float(self.object_centroid[2])


@dataclass
class DatasetConfig:
    """Sizes and the split construction rule.

    ``train`` and ``MG`` use seen shapes x seen families minus ``cg_pairs``
    with seen instance ids; ``G`` uses the same pairs with unseen instance
    ids; ``CG`` uses ``cg_pairs``; ``TG`` uses unseen shapes x unseen
    families.
    """

    counts: dict = field(default_factory=lambda: {"train": 40, "MG": 5, "G": 5, "CG": 5, "TG": 5})
    seen_shapes: tuple = ("box", "cylinder-shell", "blob")
    unseen_shapes: tuple = ("planar-door", "handle-bar")
    seen_families: tuple = ("translation-line", "rotation-about-scene-axis", "screw")
    unseen_families: tuple = ("arc-pull", "pour-tilt")
    cg_pairs: tuple = (("box", "screw"), ("cylinder-shell", "translation-line"))
    n_seen_instances: int = 4
    n_unseen_instances: int = 4
    H: int = 16
    p_range: tuple = (200, 400)
    object_fraction: float = 0.85
    image_size: int = 256
    focal: float = 256.0
    raster_resolution: int = 64
    depth_range: tuple = (1.5, 3.0)
    step_bound: float = 0.25
    motion_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.seen_shapes) & set(self.unseen_shapes)
        if overlap:
            raise ValueError(f"shapes both seen and unseen: {sorted(overlap)}")
        if set(self.seen_families) & set(self.unseen_families):
            raise ValueError("families both seen and unseen")
        for s, f in self.cg_pairs:
            if s not in self.seen_shapes or f not in self.seen_families:
                raise ValueError(f"CG pair {(s, f)} must combine a seen shape and a seen family")
        for k in self.counts:
            if k not in SPLITS:
                raise ValueError(f"unknown split {k!r}")
        lo, hi = self.p_range
        if lo > hi or lo < 1:
            raise ValueError("bad p_range")
        self.cg_pairs = tuple(tuple(x) for x in self.cg_pairs)
        self.counts = dict(self.counts)

    @property
    def intrinsics(self):
        return CameraIntrinsics.default(self.image_size, self.focal)

    def pairs(self, split):
        seen = [(s, f) for s in self.seen_shapes for f in self.seen_families]
        if split in ("train", "MG", "G"):
            pairs = [pf for pf in seen if pf not in self.cg_pairs]
        elif split == "CG":
            pairs = list(self.cg_pairs)
        elif split == "TG":
            pairs = [(s, f) for s in self.unseen_shapes for f in self.unseen_families]
        else:
            raise ValueError(split)
        if not pairs:
            raise ValueError(f"split {split} has no (shape, family) pairs")
        return pairs

    def instance_ids(self, split):
        if split == "G":
            return list(range(self.n_seen_instances, self.n_seen_instances + self.n_unseen_instances))
        return list(range(self.n_seen_instances))

    def to_dict(self):
        d = dict(self.__dict__)
        d["cg_pairs"] = [list(x) for x in self.cg_pairs]
        for k in ("seen_shapes", "unseen_shapes", "seen_families", "unseen_families",
                  "p_range", "depth_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset config fields: {sorted(unknown)}")
        kw = dict(d)
        for k in ("seen_shapes", "unseen_shapes", "seen_families", "unseen_families",
                  "p_range", "depth_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "cg_pairs" in kw:
            kw["cg_pairs"] = tuple(tuple(x) for x in kw["cg_pairs"])
        return cls(**kw)


def make_episode(cfg: DatasetConfig, split: str, index: int) -> Episode:
    """Episode ``index`` of ``split``; depends only on (cfg, split, index)."""
    seed = child_seed(cfg.seed, "episode", split, index)
    g = np.random.default_rng(seed)
    K = cfg.intrinsics
    for attempt in range(50):
        pairs = cfg.pairs(split)
        shape, fam = pairs[int(g.integers(len(pairs)))]
        ids = cfg.instance_ids(split)
        inst = ids[int(g.integers(len(ids)))]
        params = instance_params(shape, inst, cfg.seed)
        p = int(g.integers(cfg.p_range[0], cfg.p_range[1] + 1))
        n_obj = max(8, int(round(cfg.object_fraction * p)))
        n_bg = max(p - n_obj, 0)
        spec = SceneSpec(shape, params, n_obj, n_bg, tuple(cfg.depth_range),
                         child_seed(seed, attempt), K)
        try:
            scene = sample_scene(spec)
        except DegenerateShape:
            continue
        family = MotionFamily.default(fam, cfg.motion_scale, cfg.step_bound)
        transforms = sample_motion(family, cfg.H, child_seed(seed, attempt, "motion"),
                                   scene.center, scene.size)
        final_obj = geo.apply(transforms[-1], scene.object_points)
        if np.any(final_obj[:, 2] <= 0.5):
            continue
        tracks, oof = render_tracks(scene.points3d, transforms, K, scene.object_mask)
        r = cfg.raster_resolution
        return Episode(
            episode_id=f"{split}-{index:05d}",
            split=split,
            intrinsics=K,
            points3d=scene.points3d,
            object_mask=scene.object_mask,
            gt_transforms=transforms,
            gt_tracks=tracks,
            out_of_frame=oof,
            initial_raster=scene_raster(tracks[:, 0], scene.object_mask, r, K),
            goal_raster=scene_raster(tracks[:, -1], scene.object_mask, r, K),
            shape=shape,
            shape_params=params,
            family=fam,
            seed=seed,
        )
    raise DegenerateShape(f"episode {split}-{index} could not be generated")


def iter_episodes(cfg: DatasetConfig, splits=None):
    for split in splits or SPLITS:
        for i in range(cfg.counts.get(split, 0)):
            yield make_episode(cfg, split, i)


def generate_dataset(cfg: DatasetConfig, out_dir):
    """Write manifest + one JSON file per episode; returns the manifest path."""
    from . import io

    return io.write_dataset(cfg, iter_episodes(cfg), out_dir)
