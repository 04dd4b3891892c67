"""Procedural calibrated scenes: primitives on a ground plane, a ring of cameras,
z-buffered label rendering and corrupted 2D pseudo-labels.

Point clouds are filtered so that, under the true calibration and without
noise, label transfer is exact; disagreement between projected pseudo-labels
and 3D labels therefore comes only from the explicit noise model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GenerationError
from .geometry import DEPTH_MIN, Calibration, PointCloud, project_points, transfer_labels
from .serialization import decode_array, encode_array
from .vocab import ClassVocabulary

ARCHETYPES = ("plane", "box", "cylinder")

PALETTE = np.array(
    [
        [0.45, 0.42, 0.38],
        [0.85, 0.20, 0.20],
        [0.20, 0.35, 0.85],
        [0.95, 0.80, 0.20],
        [0.30, 0.80, 0.30],
        [0.75, 0.30, 0.80],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.15],
        [0.55, 0.25, 0.10],
        [0.90, 0.90, 0.90],
    ]
)
BACKGROUND_COLOR = np.array([0.10, 0.10, 0.12])


@dataclass
class NoiseModel:
    rot_sigma: float = float(np.deg2rad(1.0))
    trans_sigma: float = 0.05
    p_flip: float = 0.1
    p_drop: float = 0.1
    dilation: int = 2

    def __post_init__(self):
        if not (0 <= self.p_flip <= 1 and 0 <= self.p_drop <= 1):
            raise ValueError("noise probabilities must lie in [0, 1]")
        if self.rot_sigma < 0 or self.trans_sigma < 0 or self.dilation < 0:
            raise ValueError("noise magnitudes must be non-negative")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0)


@dataclass
class SceneSpec:
    archetypes: dict[str, str] = field(
        default_factory=lambda: {
            "ground": "plane",
            "box-A": "box",
            "cylinder-A": "cylinder",
            "box-B": "box",
            "cylinder-B": "cylinder",
        }
    )
    half_extent: float = 10.0
    object_count: tuple[int, int] = (6, 10)
    points_per_object: tuple[int, int] = (500, 900)
    ground_points: int = 4000
    n_cameras: int = 4
    ring_radius: float = 14.0
    camera_height: float = 5.0
    image_size: int = 128
    focal: float = 90.0
    color_sigma: float = 0.05
    intensity_sigma: float = 0.05
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseModel(**self.noise)
        self.object_count = tuple(self.object_count)
        self.points_per_object = tuple(self.points_per_object)
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")
        bad = {k: v for k, v in self.archetypes.items() if v not in ARCHETYPES}
        if bad:
            raise ValueError(f"unknown archetypes {bad}")
        if list(self.archetypes.values()).count("plane") > 1:
            raise ValueError("at most one plane class is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_count"] = list(self.object_count)
        d["points_per_object"] = list(self.points_per_object)
        return d


@dataclass
class Primitive:
    kind: str
    class_id: int
    center: np.ndarray
    yaw: float = 0.0
    # box: half sizes (x, y, z); cylinder: (radius, radius, half height)
    half_size: np.ndarray = field(default_factory=lambda: np.ones(3))

    @property
    def footprint_radius(self) -> float:
        if self.kind == "box":
            return float(np.hypot(self.half_size[0], self.half_size[1]))
        return float(self.half_size[0])

    @property
    def height(self) -> float:
        return 2.0 * float(self.half_size[2])


@dataclass
class SyntheticScene:
    seed: int
    cloud: PointCloud
    calibs: list[Calibration]
    gt_images: np.ndarray
    instance_images: np.ndarray
    pseudo_images: np.ndarray
    instance_classes: np.ndarray
    instance_colors: np.ndarray
    half_extent: float = 10.0
    color_sigma: float = 0.05

    @property
    def n_cameras(self) -> int:
        return len(self.calibs)

    def appearance(self) -> np.ndarray:
        """RGB images (K, H, W, 3): per-instance colour plus seeded pixel noise."""
        rng = np.random.default_rng([self.seed, 7919])
        colors = np.vstack([self.instance_colors, BACKGROUND_COLOR])
        img = colors[np.where(self.instance_images >= 0, self.instance_images, len(self.instance_colors))]
        return img + rng.normal(0.0, self.color_sigma, img.shape)

    def point_features(self) -> np.ndarray:
        """Per-point inputs (N, 4): coordinates scaled to the workspace plus intensity."""
        xyz = self.cloud.coords / self.half_extent
        return np.column_stack([xyz, self.cloud.intensity])

    def to_dict(self) -> dict:
        c = self.cloud
        return {
            "format": "crossmodal-scene/1",
            "seed": int(self.seed),
            "half_extent": self.half_extent,
            "color_sigma": self.color_sigma,
            "coords": encode_array(c.coords),
            "labels": encode_array(c.gt_labels.astype(np.int32)),
            "base_mask": encode_array(c.base_mask),
            "intensity": encode_array(c.intensity),
            "calibrations": [
                {
                    "intrinsic": cal.intrinsic.reshape(-1).tolist(),
                    "extrinsic": cal.extrinsic.reshape(-1).tolist(),
                    "width": cal.width,
                    "height": cal.height,
                }
                for cal in self.calibs
            ],
            "gt_images": encode_array(self.gt_images.astype(np.int32)),
            "instance_images": encode_array(self.instance_images.astype(np.int32)),
            "pseudo_images": encode_array(self.pseudo_images.astype(np.int32)),
            "instance_classes": encode_array(self.instance_classes.astype(np.int32)),
            "instance_colors": encode_array(self.instance_colors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        cloud = PointCloud(
            decode_array(d["coords"]),
            gt_labels=decode_array(d["labels"]),
            base_mask=decode_array(d["base_mask"]),
            intensity=decode_array(d["intensity"]),
        )
        calibs = [Calibration(c["intrinsic"], c["extrinsic"], c["width"], c["height"]) for c in d["calibrations"]]
        return cls(
            seed=d["seed"],
            cloud=cloud,
            calibs=calibs,
            gt_images=decode_array(d["gt_images"]),
            instance_images=decode_array(d["instance_images"]),
            pseudo_images=decode_array(d["pseudo_images"]),
            instance_classes=decode_array(d["instance_classes"]),
            instance_colors=decode_array(d["instance_colors"]),
            half_extent=d["half_extent"],
            color_sigma=d["color_sigma"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


# cameras -------------------------------------------------------------------


def look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """LiDAR-to-camera extrinsic for a camera at ``center`` looking at ``target`` (z up)."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ center
    return ext


def ring_cameras(spec: SceneSpec, phase: float = 0.0) -> list[Calibration]:
    size = spec.image_size
    k = np.array([[spec.focal, 0.0, (size - 1) / 2], [0.0, spec.focal, (size - 1) / 2], [0.0, 0.0, 1.0]])
    calibs = []
    for i in range(spec.n_cameras):
        ang = phase + 2 * np.pi * i / spec.n_cameras
        center = np.array([spec.ring_radius * np.cos(ang), spec.ring_radius * np.sin(ang), spec.camera_height])
        calibs.append(Calibration(k, look_at(center, np.zeros(3)), size, size))
    return calibs


def jitter_calibration(cal: Calibration, rot_sigma: float, trans_sigma: float, rng: np.random.Generator) -> Calibration:
    rj = Rotation.from_rotvec(rng.normal(0.0, rot_sigma, 3)).as_matrix()
    ext = np.eye(4)
    ext[:3, :3] = rj @ cal.rotation
    ext[:3, 3] = rj @ cal.translation + rng.normal(0.0, trans_sigma, 3)
    return Calibration(cal.intrinsic.copy(), ext, cal.width, cal.height)


# ray casting ---------------------------------------------------------------


def _hit_plane(o, d, half_extent):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[..., 2]
    p = o + t[..., None] * d
    ok = (d[..., 2] < 0) & (np.abs(p[..., 0]) <= half_extent) & (np.abs(p[..., 1]) <= half_extent)
    return np.where(ok, t, np.inf)


def _hit_box(o, d, prim: Primitive):
    c, s = np.cos(-prim.yaw), np.sin(-prim.yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    lo = rz @ (o - np.array([prim.center[0], prim.center[1], prim.half_size[2]]))
    ld = d @ rz.T
    hs = prim.half_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-hs - lo) / ld
        t2 = (hs - lo) / ld
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = ld == 0
    inside = np.abs(lo) <= hs
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    ok = (near <= far) & (near > DEPTH_MIN)
    return np.where(ok, near, np.inf)


def _hit_cylinder(o, d, prim: Primitive):
    r, h = prim.half_size[0], prim.height
    ox, oy = o[0] - prim.center[0], o[1] - prim.center[1]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    cc = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * cc
    best = np.full(dx.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[2] + t * dz
            ok = (disc >= 0) & (a > 0) & (t > DEPTH_MIN) & (z >= 0) & (z <= h)
            best = np.where(ok & (t < best), t, best)
        for zc in (0.0, h):
            t = (zc - o[2]) / dz
            px, py = ox + t * dx, oy + t * dy
            ok = (dz != 0) & (t > DEPTH_MIN) & (px * px + py * py <= r * r)
            best = np.where(ok & (t < best), t, best)
    return best


def render(primitives: list[Primitive], ground_class: int | None, cal: Calibration, half_extent: float, ignore: int):
    """Z-buffered class, instance and depth images for one camera.

    Instance 0 is the ground plane, objects are 1..n in list order; background
    pixels carry class ``ignore`` and instance -1.
    """
    o, d = cal.pixel_rays()
    shape = d.shape[:2]
    depth = np.full(shape, np.inf)
    cls = np.full(shape, ignore, dtype=np.int64)
    inst = np.full(shape, -1, dtype=np.int64)
    if ground_class is not None:
        t = _hit_plane(o, d, half_extent)
        hit = t < depth
        depth[hit], cls[hit], inst[hit] = t[hit], ground_class, 0
    for i, prim in enumerate(primitives, start=1):
        t = _hit_box(o, d, prim) if prim.kind == "box" else _hit_cylinder(o, d, prim)
        hit = t < depth
        depth[hit], cls[hit], inst[hit] = t[hit], prim.class_id, i
    return cls, inst, depth


def render_label_image(primitives: list[Primitive], ground_class: int | None, cal: Calibration, half_extent: float, ignore: int) -> np.ndarray:
    return render(primitives, ground_class, cal, half_extent, ignore)[0]


# corruption ----------------------------------------------------------------


def _box_count(mask: np.ndarray, radius: int) -> np.ndarray:
    """Integer count of True pixels in each (2r+1)^2 window, zero-padded."""
    p = np.pad(mask.astype(np.int64), radius)
    cs = np.zeros((p.shape[0] + 1, p.shape[1] + 1), dtype=np.int64)
    cs[1:, 1:] = p.cumsum(0).cumsum(1)
    w = 2 * radius + 1
    return cs[w:, w:] - cs[:-w, w:] - cs[w:, :-w] + cs[:-w, :-w]


def majority_dilate(labels: np.ndarray, radius: int, num_classes: int) -> np.ndarray:
    """Each pixel takes the most frequent non-sentinel label in its window (lowest id on ties)."""
    if radius <= 0:
        return labels.copy()
    counts = np.stack([_box_count(labels == c, radius) for c in range(num_classes)])
    best = counts.argmax(axis=0)
    return np.where(counts.max(axis=0) > 0, best, num_classes)


def corrupt_labels(
    labels: np.ndarray,
    instances: np.ndarray,
    noise: NoiseModel,
    num_classes: int,
    rng: np.random.Generator,
    report: dict | None = None,
) -> np.ndarray:
    """Per-instance dropout and class flips, then boundary dilation.

    ``labels``/``instances`` are expected to come from a render with the
    jittered calibration already (see ``generate_scene``).
    """
    ignore = num_classes
    out = labels.copy()
    ids = np.unique(instances[instances >= 0])
    dropped, flipped = [], []
    for inst in ids:
        mask = instances == inst
        if rng.random() < noise.p_drop:
            out[mask] = ignore
            dropped.append(int(inst))
            continue
        if rng.random() < noise.p_flip and num_classes > 1:
            cur = int(np.bincount(labels[mask], minlength=num_classes + 1)[:num_classes].argmax())
            new = int(rng.integers(num_classes - 1))
            out[mask] = new + (new >= cur)
            flipped.append(int(inst))
    if report is not None:
        report.update(instances=[int(i) for i in ids], dropped=dropped, flipped=flipped)
    return majority_dilate(out, noise.dilation, num_classes)


# scene construction --------------------------------------------------------


def _class_tables(spec: SceneSpec, vocab: ClassVocabulary):
    missing = set(vocab.names) - set(spec.archetypes)
    if missing:
        raise GenerationError(f"no shape archetype for classes {sorted(missing)}")
    kinds = [spec.archetypes[n] for n in vocab.names]
    ground = kinds.index("plane") if "plane" in kinds else None
    objects = [i for i, k in enumerate(kinds) if k != "plane"]
    return kinds, ground, objects


def class_intensity(class_id: int, num_classes: int) -> float:
    return 0.1 + 0.8 * class_id / max(num_classes - 1, 1)


def _place(spec: SceneSpec, vocab: ClassVocabulary, rng: np.random.Generator, max_tries: int = 200) -> list[Primitive]:
    kinds, _, objects = _class_tables(spec, vocab)
    if not objects:
        return []
    n = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    placed: list[Primitive] = []
    for _ in range(n):
        cls = int(objects[rng.integers(len(objects))])
        for _try in range(max_tries):
            if kinds[cls] == "box":
                hs = np.array([rng.uniform(0.6, 1.6), rng.uniform(0.6, 1.6), rng.uniform(0.4, 1.25)])
            else:
                r = rng.uniform(0.4, 1.2)
                hs = np.array([r, r, rng.uniform(0.4, 1.25)])
            prim = Primitive(kinds[cls], cls, np.zeros(2), float(rng.uniform(0, np.pi)), hs)
            lim = spec.half_extent - prim.footprint_radius
            prim.center = rng.uniform(-lim, lim, 2)
            if all(np.linalg.norm(prim.center - q.center) > prim.footprint_radius + q.footprint_radius + 0.2 for q in placed):
                placed.append(prim)
                break
        else:
            raise GenerationError(f"could not place object {len(placed) + 1} of {n} after {max_tries} tries")
    return placed


def _sample_box(prim: Primitive, n: int, rng) -> np.ndarray:
    hx, hy, hz = prim.half_size
    # top, +x, -x, +y, -y faces
    areas = np.array([4 * hx * hy, 4 * hy * hz, 4 * hy * hz, 4 * hx * hz, 4 * hx * hz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a, b = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    local = np.empty((n, 3))
    local[:, 0] = np.select([face == 0, face == 1, face == 2], [a * hx, hx, -hx], a * hx)
    local[:, 1] = np.select([face == 0, face <= 2, face == 3], [b * hy, a * hy, hy], -hy)
    local[:, 2] = np.where(face == 0, 2 * hz, (b + 1) * hz)
    c, s = np.cos(prim.yaw), np.sin(prim.yaw)
    xy = local[:, :2] @ np.array([[c, s], [-s, c]])
    return np.column_stack([xy + prim.center, local[:, 2]])


def _sample_cylinder(prim: Primitive, n: int, rng) -> np.ndarray:
    r, h = prim.half_size[0], prim.height
    side, top = 2 * np.pi * r * h, np.pi * r * r
    on_top = rng.random(n) < top / (side + top)
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(on_top, r * np.sqrt(rng.random(n)), r)
    z = np.where(on_top, h, rng.uniform(0, h, n))
    return np.column_stack([prim.center[0] + rad * np.cos(ang), prim.center[1] + rad * np.sin(ang), z])


def _inside_footprint(xy: np.ndarray, prim: Primitive) -> np.ndarray:
    rel = xy - prim.center
    if prim.kind == "cylinder":
        return (rel**2).sum(axis=1) <= prim.half_size[0] ** 2
    c, s = np.cos(prim.yaw), np.sin(prim.yaw)
    local = rel @ np.array([[c, -s], [s, c]])
    return (np.abs(local[:, 0]) <= prim.half_size[0]) & (np.abs(local[:, 1]) <= prim.half_size[1])


def generate_scene(spec: SceneSpec, vocab: ClassVocabulary, seed: int, annotated: bool = True) -> SyntheticScene:
    """Build one calibrated scene with GT labels and noisy pseudo-label images."""
    rng = np.random.default_rng([seed, 1])
    c = vocab.num_classes
    ignore = vocab.ignore_index
    kinds, ground, _ = _class_tables(spec, vocab)
    prims = _place(spec, vocab, rng)
    calibs = ring_cameras(spec, phase=float(rng.uniform(0, 2 * np.pi)))

    coords, labels, inst_of_point = [], [], []
    if ground is not None:
        g = np.column_stack([rng.uniform(-spec.half_extent, spec.half_extent, (spec.ground_points, 2)), np.zeros(spec.ground_points)])
        free = np.ones(len(g), dtype=bool)
        for p in prims:
            free &= ~_inside_footprint(g[:, :2], p)
        coords.append(g[free])
        labels.append(np.full(int(free.sum()), ground))
        inst_of_point.append(np.zeros(int(free.sum()), dtype=np.int64))
    for i, p in enumerate(prims, start=1):
        n = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        pts = _sample_box(p, n, rng) if p.kind == "box" else _sample_cylinder(p, n, rng)
        coords.append(pts)
        labels.append(np.full(n, p.class_id))
        inst_of_point.append(np.full(n, i))
    coords = np.concatenate(coords) if coords else np.zeros((0, 3))
    labels = np.concatenate(labels).astype(np.int64) if labels else np.zeros(0, np.int64)
    inst_of_point = np.concatenate(inst_of_point) if inst_of_point else np.zeros(0, np.int64)

    gt_imgs, inst_imgs = [], []
    for cal in calibs:
        cls_img, inst_img, _ = render(prims, ground, cal, spec.half_extent, ignore)
        gt_imgs.append(cls_img)
        inst_imgs.append(inst_img)
    gt_imgs = np.stack(gt_imgs)
    inst_imgs = np.stack(inst_imgs)

    # keep points whose noise-free transferred label is exact (or that no camera sees)
    pairing = project_points(coords, calibs)
    transferred = transfer_labels(pairing, gt_imgs, c)
    seen = np.zeros(len(coords), dtype=bool)
    seen[pairing.point_index] = True
    keep = (transferred == labels) | ~seen
    coords, labels, inst_of_point = coords[keep], labels[keep], inst_of_point[keep]

    instance_classes = np.array([ground if ground is not None else -1] + [p.class_id for p in prims], dtype=np.int64)
    instance_colors = np.clip(
        PALETTE[np.maximum(instance_classes, 0) % len(PALETTE)] + rng.normal(0, 0.04, (len(instance_classes), 3)), 0, 1
    )
    inst_intensity = np.array([class_intensity(max(k, 0), c) for k in instance_classes]) + rng.normal(0, 0.03, len(instance_classes))
    intensity = inst_intensity[inst_of_point] + rng.normal(0, spec.intensity_sigma, len(coords))

    noise = spec.noise
    pseudo = []
    for cal in calibs:
        jit = jitter_calibration(cal, noise.rot_sigma, noise.trans_sigma, rng)
        cls_img, inst_img, _ = render(prims, ground, jit, spec.half_extent, ignore)
        pseudo.append(corrupt_labels(cls_img, inst_img, noise, c, rng))
    pseudo = np.stack(pseudo)

    base_lookup = vocab.base_mask()
    base_mask = base_lookup[labels] if annotated else np.zeros(len(labels), dtype=bool)
    cloud = PointCloud(coords, gt_labels=labels, base_mask=base_mask, intensity=intensity)
    return SyntheticScene(
        seed=seed,
        cloud=cloud,
        calibs=calibs,
        gt_images=gt_imgs,
        instance_images=inst_imgs,
        pseudo_images=pseudo,
        instance_classes=instance_classes,
        instance_colors=instance_colors,
        half_extent=spec.half_extent,
        color_sigma=spec.color_sigma,
    )


def make_dataset(spec: SceneSpec, vocab: ClassVocabulary, seeds, mode: str = "base-annotated") -> list[SyntheticScene]:
    """Scenes for the given seeds.

    ``base-annotated``: base-class points carry usable labels (base_mask true).
    ``annotation-free``: no point carries a training label.
    """
    if mode not in ("base-annotated", "annotation-free"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    return [generate_scene(spec, vocab, int(s), annotated=mode == "base-annotated") for s in seeds]
