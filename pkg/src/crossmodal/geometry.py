"""LiDAR-to-camera projection and point-pixel correspondence sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .vocab import num_classes_of

DEPTH_MIN = 1e-3


@dataclass
class Calibration:
    """Pinhole intrinsics plus a rigid LiDAR-to-camera transform.

    Camera frame convention: +z forward, +x right, +y down.
    """

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def fx(self) -> float:
        return float(self.intrinsic[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsic[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsic[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsic[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0):
            raise ContractError("extrinsic rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise ContractError("extrinsic rotation block has determinant != +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point outside the image")

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the LiDAR frame."""
        return -self.rotation.T @ self.translation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-frame origin and per-pixel ray directions scaled so that t equals camera depth.

        Directions are shaped (height, width, 3); pixel (u, v) is the ray
        through the pixel centre at integer coordinates.
        """
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return self.camera_center(), d_cam @ self.rotation


@dataclass
class PointCloud:
    coords: np.ndarray
    gt_labels: np.ndarray | None = None
    base_mask: np.ndarray | None = None
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class PointPixelPairing:
    """Column-oriented set of (point, camera, pixel, depth) correspondences.

    ``u``/``v`` are integer pixels after half-up rounding; ``u_float``/``v_float``
    keep the continuous projection.
    """

    n_points: int
    point_index: np.ndarray
    camera_index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    u_float: np.ndarray = field(default=None)
    v_float: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.u_float is None:
            self.u_float = self.u.astype(np.float64)
        if self.v_float is None:
            self.v_float = self.v.astype(np.float64)

    def __len__(self) -> int:
        return len(self.point_index)

    def subset(self, selector) -> "PointPixelPairing":
        return PointPixelPairing(
            self.n_points,
            self.point_index[selector],
            self.camera_index[selector],
            self.u[selector],
            self.v[selector],
            self.depth[selector],
            self.u_float[selector],
            self.v_float[selector],
        )

    def entries(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.point_index.tolist(), self.camera_index.tolist(), self.u.tolist(), self.v.tolist()))


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def project_points(cloud, calibs, depth_min: float = DEPTH_MIN) -> PointPixelPairing:
    """Project every point into every camera, keeping in-frame entries with positive depth.

    Entries are ordered by point index, then camera index.
    """
    xyz = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    n = xyz.shape[0]
    cols = {k: [] for k in ("p", "c", "u", "v", "d", "uf", "vf")}
    for k, cal in enumerate(calibs):
        cam = cal.to_camera(xyz)
        z = cam[:, 2]
        front = z > depth_min
        idx = np.nonzero(front)[0]
        zf = z[front]
        uf = cal.fx * cam[front, 0] / zf + cal.cx
        vf = cal.fy * cam[front, 1] / zf + cal.cy
        ui, vi = round_half_up(uf), round_half_up(vf)
        inside = (ui >= 0) & (ui < cal.width) & (vi >= 0) & (vi < cal.height)
        cols["p"].append(idx[inside])
        cols["c"].append(np.full(int(inside.sum()), k, dtype=np.int64))
        cols["u"].append(ui[inside])
        cols["v"].append(vi[inside])
        cols["d"].append(zf[inside])
        cols["uf"].append(uf[inside])
        cols["vf"].append(vf[inside])
    if not calibs:
        empty_i, empty_f = np.zeros(0, np.int64), np.zeros(0)
        return PointPixelPairing(n, empty_i, empty_i, empty_i, empty_i, empty_f, empty_f, empty_f)
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.lexsort((cat["c"], cat["p"]))
    return PointPixelPairing(
        n,
        cat["p"][order].astype(np.int64),
        cat["c"][order],
        cat["u"][order],
        cat["v"][order],
        cat["d"][order],
        cat["uf"][order],
        cat["vf"][order],
    )


def pixel_values(pairing: PointPixelPairing, images) -> np.ndarray:
    """Per-entry lookup of ``images[camera][v, u]``."""
    out = np.empty(len(pairing), dtype=np.asarray(images[0]).dtype if len(images) else np.int64)
    for k, img in enumerate(images):
        sel = pairing.camera_index == k
        if sel.any():
            out[sel] = np.asarray(img)[pairing.v[sel], pairing.u[sel]]
    return out


def transfer_labels(pairing: PointPixelPairing, label_images, vocab) -> np.ndarray:
    """Per-point class ids read from label images at each point's projected pixel.

    A point seen by several cameras takes the label of the lowest camera index
    whose pixel is not the ignore sentinel. Unpaired points get the sentinel.
    """
    c = num_classes_of(vocab)
    ignore = c
    for k, img in enumerate(label_images):
        img = np.asarray(img)
        if img.size and (img.min() < 0 or img.max() > ignore):
            raise DataError(f"label image {k} has class ids outside [0, {ignore}]")
    out = np.full(pairing.n_points, ignore, dtype=np.int64)
    if len(pairing) == 0:
        return out
    labels = pixel_values(pairing, label_images).astype(np.int64)
    valid = labels != ignore
    pts = pairing.point_index[valid]
    labs = labels[valid]
    cams = pairing.camera_index[valid]
    order = np.lexsort((cams, pts))
    pts, labs = pts[order], labs[order]
    first_pts, first = np.unique(pts, return_index=True)
    out[first_pts] = labs[first]
    return out


def matched_pairs_for_distill(pairing: PointPixelPairing, pixel_classes, point_classes, ignore_index: int) -> PointPixelPairing:
    """Entries whose pixel class equals the point class, neither being the sentinel.

    ``pixel_classes`` is either a list of per-camera label images or an array
    already aligned with the pairing entries.
    """
    if isinstance(pixel_classes, np.ndarray) and pixel_classes.shape == (len(pairing),):
        pix = pixel_classes
    else:
        pix = pixel_values(pairing, pixel_classes)
    pts = np.asarray(point_classes)[pairing.point_index]
    keep = (pix == pts) & (pix != ignore_index) & (pts != ignore_index)
    return pairing.subset(keep)
