"""Synthetic multi-channel B1+ data: coil geometry, Biot-Savart fields, phantoms.

The quasi-static field of each loop is computed with the Biot-Savart law on a
polyline discretisation of the conductor. A complex propagation factor
``exp(-i 2 pi d / lambda_eff) * exp(-d / L)`` stands in for the full-wave
behaviour at 7 T and produces the destructive interference that makes
magnitude shimming non-trivial.

Grid convention: volumes are indexed ``[iy, ix, iz, coil]`` with voxel centres
at ``(i - (n - 1) / 2) * voxel_size`` along each axis. Coil ``c`` sits at
azimuth ``-2 pi c / C``, i.e. coil indices advance clockwise seen from +z
(from the feet). With the ``(Bx + i By) / 2`` convention this makes the
quadrature drive (phase ``+2 pi c / C``) the co-rotating, constructive mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import SpecError
from .field import ComplexImage, Mask, SliceSample, TargetProfile, quadrature_weights

log = logging.getLogger(__name__)

MU0 = 4e-7 * np.pi
MIN_DISTANCE = 1e-6

DEFAULT_SCALES = tuple(float(s) for s in np.round(np.linspace(0.90, 1.10, 10), 12))
# the listed default set has 13 angles; -30 is left out to keep 12 variants
DEFAULT_ANGLES = (0.0, 10.0, -10.0, 20.0, -20.0, 30.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0)


@dataclass(frozen=True)
class CoilArray:
    """Single-row loop array on a cylinder.

    ``loop_shape`` selects the conductor path: ``"conformal"`` rectangles bent
    onto the cylinder (the default), ``"flat"`` rectangles tangent to it, or
    ``"circular"`` loops of radius ``loop_radius`` used for validation.
    """

    count: int = 8
    cylinder_diameter: float = 0.28
    element_height: float = 0.16
    element_width: float = 0.10
    gap: float = 0.01
    segments_per_loop: int = 64
    current: float = 1.0
    loop_shape: str = "conformal"
    loop_radius: float | None = None

    def __post_init__(self):
        if self.count < 1:
            raise SpecError("coil count must be >= 1")
        if self.loop_shape not in ("conformal", "flat", "circular"):
            raise SpecError(f"unknown loop_shape {self.loop_shape!r}")
        if self.segments_per_loop < 4:
            raise SpecError("segments_per_loop must be >= 4")
        if min(self.cylinder_diameter, self.element_height, self.element_width) <= 0 or self.gap < 0:
            raise SpecError("coil dimensions must be positive")
        # The nominal gap is approximate; elements may only not overlap.
        if self.count * self.element_width >= np.pi * self.cylinder_diameter:
            raise SpecError("coil elements overlap around the cylinder")

    @property
    def radius(self) -> float:
        return self.cylinder_diameter / 2

    @property
    def actual_gap(self) -> float:
        """Arc length between neighbouring elements once they are evenly spaced."""
        return np.pi * self.cylinder_diameter / self.count - self.element_width

    def azimuth(self, coil: int) -> float:
        return -2 * np.pi * coil / self.count

    def center(self, coil: int) -> np.ndarray:
        phi = self.azimuth(coil)
        return np.array([self.radius * np.cos(phi), self.radius * np.sin(phi), 0.0])

    def loop(self, coil: int) -> np.ndarray:
        """Closed polyline ``(S + 1, 3)`` of the conductor of ``coil`` (first point repeated)."""
        phi = self.azimuth(coil)
        if self.loop_shape == "circular":
            r = self.loop_radius if self.loop_radius is not None else self.element_width / 2
            t = 2 * np.pi * np.arange(self.segments_per_loop + 1) / self.segments_per_loop
            local = np.column_stack([np.zeros_like(t), r * np.cos(t), r * np.sin(t)])
            local[:, 0] = self.radius
        else:
            local = self._rectangle_local()
        c, s = np.cos(phi), np.sin(phi)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        path = local @ rot.T
        path[-1] = path[0]
        return path

    def _rectangle_local(self) -> np.ndarray:
        # Perimeter walk starting at a corner; segments are spread over the four
        # sides in proportion to their length, with at least one per side.
        w, h = self.element_width, self.element_height
        n = self.segments_per_loop
        per = np.array([w, h, w, h])
        counts = np.maximum(1, np.floor(n * per / per.sum()).astype(int))
        counts[np.argmax(per)] += n - counts.sum()
        # (u, z) corners: u is the tangential coordinate (arc length or chord offset)
        corners = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2), (-w / 2, -h / 2)]
        pts = []
        for side in range(4):
            (u0, z0), (u1, z1) = corners[side], corners[side + 1]
            t = np.arange(counts[side]) / counts[side]
            pts.append(np.column_stack([u0 + (u1 - u0) * t, z0 + (z1 - z0) * t]))
        uz = np.vstack(pts + [np.array([corners[0]])])
        u, z = uz[:, 0], uz[:, 1]
        if self.loop_shape == "conformal":
            ang = u / self.radius
            return np.column_stack([self.radius * np.cos(ang), self.radius * np.sin(ang), z])
        return np.column_stack([np.full_like(u, self.radius), u, z])


@dataclass(frozen=True)
class WaveModel:
    lambda_eff: float = 0.12
    attenuation_length: float = 0.25

    def __post_init__(self):
        if not (self.lambda_eff > 0 and self.attenuation_length > 0):
            raise SpecError("wave model lengths must be strictly positive")


@dataclass(frozen=True)
class PhantomSpec:
    """Two-density ellipsoidal head phantom on a regular grid.

    The 2-voxel margin is enforced in-plane only; along z the ellipsoid may
    extend past the slab, as a head does past an axial imaging slab.
    """

    grid: tuple = (64, 64, 32)
    voxel_size: float = 0.003
    semi_axes: tuple = (0.068, 0.080, 0.110)
    center: tuple = (0.0, 0.0, 0.02)
    scale: float = 1.0
    density_inside: float = 1040.0
    density_outside: float = 1.2
    mask_threshold: float = 500.0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        object.__setattr__(self, "center", tuple(float(a) for a in self.center))
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise SpecError(f"grid must be three positive ints, got {self.grid}")
        lo, hi = sorted((self.density_inside, self.density_outside))
        if not (lo < self.mask_threshold < hi):
            raise SpecError("mask_threshold must lie strictly between the two densities")
        h, w, _ = self.grid
        ax, ay, _ = (a * self.scale for a in self.semi_axes)
        cx, cy, _ = self.center
        half_x = (w - 1) / 2 * self.voxel_size - 2 * self.voxel_size
        half_y = (h - 1) / 2 * self.voxel_size - 2 * self.voxel_size
        if abs(cx) + ax > half_x + 1e-12 or abs(cy) + ay > half_y + 1e-12:
            raise SpecError(
                f"scaled phantom (scale {self.scale}) does not fit the {w}x{h} grid with a 2-voxel margin"
            )

    def axes(self):
        """Voxel-centre coordinates ``(x, y, z)`` along each grid axis."""
        h, w, d = self.grid
        v = self.voxel_size
        return (
            (np.arange(w) - (w - 1) / 2) * v,
            (np.arange(h) - (h - 1) / 2) * v,
            (np.arange(d) - (d - 1) / 2) * v,
        )

    def density(self) -> np.ndarray:
        x, y, z = self.axes()
        ax, ay, az = (a * self.scale for a in self.semi_axes)
        cx, cy, cz = self.center
        yy, xx, zz = np.meshgrid(y, x, z, indexing="ij")
        inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0
        return np.where(inside, self.density_inside, self.density_outside)


def paper_scale_phantom(**kw) -> PhantomSpec:
    """101 x 101 x 71 grid at 2 mm, the volume size of the original simulations."""
    return PhantomSpec(grid=(101, 101, 71), voxel_size=0.002, **kw)


def polyline_field(path: np.ndarray, points: np.ndarray, current: float = 1.0) -> np.ndarray:
    """Magnetic flux density (T) at ``points (P, 3)`` from a closed polyline carrying ``current``.

    Each straight segment uses the exact finite-wire Biot-Savart integral.
    Perpendicular distances below ``MIN_DISTANCE`` are clamped.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.zeros_like(points)
    k = MU0 * current / (4 * np.pi)
    for a, b in zip(path[:-1], path[1:]):
        seg = b - a
        length = np.sqrt(seg @ seg)
        if length == 0:
            continue
        u = seg / length
        ra = points - a
        rb = points - b
        t = ra @ u
        perp = ra - t[:, None] * u
        d2 = np.maximum(np.einsum("ij,ij->i", perp, perp), MIN_DISTANCE**2)
        na = np.sqrt(np.einsum("ij,ij->i", ra, ra))
        nb = np.sqrt(np.einsum("ij,ij->i", rb, rb))
        na = np.maximum(na, MIN_DISTANCE)
        nb = np.maximum(nb, MIN_DISTANCE)
        # |B| = k / d * (cos(theta_a) - cos(theta_b)), direction u x perp / d
        mag = k * (t / na - (t - length) / nb) / d2
        out += mag[:, None] * np.cross(u, perp)
    return out


def biot_savart_field(array: CoilArray, point, coil: int) -> np.ndarray:
    """Quasi-static field (T per ``array.current`` amperes) of one coil at one or more points.

    Returned as complex for uniformity with the downstream B1+ arithmetic; the
    imaginary part is zero.
    """
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    b = polyline_field(array.loop(coil), pts.reshape(-1, 3), array.current)
    b = b.astype(np.complex128)
    return b[0] if single else b


def b1_plus(field3, wave: WaveModel, distance):
    """Positively rotating component ``(Bx + i By) / 2`` with the propagation factor applied."""
    field3 = np.asarray(field3)
    distance = np.asarray(distance, dtype=np.float64)
    prop = np.exp(-2j * np.pi * distance / wave.lambda_eff) * np.exp(-distance / wave.attenuation_length)
    return (field3[..., 0] + 1j * field3[..., 1]) / 2 * prop


def coil_b1_maps(array: CoilArray, wave: WaveModel, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Unnormalised complex B1+ of every coil at ``points (P, 3)``; returns ``(P, C)``."""
    points = np.asarray(points, dtype=np.float64)
    out = np.empty((points.shape[0], array.count), dtype=np.complex128)
    for c in range(array.count):
        path = array.loop(c)
        center = array.center(c)
        for s in range(0, points.shape[0], chunk):
            p = points[s : s + chunk]
            bfield = polyline_field(path, p, array.current)
            dist = np.sqrt(np.sum((p - center) ** 2, axis=1))
            out[s : s + chunk, c] = b1_plus(bfield, wave, dist)
    return out


def generate_volume(array: CoilArray, phantom: PhantomSpec, wave: WaveModel):
    """Simulate one phantom.

    Returns ``(volume, density)`` with shapes ``(H, W, D, C)`` complex and
    ``(H, W, D)``. The fields are scaled so that the quadrature-driven field
    has mean magnitude 1.0 over the phantom mask.
    """
    x, y, z = phantom.axes()
    yy, xx, zz = np.meshgrid(y, x, z, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])
    maps = coil_b1_maps(array, wave, points)
    h, w, d = phantom.grid
    volume = maps.reshape(h, w, d, array.count)
    density = phantom.density()
    mask = density > phantom.mask_threshold
    if not mask.any():
        raise SpecError("phantom does not intersect the grid")
    quad = np.abs(volume[mask] @ quadrature_weights(array.count).values)
    volume = volume / quad.mean()
    return volume, density


def slice_and_mask(volume, density, phantom: PhantomSpec, keep: int = 32, min_mask_voxels: int = 64,
                   phantom_id: int = 0, target: TargetProfile | None = None) -> list[SliceSample]:
    """Cut axial slices and keep the ``keep`` slices with the largest masks.

    Slices with fewer than ``min_mask_voxels`` masked voxels are never kept.
    Field values are rounded to float32 precision here, which is the precision
    of the on-disk format. Samples come back in slice order.
    """
    if volume.shape[:3] != density.shape:
        raise SpecError(f"volume {volume.shape[:3]} and density {density.shape} grids differ")
    target = target or TargetProfile()
    masks = density > phantom.mask_threshold
    areas = masks.sum(axis=(0, 1))
    # stable sort: largest area first, ties by slice index
    order = sorted(range(masks.shape[2]), key=lambda k: (-areas[k], k))
    good = [k for k in order if areas[k] >= min_mask_voxels]
    chosen = sorted(good[:keep])
    short = len(chosen) < keep
    if short:
        log.warning("phantom %d: only %d of %d requested slices have a usable mask", phantom_id, len(chosen), keep)
    samples = []
    for k in chosen:
        field32 = volume[:, :, k, :].astype(np.complex64).astype(np.complex128)
        prov = {"phantom": phantom_id, "slice": int(k), "aug": 0, "angle": 0.0}
        if short:
            prov["warning"] = "fewer good slices than requested"
        samples.append(SliceSample(
            b1=ComplexImage(field32),
            mask=Mask(masks[:, :, k], phantom.mask_threshold),
            target=target,
            provenance=prov,
        ))
    return samples


def _rotate_plane(plane: np.ndarray, angle: float, order: int) -> np.ndarray:
    return ndimage.rotate(plane, angle, axes=(1, 0), reshape=False, order=order, mode="constant", cval=0.0)


def rotate_sample(sample: SliceSample, angle: float, aug: int = 0) -> SliceSample:
    """Rotate fields (bilinear, real and imaginary planes separately) and mask (nearest)."""
    prov = dict(sample.provenance)
    prov.update(angle=float(angle), aug=int(aug))
    if float(angle) % 360.0 == 0.0:
        return SliceSample(sample.b1, sample.mask, sample.target, provenance=prov)
    data = sample.b1.data
    out = np.empty_like(data)
    for c in range(data.shape[2]):
        re = _rotate_plane(data[:, :, c].real, angle, 1)
        im = _rotate_plane(data[:, :, c].imag, angle, 1)
        out[:, :, c] = re + 1j * im
    out = out.astype(np.complex64).astype(np.complex128)
    bits = _rotate_plane(sample.mask.bits.astype(np.uint8), angle, 0) > 0
    return SliceSample(ComplexImage(out), Mask(bits, sample.mask.source_threshold), sample.target, provenance=prov)


def augment_rotations(samples, angles=DEFAULT_ANGLES, seed: int = 0, jitter: float = 0.0) -> list[SliceSample]:
    """One rotated copy of every sample per angle (degrees, counter-clockwise in the image).

    ``jitter`` adds a seeded uniform perturbation in ``[-jitter, jitter]`` degrees to
    every non-zero angle. Reference weights are dropped from the copies.
    """
    angles = [float(a) for a in angles]
    if not all(np.isfinite(angles)):
        raise SpecError("augmentation angles must be finite")
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        for i, a in enumerate(angles):
            if jitter and a % 360.0 != 0.0:
                a = a + float(rng.uniform(-jitter, jitter))
            r = rotate_sample(s, a, aug=i)
            if r.mask.count == 0:
                continue
            out.append(r)
    return out


def phantom_set(n: int, base: PhantomSpec | None = None, scales=None) -> list[PhantomSpec]:
    """``n`` phantoms whose scale factors are spread evenly over ``scales`` (default 0.90-1.10)."""
    base = base or PhantomSpec()
    scales = DEFAULT_SCALES if scales is None else tuple(scales)
    lo, hi = min(scales), max(scales)
    if n == len(scales):
        chosen = scales
    elif n == 1:
        chosen = ((lo + hi) / 2,)
    else:
        chosen = tuple(float(s) for s in np.linspace(lo, hi, n))
    return [replace(base, scale=float(s)) for s in chosen]
