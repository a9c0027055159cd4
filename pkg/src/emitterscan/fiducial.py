"""Machine-readable fiducial markers: a 5x5 binary grid flanked by two
perpendicular alignment arms of dots.

Bit layout over the 25-cell grid (row-major from the top-left, 1-based):
bit 1 pad (0), bits 2-5 version (MSB first), bit 6 pad (0), bits 7-14 row,
bits 15-22 column, bits 23-25 a CRC-3 checksum of bits 1-22.  The CRC uses
polynomial x^3 + x + 1 with zero initial value, which detects every
single-bit error.

Detection correlates the image with a zero-mean template of each arm,
cubes and sums the two responses, and reads candidate grids at the
surviving peaks; checksum failures mark false positives.  A majority vote
over the checksum-passing candidates in one field pins down the global
grid offset and flags stragglers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import EmitterScanError
from .imageproc import correlate2d, robust_sigma

CRC_POLY = 0b1011          # x^3 + x + 1
N_DATA_BITS = 22
GRID_SIDE = 5


class ChecksumError(EmitterScanError):
    """Grid bits fail their checksum; treat the candidate as a false positive."""


class NoConsensusError(EmitterScanError):
    """No checksum-passing detections to vote on."""


@dataclass(frozen=True)
class FiducialPayload:
    version: int
    row: int
    col: int

    def __post_init__(self):
        if not 0 <= self.version < 16:
            raise ValueError(f"version {self.version} out of range 0..15")
        if not 0 <= self.row < 256:
            raise ValueError(f"row {self.row} out of range 0..255")
        if not 0 <= self.col < 256:
            raise ValueError(f"col {self.col} out of range 0..255")


@dataclass
class FiducialGeometry:
    """Physical marker parameters, in pixels and radians."""

    module_pitch: float = 8.0
    rotation: float = 0.0
    large_dot_radius: float | None = None
    small_dot_radius: float | None = None
    arm_length: float = 6.0     # in module pitches

    def __post_init__(self):
        if self.module_pitch <= 0:
            raise ValueError("module_pitch must be positive")
        if self.large_dot_radius is None:
            self.large_dot_radius = 0.5 * self.module_pitch
        if self.small_dot_radius is None:
            self.small_dot_radius = 0.25 * self.module_pitch
        if self.large_dot_radius <= 0 or self.small_dot_radius <= 0:
            raise ValueError("dot radii must be positive")
        if self.large_dot_radius <= self.small_dot_radius:
            raise ValueError("large_dot_radius must exceed small_dot_radius")


@dataclass
class FiducialDetection:
    payload: FiducialPayload | None
    origin_px: tuple[float, float]
    score: float
    checksum_ok: bool


@dataclass
class FieldConsensus:
    """Global grid assignment agreed by the majority of detections."""

    row_offset: float
    col_offset: float
    version: int
    members: list
    flagged: list


# ---------------------------------------------------------------------------
# codec

def compute_checksum(data_bits) -> int:
    """CRC-3 (poly x^3+x+1, zero init) of 22 data bits, MSB-first register form."""
    bits = [int(bool(b)) for b in data_bits]
    if len(bits) != N_DATA_BITS:
        raise ValueError(f"expected {N_DATA_BITS} data bits, got {len(bits)}")
    reg = 0
    for b in bits:
        reg ^= b << 2
        msb = reg & 0b100
        reg = (reg << 1) & 0b111
        if msb:
            reg ^= CRC_POLY & 0b111
    return reg


def encode_payload(payload: FiducialPayload) -> tuple[bool, ...]:
    """25 grid bits for a payload (pads zero, checksum appended MSB-first)."""
    bits = [False]
    bits += [bool((payload.version >> k) & 1) for k in (3, 2, 1, 0)]
    bits += [False]
    bits += [bool((payload.row >> k) & 1) for k in range(7, -1, -1)]
    bits += [bool((payload.col >> k) & 1) for k in range(7, -1, -1)]
    crc = compute_checksum(bits)
    bits += [bool((crc >> k) & 1) for k in (2, 1, 0)]
    return tuple(bits)


def decode_payload(grid_bits) -> FiducialPayload:
    """Inverse of encode_payload; raises ChecksumError on checksum mismatch."""
    bits = [bool(b) for b in grid_bits]
    if len(bits) != 25:
        raise ValueError(f"expected 25 grid bits, got {len(bits)}")
    stored = (bits[22] << 2) | (bits[23] << 1) | bits[24]
    if compute_checksum(bits[:22]) != stored:
        raise ChecksumError("grid checksum mismatch")
    version = sum(bits[1 + i] << (3 - i) for i in range(4))
    row = sum(bits[6 + i] << (7 - i) for i in range(8))
    col = sum(bits[14 + i] << (7 - i) for i in range(8))
    return FiducialPayload(version=version, row=row, col=col)


def _crc3_batch(data_bits: np.ndarray) -> np.ndarray:
    reg = np.zeros(data_bits.shape[0], dtype=np.uint8)
    for j in range(data_bits.shape[1]):
        reg ^= data_bits[:, j].astype(np.uint8) << 2
        msb = reg & 0b100
        reg = (reg << 1) & 0b111
        reg ^= np.where(msb != 0, CRC_POLY & 0b111, 0).astype(np.uint8)
    return reg


def encode_payload_batch(versions, rows, cols) -> np.ndarray:
    """Vectorized encode: (N, 25) boolean grid array."""
    versions = np.asarray(versions, dtype=np.uint32)
    rows = np.asarray(rows, dtype=np.uint32)
    cols = np.asarray(cols, dtype=np.uint32)
    bits = np.zeros((len(versions), 25), dtype=bool)
    for i, k in enumerate((3, 2, 1, 0)):
        bits[:, 1 + i] = (versions >> k) & 1
    for i, k in enumerate(range(7, -1, -1)):
        bits[:, 6 + i] = (rows >> k) & 1
        bits[:, 14 + i] = (cols >> k) & 1
    crc = _crc3_batch(bits[:, :22])
    for i, k in enumerate((2, 1, 0)):
        bits[:, 22 + i] = (crc >> k) & 1
    return bits


def decode_payload_batch(bits: np.ndarray):
    """Vectorized decode: (versions, rows, cols, checksum_ok) arrays."""
    bits = np.asarray(bits, dtype=bool)
    stored = ((bits[:, 22].astype(np.uint8) << 2)
              | (bits[:, 23].astype(np.uint8) << 1) | bits[:, 24])
    ok = _crc3_batch(bits[:, :22]) == stored
    weights4 = 2 ** np.arange(3, -1, -1, dtype=np.uint32)
    weights8 = 2 ** np.arange(7, -1, -1, dtype=np.uint32)
    versions = bits[:, 1:5] @ weights4
    rows = bits[:, 6:14] @ weights8
    cols = bits[:, 14:22] @ weights8
    return versions, rows, cols, ok


# ---------------------------------------------------------------------------
# geometry and rendering

def _rotate(u, v, rotation):
    c, s = np.cos(rotation), np.sin(rotation)
    return u * c - v * s, u * s + v * c


def _arm_dots(geometry: FiducialGeometry, perpendicular: bool):
    """Dots of one arm as (u_px, v_px, radius), unrotated marker frame."""
    p = geometry.module_pitch
    length = geometry.arm_length
    dots = [(0.0, 0.0, geometry.large_dot_radius),
            (length * p, 0.0, geometry.large_dot_radius)]
    for k in (1, 2, 3):
        dots.append((length * k / 4.0 * p, 0.0, geometry.small_dot_radius))
    if perpendicular:
        dots = [(v, u, r) for (u, v, r) in dots]
    return dots


def _marker_dots(geometry: FiducialGeometry, bits=None):
    """All dots of one marker, rotated, as (u_px, v_px, radius).

    bits None means "every cell filled" (used for size computations only).
    """
    p = geometry.module_pitch
    dots = _arm_dots(geometry, False)
    dots += [d for d in _arm_dots(geometry, True) if d[:2] != (0.0, 0.0)]
    for r_idx in range(GRID_SIDE):
        for c_idx in range(GRID_SIDE):
            if bits is None or bits[r_idx * GRID_SIDE + c_idx]:
                dots.append(((c_idx + 1) * p, (r_idx + 1) * p,
                             geometry.small_dot_radius))
    return [(*_rotate(u, v, geometry.rotation), r) for (u, v, r) in dots]


def _marker_bbox(geometry: FiducialGeometry):
    """(min_u, min_v, max_u, max_v) over all possible dots, plus margin."""
    margin = geometry.large_dot_radius + 2.0
    dots = _marker_dots(geometry, bits=None)
    min_u = min(d[0] - d[2] for d in dots) - margin
    max_u = max(d[0] + d[2] for d in dots) + margin
    min_v = min(d[1] - d[2] for d in dots) - margin
    max_v = max(d[1] + d[2] for d in dots) + margin
    return min_u, min_v, max_u, max_v


def draw_marker(canvas: np.ndarray, payload: FiducialPayload,
                geometry: FiducialGeometry, origin_px: tuple[float, float],
                amplitude: float = 1.0) -> None:
    """Add one marker to a float canvas; dots get a 1 px soft rim."""
    h, w = canvas.shape
    ox, oy = origin_px
    bits = encode_payload(payload)
    for (du, dv, r) in _marker_dots(geometry, bits):
        cx, cy = ox + du, oy + dv
        x0 = max(int(np.floor(cx - r - 1)), 0)
        x1 = min(int(np.ceil(cx + r + 1)) + 1, w)
        y0 = max(int(np.floor(cy - r - 1)), 0)
        y1 = min(int(np.ceil(cy + r + 1)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        d = np.hypot(xs - cx, ys - cy)
        canvas[y0:y1, x0:x1] += amplitude * np.clip(r - d + 0.5, 0.0, 1.0)


def raster_origin(geometry: FiducialGeometry) -> tuple[float, float]:
    """Corner-dot position inside the image produced by rasterize()."""
    min_u, min_v, _, _ = _marker_bbox(geometry)
    return (-min_u, -min_v)


def rasterize(payload: FiducialPayload, geometry: FiducialGeometry) -> np.ndarray:
    """Render a marker bright-on-dark; the corner sits at raster_origin().

    The canvas size depends only on the geometry, so two payloads render
    onto identical grids.
    """
    min_u, min_v, max_u, max_v = _marker_bbox(geometry)
    w = int(np.ceil(max_u - min_u)) + 1
    h = int(np.ceil(max_v - min_v)) + 1
    canvas = np.zeros((h, w))
    draw_marker(canvas, payload, geometry, (-min_u, -min_v))
    return canvas


def build_arm_kernel(geometry: FiducialGeometry, perpendicular: bool = False) -> np.ndarray:
    """Zero-mean template of one alignment arm, anchored so the kernel center
    is the marker corner."""
    half = int(np.ceil(geometry.arm_length * geometry.module_pitch
                       + geometry.large_dot_radius)) + 2
    size = 2 * half + 1
    kernel = np.zeros((size, size))
    ys, xs = np.mgrid[0:size, 0:size]
    for (u, v, r) in _arm_dots(geometry, perpendicular):
        du, dv = _rotate(u, v, geometry.rotation)
        d = np.hypot(xs - (half + du), ys - (half + dv))
        kernel += np.clip(r - d + 0.5, 0.0, 1.0)
    return kernel - kernel.mean()


# ---------------------------------------------------------------------------
# detection

def _read_grid_bits(image: np.ndarray, origin: tuple[float, float],
                    geometry: FiducialGeometry) -> list[bool]:
    """Binarize the 25 data cells around a candidate corner at the midpoint
    of the per-candidate min/max cell intensity."""
    h, w = image.shape
    p = geometry.module_pitch
    half = max(1, int(round(0.3 * p)))
    means = np.empty(25)
    for r_idx in range(GRID_SIDE):
        for c_idx in range(GRID_SIDE):
            du, dv = _rotate((c_idx + 1) * p, (r_idx + 1) * p, geometry.rotation)
            cx = int(round(origin[0] + du))
            cy = int(round(origin[1] + dv))
            x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
            y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
            cell = image[y0:y1, x0:x1]
            means[r_idx * GRID_SIDE + c_idx] = cell.mean() if cell.size else 0.0
    thr = 0.5 * (means.min() + means.max())
    return [bool(m > thr) for m in means]


def detect(image: np.ndarray, geometry: FiducialGeometry,
           threshold_k: float = 8.0, relative_floor: float = 0.2,
           max_candidates: int = 64) -> list[FiducialDetection]:
    """Locate and decode markers by arm correlation and cubed-sum peaking.

    The candidate threshold is formed in pre-cube units: a peak must exceed
    the cubes of threshold_k robust sigmas of the two arm responses, and at
    least relative_floor of the strongest arm response in the field (which
    keeps noiseless images from admitting kernel self-overlap ripples).
    Candidate maxima are suppressed over one arm span, so distinct markers
    must sit farther apart than that.  All surviving candidates are
    returned, decoded where the checksum passes.
    """
    image = np.asarray(image, dtype=float)
    resp_h = correlate2d(image, build_arm_kernel(geometry, perpendicular=False))
    resp_v = correlate2d(image, build_arm_kernel(geometry, perpendicular=True))
    cubed = resp_h**3 + resp_v**3
    med_h, med_v = float(np.median(resp_h)), float(np.median(resp_v))
    floor_h = max(threshold_k * robust_sigma(resp_h),
                  relative_floor * (float(resp_h.max()) - med_h))
    floor_v = max(threshold_k * robust_sigma(resp_v),
                  relative_floor * (float(resp_v.max()) - med_v))
    tau = float(np.median(cubed)) + floor_h**3 + floor_v**3

    foot = 2 * max(1, int(round(geometry.arm_length * geometry.module_pitch))) + 1
    local_max = cubed == ndi.maximum_filter(cubed, size=foot)
    ys, xs = np.nonzero(local_max & (cubed > tau))
    if len(ys) == 0:
        return []
    scores = cubed[ys, xs]
    order = np.argsort(scores)[::-1][:4 * max_candidates]

    min_sep = 2.0 * geometry.module_pitch
    kept: list[int] = []
    for idx in order:
        if all(np.hypot(float(xs[idx]) - xs[j], float(ys[idx]) - ys[j]) >= min_sep
               for j in kept):
            kept.append(idx)
        if len(kept) >= max_candidates:
            break

    detections = []
    for idx in kept:
        origin = (float(xs[idx]), float(ys[idx]))
        try:
            payload = decode_payload(_read_grid_bits(image, origin, geometry))
            detections.append(FiducialDetection(payload, origin, float(scores[idx]), True))
        except ChecksumError:
            detections.append(FiducialDetection(None, origin, float(scores[idx]), False))
    detections.sort(key=lambda d: -d.score)
    return detections


def majority_vote(detections, grid_pitch_px: float, rotation: float = 0.0,
                  tol: float = 0.35) -> FieldConsensus:
    """Agree on the (row, col) grid offset implied by checksum-passing
    detections; detections off the consensus by more than tol code pitches
    (or with a divergent version) are flagged."""
    ok = [d for d in detections if d.checksum_ok]
    if not ok:
        raise NoConsensusError("no checksum-passing detections in field")
    keys = []
    for d in ok:
        u, v = _rotate(d.origin_px[0], d.origin_px[1], -rotation)
        keys.append((d.payload.row - v / grid_pitch_px,
                     d.payload.col - u / grid_pitch_px,
                     d.payload.version))
    groups: list[list[int]] = []
    for i, key in enumerate(keys):
        for g in groups:
            r0, c0, v0 = keys[g[0]]
            if key[2] == v0 and abs(key[0] - r0) < tol and abs(key[1] - c0) < tol:
                g.append(i)
                break
        else:
            groups.append([i])
    best = max(groups, key=lambda g: (len(g), sum(ok[i].score for i in g)))
    members = [ok[i] for i in best]
    flagged = [d for d in detections if d not in members]
    row_off = float(np.mean([keys[i][0] for i in best]))
    col_off = float(np.mean([keys[i][1] for i in best]))
    return FieldConsensus(row_offset=row_off, col_offset=col_off,
                          version=keys[best[0]][2], members=members, flagged=flagged)
