"""Simulated chip-scale traversal: serpentine field planning, marker-feedback
stage correction, and detection-driven autofocus.

The stage model is a random walk: every commanded move adds fresh Gaussian
error to a hidden drift.  Each field is refocused, its markers detected and
majority-voted, and the consensus offset converts into an absolute position
fix that cancels the accumulated drift on the next move.  Per-field failures
are recorded and the scan continues.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .fiducial import FiducialGeometry, NoConsensusError, detect, majority_vote
from .synth import FieldConfig, GroundTruthScene, field_fluorescence, render_field


class FocusFailureError(NumericError):
    """No marker detections at any focus position."""


@dataclass
class ScanConfig:
    field_pitch_um: float = 120.0
    field_config: FieldConfig = field(default_factory=FieldConfig)
    xy_jitter_um: float = 0.0          # per-move random-walk step, each axis
    z_jitter_um: float = 0.0
    autofocus_range_um: float = 6.0
    autofocus_steps: int = 5
    detect_threshold_k: float = 8.0
    seed: int = 0


@dataclass
class FieldRecord:
    planned_row: int
    planned_col: int
    consensus_row: int | None
    consensus_col: int | None
    version: int | None
    focus_z_um: float
    n_detections: int
    n_checksum_ok: int
    fluorescence: dict
    stage_error_um: float              # |true - ideal| after the move, diagnostics
    error: str | None = None


def plan_traversal(chip_extent_um: tuple[float, float],
                   field_size_um: float) -> list[tuple[int, int]]:
    """Serpentine (boustrophedon) field order covering the chip exactly once."""
    if field_size_um <= 0:
        raise ValueError("field size must be positive")
    cols = max(1, int(np.floor(chip_extent_um[0] / field_size_um + 1e-9)))
    rows = max(1, int(np.floor(chip_extent_um[1] / field_size_um + 1e-9)))
    order = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        order.extend((r, c) for c in cs)
    return order


def autofocus(render, z_range: tuple[float, float], steps: int,
              geometry: FiducialGeometry, threshold_k: float = 8.0) -> tuple[float, float]:
    """Find the focus position maximizing total checksum-passing marker score.

    Coarse sweep over [z_lo, z_hi], then a parabolic refinement through the
    best sample and its neighbors; the refined point is kept only if it
    actually scores at least as high.  Returns (best_z, best_score).
    """
    if steps < 3:
        raise ValueError("autofocus needs at least 3 sweep steps")

    def metric(z):
        dets = detect(render(z), geometry, threshold_k=threshold_k)
        return sum(d.score for d in dets if d.checksum_ok)

    zs = np.linspace(z_range[0], z_range[1], steps)
    scores = np.array([metric(z) for z in zs])
    if np.all(scores <= 0):
        raise FocusFailureError("no marker detections anywhere in the focus sweep")
    best = int(np.argmax(scores))
    z_best, s_best = float(zs[best]), float(scores[best])
    if 0 < best < steps - 1:
        s_lo, s_mid, s_hi = scores[best - 1], scores[best], scores[best + 1]
        denom = s_lo - 2 * s_mid + s_hi
        if denom < 0:
            shift = 0.5 * (s_lo - s_hi) / denom
            z_ref = float(zs[best] + shift * (zs[1] - zs[0]))
            s_ref = metric(z_ref)
            if s_ref >= s_best:
                z_best, s_best = z_ref, s_ref
    return z_best, s_best


def _field_target_um(row: int, col: int, config: ScanConfig) -> np.ndarray:
    """Ideal view center: the field's marker plus half its footprint."""
    geom = config.field_config.marker_geometry
    span_px = geom.arm_length * geom.module_pitch / 2.0
    offset = span_px * config.field_config.pixel_size_um
    pitch = config.field_pitch_um
    return np.array([(col + 1) * pitch + offset, (row + 1) * pitch + offset])


def run_chip_scan(scene: GroundTruthScene, plan, config: ScanConfig) -> list[FieldRecord]:
    """Traverse the plan, refocusing and re-registering at every field.

    The consensus grid offset measured in each field yields the absolute
    stage position; the difference to the commanded position updates the
    drift estimate applied to subsequent moves.
    """
    rng = np.random.default_rng(config.seed)
    fc = config.field_config
    geom = fc.marker_geometry
    px = fc.pixel_size_um
    h_px, w_px = fc.field_size_px
    pitch_px = config.field_pitch_um / px

    drift = np.zeros(2)          # hidden stage error (random walk)
    drift_est = np.zeros(2)
    z_drift = 0.0
    z_center = 0.0               # sweep center, carried from the last good focus

    records: list[FieldRecord] = []
    for (row, col) in plan:
        target = _field_target_um(row, col, config)
        commanded = target - drift_est
        drift = drift + rng.normal(0.0, config.xy_jitter_um, size=2)
        z_drift = z_drift + rng.normal(0.0, config.z_jitter_um)
        true_pose = commanded + drift
        stage_error = float(np.hypot(*(true_pose - target)))

        def render(z_cmd):
            return render_field(scene, tuple(true_pose), z_cmd + z_drift, config=fc)

        try:
            z_window = (z_center - config.autofocus_range_um,
                        z_center + config.autofocus_range_um)
            focus_z, _ = autofocus(render, z_window, config.autofocus_steps,
                                   geom, threshold_k=config.detect_threshold_k)
            image = render(focus_z)
            detections = detect(image, geom, threshold_k=config.detect_threshold_k)
            consensus = majority_vote(detections, pitch_px)
        except (FocusFailureError, NoConsensusError) as err:
            records.append(FieldRecord(
                planned_row=row, planned_col=col, consensus_row=None,
                consensus_col=None, version=None, focus_z_um=z_center,
                n_detections=0, n_checksum_ok=0, fluorescence={},
                stage_error_um=stage_error, error=type(err).__name__))
            continue

        # nearest member to the view center names the field
        center_member = min(
            consensus.members,
            key=lambda d: np.hypot(d.origin_px[0] - w_px / 2, d.origin_px[1] - h_px / 2))
        # absolute position fix from the fractional grid offset
        measured_pose = np.array([
            (consensus.col_offset + 1.0) * config.field_pitch_um + (w_px / 2.0) * px,
            (consensus.row_offset + 1.0) * config.field_pitch_um + (h_px / 2.0) * px,
        ])
        drift_est = measured_pose - commanded
        z_center = focus_z

        records.append(FieldRecord(
            planned_row=row, planned_col=col,
            consensus_row=center_member.payload.row,
            consensus_col=center_member.payload.col,
            version=consensus.version, focus_z_um=focus_z,
            n_detections=len(detections),
            n_checksum_ok=sum(d.checksum_ok for d in detections),
            fluorescence=field_fluorescence(scene, tuple(true_pose), fc),
            stage_error_um=stage_error, error=None))
    return records
