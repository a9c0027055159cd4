"""Ground-truth scene generation and forward rendering.

Every pipeline claim in the suite is checked against scenes built here:
emitters with known positions and line parameters, markers at known grid
nodes, frame stacks rendered through a pixel-integrated Gaussian PSF with
optional excitation-power modulation and Poisson noise.  Rendering is
deterministic per seed, with per-frame noise substreams so parallel and
serial renders agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import EmitterScanError
from .fiducial import FiducialGeometry, FiducialPayload, draw_marker
from .physics import StrainState
from .ple import FrameStack
from .registry import ExperimentRecord, RegisteredSite, SimilarityTransform, to_global
from .physics import NVLabels


class OutOfBoundsError(EmitterScanError):
    """Requested pose lies outside the chip extent."""


@dataclass
class Transition:
    center_thz: float
    fwhm_mhz: float
    eta: float = 1.0              # Lorentzian fraction; 1 = lifetime-broadened
    brightness_cps: float = 1000.0

    def lineshape(self, frequencies_thz: np.ndarray) -> np.ndarray:
        """Peak-normalized pseudo-Voigt evaluated at the given frequencies."""
        u = 2.0 * (np.asarray(frequencies_thz) - self.center_thz) * 1e6 / self.fwhm_mhz
        lor = 1.0 / (1.0 + u**2)
        gau = np.exp(-np.log(2.0) * u**2)
        return self.eta * lor + (1.0 - self.eta) * gau


@dataclass
class Emitter:
    position_um: tuple[float, float]
    species: str = "generic"
    transitions: list = field(default_factory=list)
    strain: StrainState | None = None


@dataclass
class GroundTruthScene:
    emitters: list
    fiducials: list = field(default_factory=list)   # (FiducialPayload, (x_um, y_um))
    background_cps_per_px: float = 5.0
    chip_extent_um: tuple[float, float] = (128.0, 128.0)

    def __post_init__(self):
        w, h = self.chip_extent_um
        for e in self.emitters:
            x, y = e.position_um
            if not (0 <= x <= w and 0 <= y <= h):
                raise ValueError(f"emitter at {e.position_um} outside chip {self.chip_extent_um}")
            for t in e.transitions:
                if t.fwhm_mhz <= 0:
                    raise ValueError("transition fwhm must be positive")


@dataclass
class RenderConfig:
    frequency_axis_thz: np.ndarray
    psf_sigma_px: float = 2.0
    pixel_size_um: float = 1.0
    modulation: np.ndarray | None = None   # per-frequency multiplier, > 0
    exposure_s: float = 1.0
    noise: str = "none"                    # "none" | "poisson"
    seed: int = 0

    def __post_init__(self):
        self.frequency_axis_thz = np.asarray(self.frequency_axis_thz, dtype=float)
        if self.psf_sigma_px <= 0:
            raise ValueError("psf sigma must be positive")
        if self.modulation is not None:
            self.modulation = np.asarray(self.modulation, dtype=float)
            if self.modulation.shape != self.frequency_axis_thz.shape:
                raise ValueError("modulation must align with the frequency axis")
            if np.any(self.modulation <= 0):
                raise ValueError("modulation must be positive everywhere")
        if self.noise not in ("none", "poisson"):
            raise ValueError(f"unknown noise model {self.noise!r}")


def sinusoidal_modulation(n_frames: int, amplitude: float = 0.1,
                          cycles: float = 3.0) -> np.ndarray:
    """1 + amplitude * sin over the scan; the default drift model."""
    phase = np.linspace(0.0, 2.0 * np.pi * cycles, n_frames)
    return 1.0 + amplitude * np.sin(phase)


def psf_splat(shape: tuple[int, int], center_px: tuple[float, float],
              sigma_px: float) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Pixel-integrated unit-mass Gaussian footprint and its placement slices."""
    h, w = shape
    cx, cy = center_px
    r = int(np.ceil(6.0 * sigma_px)) + 1
    x0, x1 = max(int(np.floor(cx)) - r, 0), min(int(np.floor(cx)) + r + 1, w)
    y0, y1 = max(int(np.floor(cy)) - r, 0), min(int(np.floor(cy)) + r + 1, h)
    if x0 >= x1 or y0 >= y1:
        return np.zeros((0, 0)), (slice(0, 0), slice(0, 0))
    xs = np.arange(x0, x1)
    ys = np.arange(y0, y1)
    wx = ndtr((xs + 0.5 - cx) / sigma_px) - ndtr((xs - 0.5 - cx) / sigma_px)
    wy = ndtr((ys + 0.5 - cy) / sigma_px) - ndtr((ys - 0.5 - cy) / sigma_px)
    return np.outer(wy, wx), (slice(y0, y1), slice(x0, x1))


def render_stack(scene: GroundTruthScene, config: RenderConfig) -> FrameStack:
    """Render the widefield stack of a scene.

    Expected counts per frame: (sum of emitter rates splatted through the
    PSF + flat background) * modulation * exposure; Poisson-sampled when
    enabled, with a (seed, frame) substream per frame.
    """
    freqs = config.frequency_axis_thz
    n = len(freqs)
    w_px = int(np.ceil(scene.chip_extent_um[0] / config.pixel_size_um))
    h_px = int(np.ceil(scene.chip_extent_um[1] / config.pixel_size_um))
    modulation = config.modulation if config.modulation is not None else np.ones(n)

    splats = []
    rates = []
    for emitter in scene.emitters:
        px = (emitter.position_um[0] / config.pixel_size_um,
              emitter.position_um[1] / config.pixel_size_um)
        splats.append(psf_splat((h_px, w_px), px, config.psf_sigma_px))
        rate = np.zeros(n)
        for t in emitter.transitions:
            rate += t.brightness_cps * t.lineshape(freqs)
        rates.append(rate)

    frames = np.empty((n, h_px, w_px))
    for k in range(n):
        frame = np.full((h_px, w_px), float(scene.background_cps_per_px))
        for (foot, slc), rate in zip(splats, rates):
            if rate[k] > 0 and foot.size:
                frame[slc] += rate[k] * foot
        frame *= modulation[k] * config.exposure_s
        if config.noise == "poisson":
            rng = np.random.default_rng([config.seed, k])
            frame = rng.poisson(frame).astype(float)
        frames[k] = frame
    return FrameStack(frequencies_thz=freqs, exposures_s=np.full(n, config.exposure_s),
                      frames=frames, pixel_size_um=config.pixel_size_um)


# ---------------------------------------------------------------------------
# chip-field rendering (for the room-temperature scan)

@dataclass
class FieldConfig:
    field_size_px: tuple[int, int] = (128, 128)   # (height, width)
    pixel_size_um: float = 1.0
    base_psf_sigma_px: float = 1.0
    defocus_coef_per_um: float = 0.5
    true_focus_z_um: float = 0.0
    marker_geometry: FiducialGeometry = field(default_factory=FiducialGeometry)
    marker_amplitude: float = 100.0
    background: float = 10.0
    noise: str = "none"
    seed: int = 0
    channel_weights: dict = field(default_factory=lambda: {
        "737nm": {"SiV": 1.0}, "620nm": {"SnV": 1.0}, "600nm": {"GeV": 1.0},
    })


def defocus_sigma(sigma0_px: float, coef_per_um: float, dz_um: float) -> float:
    """Effective blur width: base PSF and defocus add in quadrature."""
    return float(np.sqrt(sigma0_px**2 + (coef_per_um * dz_um) ** 2))


def render_field(scene: GroundTruthScene, stage_pose_um: tuple[float, float],
                 focus_z_um: float, config: FieldConfig) -> np.ndarray:
    """Reflection-style image of the field of view centered on the pose.

    Markers render as dot patterns, emitters as PSF spots; both blur with
    the defocus-widened PSF.  The pose must lie on the chip.
    """
    from .imageproc import gaussian_smooth

    w_chip, h_chip = scene.chip_extent_um
    px_um = config.pixel_size_um
    pose_x, pose_y = stage_pose_um
    if not (0 <= pose_x <= w_chip and 0 <= pose_y <= h_chip):
        raise OutOfBoundsError(f"stage pose {stage_pose_um} outside chip")
    h_px, w_px = config.field_size_px
    sigma = defocus_sigma(config.base_psf_sigma_px, config.defocus_coef_per_um,
                          focus_z_um - config.true_focus_z_um)

    canvas = np.zeros((h_px, w_px))
    half_w_um = w_px * px_um / 2.0
    half_h_um = h_px * px_um / 2.0
    geom = config.marker_geometry
    marker_span_um = geom.arm_length * geom.module_pitch * px_um
    for payload, (mx, my) in scene.fiducials:
        if (abs(mx - pose_x) > half_w_um + 2 * marker_span_um
                or abs(my - pose_y) > half_h_um + 2 * marker_span_um):
            continue
        origin = ((mx - pose_x) / px_um + w_px / 2.0,
                  (my - pose_y) / px_um + h_px / 2.0)
        draw_marker(canvas, payload, geom, origin, amplitude=config.marker_amplitude)
    canvas = gaussian_smooth(canvas, sigma)

    for emitter in scene.emitters:
        ex, ey = emitter.position_um
        px = ((ex - pose_x) / px_um + w_px / 2.0, (ey - pose_y) / px_um + h_px / 2.0)
        brightness = sum(t.brightness_cps for t in emitter.transitions)
        foot, slc = psf_splat((h_px, w_px), px, sigma)
        if foot.size:
            canvas[slc] += brightness * foot

    canvas += config.background
    if config.noise == "poisson":
        rng = np.random.default_rng([config.seed, int(pose_x * 7919), int(pose_y * 104729)])
        canvas = rng.poisson(np.clip(canvas, 0, None)).astype(float)
    return canvas


def field_fluorescence(scene: GroundTruthScene, stage_pose_um, config: FieldConfig) -> dict:
    """Per-filter-channel brightness summaries of emitters within the view."""
    w_px, h_px = config.field_size_px[1], config.field_size_px[0]
    half_w_um = w_px * config.pixel_size_um / 2.0
    half_h_um = h_px * config.pixel_size_um / 2.0
    totals = {ch: 0.0 for ch in config.channel_weights}
    for emitter in scene.emitters:
        ex, ey = emitter.position_um
        if abs(ex - stage_pose_um[0]) > half_w_um or abs(ey - stage_pose_um[1]) > half_h_um:
            continue
        brightness = sum(t.brightness_cps for t in emitter.transitions)
        for ch, weights in config.channel_weights.items():
            totals[ch] += brightness * weights.get(emitter.species, 0.0)
    return totals


# ---------------------------------------------------------------------------
# scene templates

def _grid_positions(n: int, extent: tuple[float, float], margin: float,
                    rng: np.random.Generator, jitter: float = 0.5):
    """n positions on a jittered square grid with the given edge margin."""
    w, h = extent
    cols = int(np.ceil(np.sqrt(n * (w - 2 * margin) / (h - 2 * margin))))
    rows = int(np.ceil(n / cols))
    xs = np.linspace(margin, w - margin, cols)
    ys = np.linspace(margin, h - margin, rows)
    out = []
    for y in ys:
        for x in xs:
            if len(out) < n:
                out.append((float(x + rng.uniform(-jitter, jitter)),
                            float(y + rng.uniform(-jitter, jitter))))
    return out


def generate_scene(template: str, seed: int = 0, **overrides) -> GroundTruthScene:
    """Build a ground-truth scene from a named template.

    "narrow-doublet" (sample-A-like): single-species emitters whose line
    centers draw from two tight Gaussian populations.  "implant-grid"
    (sample-B-like): emitters on a regular grid with centers spread over a
    configurable broad band.  "custom": overrides supply everything.
    """
    rng = np.random.default_rng(seed)
    if template in ("sample-a", "narrow-doublet"):
        params = dict(n_emitters=400, extent=(160.0, 160.0), margin=12.0,
                      populations=((406.8141, 59e-6, 0.55), (406.8136, 48e-6, 0.45)),
                      fwhm_range_mhz=(150.0, 250.0), brightness_cps=3000.0,
                      background_cps=10.0)
        params.update(overrides)
        positions = _grid_positions(params["n_emitters"], params["extent"],
                                    params["margin"], rng)
        pops = params["populations"]
        weights = np.array([p[2] for p in pops])
        weights = weights / weights.sum()
        emitters = []
        for pos in positions:
            which = rng.choice(len(pops), p=weights)
            center = rng.normal(pops[which][0], pops[which][1])
            fwhm = rng.uniform(*params["fwhm_range_mhz"])
            emitters.append(Emitter(position_um=pos, species="SiV",
                                    transitions=[Transition(center, fwhm,
                                                            brightness_cps=params["brightness_cps"])]))
        return GroundTruthScene(emitters=emitters,
                                background_cps_per_px=params["background_cps"],
                                chip_extent_um=params["extent"])

    if template in ("sample-b", "implant-grid"):
        params = dict(n_emitters=100, extent=(128.0, 128.0), margin=10.0,
                      center_thz=406.7, center_spread_ghz=8.0,
                      fwhm_range_mhz=(150.0, 400.0), brightness_cps=3000.0,
                      background_cps=10.0)
        params.update(overrides)
        positions = _grid_positions(params["n_emitters"], params["extent"],
                                    params["margin"], rng)
        half = params["center_spread_ghz"] / 2000.0
        emitters = []
        for pos in positions:
            center = params["center_thz"] + rng.uniform(-half, half)
            fwhm = rng.uniform(*params["fwhm_range_mhz"])
            emitters.append(Emitter(position_um=pos, species="SiV",
                                    transitions=[Transition(center, fwhm,
                                                            brightness_cps=params["brightness_cps"])]))
        return GroundTruthScene(emitters=emitters,
                                background_cps_per_px=params["background_cps"],
                                chip_extent_um=params["extent"])

    if template == "custom":
        return GroundTruthScene(**overrides)

    raise ValueError(f"unknown scene template {template!r}")


def generate_chip_scene(seed: int = 0, rows: int = 10, cols: int = 10,
                        field_pitch_um: float = 120.0, version: int = 1,
                        emitters_per_field: float = 3.0,
                        species_weights: dict | None = None,
                        brightness_cps: float = 300.0) -> GroundTruthScene:
    """Chip with a rows x cols grid of markers and sparse emitters between."""
    rng = np.random.default_rng(seed)
    species_weights = species_weights or {"SiV": 0.5, "SnV": 0.3, "GeV": 0.2}
    names = list(species_weights)
    probs = np.array([species_weights[s] for s in names], dtype=float)
    probs /= probs.sum()
    extent = (cols * field_pitch_um + field_pitch_um,
              rows * field_pitch_um + field_pitch_um)
    fiducials = []
    emitters = []
    for r in range(rows):
        for c in range(cols):
            origin = ((c + 0.5) * field_pitch_um + field_pitch_um / 2.0,
                      (r + 0.5) * field_pitch_um + field_pitch_um / 2.0)
            fiducials.append((FiducialPayload(version, r, c), origin))
            for _ in range(rng.poisson(emitters_per_field)):
                pos = (origin[0] + rng.uniform(-0.4, 0.4) * field_pitch_um,
                       origin[1] + rng.uniform(-0.4, 0.4) * field_pitch_um)
                species = names[rng.choice(len(names), p=probs)]
                emitters.append(Emitter(position_um=pos, species=species,
                                        transitions=[Transition(406.7, 200.0,
                                                                brightness_cps=brightness_cps)]))
    return GroundTruthScene(emitters=emitters, fiducials=fiducials,
                            chip_extent_um=extent)


# ---------------------------------------------------------------------------
# multi-experiment registry truth

@dataclass
class RegistryTruth:
    """Known site identities behind a set of experiment records."""

    base_positions_um: np.ndarray
    base_labels: list
    records: list                      # ExperimentRecord per experiment
    present: np.ndarray                # (n_experiments, n_sites) bool
    cohort_sign: np.ndarray            # +1 / -1 per site (mean-shift cohort)

    def occupancy_truth(self, n_experiments: int) -> np.ndarray:
        counts = np.zeros(n_experiments, dtype=int)
        per_site = self.present.sum(axis=0)
        for k in per_site:
            if k >= 1:
                counts[k - 1] += 1
        return counts


def generate_registry(seed: int = 0, n_experiments: int = 4, n_sites: int = 120,
                      extent_um: float = 400.0, site_spacing_um: float = 12.0,
                      jitter_um: float = 0.6, dropout: float = 0.1,
                      treated_experiment: int = 3, mean_shift_ghz: float = 0.15,
                      label_noise_ghz: float = 0.015) -> RegistryTruth:
    """Synthetic multi-experiment registry with known identities.

    Sites sit on a coarse grid (spacing many clustering thresholds apart);
    each experiment observes them through its own similarity transform with
    positional jitter and random dropout.  From the treated experiment on,
    half the sites shift their mean frequency up by mean_shift_ghz and half
    down, leaving splittings untouched.
    """
    rng = np.random.default_rng(seed)
    cols = int(np.floor(extent_um / site_spacing_um))
    nodes = [(c * site_spacing_um + site_spacing_um / 2.0,
              r * site_spacing_um + site_spacing_um / 2.0)
             for r in range(cols) for c in range(cols)]
    pick = rng.choice(len(nodes), size=n_sites, replace=False)
    base = np.array([nodes[i] for i in pick])
    base_labels = [NVLabels(mean_thz=470.4515 + rng.normal(0.0, 1e-3),
                            splitting_ghz=float(rng.uniform(2.0, 8.0)))
                   for _ in range(n_sites)]
    cohort = np.where(rng.random(n_sites) < 0.5, 1.0, -1.0)

    present = np.ones((n_experiments, n_sites), dtype=bool)
    records = []
    for e in range(n_experiments):
        if e > 0:
            present[e] = rng.random(n_sites) >= dropout
        transform = SimilarityTransform(
            scale=float(rng.uniform(0.97, 1.03)),
            rotation_rad=float(rng.uniform(-0.05, 0.05)),
            translation=rng.uniform(-20.0, 20.0, size=2),
        )
        sites = []
        for s in range(n_sites):
            if not present[e, s]:
                continue
            pos = base[s] + rng.normal(0.0, jitter_um, size=2)
            labels = base_labels[s]
            mean = labels.mean_thz + rng.normal(0.0, label_noise_ghz / 1000.0)
            split = labels.splitting_ghz + rng.normal(0.0, label_noise_ghz)
            if e >= treated_experiment - 1:
                mean += cohort[s] * mean_shift_ghz / 1000.0
            sites.append(RegisteredSite(position_um=pos,
                                        labels=NVLabels(mean, max(split, 0.0))))
        records.append(ExperimentRecord(experiment_id=e + 1, transform=transform,
                                        sites=sites))
    return RegistryTruth(base_positions_um=base, base_labels=base_labels,
                         records=records, present=present, cohort_sign=cohort)
