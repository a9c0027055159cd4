"""Cross-experiment emitter registration: similarity transforms into the
marker-defined global frame, distance-capped clustering of sites into
persistent tracks, and per-track spectral differencing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .physics import NVLabels


class UnderdeterminedError(NumericError):
    """Too few or degenerate point pairs to fit a transform."""


@dataclass
class SimilarityTransform:
    """g = scale * R(rotation) @ p + translation, in micrometers."""

    scale: float = 1.0
    rotation_rad: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rms_residual: float | None = None

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float)
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation_rad), np.sin(self.rotation_rad)
        return self.scale * np.array([[c, -s], [s, c]])

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.rotation_rad), np.sin(-self.rotation_rad)
        rot_inv = np.array([[c, -s], [s, c]])
        return SimilarityTransform(scale=inv_scale, rotation_rad=-self.rotation_rad,
                                   translation=-inv_scale * rot_inv @ self.translation)


def to_global(transform: SimilarityTransform, points) -> np.ndarray:
    """Map local microscope coordinates into the global sample frame."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = pts @ transform.matrix().T + transform.translation
    return out[0] if np.asarray(points).ndim == 1 else out


def to_local(transform: SimilarityTransform, points) -> np.ndarray:
    return to_global(transform.inverse(), points)


def fit_transform(local_points, global_points) -> SimilarityTransform:
    """Least-squares similarity transform between matched point sets.

    Closed-form solution via the cross-covariance SVD, rotation constrained
    to be proper (the sample is rigid, no reflections).  Needs two or more
    pairs with nonzero spread.
    """
    local = np.atleast_2d(np.asarray(local_points, dtype=float))
    glob = np.atleast_2d(np.asarray(global_points, dtype=float))
    if local.shape != glob.shape or local.shape[1] != 2:
        raise ValueError("point lists must be matched Nx2 arrays")
    n = local.shape[0]
    if n < 2:
        raise UnderdeterminedError("need at least 2 point pairs")
    mu_l = local.mean(axis=0)
    mu_g = glob.mean(axis=0)
    lc = local - mu_l
    gc = glob - mu_g
    var_l = float((lc**2).sum()) / n
    if var_l == 0:
        raise UnderdeterminedError("local points are coincident")
    cov = gc.T @ lc / n
    u_mat, svals, vt_mat = np.linalg.svd(cov)
    d_sign = np.sign(np.linalg.det(u_mat @ vt_mat)) or 1.0
    diag = np.array([1.0, d_sign])
    rot = u_mat @ np.diag(diag) @ vt_mat
    scale = float((svals * diag).sum() / var_l)
    if scale <= 0:
        raise UnderdeterminedError("degenerate configuration, non-positive scale")
    translation = mu_g - scale * rot @ mu_l
    rotation = float(np.arctan2(rot[1, 0], rot[0, 0]))
    transform = SimilarityTransform(scale=scale, rotation_rad=rotation,
                                    translation=translation)
    residuals = to_global(transform, local) - glob
    transform.rms_residual = float(np.sqrt((residuals**2).sum() / n))
    return transform


@dataclass
class RegisteredSite:
    """One emitter observation in global coordinates with spectral labels."""

    position_um: np.ndarray
    labels: NVLabels | None = None

    def __post_init__(self):
        self.position_um = np.asarray(self.position_um, dtype=float)
        if not np.all(np.isfinite(self.position_um)):
            raise ValueError("site position must be finite")


@dataclass
class ExperimentRecord:
    experiment_id: int
    transform: SimilarityTransform
    sites: list


@dataclass
class TrackMember:
    experiment_id: int
    site: RegisteredSite


@dataclass
class ClusterTrack:
    track_id: int
    members: list
    centroid: np.ndarray

    def experiments(self) -> list[int]:
        return sorted(m.experiment_id for m in self.members)


def cluster_sites(records, threshold_um: float) -> list[ClusterTrack]:
    """Group sites across experiments into tracks of one physical emitter.

    Kruskal-style single linkage over the inter-site distance graph with two
    admission rules: a merge may not put two sites from one experiment in the
    same track, and may not stretch any pairwise distance past threshold_um
    (a hard diameter cap).  Ties break on distance, then experiment ids.
    Refused sites simply seed their own tracks.
    """
    if threshold_um <= 0:
        raise ValueError("threshold must be positive")
    items = [(rec.experiment_id, site) for rec in records for site in rec.sites]
    n = len(items)
    if n == 0:
        return []
    pos = np.array([it[1].position_um for it in items])
    exps = [it[0] for it in items]

    edges = []
    for i in range(n):
        d = np.hypot(pos[i + 1:, 0] - pos[i, 0], pos[i + 1:, 1] - pos[i, 1])
        for off in np.nonzero(d <= threshold_um)[0]:
            j = i + 1 + off
            edges.append((float(d[off]), min(exps[i], exps[j]),
                          max(exps[i], exps[j]), i, j))
    edges.sort()

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    for dist, _, _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        a, b = members[ri], members[rj]
        if {exps[k] for k in a} & {exps[k] for k in b}:
            continue
        cross = np.hypot(pos[a][:, None, 0] - pos[b][None, :, 0],
                         pos[a][:, None, 1] - pos[b][None, :, 1])
        if cross.max() > threshold_um:
            continue
        parent[rj] = ri
        members[ri] = a + b
        del members[rj]

    tracks = []
    roots = sorted(members, key=lambda r: (min(members[r])))
    for tid, root in enumerate(roots):
        group = [TrackMember(experiment_id=exps[k], site=items[k][1])
                 for k in sorted(members[root])]
        centroid = pos[sorted(members[root])].mean(axis=0)
        tracks.append(ClusterTrack(track_id=tid, members=group, centroid=centroid))
    return tracks


def occupancy_histogram(tracks, n_experiments: int):
    """(counts, overfull): counts[k] is the number of tracks seen in exactly
    k+1 experiments; tracks with more members than experiments (necessarily
    clustering errors) land in the overfull bin."""
    if n_experiments < 1:
        raise ValueError("n_experiments must be >= 1")
    counts = np.zeros(n_experiments, dtype=int)
    overfull = 0
    for track in tracks:
        k = len(track.members)
        if k > n_experiments:
            overfull += 1
        elif k >= 1:
            counts[k - 1] += 1
    return counts, overfull


def diff_spectral(tracks, experiment_i: int, experiment_j: int):
    """Per-track label differences (experiment i minus experiment j).

    Returns a list of (track_id, delta_mean_ghz, delta_splitting_ghz);
    tracks lacking either experiment or its labels are skipped.
    """
    out = []
    for track in tracks:
        by_exp = {m.experiment_id: m.site for m in track.members}
        site_i, site_j = by_exp.get(experiment_i), by_exp.get(experiment_j)
        if site_i is None or site_j is None:
            continue
        if site_i.labels is None or site_j.labels is None:
            continue
        d_mean_ghz = (site_i.labels.mean_thz - site_j.labels.mean_thz) * 1000.0
        d_split_ghz = site_i.labels.splitting_ghz - site_j.labels.splitting_ghz
        out.append((track.track_id, d_mean_ghz, d_split_ghz))
    return out
