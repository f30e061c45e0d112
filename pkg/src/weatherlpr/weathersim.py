"""Physics-based fog / snow / rain corruption of LiDAR scans.

Fog: each return is split into a hard-target response i * exp(-2*alpha*R0)
and a soft (backscatter) response i * R0^2 * beta * it_max; whichever is
stronger wins. Soft winners are relocated toward the sensor by a seeded
scatter range and labeled noise.

Snow and rain share one particle-interaction model: per beam, a seeded draw
decides whether the beam hits an airborne particle (probability grows with
the precipitation rate), in which case the return intensity follows the
focal-curve model and the coordinates are rescaled; a second draw models
full occlusion (beam dropped).

All corruption is deterministic given (params.seed, frame_id): the RNG
stream is derived per scan, so scans can be processed in any order or in
parallel without changing results.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .pointcloud import PointCloud

DETECT_FLOOR = 0.005   # attenuated returns below this intensity are lost
SCATTER_MIN = 1.5      # meters; nearest plausible particle return


@dataclass(frozen=True)
class FogParams:
    alpha: float          # attenuation coefficient (1/m)
    beta: float           # noise factor / differential reflectivity ratio
    it_max: float = 0.8   # peak soft-target response
    seed: int = 0
    floor: float = DETECT_FLOOR

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.it_max <= 1:
            raise ValueError("it_max must be in (0, 1]")


@dataclass(frozen=True)
class SnowParams:
    rate: float            # snowfall rate r_s (mm/h)
    gamma: float = 5.0     # target differential reflectivity coefficient
    f_s: float = 0.5       # focal slope
    f_o: float = 0.1       # focal offset
    i_max: float = 1.0
    r_max: float = 80.0    # farthest detectable range (m)
    t_r: float = 0.05      # response floor at the focal point
    hit_coeff: float = 0.12       # particle-hit probability per mm/h
    occlusion_coeff: float = 0.04  # full-occlusion probability per mm/h
    seed: int = 0

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be non-negative")
        if self.gamma <= 0 or self.r_max <= 0:
            raise ValueError("gamma and r_max must be positive")


@dataclass(frozen=True)
class RainParams:
    rate: float            # rain rate r_r (mm/h)
    gamma: float = 100.0   # droplet reflectivity coefficient
    f_s: float = 0.25
    f_o: float = 0.1
    i_max: float = 1.0
    r_max: float = 80.0
    t_r: float = 0.03
    hit_coeff: float = 0.006
    occlusion_coeff: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be non-negative")
        if self.gamma <= 0 or self.r_max <= 0:
            raise ValueError("gamma and r_max must be positive")


@dataclass(frozen=True)
class CorruptionAnnotation:
    """Per-output-point labels plus the input indices that were dropped.

    noise_mask[k] is True when output point k is a weather artifact;
    source_index[k] is the input point it originated from. particle_range
    records the sampled particle range for particle-model noise (NaN for
    fog noise and clean points).
    """

    noise_mask: np.ndarray        # (n_out,) bool
    source_index: np.ndarray      # (n_out,) int
    dropped: np.ndarray           # input indices lost to the weather
    particle_range: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.particle_range is None:
            object.__setattr__(self, "particle_range",
                               np.full(len(self.noise_mask), np.nan))

    @property
    def noise_count(self) -> int:
        return int(self.noise_mask.sum())


def scan_rng(seed: int, frame_id: str) -> np.random.Generator:
    """Per-scan RNG stream: seed split by a CRC of the frame id."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(frame_id.encode())]))


def corrupt_fog(cloud: PointCloud, p: FogParams):
    rng = scan_rng(p.seed, cloud.frame_id)
    n = len(cloud)
    r0 = cloud.ranges
    i0 = cloud.intensity

    i_hard = i0 * np.exp(-2.0 * p.alpha * r0)
    i_soft = i0 * r0 ** 2 * p.beta * p.it_max
    soft = i_soft > i_hard
    soft &= r0 > 0  # zero-range points pass through unchanged

    # scatter ranges are drawn for every point so branch membership never
    # perturbs the stream; only soft winners consume theirs
    low = np.minimum(SCATTER_MIN, 0.5 * r0)
    r_scatter = low + rng.random(n) * np.maximum(r0 - low, 0.0)

    pts = cloud.points.copy()
    scale = np.where(soft & (r0 > 0), r_scatter / np.maximum(r0, 1e-12), 1.0)
    pts[:, :3] *= scale[:, None]
    new_i = np.where(soft, np.clip(i_soft, 0.0, 1.0), i_hard)
    nonzero = r0 > 0
    pts[:, 3] = np.where(nonzero, new_i, i0)

    # detectability floor: only genuinely attenuated returns can be lost
    lost = nonzero & (pts[:, 3] < p.floor) & (pts[:, 3] < i0)
    keep = ~lost
    ann = CorruptionAnnotation(
        noise_mask=(soft & keep)[keep],
        source_index=np.flatnonzero(keep),
        dropped=np.flatnonzero(lost),
    )
    return PointCloud(pts[keep], frame_id=cloud.frame_id), ann


def _particle_corrupt(cloud: PointCloud, rate, gamma, f_s, f_o, i_max, r_max,
                      t_r, hit_coeff, occlusion_coeff, seed):
    """Shared snow/rain machinery; see module docstring."""
    rng = scan_rng(seed, cloud.frame_id)
    n = len(cloud)
    r0 = cloud.ranges

    # fixed-size draws keep monotonicity across rates on the same seed
    u_hit = rng.random(n)
    u_occ = rng.random(n)
    u_range = rng.random(n)

    p_hit = min(1.0, hit_coeff * rate)
    p_occ = min(1.0, occlusion_coeff * rate)
    eligible = r0 > SCATTER_MIN
    hit = (u_hit < p_hit) & eligible
    occluded = (~hit) & (u_occ < p_occ) & eligible

    r_star = SCATTER_MIN + u_range * (np.minimum(r0, r_max) - SCATTER_MIN)
    i_snow = snow_intensity(r_star, f_s=f_s, f_o=f_o, i_max=i_max,
                            r_max=r_max, t_r=t_r)

    pts = cloud.points.copy()
    scale = np.where(hit, rate / gamma, 1.0)
    pts[:, :3] *= scale[:, None]
    pts[:, 3] = np.where(hit, i_snow, pts[:, 3])

    keep = ~occluded
    particle = np.full(n, np.nan)
    particle[hit] = r_star[hit]
    ann = CorruptionAnnotation(
        noise_mask=hit[keep],
        source_index=np.flatnonzero(keep),
        dropped=np.flatnonzero(occluded),
        particle_range=particle[keep],
    )
    return PointCloud(pts[keep], frame_id=cloud.frame_id), ann


def snow_intensity(r_star, *, f_s, f_o, i_max, r_max, t_r):
    """Focal-curve particle return response, clipped to [0, 1]."""
    raw = t_r + i_max * f_s * np.abs(f_o - (1.0 - r_star / r_max)) ** 2
    return np.clip(raw, 0.0, 1.0)


def corrupt_snow(cloud: PointCloud, p: SnowParams):
    return _particle_corrupt(
        cloud, rate=p.rate, gamma=p.gamma, f_s=p.f_s, f_o=p.f_o, i_max=p.i_max,
        r_max=p.r_max, t_r=p.t_r, hit_coeff=p.hit_coeff,
        occlusion_coeff=p.occlusion_coeff, seed=p.seed)


def corrupt_rain(cloud: PointCloud, p: RainParams):
    return _particle_corrupt(
        cloud, rate=p.rate, gamma=p.gamma, f_s=p.f_s, f_o=p.f_o, i_max=p.i_max,
        r_max=p.r_max, t_r=p.t_r, hit_coeff=p.hit_coeff,
        occlusion_coeff=p.occlusion_coeff, seed=p.seed)


# severity presets; the three levels per corruption are ordered mild to severe
_FOG_LEVELS = {1: (0.003, 0.008), 2: (0.006, 0.02), 3: (0.01, 0.05)}   # alpha, beta
_SNOW_LEVELS = {1: 0.5, 2: 1.5, 3: 2.5}                                # r_s mm/h
_RAIN_LEVELS = {1: 10.0, 2: 25.0, 3: 50.0}                             # r_r mm/h

CORRUPTION_KINDS = ("snow", "fog", "rain")
SEVERITY_LEVELS = (1, 2, 3)


def severity_preset(kind: str, level: int, seed: int = 0):
    """Documented preset table mapping (kind, level) to typed parameters."""
    if kind == "fog":
        if level not in _FOG_LEVELS:
            raise ValueError(f"unknown fog severity level: {level}")
        alpha, beta = _FOG_LEVELS[level]
        return FogParams(alpha=alpha, beta=beta, seed=seed)
    if kind == "snow":
        if level not in _SNOW_LEVELS:
            raise ValueError(f"unknown snow severity level: {level}")
        return SnowParams(rate=_SNOW_LEVELS[level], seed=seed)
    if kind == "rain":
        if level not in _RAIN_LEVELS:
            raise ValueError(f"unknown rain severity level: {level}")
        return RainParams(rate=_RAIN_LEVELS[level], seed=seed)
    raise ValueError(f"unknown corruption kind: {kind}")


def corrupt(cloud: PointCloud, kind: str, params):
    if kind == "fog":
        return corrupt_fog(cloud, params)
    if kind == "snow":
        return corrupt_snow(cloud, params)
    if kind == "rain":
        return corrupt_rain(cloud, params)
    raise ValueError(f"unknown corruption kind: {kind}")


def with_seed(params, seed: int):
    """Copy of a params object with a different RNG seed."""
    return replace(params, seed=seed)


def write_annotations(records, path) -> None:
    """Line-oriented sidecar: per scan, the noise and dropped indices.

    Format, one scan per block:
        scan <frame_id>
        noise <space-separated output indices>
        dropped <space-separated input indices>
    """
    with open(path, "w") as fh:
        for frame_id, ann in records:
            fh.write(f"scan {frame_id}\n")
            fh.write("noise " + " ".join(map(str, np.flatnonzero(ann.noise_mask))) + "\n")
            fh.write("dropped " + " ".join(map(str, ann.dropped)) + "\n")


def read_annotations(path):
    """Parse a sidecar file back into {frame_id: (noise indices, dropped indices)}."""
    out = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    for k in range(0, len(lines), 3):
        frame_id = lines[k].split(" ", 1)[1]
        noise = np.array([int(t) for t in lines[k + 1].split()[1:]], dtype=int)
        dropped = np.array([int(t) for t in lines[k + 2].split()[1:]], dtype=int)
        out[frame_id] = (noise, dropped)
    return out
