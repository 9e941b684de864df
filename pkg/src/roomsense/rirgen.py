"""Shoebox room impulse response simulation and acoustic ground truth.

Rooms are rectangular boxes with a single frequency-flat area-weighted
mean absorption coefficient. RIRs come from the image-source method;
RT60 labels come from backward integration of the squared impulse
response (Schroeder) with a T20 line fit extrapolated to 60 dB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_SOUND = 343.0  # m/s
DEFAULT_SAMPLE_RATE = 16000
DEFAULT_MAX_IMAGE_ORDER = 20
DEFAULT_DURATION_S = 4.0


class InsufficientDecayError(ValueError):
    """Energy decay curve never reaches the fit range."""


@dataclass(frozen=True)
class ShoeboxRoom:
    length_m: float
    width_m: float
    height_m: float
    absorption: float
    max_image_order: int = DEFAULT_MAX_IMAGE_ORDER

    def __post_init__(self):
        for name in ("length_m", "width_m", "height_m"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.absorption <= 1.0):
            raise ValueError("absorption must lie in (0, 1]")
        if self.max_image_order < 0:
            raise ValueError("max_image_order must be non-negative")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])

    @property
    def volume_m3(self) -> float:
        return self.length_m * self.width_m * self.height_m

    @property
    def surface_m2(self) -> float:
        l, w, h = self.length_m, self.width_m, self.height_m
        return 2.0 * (l * w + l * h + w * h)


@dataclass
class Rir:
    samples: np.ndarray
    sample_rate_hz: int
    room_id: str
    volume_m3: float
    rt60_s: float
    source_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mic_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("RIR must be non-empty")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")


@dataclass
class EnergyDecayCurve:
    values_db: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.values_db = np.asarray(self.values_db, dtype=np.float64)
        if self.values_db.size and self.values_db[0] != 0.0:
            raise ValueError("EDC must start at 0 dB")


def room_volume(room: ShoeboxRoom) -> float:
    return room.volume_m3


def sabine_rt60(volume_m3: float, surface_m2: float, absorption: float) -> float:
    """RT60 of an ideal diffuse field: 0.161 * V / (alpha * S)."""
    if volume_m3 <= 0 or surface_m2 <= 0 or absorption <= 0:
        raise ValueError("sabine_rt60 arguments must be positive")
    if absorption > 1.0:
        raise ValueError("absorption must be <= 1")
    return 0.161 * volume_m3 / (absorption * surface_m2)


def _image_sources(room: ShoeboxRoom, source_pos, mic_pos):
    """Enumerate image-source distances and reflection orders.

    Images follow the standard mirror construction: per axis the image
    coordinate is (-1)^p * x_s + 2 m L with reflection count
    |m - p| + |m| against the two walls orthogonal to that axis.
    Only images with total order <= max_image_order are kept.
    """
    dims = room.dims
    order = room.max_image_order
    # per-axis m range: |m - p| + |m| <= order bounds |m| <= (order + 1) // 2
    half = order // 2 + 1
    m = np.arange(-half, half + 1)

    axes = []
    for ax in range(3):
        coords = []
        refl = []
        for p in (0, 1):
            x = (1 - 2 * p) * source_pos[ax] + 2.0 * m * dims[ax]
            r = np.abs(m - p) + np.abs(m)
            keep = r <= order
            coords.append(x[keep])
            refl.append(r[keep])
        axes.append((np.concatenate(coords), np.concatenate(refl)))

    (cx, rx), (cy, ry), (cz, rz) = axes
    # total order filter on the separable grid, kept vectorized per z slab
    # to bound memory
    dist_list, order_list = [], []
    dx2 = (cx - mic_pos[0]) ** 2
    dy2 = (cy - mic_pos[1]) ** 2
    rxy = rx[:, None] + ry[None, :]
    dxy2 = dx2[:, None] + dy2[None, :]
    keep_xy = rxy <= order
    rxy = rxy[keep_xy]
    dxy2 = dxy2[keep_xy]
    for z, rz_i in zip(cz, rz):
        tot = rxy + rz_i
        keep = tot <= order
        if not np.any(keep):
            continue
        d = np.sqrt(dxy2[keep] + (z - mic_pos[2]) ** 2)
        dist_list.append(d)
        order_list.append(tot[keep])
    return np.concatenate(dist_list), np.concatenate(order_list)


def simulate_rir(
    room: ShoeboxRoom,
    source_pos,
    mic_pos,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
    duration_s: float = DEFAULT_DURATION_S,
    room_id: str = "room",
) -> Rir:
    """Image-source RIR with nearest-sample delays and 1/d spreading.

    Each image contributes sqrt(1 - absorption)^order / distance at the
    rounded propagation delay. The returned Rir carries the room volume
    and the Schroeder RT60 of the simulated response as labels.
    """
    source_pos = np.asarray(source_pos, dtype=np.float64)
    mic_pos = np.asarray(mic_pos, dtype=np.float64)
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    for name, pos in (("source_pos", source_pos), ("mic_pos", mic_pos)):
        if np.any(pos <= 0) or np.any(pos >= room.dims):
            raise ValueError(f"{name} must be strictly inside the room")

    dist, orders = _image_sources(room, source_pos, mic_pos)
    beta = np.sqrt(1.0 - room.absorption)
    amps = beta ** orders / np.maximum(dist, 1e-6)
    delays = np.rint(sample_rate_hz * dist / SPEED_OF_SOUND).astype(np.int64)

    n = int(round(duration_s * sample_rate_hz))
    h = np.zeros(n, dtype=np.float64)
    keep = delays < n
    np.add.at(h, delays[keep], amps[keep])

    rt60 = estimate_rt60(schroeder_decay_samples(h, sample_rate_hz))
    return Rir(
        samples=h,
        sample_rate_hz=sample_rate_hz,
        room_id=room_id,
        volume_m3=room.volume_m3,
        rt60_s=rt60,
        source_pos=source_pos,
        mic_pos=mic_pos,
    )


def schroeder_decay_samples(h: np.ndarray, sample_rate_hz: int) -> EnergyDecayCurve:
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0 or not np.any(h):
        raise ValueError("RIR is empty or all zero; decay undefined")
    energy = np.cumsum((h ** 2)[::-1])[::-1]
    total = energy[0]
    with np.errstate(divide="ignore"):
        edc = 10.0 * np.log10(energy / total)
    return EnergyDecayCurve(values_db=edc, sample_rate_hz=sample_rate_hz)


def schroeder_decay(rir: Rir) -> EnergyDecayCurve:
    """Backward-integrated squared impulse response, normalized to 0 dB."""
    return schroeder_decay_samples(rir.samples, rir.sample_rate_hz)


def estimate_rt60(edc: EnergyDecayCurve) -> float:
    """T20 estimate: line fit on the -5..-25 dB segment, extrapolated x3."""
    db = edc.values_db
    fs = edc.sample_rate_hz
    finite = np.isfinite(db)
    i5 = np.argmax(finite & (db <= -5.0))
    i25 = np.argmax(finite & (db <= -25.0))
    if db[i25] > -25.0 or db[i5] > -5.0 or i25 <= i5 + 1:
        raise InsufficientDecayError("EDC never reaches the -5..-25 dB fit range")
    t = np.arange(i5, i25 + 1) / fs
    y = db[i5 : i25 + 1]
    slope, _ = np.polyfit(t, y, 1)
    if slope >= 0:
        raise InsufficientDecayError("non-decaying EDC segment")
    return 3.0 * (20.0 / -slope)


def sample_room_geometry(room: ShoeboxRoom, n_receivers: int = 5, seed: int = 0):
    """Deterministic source/receiver placement for a simulated room.

    One source near the room center (seeded jitter) and receivers on a
    stratified grid through the volume, all kept off the walls.
    """
    rng = np.random.default_rng(seed)
    dims = room.dims
    margin = 0.08 * dims
    source = dims / 2.0 + rng.uniform(-0.05, 0.05, size=3) * dims
    source = np.clip(source, margin, dims - margin)

    # stratified along the main diagonal with jitter, spread through the volume
    fracs = (np.arange(n_receivers) + 0.5) / n_receivers
    receivers = []
    for k, f in enumerate(fracs):
        base = dims * np.array([f, fracs[(k + 2) % n_receivers], fracs[(k + 3) % n_receivers]])
        pos = base + rng.uniform(-0.04, 0.04, size=3) * dims
        pos = np.clip(pos, margin, dims - margin)
        # avoid degenerate coincidence with the source
        if np.linalg.norm(pos - source) < 0.05 * np.min(dims):
            pos = np.clip(pos + 0.1 * dims, margin, dims - margin)
        receivers.append(pos)
    return source, receivers
