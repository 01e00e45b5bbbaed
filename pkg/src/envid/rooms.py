"""Shoebox rooms: sampling, mic/source grids, image-source AIRs, RT60 labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import ism_render
from .errors import DecayTooShort, InvalidGeometry, InvalidRoomSpec, RoomTooSmall

SPEED_OF_SOUND = 343.0  # m/s

# width/length ratio bands per shape category
SHAPE_BANDS = {
    "corridor": (0.1, 0.3),
    "rectangle": (0.4, 0.7),
    "square": (0.8, 1.0),
}

# image amplitude cutoff relative to the direct path
IMAGE_AMP_FLOOR = 1e-4


def _on_grid(v: float, step: float = 0.1) -> bool:
    return abs(v / step - round(v / step)) <= 1e-8


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    absorption: float
    shape_category: str
    room_id: str

    def __post_init__(self):
        if self.shape_category not in SHAPE_BANDS:
            raise InvalidRoomSpec(f"unknown shape category {self.shape_category!r}")
        if not (1.0 <= self.length <= 50.0) or not _on_grid(self.length):
            raise InvalidRoomSpec(f"length {self.length} not on the 0.1 m grid in [1, 50]")
        if not (2.0 <= self.height <= 5.0) or not _on_grid(self.height):
            raise InvalidRoomSpec(f"height {self.height} not on the 0.1 m grid in [2, 5]")
        lo, hi = SHAPE_BANDS[self.shape_category]
        f = self.width / self.length
        if not (lo - 1e-9 <= f <= hi + 1e-9):
            raise InvalidRoomSpec(
                f"width/length {f:.3f} outside [{lo}, {hi}] for {self.shape_category}")
        if not (0.1 <= self.absorption <= 0.8):
            raise InvalidRoomSpec(f"absorption {self.absorption} outside [0.1, 0.8]")

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface_area(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)


@dataclass(frozen=True)
class GridSpec:
    rows: int = 5
    cols: int = 5
    edge_margin: float = 0.3
    mic_height: float = 1.7
    source_mic_distance: float = 0.1


@dataclass(frozen=True)
class Placement:
    mic_position: tuple[float, float, float]
    source_position: tuple[float, float, float]
    grid_index: tuple[int, int]


@dataclass(eq=False)
class Air:
    sample_rate: int
    samples: np.ndarray
    room_id: str = ""  # empty for ad-hoc kernels not tied to a room
    grid_index: tuple[int, int] = (-1, -1)
    labels: dict = field(default_factory=dict)


def sample_room(shape_category: str, rng: np.random.Generator,
                absorption: float | None = None) -> RoomSpec:
    """Draw a room uniformly over the 0.1 m dimension grid for a category."""
    if shape_category not in SHAPE_BANDS:
        raise InvalidRoomSpec(f"unknown shape category {shape_category!r}")
    lo, hi = SHAPE_BANDS[shape_category]
    length = rng.integers(10, 501) / 10.0
    height = rng.integers(20, 51) / 10.0
    k_lo = math.ceil(lo * length * 10 - 1e-9)
    k_hi = math.floor(hi * length * 10 + 1e-9)
    width = rng.integers(k_lo, k_hi + 1) / 10.0
    if absorption is None:
        absorption = float(rng.uniform(0.1, 0.8))
    room_id = f"{shape_category}-{rng.integers(0, 2 ** 32):08x}"
    return RoomSpec(length=float(length), width=float(width), height=float(height),
                    absorption=float(absorption), shape_category=shape_category,
                    room_id=room_id)


def _axis_coords(extent: float, count: int, margin: float) -> list[float]:
    if count == 1:
        return [extent / 2.0]
    return [margin + i * (extent - 2.0 * margin) / (count - 1) for i in range(count)]


def grid_placements(room: RoomSpec, grid: GridSpec = GridSpec()) -> list[Placement]:
    """Equidistant mic grid with sources offset toward the room center."""
    need = 2.0 * grid.edge_margin
    if (grid.rows > 1 and room.length <= need) or (grid.cols > 1 and room.width <= need):
        raise RoomTooSmall(
            f"margin {grid.edge_margin} m does not fit a "
            f"{room.length} x {room.width} m floor")
    if not (0.0 < grid.mic_height < room.height):
        raise RoomTooSmall(f"mic height {grid.mic_height} m outside room height")

    cx, cy = room.length / 2.0, room.width / 2.0
    out = []
    for r, x in enumerate(_axis_coords(room.length, grid.rows, grid.edge_margin)):
        for c, y in enumerate(_axis_coords(room.width, grid.cols, grid.edge_margin)):
            ux, uy = cx - x, cy - y
            norm = math.hypot(ux, uy)
            if norm < 1e-12:
                ux, uy = 1.0, 0.0  # mic at the center: offset along +x
            else:
                ux, uy = ux / norm, uy / norm
            d = grid.source_mic_distance
            src = (x + d * ux, y + d * uy, grid.mic_height)
            out.append(Placement(mic_position=(x, y, grid.mic_height),
                                 source_position=src, grid_index=(r, c)))
    return out


def _check_inside(room: RoomSpec, pos: tuple[float, float, float], what: str):
    x, y, z = pos
    if not (0.0 < x < room.length and 0.0 < y < room.width and 0.0 < z < room.height):
        raise InvalidGeometry(f"{what} position {pos} outside room")


def default_max_time(room: RoomSpec) -> float:
    return max(1.5 * sabine_rt60(room), 0.5)


def simulate_air(room: RoomSpec, placement: Placement, sample_rate: int = 16000,
                 max_time_s: float | None = None) -> Air:
    """Render the image-source AIR and attach ground-truth labels."""
    if sample_rate < 8000:
        raise InvalidGeometry(f"sample rate {sample_rate} below 8000 Hz")
    _check_inside(room, placement.mic_position, "mic")
    _check_inside(room, placement.source_position, "source")
    if max_time_s is None:
        max_time_s = default_max_time(room)

    mic = np.asarray(placement.mic_position)
    src = np.asarray(placement.source_position)
    d0 = float(np.linalg.norm(src - mic))
    if d0 <= 0.0:
        raise InvalidGeometry("source and mic are colocated")
    if d0 / SPEED_OF_SOUND > max_time_s:
        raise InvalidGeometry(
            f"max_time_s {max_time_s} shorter than the direct-path delay")

    n_out = math.ceil(max_time_s * sample_rate)
    beta = math.sqrt(1.0 - room.absorption)
    samples = ism_render((room.length, room.width, room.height),
                         placement.source_position, placement.mic_position,
                         beta, sample_rate, SPEED_OF_SOUND, n_out,
                         IMAGE_AMP_FLOOR, max_time_s)
    air = Air(sample_rate=sample_rate, samples=samples, room_id=room.room_id,
              grid_index=placement.grid_index,
              labels={"volume": room.volume, "rt60_sabine": sabine_rt60(room)})
    air.labels["rt60_schroeder"] = schroeder_rt60(air)
    return air


def sabine_rt60(room: RoomSpec) -> float:
    return 0.161 * room.volume / (room.absorption * room.surface_area)


def schroeder_curve(samples: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay in dB, 0 dB at the first sample."""
    e = np.cumsum(samples.astype(np.float64)[::-1] ** 2)[::-1]
    total = e[0]
    if total <= 0.0:
        raise DecayTooShort("signal has no energy")
    return 10.0 * np.log10(np.maximum(e / total, 1e-30))


def schroeder_rt60(air: Air | np.ndarray, sample_rate: int | None = None) -> float:
    """RT60 as 3x T20 from a line fit of the decay curve over -5..-25 dB."""
    if isinstance(air, Air):
        samples, sample_rate = air.samples, air.sample_rate
    else:
        samples = np.asarray(air)
        if sample_rate is None:
            raise ValueError("sample_rate required for raw sample arrays")
    db = schroeder_curve(samples)
    below5 = np.nonzero(db <= -5.0)[0]
    below25 = np.nonzero(db <= -25.0)[0]
    if below25.size == 0:
        raise DecayTooShort("decay curve never reaches -25 dB")
    i5, i25 = below5[0], below25[0]
    if i25 - i5 < 2:
        raise DecayTooShort("fewer than 3 samples between -5 and -25 dB")
    t = np.arange(i5, i25 + 1) / sample_rate
    seg = db[i5:i25 + 1]
    slope = np.polyfit(t, seg, 1)[0]
    if slope >= 0.0:
        raise DecayTooShort("decay curve is not decreasing over the fit span")
    return float(-60.0 / slope)
