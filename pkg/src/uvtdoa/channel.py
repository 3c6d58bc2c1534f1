"""Photon-counting link model and chip-level pilot frame generation.

The link budget maps transmit power to a mean photoelectron count per symbol
for a line-of-sight path; the frame renderer turns that rate into Poisson
chip counts for the three time-division pilot slots.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene import SPEED_OF_LIGHT, Scene, ranges

PLANCK_CONSTANT = 6.62607015e-34  # J*s


class ChannelError(ValueError):
    """Invalid link-budget or frame-generation input."""


class SlotOverrunError(ChannelError):
    """A delayed pilot would spill into the next anchor's slot."""


@dataclass(frozen=True)
class LinkBudget:
    """Transmitter/receiver parameters of the line-of-sight photon link.

    ``lambda_b`` is the mean background photoelectron count per symbol;
    ``lambda_clip`` is the saturation ceiling applied to the signal rate
    (detector pulse-counting limit).
    """

    power_w: float
    rx_area_m2: float
    divergence_full_angle_rad: float
    wavelength_m: float
    detector_efficiency: float = 0.15
    lambda_b: float = 1.0
    lambda_clip: float = 100.0

    def __post_init__(self):
        if not self.power_w > 0:
            raise ChannelError(f"power_w must be > 0, got {self.power_w}")
        if not 0 < self.divergence_full_angle_rad < np.pi:
            raise ChannelError(
                f"divergence_full_angle_rad must be in (0, pi), got "
                f"{self.divergence_full_angle_rad}"
            )
        if not self.rx_area_m2 > 0:
            raise ChannelError(f"rx_area_m2 must be > 0, got {self.rx_area_m2}")
        if not self.wavelength_m > 0:
            raise ChannelError(f"wavelength_m must be > 0, got {self.wavelength_m}")
        if not 0 < self.detector_efficiency <= 1:
            raise ChannelError(
                f"detector_efficiency must be in (0, 1], got {self.detector_efficiency}"
            )
        if self.lambda_b < 0:
            raise ChannelError(f"lambda_b must be >= 0, got {self.lambda_b}")
        if not self.lambda_clip > 0:
            raise ChannelError(f"lambda_clip must be > 0, got {self.lambda_clip}")

    def with_power(self, power_w: float) -> "LinkBudget":
        return replace(self, power_w=power_w)


def los_photon_rate(budget: LinkBudget, distance_m: float, symbol_duration_s: float) -> float:
    """Mean detected photoelectrons per symbol over a line-of-sight path.

    Uniform-cone divergence with inverse-square spreading: the transmitter
    emits P*T_s/E_photon photons per symbol into a cone of solid angle
    2*pi*(1 - cos(theta/2)); the receiver intercepts its aperture's share at
    the given distance and detects a fraction equal to the quantum
    efficiency. The result saturates at ``lambda_clip``.
    """
    if not distance_m > 0:
        raise ChannelError(f"distance_m must be > 0, got {distance_m}")
    if not symbol_duration_s > 0:
        raise ChannelError(f"symbol_duration_s must be > 0, got {symbol_duration_s}")
    photon_energy = PLANCK_CONSTANT * SPEED_OF_LIGHT / budget.wavelength_m
    photons_per_symbol = budget.power_w * symbol_duration_s / photon_energy
    solid_angle = 2.0 * np.pi * (1.0 - np.cos(budget.divergence_full_angle_rad / 2.0))
    rate = (
        budget.detector_efficiency
        * photons_per_symbol
        * budget.rx_area_m2
        / (solid_angle * distance_m * distance_m)
    )
    return float(min(budget.lambda_clip, rate))


@dataclass(frozen=True)
class SignalParams:
    """Pilot sequence and timing of the time-division transmission.

    ``slot_interval_s`` must exceed the pilot duration so consecutive anchor
    slots never overlap. Per-anchor signal rates are photoelectrons/symbol
    and are typically filled in per receiver point from the link budget.
    """

    sequence: tuple[int, ...]
    symbol_rate_hz: float
    chips_per_symbol: int
    slot_interval_s: float
    lambda_s_a: float = 0.0
    lambda_s_b: float = 0.0
    lambda_s_c: float = 0.0

    def __post_init__(self):
        seq = tuple(int(v) for v in np.asarray(self.sequence).reshape(-1))
        if len(seq) < 2 or any(v not in (0, 1) for v in seq):
            raise ChannelError("sequence must be a binary vector of length >= 2")
        object.__setattr__(self, "sequence", seq)
        if not self.symbol_rate_hz > 0:
            raise ChannelError(f"symbol_rate_hz must be > 0, got {self.symbol_rate_hz}")
        if self.chips_per_symbol < 1:
            raise ChannelError(f"chips_per_symbol must be >= 1, got {self.chips_per_symbol}")
        if self.slot_interval_s < len(seq) / self.symbol_rate_hz:
            raise ChannelError(
                f"slot_interval_s = {self.slot_interval_s} is shorter than the "
                f"pilot duration {len(seq) / self.symbol_rate_hz}; slots would overlap"
            )
        for name in ("lambda_s_a", "lambda_s_b", "lambda_s_c"):
            if getattr(self, name) < 0:
                raise ChannelError(f"{name} must be >= 0")

    @property
    def length(self) -> int:
        return len(self.sequence)

    @property
    def symbol_s(self) -> float:
        return 1.0 / self.symbol_rate_hz

    @property
    def chip_s(self) -> float:
        return 1.0 / (self.symbol_rate_hz * self.chips_per_symbol)

    @property
    def pilot_chips(self) -> int:
        return self.length * self.chips_per_symbol

    @property
    def slot_chips(self) -> int:
        return int(round(self.slot_interval_s / self.chip_s))

    def sequence_array(self) -> np.ndarray:
        return np.asarray(self.sequence, dtype=np.int64)

    def with_rates(self, lambda_s_a: float, lambda_s_b: float, lambda_s_c: float) -> "SignalParams":
        return replace(
            self, lambda_s_a=lambda_s_a, lambda_s_b=lambda_s_b, lambda_s_c=lambda_s_c
        )


@dataclass
class ChipTrace:
    """Per-chip photoelectron counts observed at the receiver."""

    counts: np.ndarray
    chip_duration_s: float
    origin_time_s: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ChannelError("counts must be a 1-D vector")
        if np.any(self.counts < 0):
            raise ChannelError("chip counts must be non-negative")

    def __len__(self) -> int:
        return len(self.counts)

    # Binary layout, little endian: float64 chip duration, float64 origin
    # time, uint64 length, then uint32 counts.
    _HEADER = np.dtype([("chip_s", "<f8"), ("origin_s", "<f8"), ("n", "<u8")])

    def to_bytes(self) -> bytes:
        header = np.array(
            [(self.chip_duration_s, self.origin_time_s, len(self.counts))],
            dtype=self._HEADER,
        )
        return header.tobytes() + self.counts.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ChipTrace":
        header = np.frombuffer(blob[: cls._HEADER.itemsize], dtype=cls._HEADER)[0]
        n = int(header["n"])
        counts = np.frombuffer(
            blob[cls._HEADER.itemsize : cls._HEADER.itemsize + 4 * n], dtype="<u4"
        )
        if len(counts) != n:
            raise ChannelError("truncated chip trace blob")
        return cls(counts.astype(np.int64), float(header["chip_s"]), float(header["origin_s"]))

    def to_csv(self, fh) -> None:
        fh.write(f"# chip_duration_s = {self.chip_duration_s!r}\n")
        fh.write(f"# origin_time_s = {self.origin_time_s!r}\n")
        fh.write("chip_index,count\n")
        for i, v in enumerate(self.counts):
            fh.write(f"{i},{v}\n")


def pilot_rate_profile(
    sequence,
    chips_per_symbol: int,
    lambda_s: float,
    lambda_b: float,
    start_chip,
    n_chips: int,
) -> np.ndarray:
    """Per-chip mean photoelectron counts for one pilot in a chip window.

    The pilot's k-th "on" symbol adds lambda_s/n over the fractional chip
    interval [start + k*n, start + (k+1)*n); chips straddling a symbol edge
    receive a prorated share. ``start_chip`` may be fractional, and may be an
    array, in which case one profile per start is returned (batch leading
    axis). A constant lambda_b/n background is added everywhere.
    """
    seq = np.asarray(sequence, dtype=np.int64).reshape(-1)
    n = int(chips_per_symbol)
    starts = np.atleast_1d(np.asarray(start_chip, dtype=float))
    batch = starts.shape[0]
    on = np.nonzero(seq)[0]
    rate = np.full((batch, n_chips), lambda_b / n, dtype=float)
    if lambda_s > 0 and len(on):
        lam_chip = lambda_s / n
        a = starts[:, None] + on[None, :] * n  # (batch, n_on) fractional chip starts
        if np.any(a < 0) or np.any(a + n > n_chips):
            raise ChannelError("pilot extends outside the chip window")
        ia = np.floor(a).astype(np.int64)
        first_frac = ia + 1 - a
        rows = np.repeat(np.arange(batch), len(on))
        # Boundary chips: prorate by overlap; interior chips via a running
        # difference so each on-symbol costs O(1) instead of O(n). The
        # difference array only spans the pilot's chip range.
        np.add.at(rate, (rows, ia.ravel()), lam_chip * first_frac.ravel())
        np.add.at(rate, (rows, np.minimum((ia + n).ravel(), n_chips - 1)),
                  lam_chip * (1.0 - first_frac.ravel()))
        lo = int(ia.min())
        hi = min(int(ia.max()) + n + 1, n_chips)
        step = np.zeros((batch, hi - lo + 1), dtype=float)
        np.add.at(step, (rows, (ia + 1 - lo).ravel()), lam_chip)
        np.add.at(step, (rows, (ia + n - lo).ravel()), -lam_chip)
        rate[:, lo:hi] += np.cumsum(step[:, :-1], axis=1)
    if np.isscalar(start_chip) or np.asarray(start_chip).ndim == 0:
        return rate[0]
    return rate


def as_generator(seed) -> np.random.Generator:
    """Coerce an int / SeedSequence / Generator into a numpy Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def render_frame(
    scene: Scene,
    params: SignalParams,
    budget: LinkBudget,
    clock_offsets_s,
    frac_offset_eps_s: float,
    rng_seed,
) -> ChipTrace:
    """Simulate the chip counts of one three-slot pilot frame.

    Anchor i transmits at i * slot_interval; its pilot reaches the receiver
    delayed by the clock offset, the flight time, and the shared fractional
    offset ``frac_offset_eps_s``. Counts are Poisson with per-chip means from
    the background plus the prorated pilot overlap, independent across chips.
    Identical inputs and seed give an identical trace.
    """
    offsets = np.asarray(clock_offsets_s, dtype=float).reshape(-1)
    if offsets.shape != (3,):
        raise ChannelError("clock_offsets_s must hold one offset per anchor")
    rng = as_generator(rng_seed)
    t_chip = params.chip_s
    slot_chips = params.slot_chips
    n_chips = 3 * slot_chips
    dists = ranges(scene, scene.rx_true)
    lambdas = (params.lambda_s_a, params.lambda_s_b, params.lambda_s_c)
    rate = np.full(n_chips, budget.lambda_b / params.chips_per_symbol, dtype=float)
    seq = params.sequence_array()
    for i in range(3):
        arrival_s = i * params.slot_interval_s + offsets[i] + dists[i] / scene.c + frac_offset_eps_s
        if arrival_s + params.length * params.symbol_s > (i + 1) * params.slot_interval_s:
            raise SlotOverrunError(
                f"anchor {'ABC'[i]} pilot arriving at {arrival_s:.9f} s spills "
                f"past its slot end {(i + 1) * params.slot_interval_s:.9f} s"
            )
        if arrival_s < i * params.slot_interval_s - t_chip:
            raise SlotOverrunError(
                f"anchor {'ABC'[i]} pilot arriving at {arrival_s:.9f} s starts "
                f"before its slot {i * params.slot_interval_s:.9f} s"
            )
        rate += pilot_rate_profile(
            seq, params.chips_per_symbol, lambdas[i], 0.0, arrival_s / t_chip, n_chips
        )
    counts = rng.poisson(rate)
    return ChipTrace(counts, t_chip, 0.0)
