import numpy as np
import pytest

from uvtdoa import ClockModel, LinkBudget, Scene, SignalParams, generate_pilot

# Anchor layouts of the three outdoor experiments.
GEOMETRY_I = ((30.2, 53.9), (0.0, 0.0), (60.7, 0.0))
GEOMETRY_II = ((0.0, 0.0), (75.6, 0.0), (32.2, 76.6))
GEOMETRY_III = ((0.0, 0.0), (128.6, 122.8), (247.1, 0.0))
ALL_GEOMETRIES = {"I": GEOMETRY_I, "II": GEOMETRY_II, "III": GEOMETRY_III}


def make_scene(geometry=GEOMETRY_II, rx=(36.0, 25.0)) -> Scene:
    a, b, c = geometry
    return Scene(tx_a=a, tx_b=b, tx_c=c, rx_true=rx)


def make_budget(power_w=0.1, lambda_b=1.0, lambda_clip=100.0) -> LinkBudget:
    return LinkBudget(
        power_w=power_w,
        rx_area_m2=1.77e-4,
        divergence_full_angle_rad=np.deg2rad(120.0),
        wavelength_m=266e-9,
        detector_efficiency=0.15,
        lambda_b=lambda_b,
        lambda_clip=lambda_clip,
    )


def make_signal(length=256, n=100, rate_hz=1e6, slot_s=300e-6, pilot_seed=1) -> SignalParams:
    return SignalParams(
        sequence=generate_pilot(length, pilot_seed),
        symbol_rate_hz=rate_hz,
        chips_per_symbol=n,
        slot_interval_s=slot_s,
    )


@pytest.fixture
def scene_ii() -> Scene:
    return make_scene()


@pytest.fixture
def budget() -> LinkBudget:
    return make_budget()


@pytest.fixture
def clock_100ns() -> ClockModel:
    return ClockModel.uniform(0.0, 100e-9)
