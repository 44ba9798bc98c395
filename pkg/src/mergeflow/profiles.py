"""Driver parameter profiles for car following and lane changing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class DriverProfile:
    max_accel: float = 4.5  # m/s^2
    max_decel: float = 2.6  # m/s^2, positive magnitude
    desired_headway: float = 1.5  # s
    min_gap: float = 2.0  # m
    assertiveness: float = 1.0  # (0, 1]; scales accepted lane-change gaps by 1/x
    speed_gain_eagerness: float = 1.0  # >= 0; discretionary lane-change motivation
    two_sqrt_ab: float = field(init=False, repr=False, compare=False, default=0.0)

    def __post_init__(self):
        if min(self.max_accel, self.max_decel, self.min_gap, self.desired_headway) <= 0:
            raise ValueError("profile parameters must be positive")
        if not (0.0 < self.assertiveness <= 1.0):
            raise ValueError("assertiveness must be in (0, 1]")
        if self.speed_gain_eagerness < 0:
            raise ValueError("speed_gain_eagerness must be >= 0")
        object.__setattr__(self, "two_sqrt_ab",
                           2.0 * math.sqrt(self.max_accel * self.max_decel))


def default_profile() -> DriverProfile:
    return DriverProfile()


def conservative_profile() -> DriverProfile:
    """Cautious automated-driving parameterization: wide accepted gaps, no
    opportunistic lane changes, softer acceleration and braking."""
    return DriverProfile(
        max_accel=3.5,
        max_decel=2.0,
        assertiveness=0.1,
        speed_gain_eagerness=0.0,
    )


PROFILE_SETS = {
    # (HV profile, AV profile)
    "normal": (default_profile(), default_profile()),
    "conservative_av": (default_profile(), conservative_profile()),
}
