"""
=============================================================================
ROBOT GEOMETRY - PLANAR QUADROTOR DESCRIPTION AND DIMENSIONLESS FRAMEWORK
=============================================================================

This module holds the X-Z plane description of a perching quadrotor and the
dimensionless leg parameters used to compare robots of different sizes.

Features:
- RobotGeometry value type (mass, inertia, reach, leg, props, hip joint, limits)
- Dimensionless leg parameters (L_eff / F_Reach, leg angle gamma)
- Geometric-similarity scaling (lengths x s, mass x s^3, inertia x s^5)
- Body-to-world projection of footpads and propeller points
- Leg-configuration presets for the 12" and 7" frames

Body frame: +x forward, +z up, pitch positive rotates +x toward +z.
"""

import math
import logging
from dataclasses import dataclass, replace, asdict
from enum import Enum
from typing import Dict, List, Tuple, Any

import numpy as np

from perch_errors import GeometryError

logger = logging.getLogger(__name__)

Vec2 = Tuple[float, float]


class PadSide(Enum):
    """The two projected footpads of the X-Z plane model"""
    FRONT = "front"
    REAR = "rear"


@dataclass(frozen=True)
class RobotGeometry:
    """Complete planar robot description (SI units, angles in radians)"""
    mass: float
    inertia_yy: float
    forward_reach: float
    leg_mount_offset: Vec2  # front hip, body frame
    leg_length: float
    leg_mount_angle: float  # from body -Z, positive toward +x
    prop_offsets: Tuple[Vec2, ...]
    hip_stiffness: float  # N*m/rad, math.inf for a rigid hip
    hip_damping_ratio: float
    alpha_max: float
    motor_time_constant: float

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["leg_mount_offset"] = list(self.leg_mount_offset)
        data["prop_offsets"] = [list(p) for p in self.prop_offsets]
        return data


@dataclass(frozen=True)
class DimensionlessGeometry:
    """Scale-free leg description"""
    length_ratio: float  # L_eff / F_Reach
    leg_angle_gamma: float
    l_eff: float


@dataclass
class WorldPoints:
    """World-frame projection of the contact-relevant points"""
    pad_tip: np.ndarray
    rear_pad_tip: np.ndarray
    prop_points: List[np.ndarray]

    def pads(self) -> Dict[PadSide, np.ndarray]:
        return {PadSide.FRONT: self.pad_tip, PadSide.REAR: self.rear_pad_tip}


def rotation(pitch: float) -> np.ndarray:
    c, s = math.cos(pitch), math.sin(pitch)
    return np.array([[c, -s], [s, c]])


def perp(v: np.ndarray) -> np.ndarray:
    """Rotate a 2-vector by +90 degrees (d/dpitch of R(pitch) v is perp(R v))"""
    return np.array([-v[1], v[0]])


def cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def validate_geometry(geom: RobotGeometry) -> RobotGeometry:
    """Check every invariant of RobotGeometry, raising GeometryError on the first violation"""
    positive = {
        "mass": geom.mass,
        "inertia_yy": geom.inertia_yy,
        "forward_reach": geom.forward_reach,
        "leg_length": geom.leg_length,
        "alpha_max": geom.alpha_max,
        "motor_time_constant": geom.motor_time_constant,
    }
    for name, value in positive.items():
        if not (value > 0) or not math.isfinite(value):
            raise GeometryError(f"{name} must be positive and finite, got {value}")
    if not (geom.hip_stiffness >= 0):
        raise GeometryError(f"hip_stiffness must be >= 0, got {geom.hip_stiffness}")
    if not (geom.hip_damping_ratio >= 0) or not math.isfinite(geom.hip_damping_ratio):
        raise GeometryError(f"hip_damping_ratio must be >= 0, got {geom.hip_damping_ratio}")
    if len(geom.prop_offsets) == 0:
        raise GeometryError("at least one propeller point is required")
    derive_dimensionless(geom)
    return geom


def leg_direction(geom: RobotGeometry, side: PadSide = PadSide.FRONT) -> np.ndarray:
    """Unit vector from hip to pad tip in the body frame"""
    sx = 1.0 if side == PadSide.FRONT else -1.0
    return np.array([sx * math.sin(geom.leg_mount_angle), -math.cos(geom.leg_mount_angle)])


def hip_offset(geom: RobotGeometry, side: PadSide = PadSide.FRONT) -> np.ndarray:
    mx, mz = geom.leg_mount_offset
    return np.array([mx if side == PadSide.FRONT else -mx, mz])


def pad_offset(geom: RobotGeometry, side: PadSide = PadSide.FRONT) -> np.ndarray:
    """Pad tip in the body frame; the rear pad mirrors the front one about body Z"""
    return hip_offset(geom, side) + geom.leg_length * leg_direction(geom, side)


def contact_reach(geom: RobotGeometry) -> float:
    """Largest distance from the CoM to any pad or prop point"""
    offsets = [pad_offset(geom, side) for side in PadSide] + [np.asarray(p, dtype=float) for p in geom.prop_offsets]
    return max(float(np.linalg.norm(o)) for o in offsets)


def derive_dimensionless(geom: RobotGeometry) -> DimensionlessGeometry:
    """L_eff, its ratio to the forward reach, and the leg angle from body vertical"""
    tip = pad_offset(geom, PadSide.FRONT)
    l_eff = float(math.hypot(tip[0], tip[1]))
    if l_eff == 0.0:
        raise GeometryError("zero effective leg length")
    gamma = math.atan2(abs(tip[0]), -tip[1])
    if not (0.0 <= gamma < math.pi / 2):
        raise GeometryError(f"leg tip must lie below the body plane, gamma={math.degrees(gamma):.1f} deg")
    return DimensionlessGeometry(
        length_ratio=l_eff / geom.forward_reach,
        leg_angle_gamma=gamma,
        l_eff=l_eff,
    )


def scale_geometry(geom: RobotGeometry, s: float, **overrides: Any) -> RobotGeometry:
    """Geometrically similar copy: lengths x s, mass x s^3, inertia x s^5"""
    if not (s > 0):
        raise GeometryError(f"scale factor must be positive, got {s}")
    scaled = replace(
        geom,
        mass=geom.mass * s ** 3,
        inertia_yy=geom.inertia_yy * s ** 5,
        forward_reach=geom.forward_reach * s,
        leg_mount_offset=(geom.leg_mount_offset[0] * s, geom.leg_mount_offset[1] * s),
        leg_length=geom.leg_length * s,
        prop_offsets=tuple((p[0] * s, p[1] * s) for p in geom.prop_offsets),
    )
    if overrides:
        scaled = replace(scaled, **overrides)
    return scaled


def world_points(geom: RobotGeometry, position: np.ndarray, pitch: float) -> WorldPoints:
    """Rigid transform of pads and prop points into the world frame"""
    rot = rotation(pitch)
    origin = np.asarray(position, dtype=float)
    return WorldPoints(
        pad_tip=origin + rot @ pad_offset(geom, PadSide.FRONT),
        rear_pad_tip=origin + rot @ pad_offset(geom, PadSide.REAR),
        prop_points=[origin + rot @ np.asarray(p, dtype=float) for p in geom.prop_offsets],
    )


def hinge_inertia(geom: RobotGeometry, side: PadSide = PadSide.FRONT) -> float:
    """Body inertia about the hip axis (parallel-axis theorem)"""
    r = hip_offset(geom, side)
    return geom.inertia_yy + geom.mass * float(r @ r)


def hip_damping_coefficient(geom: RobotGeometry) -> float:
    """c = 2 zeta sqrt(K I_hinge); zero for a rigid hip"""
    if math.isinf(geom.hip_stiffness):
        return 0.0
    return 2.0 * geom.hip_damping_ratio * math.sqrt(geom.hip_stiffness * hinge_inertia(geom))


def flush_pitch(theta_plane: float) -> float:
    """World pitch at which both pads sit flat on a plane of the given orientation"""
    return math.pi - theta_plane


def impact_orientation(pitch: float, theta_plane: float) -> float:
    """Orientation relative to the plane: 0 = legs pointing away, pi = legs flush"""
    diff = math.remainder(flush_pitch(theta_plane) - pitch, 2.0 * math.pi)
    return math.pi - abs(diff)


def compute_phi_min(geom: RobotGeometry, resolution: float = math.radians(0.1)) -> float:
    """Smallest relative orientation at which a pad touches before any prop or the body.

    Sweeps the orientation for a ceiling-type plane; the result depends only on the
    body-frame geometry so it holds for every plane angle.
    """
    pads = [pad_offset(geom, PadSide.FRONT), pad_offset(geom, PadSide.REAR)]
    props = [np.asarray(p, dtype=float) for p in geom.prop_offsets]
    steps = int(math.ceil(math.pi / resolution))
    for i in range(1, steps + 1):
        phi = min(i * resolution, math.pi)
        rot = rotation(phi)
        pad_height = max(float((rot @ p)[1]) for p in pads)
        other_height = max([float((rot @ p)[1]) for p in props] + [0.0])
        if pad_height > other_height:
            return phi
    raise GeometryError("pads never lead the propellers; phi_min undefined")


def geometry_from_dimensionless(
    forward_reach: float,
    length_ratio: float,
    gamma: float,
    mount_offset: Vec2,
    mass: float,
    inertia_yy: float,
    prop_height: float,
    hip_stiffness: float = 1.4,
    hip_damping_ratio: float = 0.4,
    alpha_max: float = 90.0,
    motor_time_constant: float = 0.04,
) -> RobotGeometry:
    """Build a geometry whose pad tip reproduces the requested (L_eff/F_Reach, gamma) pair"""
    l_eff = length_ratio * forward_reach
    tip = np.array([l_eff * math.sin(gamma), -l_eff * math.cos(gamma)])
    leg = tip - np.asarray(mount_offset, dtype=float)
    leg_length = float(math.hypot(leg[0], leg[1]))
    if leg_length == 0.0:
        raise GeometryError("pad tip coincides with the hip mount")
    return RobotGeometry(
        mass=mass,
        inertia_yy=inertia_yy,
        forward_reach=forward_reach,
        leg_mount_offset=(float(mount_offset[0]), float(mount_offset[1])),
        leg_length=leg_length,
        leg_mount_angle=math.atan2(leg[0], -leg[1]),
        prop_offsets=((forward_reach, prop_height), (-forward_reach, prop_height)),
        hip_stiffness=hip_stiffness,
        hip_damping_ratio=hip_damping_ratio,
        alpha_max=alpha_max,
        motor_time_constant=motor_time_constant,
    )


# ============================================================================
# LEG CONFIGURATION PRESETS
# ============================================================================

# F_Reach is the rotor-tip radius: half the frame diameter.
SOURCE_ONE_REACH = 0.5 * 12 * 0.0254
IMPULSE_MICRO_REACH = 0.5 * 7 * 0.0254

_FRAMES = {
    "source_one": {
        "forward_reach": SOURCE_ONE_REACH,
        "mount_offset": (0.035, -0.020),
        "mass": 0.60,
        "inertia_yy": 3.0e-3,
        "prop_height": 0.020,
    },
    "impulse_micro": {
        "forward_reach": IMPULSE_MICRO_REACH,
        "mount_offset": (0.020, -0.012),
        "mass": 0.16,
        "inertia_yy": 2.6e-4,
        "prop_height": 0.012,
    },
}

_LEG_CONFIGS = {
    ("source_one", "wide_long"): (1.49, 52.4),
    ("source_one", "semi_narrow_short"): (1.08, 27.3),
    ("impulse_micro", "wide_long"): (1.47, 53.1),
    ("impulse_micro", "semi_narrow_short"): (1.18, 29.5),
}

PRESET_NAMES = sorted(f"{frame}_{legs}" for frame, legs in _LEG_CONFIGS)


def get_preset(name: str, **overrides: Any) -> RobotGeometry:
    """Geometry for one of the four published leg configurations"""
    for (frame, legs), (ratio, gamma_deg) in _LEG_CONFIGS.items():
        if name == f"{frame}_{legs}":
            frame_data = _FRAMES[frame]
            geom = geometry_from_dimensionless(
                forward_reach=frame_data["forward_reach"],
                length_ratio=ratio,
                gamma=math.radians(gamma_deg),
                mount_offset=frame_data["mount_offset"],
                mass=frame_data["mass"],
                inertia_yy=frame_data["inertia_yy"],
                prop_height=frame_data["prop_height"],
            )
            if overrides:
                geom = replace(geom, **overrides)
            return validate_geometry(geom)
    raise GeometryError(f"unknown preset '{name}', expected one of {PRESET_NAMES}")


def describe(geom: RobotGeometry) -> Dict[str, float]:
    """Summary used in logs and sidecars"""
    dim = derive_dimensionless(geom)
    return {
        "length_ratio": round(dim.length_ratio, 6),
        "leg_angle_deg": round(math.degrees(dim.leg_angle_gamma), 6),
        "l_eff_m": round(dim.l_eff, 6),
        "phi_min_deg": round(math.degrees(compute_phi_min(geom)), 6),
        "alpha_max_rad_s2": geom.alpha_max,
    }
