"""Mixed-space coordinate system: entity identities, state records, frame
transforms, latency compensation, and multi-source fusion.

Everything here is a pure function over immutable value types; no shared
mutable state, safe from any thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping

TWO_PI = 2.0 * math.pi

# Default maximum age of an observation before it is considered unusable.
DEFAULT_STALENESS_LIMIT = 0.5  # seconds


class SpaceError(Exception):
    """Base class for mixed-space errors."""


class FrameConversionError(SpaceError):
    """Raised when a state cannot be converted between frames."""


class CompensationError(SpaceError):
    """Raised when a latency-compensation request is out of range."""


class FusionError(SpaceError):
    """Raised when observations cannot be fused (stale, empty, mismatched)."""


class EntityKind(Enum):
    PHYSICAL_VEHICLE = "physical_vehicle"
    VIRTUAL_VEHICLE = "virtual_vehicle"
    STREETLIGHT = "streetlight"
    TRAFFIC_SIGNAL = "traffic_signal"
    BARRIER_GATE = "barrier_gate"
    OBSTACLE = "obstacle"
    SENSOR = "sensor"


VEHICLE_KINDS = frozenset({EntityKind.PHYSICAL_VEHICLE, EntityKind.VIRTUAL_VEHICLE})
FACILITY_KINDS = frozenset(
    {EntityKind.STREETLIGHT, EntityKind.TRAFFIC_SIGNAL, EntityKind.BARRIER_GATE}
)


@dataclass(frozen=True, order=True)
class EntityId:
    """Identity of one entity in the mixed space; (kind, index) is unique."""

    kind: EntityKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"entity index must be >= 0, got {self.index}")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "EntityId":
        kind_s, _, idx_s = text.partition(":")
        try:
            return cls(EntityKind(kind_s), int(idx_s))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"malformed entity id {text!r}") from exc


class Source(Enum):
    """Origin of a state observation."""

    ONBOARD = "onboard"
    ROADSIDE = "roadside"
    NATIVE = "native"


class FacilityStatus(Enum):
    OFF = "off"
    ON = "on"
    CLOSED = "closed"
    OPEN = "open"

    @property
    def active(self) -> bool:
        return self in (FacilityStatus.ON, FacilityStatus.OPEN)


def status_domain(kind: EntityKind) -> tuple[FacilityStatus, FacilityStatus]:
    """(inactive, active) status pair that is legal for a facility kind."""
    if kind is EntityKind.BARRIER_GATE:
        return (FacilityStatus.CLOSED, FacilityStatus.OPEN)
    if kind in (EntityKind.STREETLIGHT, EntityKind.TRAFFIC_SIGNAL):
        return (FacilityStatus.OFF, FacilityStatus.ON)
    raise ValueError(f"{kind} is not a facility kind")


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


@dataclass(frozen=True)
class MixedEntityState:
    """Unified pose/velocity record for any entity, the hub's common currency.

    Positions are meters in the frame the record lives in (mixed space once
    aggregated), heading is radians in (-pi, pi], speed is m/s >= 0.
    """

    id: EntityId
    t: float
    x: float
    y: float
    heading: float
    speed: float
    yaw_rate: float = 0.0
    accel: float = 0.0
    source: Source = Source.NATIVE

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")

    @property
    def fields_finite(self) -> bool:
        return (
            math.isfinite(self.t)
            and math.isfinite(self.x)
            and math.isfinite(self.y)
            and math.isfinite(self.heading)
            and math.isfinite(self.speed)
            and math.isfinite(self.yaw_rate)
            and math.isfinite(self.accel)
        )


@dataclass(frozen=True)
class FacilityState:
    """Discrete status of a roadside facility (light, signal, or gate)."""

    id: EntityId
    channel: int
    status: FacilityStatus
    t: float

    def __post_init__(self):
        if not 0 <= self.channel <= 255:
            raise ValueError(f"channel must be in 0..255, got {self.channel}")
        if self.status not in status_domain(self.id.kind):
            raise ValueError(f"status {self.status} is not valid for {self.id.kind}")


@dataclass(frozen=True)
class FrameTransform:
    """Similarity transform from a native testbed frame into the mixed space.

    ``scale`` is the native-to-mixed multiplier (14 for the 1:14 scaled
    physical testbed), ``rotation`` is applied before the origin offset.
    """

    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    rotation: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and > 0, got {self.scale}")

    @property
    def identity(self) -> bool:
        return self.scale == 1.0 and self.dx == 0.0 and self.dy == 0.0 and self.rotation == 0.0


def to_mixed_frame(s: MixedEntityState, f: FrameTransform) -> MixedEntityState:
    """Convert a native-frame state into the mixed space.

    Positions are rotated, scaled, and offset; speed and acceleration scale
    with length; yaw rate and timestamps are scale-invariant.
    """
    if not s.fields_finite:
        raise FrameConversionError(f"non-finite field in state for {s.id}")
    cos_r = math.cos(f.rotation)
    sin_r = math.sin(f.rotation)
    return MixedEntityState(
        id=s.id,
        t=s.t,
        x=f.scale * (cos_r * s.x - sin_r * s.y) + f.dx,
        y=f.scale * (sin_r * s.x + cos_r * s.y) + f.dy,
        heading=normalize_angle(s.heading + f.rotation),
        speed=f.scale * s.speed,
        yaw_rate=s.yaw_rate,
        accel=f.scale * s.accel,
        source=s.source,
    )


def from_mixed_frame(s: MixedEntityState, f: FrameTransform) -> MixedEntityState:
    """Exact inverse of :func:`to_mixed_frame`."""
    if not s.fields_finite:
        raise FrameConversionError(f"non-finite field in state for {s.id}")
    cos_r = math.cos(f.rotation)
    sin_r = math.sin(f.rotation)
    ux = s.x - f.dx
    uy = s.y - f.dy
    return MixedEntityState(
        id=s.id,
        t=s.t,
        x=(cos_r * ux + sin_r * uy) / f.scale,
        y=(-sin_r * ux + cos_r * uy) / f.scale,
        heading=normalize_angle(s.heading - f.rotation),
        speed=s.speed / f.scale,
        yaw_rate=s.yaw_rate,
        accel=s.accel / f.scale,
        source=s.source,
    )


def extrapolate_state(
    s: MixedEntityState, dt: float, staleness_limit: float = DEFAULT_STALENESS_LIMIT
) -> MixedEntityState:
    """Latency compensation: predict a state ``dt`` seconds forward.

    Constant-turn-rate, constant-speed prediction: the position follows a
    circular arc at the observed speed and yaw rate; the acceleration term
    advances the reported speed only (clamped at zero).
    """
    if not 0.0 <= dt <= staleness_limit:
        raise CompensationError(f"dt {dt} outside [0, {staleness_limit}]")
    if dt == 0.0:
        return s
    h = s.heading
    w = s.yaw_rate
    if abs(w) < 1e-9:
        x = s.x + s.speed * math.cos(h) * dt
        y = s.y + s.speed * math.sin(h) * dt
    else:
        r = s.speed / w
        x = s.x + r * (math.sin(h + w * dt) - math.sin(h))
        y = s.y - r * (math.cos(h + w * dt) - math.cos(h))
    return MixedEntityState(
        id=s.id,
        t=s.t + dt,
        x=x,
        y=y,
        heading=normalize_angle(h + w * dt),
        speed=max(0.0, s.speed + s.accel * dt),
        yaw_rate=w,
        accel=s.accel,
        source=s.source,
    )


@dataclass(frozen=True)
class FusionPolicy:
    """How multi-source observations of one entity are combined."""

    weights: Mapping[Source, float]
    staleness_limit: float = DEFAULT_STALENESS_LIMIT

    def __post_init__(self):
        for src, w in self.weights.items():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"weight for {src} outside [0, 1]: {w}")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {total}")
        if self.staleness_limit <= 0:
            raise ValueError("staleness_limit must be > 0")


DEFAULT_FUSION_POLICY = FusionPolicy(
    weights={Source.ONBOARD: 0.5, Source.ROADSIDE: 0.25, Source.NATIVE: 0.25}
)

# Deterministic tie-break order when several sources share the top weight.
_SOURCE_ORDER = {Source.ONBOARD: 0, Source.ROADSIDE: 1, Source.NATIVE: 2}


def fuse_observations(
    obs: Iterable[MixedEntityState], policy: FusionPolicy, t_now: float
) -> MixedEntityState:
    """Fuse multi-source observations of one entity into a single state at t_now.

    Each source's freshest observation is extrapolated to ``t_now`` and the
    results are weight-averaged per the policy (headings on the unit circle).
    Sources with zero policy weight are ignored entirely, which makes a
    strict priority scheme expressible as weights {1, 0}.

    Raises FusionError when the list is empty, ids disagree, or no usable
    observation is newer than ``t_now - staleness_limit``.
    """
    obs = list(obs)
    if not obs:
        raise FusionError("no observations to fuse")
    eid = obs[0].id
    if any(o.id != eid for o in obs):
        raise FusionError(f"observations mix entity ids: {sorted({str(o.id) for o in obs})}")

    freshest: dict[Source, MixedEntityState] = {}
    for o in obs:
        kept = freshest.get(o.source)
        if kept is None or o.t >= kept.t:
            freshest[o.source] = o

    aligned: list[tuple[float, MixedEntityState]] = []
    for src, o in freshest.items():
        age = t_now - o.t
        if age > policy.staleness_limit or age < 0:
            continue
        w = policy.weights.get(src, 0.0)
        if w <= 0.0:
            continue
        aligned.append((w, extrapolate_state(o, age, policy.staleness_limit)))

    if not aligned:
        raise FusionError(f"no fresh weighted observation for {eid} at t={t_now}")

    total_w = sum(w for w, _ in aligned)
    x = sum(w * o.x for w, o in aligned) / total_w
    y = sum(w * o.y for w, o in aligned) / total_w
    speed = sum(w * o.speed for w, o in aligned) / total_w
    yaw_rate = sum(w * o.yaw_rate for w, o in aligned) / total_w
    accel = sum(w * o.accel for w, o in aligned) / total_w
    hx = sum(w * math.cos(o.heading) for w, o in aligned)
    hy = sum(w * math.sin(o.heading) for w, o in aligned)
    heading = normalize_angle(math.atan2(hy, hx)) if (hx or hy) else aligned[0][1].heading

    best = max(aligned, key=lambda wo: (wo[0], -_SOURCE_ORDER[wo[1].source]))
    return MixedEntityState(
        id=eid,
        t=t_now,
        x=x,
        y=y,
        heading=heading,
        speed=max(0.0, speed),
        yaw_rate=yaw_rate,
        accel=accel,
        source=best[1].source,
    )
