"""Entity processes: each vehicle, the RSU facility host, and the
external-protocol virtual vehicle run as independent share-nothing processes
that talk to the hub only through simulated links.

Emulated physical vehicles integrate at the scaled testbed's native scale
and report through the sensing imperfection models; virtual vehicles run at
real-world scale; the external virtual vehicle exchanges nothing but public
wire-protocol text frames, proving the hub's external interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from . import wire
from .dynamics import (
    BicycleState,
    CaccParams,
    HdvController,
    HdvParams,
    LateralParams,
    OffPathError,
    SpeedProfile,
    bicycle_step,
    cacc_longitudinal,
    evaluate_profile,
    preview_lateral,
)
from .facility import ControlBoard, LagLine, SensorModel, emulate_sensor_reading
from .hub import MixedSnapshot
from .netsim import Link
from .space import EntityId, EntityKind, MixedEntityState, Source
from .track import Track


class Realm(Enum):
    EMULATED_PHYSICAL = "emulated_physical"
    VIRTUAL = "virtual"
    EXTERNAL_VIRTUAL = "external_virtual"


class Role(Enum):
    HEAD = "head"
    CACC = "cacc"
    HDV = "hdv"
    LIVE_HUMAN = "live_human"


COMMAND_HOLD_FLAG_S = 1.0
MANUAL_STEER_HOLD_S = 1.0


@dataclass
class VehicleProcess:
    """One vehicle stepped in its own native frame.

    All quantities inside the process are native-scale; only the hub converts
    between frames. Received commands are appended to ``command_log`` so the
    realm-isolation property can be audited.
    """

    eid: EntityId
    realm: Realm
    role: Role
    state: BicycleState
    path: Track
    cacc: CaccParams
    hdv_params: HdvParams
    lateral: LateralParams
    cruise_speed: float  # native units
    accel_limit: float = 2.0
    sensor: SensorModel | None = None
    rng: Any = None
    uplink: Link | None = None
    predecessor_id: EntityId | None = None

    inbox: list = field(default_factory=list)
    command_log: list[dict] = field(default_factory=list)
    profile: SpeedProfile | None = None
    target_speed: float | None = None
    manual_steer: float | None = None
    manual_steer_t: float = -math.inf
    hdv: HdvController | None = None
    frozen: bool = False
    warned_command_loss: bool = False
    last_command_t: float = 0.0
    last_accel: float = 0.0
    last_yaw_rate: float = 0.0
    last_snapshot_t: float = 0.0
    _lag_line: LagLine | None = None
    _path_hint: int | None = None
    _pred_state: MixedEntityState | None = None
    _pred_hint: int | None = None
    _obstacle_arcs: dict[EntityId, float] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.role is Role.HDV:
            self.hdv = HdvController(self.hdv_params)
        if self.realm is Realm.EMULATED_PHYSICAL and self.sensor is not None:
            self._lag_line = LagLine(self.sensor.actuation_lag)

    # ----- inbound -------------------------------------------------------

    def receive(self, msg) -> None:
        self.inbox.append(msg)

    def _apply_command(self, cmd: dict, now: float) -> None:
        self.command_log.append(cmd)
        self.last_command_t = now
        self.warned_command_loss = False
        kind = cmd.get("kind")
        if kind == "set_target_speed":
            self.target_speed = float(cmd["value"])
            self.profile = None
        elif kind == "set_steering":
            self.manual_steer = float(cmd["value"])
            self.manual_steer_t = now
        elif kind == "set_speed_profile":
            self.profile = wire.profile_from_wire(cmd["profile"])

    def _drain_inbox(self, now: float) -> None:
        msgs, self.inbox = self.inbox, []
        for msg in msgs:
            if isinstance(msg, MixedSnapshot):
                self._take_snapshot(msg)
            elif isinstance(msg, dict) and msg.get("type") == "command":
                if self._lag_line is not None:
                    self._lag_line.push(now, msg)
                else:
                    self._apply_command(msg, now)
        if self._lag_line is not None:
            for cmd in self._lag_line.pop_due(now):
                self._apply_command(cmd, now)

    def _take_snapshot(self, snap: MixedSnapshot) -> None:
        self.last_snapshot_t = max(self.last_snapshot_t, snap.t)
        pred = self.predecessor_id
        for e in snap.entities:
            if pred is not None and e.id == pred:
                self._pred_state = e
            elif e.id.kind is EntityKind.OBSTACLE and e.id not in self._obstacle_arcs:
                arc, dist, _ = self.path.project(e.x, e.y)
                # Off-road spawns are not obstacles for path followers.
                if dist < 3.0 * max(1.0, self.path.length / 500.0):
                    self._obstacle_arcs[e.id] = arc

    # ----- control and dynamics -------------------------------------------

    def _gap_and_predecessor(self, own_arc: float) -> tuple[float, float, float]:
        """(gap, pred speed, pred accel) against predecessor or obstacle."""
        gap = math.inf
        pred_speed = self.cruise_speed
        pred_accel = 0.0
        if self._pred_state is not None:
            p = self._pred_state
            arc, _, self._pred_hint = self.path.project(p.x, p.y, self._pred_hint)
            gap = self.path.arc_delta(own_arc, arc)
            pred_speed = p.speed
            pred_accel = p.accel
        for obs_arc in self._obstacle_arcs.values():
            d = self.path.arc_delta(own_arc, obs_arc)
            if d < gap:
                gap, pred_speed, pred_accel = d, 0.0, 0.0
        return (gap, pred_speed, pred_accel)

    def _choose_target_speed(self, now: float, dt: float, own_arc: float) -> float:
        if self.role is Role.HEAD:
            base = self.target_speed if self.target_speed is not None else self.cruise_speed
            target = evaluate_profile(self.profile, now, base)
            # A spawned obstacle ahead overrides the scripted speed.
            for obs_arc in self._obstacle_arcs.values():
                d = self.path.arc_delta(own_arc, obs_arc)
                a = cacc_longitudinal(d, self.state.speed, 0.0, 0.0, self.cacc)
                target = min(target, max(0.0, self.state.speed + a * dt))
            return target
        if self.role is Role.LIVE_HUMAN:
            base = self.target_speed if self.target_speed is not None else self.cruise_speed
            return evaluate_profile(self.profile, now, base)
        # Fail-safe: with the snapshot stream severed the follower has no
        # trustworthy predecessor data, so it holds speed and flags once.
        if (
            self._pred_state is not None
            and now - self.last_snapshot_t > COMMAND_HOLD_FLAG_S
        ):
            if not self.warned_command_loss:
                self.warned_command_loss = True
                self.events.append({"event": "command_loss_hold", "id": str(self.eid), "t": now})
            return self.state.speed
        gap, pred_speed, pred_accel = self._gap_and_predecessor(own_arc)
        if self.role is Role.CACC:
            a = cacc_longitudinal(gap, self.state.speed, pred_speed, pred_accel, self.cacc)
        else:
            if math.isinf(gap):
                return evaluate_profile(self.profile, now, self.cruise_speed)
            a = self.hdv.step(gap, self.state.speed, pred_speed, now, dt)
        if self.profile is not None:
            # An operator-injected profile overrides car-following.
            return evaluate_profile(self.profile, now, self.cruise_speed)
        return max(0.0, self.state.speed + a * dt)

    def _choose_steer(self, now: float) -> float:
        if self.manual_steer is not None and now - self.manual_steer_t <= MANUAL_STEER_HOLD_S:
            return max(-self.lateral.steer_max, min(self.lateral.steer_max, self.manual_steer))
        try:
            steer, self._path_hint = preview_lateral(
                self.state,
                self.path,
                lookahead=self.lateral.lookahead_for(self.state.speed),
                steer_max=self.lateral.steer_max,
                recovery_threshold=self.lateral.recovery_threshold,
                hint=self._path_hint,
            )
        except OffPathError as exc:
            self.events.append({"event": "off_path", "id": str(self.eid), "detail": str(exc)})
            return 0.0
        return steer

    def tick(self, now: float, dt: float) -> MixedEntityState | None:
        """Advance one tick and return the (possibly noisy) native report."""
        self._drain_inbox(now)
        if not self.frozen:
            if (
                self.role is Role.LIVE_HUMAN
                and self.command_log
                and now - self.last_command_t > COMMAND_HOLD_FLAG_S
                and not self.warned_command_loss
            ):
                self.warned_command_loss = True
                self.events.append({"event": "command_loss_hold", "id": str(self.eid), "t": now})
            own_arc, _, self._path_hint = self.path.project(
                self.state.x, self.state.y, self._path_hint
            )
            target = self._choose_target_speed(now, dt, own_arc)
            steer = self._choose_steer(now)
            prev_speed = self.state.speed
            prev_heading = self.state.heading
            self.state = bicycle_step(self.state, target, steer, dt, self.accel_limit)
            self.last_accel = (self.state.speed - prev_speed) / dt
            self.last_yaw_rate = (self.state.heading - prev_heading) / dt
            if abs(self.last_yaw_rate) > math.pi / dt:  # heading wrap
                self.last_yaw_rate -= math.copysign(2 * math.pi / dt, self.last_yaw_rate)
        else:
            self.last_accel = 0.0
            self.last_yaw_rate = 0.0

        return self.report_now(now)

    def freeze(self) -> None:
        self.frozen = True
        self.state = BicycleState(
            self.state.x, self.state.y, self.state.heading, 0.0, self.state.wheelbase
        )

    def report_now(self, now: float) -> MixedEntityState:
        """Build and emit one state report at ``now``."""
        s = self.state
        x, y, heading, speed, t = s.x, s.y, s.heading, s.speed, now
        if self.sensor is not None:
            x, y, heading, speed, t = emulate_sensor_reading(x, y, heading, speed, now, self.sensor, self.rng)
        report = MixedEntityState(
            id=self.eid,
            t=t,
            x=x,
            y=y,
            heading=heading,
            speed=speed,
            yaw_rate=self.last_yaw_rate,
            accel=self.last_accel,
            source=Source.ONBOARD if self.realm is Realm.EMULATED_PHYSICAL else Source.NATIVE,
        )
        if self.uplink is not None:
            self.uplink.send(("state", self.eid, report))
        return report


@dataclass
class RsuProcess:
    """Roadside unit: fronts the facility control board and, when enabled,
    reports roadside observations of the physical vehicles."""

    board: ControlBoard
    uplink: Link | None = None
    query_period: float = 0.1
    roadside_sensing: bool = False
    roadside_sigma: float = 1.0e-4  # native meters (motion-capture grade)
    roadside_speed_sigma: float = 5.0e-4  # native m/s, smoothed mocap differencing
    rng: Any = None
    observed: list[VehicleProcess] = field(default_factory=list)
    inbox: list = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    _last_query: float = -math.inf

    def receive(self, msg) -> None:
        self.inbox.append(msg)

    def tick(self, now: float, dt: float) -> None:
        msgs, self.inbox = self.inbox, []
        for msg in msgs:
            if isinstance(msg, dict) and msg.get("kind") == "board_command":
                ack = self.board.command(int(msg["byte"]), now)
                if not ack:
                    self.events.append({"event": "board_nack", "byte": msg["byte"], "t": now})
        if now - self._last_query >= self.query_period - 1e-12:
            self._last_query = now
            frame = self.board.query(now)
            if self.uplink is not None:
                self.uplink.send(("facility_frame", frame.hex(), now))
        if self.roadside_sensing and self.uplink is not None:
            for veh in self.observed:
                s = veh.state
                x = s.x + self.rng.gauss(0.0, self.roadside_sigma)
                y = s.y + self.rng.gauss(0.0, self.roadside_sigma)
                speed = max(0.0, s.speed + self.rng.gauss(0.0, self.roadside_speed_sigma))
                report = MixedEntityState(
                    id=veh.eid,
                    t=now,
                    x=x,
                    y=y,
                    heading=s.heading,
                    speed=speed,
                    yaw_rate=veh.last_yaw_rate,
                    accel=veh.last_accel,
                    source=Source.ROADSIDE,
                )
                self.uplink.send(("state", veh.eid, report))


class ExternalVehicleClient:
    """Reference client for the public endpoint: a virtual vehicle that joins
    the platoon exchanging only newline-delimited wire frames."""

    def __init__(
        self,
        eid: EntityId,
        vehicle: VehicleProcess,
        send_line: Callable[[str], bool],
        bounds: dict | None = None,
    ):
        self.eid = eid
        self.vehicle = vehicle
        self.send_line = send_line
        self.bounds = bounds or {"speed_max": 8.0, "steer_max": 0.6, "steer_rate_max": 3.49}
        self.assembler = wire.LineAssembler()
        self.registered = False
        self.protocol_errors = 0

    def register(self) -> None:
        frame = {
            "type": "register",
            "id": str(self.eid),
            "scale": 1.0,
            "role": self.vehicle.role.value,
            "bounds": self.bounds,
        }
        self.send_line(wire.encode_frame(frame))
        self.registered = True

    def receive_bytes(self, data: bytes) -> None:
        try:
            frames = self.assembler.feed(data)
        except wire.WireError:
            self.protocol_errors += 1
            return
        for frame in frames:
            if frame["type"] == "snapshot":
                entities = tuple(wire.state_from_wire(e) for e in frame["entities"])
                snap = MixedSnapshot(
                    t=float(frame["t"]), seq=int(frame["seq"]), entities=entities, facilities=()
                )
                self.vehicle.receive(snap)
            elif frame["type"] == "command":
                self.vehicle.receive(frame)

    def tick(self, now: float, dt: float) -> None:
        if not self.registered:
            self.register()
        report = self.vehicle.tick(now, dt)
        frame = {"type": "state_update", **wire.state_to_wire(report)}
        self.send_line(wire.encode_frame(frame))
