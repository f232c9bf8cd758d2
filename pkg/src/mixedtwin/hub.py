"""The cloud-resident mixed testing environment.

The hub receives state streams from every entity, aggregates them into
mixed-space snapshots on a fixed tick, translates operator intents into
validated instructions via the interaction-logic table, converts commands to
each target's native scale via the dispatch table, and broadcasts snapshots
to subscribers. It is a single logical event loop over the virtual clock:
inbound messages queue up and aggregation/dispatch happen atomically per
tick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable

from . import wire
from .dynamics import HandDrawn, Sinusoid, SpeedProfile, SuddenBrake
from .facility import ChannelMap, frame_to_facility_states
from .space import (
    EntityId,
    EntityKind,
    FACILITY_KINDS,
    FacilityState,
    FacilityStatus,
    FrameTransform,
    FusionError,
    FusionPolicy,
    DEFAULT_FUSION_POLICY,
    MixedEntityState,
    Source,
    VEHICLE_KINDS,
    extrapolate_state,
    from_mixed_frame,
    fuse_observations,
    status_domain,
    to_mixed_frame,
)

DEFAULT_TICK = 0.02
SPEED_UNIT = 1.0 / 3.6  # one operator speed increment: 1 km/h


class HubError(Exception):
    pass


class RegistrationError(HubError):
    pass


class IntentError(HubError):
    """An operator intent could not be mapped to an instruction."""


class InstructionRejected(HubError):
    """An instruction failed validation outright (not merely clamped)."""


class InstructionKind(Enum):
    SET_TARGET_SPEED = "set_target_speed"
    SET_STEERING = "set_steering"
    SET_SPEED_PROFILE = "set_speed_profile"
    FACILITY_SET = "facility_set"
    SPAWN_OBSTACLE = "spawn_obstacle"


VEHICLE_INSTRUCTIONS = frozenset(
    {InstructionKind.SET_TARGET_SPEED, InstructionKind.SET_STEERING, InstructionKind.SET_SPEED_PROFILE}
)


class Origin(Enum):
    CONTROLLER = "controller"
    OPERATOR = "operator"
    SCENARIO = "scenario"


@dataclass(frozen=True)
class Instruction:
    target: EntityId
    kind: InstructionKind
    issued_at: float
    origin: Origin
    value: float | None = None  # speed (m/s) or steering (rad)
    profile: SpeedProfile | None = None
    status: FacilityStatus | None = None
    point: tuple[float, float] | None = None

    def to_wire(self) -> dict[str, Any]:
        d: dict[str, Any] = {"target": str(self.target), "kind": self.kind.value}
        if self.value is not None:
            d["value"] = self.value
        if self.profile is not None:
            d["profile"] = wire.profile_to_wire(self.profile)
        if self.status is not None:
            d["status"] = self.status.value
        if self.point is not None:
            d["point"] = list(self.point)
        return d


@dataclass(frozen=True)
class IntentMessage:
    """Raw operator input, one gesture/button action with its focus."""

    device: str
    action: str
    intent_seq: int
    focus_entity: EntityId | None = None
    focus_point: tuple[float, float] | None = None
    payload: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_wire(cls, frame: dict[str, Any]) -> "IntentMessage":
        focus = frame.get("focus") or {}
        entity = focus.get("entity")
        point = focus.get("point")
        return cls(
            device=str(frame["device"]),
            action=str(frame["action"]),
            intent_seq=int(frame["intent_seq"]),
            focus_entity=EntityId.parse(entity) if entity else None,
            focus_point=tuple(point) if point else None,
            payload=dict(frame.get("payload") or {}),
        )


@dataclass(frozen=True)
class Bounds:
    speed_max: float = 8.0
    steer_max: float = 0.6
    steer_rate_max: float = 3.49

    def __post_init__(self):
        if min(self.speed_max, self.steer_max, self.steer_rate_max) <= 0:
            raise ValueError("bounds must be strictly positive")


@dataclass
class DispatchEntry:
    """Per-entity routing: frame transform, native format, and safety bounds."""

    transform: FrameTransform
    format_tag: str  # "vehicle" or "facility"
    bounds: Bounds


@dataclass(frozen=True)
class MixedSnapshot:
    t: float
    seq: int
    entities: tuple[MixedEntityState, ...]
    facilities: tuple[FacilityState, ...]

    def entity(self, eid: EntityId) -> MixedEntityState | None:
        for e in self.entities:
            if e.id == eid:
                return e
        return None

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": "snapshot",
            "t": self.t,
            "seq": self.seq,
            "entities": [wire.state_to_wire(e) for e in self.entities],
            "facilities": [wire.facility_to_wire(f) for f in self.facilities],
        }


# An interaction-logic template turns (intent, context) into an Instruction.
# Context gives templates the current snapshot and per-target command state.
TemplateFn = Callable[[IntentMessage, "TwinHub"], Instruction]


class InteractionLogicTable:
    """gesture/action token -> instruction template."""

    def __init__(self, entries: dict[str, TemplateFn]):
        self.entries = dict(entries)

    def __contains__(self, action: str) -> bool:
        return action in self.entries

    def instantiate(self, m: IntentMessage, hub: "TwinHub") -> Instruction:
        if m.action not in self.entries:
            raise IntentError(f"unknown gesture/action {m.action!r}")
        return self.entries[m.action](m, hub)


def _require_vehicle_focus(m: IntentMessage) -> EntityId:
    if m.focus_entity is None:
        raise IntentError(f"action {m.action!r} needs an entity focus")
    return m.focus_entity


def default_logic_table(cruise_speed: float) -> InteractionLogicTable:
    """The shipped operator vocabulary: speed nudges, perturbation profiles,
    facility toggles, obstacle spawning, and manual drive."""

    def speed_nudge(sign: float) -> TemplateFn:
        def template(m: IntentMessage, hub: "TwinHub") -> Instruction:
            target = _require_vehicle_focus(m)
            current = hub.current_target_speed(target)
            return Instruction(
                target,
                InstructionKind.SET_TARGET_SPEED,
                hub.now,
                Origin.OPERATOR,
                value=current + sign * SPEED_UNIT,
            )

        return template

    def set_speed(m: IntentMessage, hub: "TwinHub") -> Instruction:
        target = _require_vehicle_focus(m)
        return Instruction(
            target,
            InstructionKind.SET_TARGET_SPEED,
            hub.now,
            Origin.OPERATOR,
            value=float(m.payload.get("speed", cruise_speed)),
        )

    def set_steer(m: IntentMessage, hub: "TwinHub") -> Instruction:
        target = _require_vehicle_focus(m)
        return Instruction(
            target,
            InstructionKind.SET_STEERING,
            hub.now,
            Origin.OPERATOR,
            value=float(m.payload.get("steer", 0.0)),
        )

    def brake_head(m: IntentMessage, hub: "TwinHub") -> Instruction:
        target = m.focus_entity or hub.head_vehicle
        if target is None:
            raise IntentError("no head vehicle to brake")
        profile = SuddenBrake(t0=hub.now, base=float(m.payload.get("base", cruise_speed)))
        return Instruction(
            target, InstructionKind.SET_SPEED_PROFILE, hub.now, Origin.OPERATOR, profile=profile
        )

    def sine_perturb(m: IntentMessage, hub: "TwinHub") -> Instruction:
        target = _require_vehicle_focus(m)
        profile = Sinusoid(
            t0=hub.now,
            base=float(m.payload.get("base", cruise_speed)),
            amplitude=float(m.payload.get("amplitude", 0.3)),
            frequency=float(m.payload.get("frequency", 0.2)),
        )
        return Instruction(
            target, InstructionKind.SET_SPEED_PROFILE, hub.now, Origin.OPERATOR, profile=profile
        )

    def hand_drawn(m: IntentMessage, hub: "TwinHub") -> Instruction:
        target = _require_vehicle_focus(m)
        samples = m.payload.get("samples")
        if not samples:
            raise IntentError("hand_drawn needs a samples payload")
        profile = HandDrawn(
            t0=hub.now,
            base=float(m.payload.get("base", cruise_speed)),
            samples=tuple((float(u), float(v)) for u, v in samples),
        )
        return Instruction(
            target, InstructionKind.SET_SPEED_PROFILE, hub.now, Origin.OPERATOR, profile=profile
        )

    def spawn_obstacle(m: IntentMessage, hub: "TwinHub") -> Instruction:
        if m.focus_point is None:
            raise IntentError("spawn_obstacle needs a point focus")
        x, y = m.focus_point
        return Instruction(
            hub.next_obstacle_id(),
            InstructionKind.SPAWN_OBSTACLE,
            hub.now,
            Origin.OPERATOR,
            point=(float(x), float(y)),
        )

    def facility(status: FacilityStatus) -> TemplateFn:
        def template(m: IntentMessage, hub: "TwinHub") -> Instruction:
            if m.focus_entity is None:
                raise IntentError(f"action {m.action!r} needs a facility focus")
            return Instruction(
                m.focus_entity, InstructionKind.FACILITY_SET, hub.now, Origin.OPERATOR, status=status
            )

        return template

    return InteractionLogicTable(
        {
            "speed_up": speed_nudge(+1.0),
            "speed_down": speed_nudge(-1.0),
            "set_speed": set_speed,
            "set_steer": set_steer,
            "brake_head": brake_head,
            "sine_perturb": sine_perturb,
            "hand_drawn": hand_drawn,
            "spawn_obstacle": spawn_obstacle,
            "gate_open": facility(FacilityStatus.OPEN),
            "gate_close": facility(FacilityStatus.CLOSED),
            "light_on": facility(FacilityStatus.ON),
            "light_off": facility(FacilityStatus.OFF),
            "signal_on": facility(FacilityStatus.ON),
            "signal_off": facility(FacilityStatus.OFF),
        }
    )


@dataclass
class Subscription:
    """One snapshot consumer; kind-filtered, optionally in a native frame.

    ``vehicle_ids`` further narrows the vehicle entities delivered (obstacles
    always pass), which keeps high-rate per-entity feeds lean.
    """

    callback: Callable[[MixedSnapshot], None]
    kinds: frozenset[EntityKind] | None = None
    transform: FrameTransform | None = None
    vehicle_ids: frozenset[EntityId] | None = None
    name: str = ""
    last_seq: int = 0
    active: bool = True

    def push(self, snap: MixedSnapshot) -> None:
        if not self.active:
            return
        entities = snap.entities
        facilities = snap.facilities
        if self.kinds is not None:
            entities = tuple(e for e in entities if e.id.kind in self.kinds)
            facilities = tuple(f for f in facilities if f.id.kind in self.kinds)
        if self.vehicle_ids is not None:
            entities = tuple(
                e for e in entities
                if e.id.kind is EntityKind.OBSTACLE or e.id in self.vehicle_ids
            )
        if self.transform is not None and not self.transform.identity:
            entities = tuple(from_mixed_frame(e, self.transform) for e in entities)
        self.last_seq = snap.seq
        self.callback(MixedSnapshot(snap.t, snap.seq, entities, facilities))


class TwinHub:
    """Aggregation, intent translation, validation, and dispatch."""

    def __init__(
        self,
        tick: float = DEFAULT_TICK,
        fusion_policy: FusionPolicy = DEFAULT_FUSION_POLICY,
        channel_map: ChannelMap | None = None,
        logic_table: InteractionLogicTable | None = None,
        road_bounds: tuple[float, float, float, float] = (-50.0, 500.0, -50.0, 200.0),
        cruise_speed: float = 10.08 / 3.6,
    ):
        self.tick = tick
        self.fusion_policy = fusion_policy
        self.channel_map = channel_map
        self.logic_table = logic_table or default_logic_table(cruise_speed)
        self.road_bounds = road_bounds
        self.now = 0.0
        self.seq = 0
        self.head_vehicle: EntityId | None = None

        self._dispatch: dict[EntityId, DispatchEntry] = {}
        self._outbound: dict[EntityId, Callable[[dict], bool]] = {}
        self._rsu_outbound: Callable[[dict], bool] | None = None
        self._pending_obs: dict[EntityId, list[MixedEntityState]] = {}
        self._last_t: dict[tuple[EntityId, Source], float] = {}
        self._last_state: dict[EntityId, MixedEntityState] = {}
        self._stale_announced: set[EntityId] = set()
        self._facilities: dict[EntityId, FacilityState] = {}
        self._obstacles: dict[EntityId, MixedEntityState] = {}
        self._obstacle_counter = 0
        self._target_speed: dict[EntityId, float] = {}
        self._last_steer: dict[EntityId, float] = {}
        self._retry: list[tuple[Instruction, dict]] = []
        self._subs: list[Subscription] = []
        self.events: list[dict[str, Any]] = []
        self._event_listeners: list[Callable[[dict], None]] = []
        self.last_snapshot: MixedSnapshot | None = None

    # ----- registration and wiring -------------------------------------

    def register_entity(
        self,
        eid: EntityId,
        transform: FrameTransform,
        bounds: Bounds | None = None,
        initial_target_speed: float | None = None,
        head: bool = False,
    ) -> DispatchEntry:
        if eid in self._dispatch:
            raise RegistrationError(f"{eid} already registered")
        tag = "facility" if eid.kind in FACILITY_KINDS else "vehicle"
        entry = DispatchEntry(transform=transform, format_tag=tag, bounds=bounds or Bounds())
        self._dispatch[eid] = entry
        self._pending_obs[eid] = []
        if initial_target_speed is not None:
            self._target_speed[eid] = initial_target_speed
        if head:
            self.head_vehicle = eid
        if eid.kind in FACILITY_KINDS and eid not in self._facilities:
            ch = self.channel_map.channel_of(eid) if self.channel_map else 0
            inactive, _ = status_domain(eid.kind)
            self._facilities[eid] = FacilityState(eid, ch, inactive, self.now)
        return entry

    def is_registered(self, eid: EntityId) -> bool:
        return eid in self._dispatch

    def transform_of(self, eid: EntityId) -> FrameTransform:
        return self._dispatch[eid].transform

    def attach_outbound(self, eid: EntityId, send: Callable[[dict], bool]) -> None:
        # Wiring may precede protocol-level registration (connecting clients).
        self._outbound[eid] = send

    def attach_rsu_outbound(self, send: Callable[[dict], bool]) -> None:
        self._rsu_outbound = send

    def subscribe(
        self,
        callback: Callable[[MixedSnapshot], None],
        kinds: Iterable[EntityKind] | None = None,
        transform: FrameTransform | None = None,
        vehicle_ids: Iterable[EntityId] | None = None,
        name: str = "",
    ) -> Subscription:
        sub = Subscription(
            callback=callback,
            kinds=frozenset(kinds) if kinds is not None else None,
            transform=transform,
            vehicle_ids=frozenset(vehicle_ids) if vehicle_ids is not None else None,
            name=name,
        )
        self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.active = False
        if sub in self._subs:
            self._subs.remove(sub)

    def add_event_listener(self, fn: Callable[[dict], None]) -> None:
        self._event_listeners.append(fn)

    # ----- inbound ------------------------------------------------------

    def ingest_state_update(
        self, eid: EntityId, native: MixedEntityState, source: Source | None = None
    ) -> tuple[bool, str]:
        """Convert one native state report into the mixed space and queue it
        for the next aggregation tick. Returns (accepted, reason)."""
        if eid not in self._dispatch:
            return (False, f"unknown entity {eid}")
        src = source or native.source
        key = (eid, src)
        last = self._last_t.get(key)
        if last is not None and native.t <= last:
            self.emit_event(
                "state_rejected",
                {"id": str(eid), "source": src.value, "t": native.t, "reason": "out_of_order"},
            )
            return (False, "out_of_order timestamp")
        entry = self._dispatch[eid]
        mixed = to_mixed_frame(replace(native, id=eid, source=src), entry.transform)
        self._last_t[key] = native.t
        self._pending_obs[eid].append(mixed)
        return (True, "ok")

    def ingest_facility_frame(self, hex_payload: str, t: float) -> bool:
        """Decode one control-board status frame relayed by the RSU."""
        if self.channel_map is None:
            return False
        try:
            frame = bytes.fromhex(hex_payload)
            states = frame_to_facility_states(frame, self.channel_map, t)
        except Exception as exc:
            self.emit_event("facility_frame_error", {"t": t, "reason": str(exc)})
            return False
        for st in states:
            self._facilities[st.id] = st
        return True

    def ingest_wire_frame(self, frame: dict[str, Any]) -> None:
        """Route one decoded public-endpoint frame."""
        ftype = frame["type"]
        if ftype == "state_update":
            state = wire.state_from_wire(frame)
            self.ingest_state_update(state.id, state, state.source)
        elif ftype == "facility_frame":
            self.ingest_facility_frame(frame["hex"], float(frame["t"]))
        elif ftype == "register":
            eid = EntityId.parse(frame["id"])
            if eid in self._dispatch:
                # Reconnecting clients re-announce themselves; idempotent.
                self.emit_event("re_register", {"id": str(eid)})
                return
            b = frame.get("bounds") or {}
            self.register_entity(
                eid,
                FrameTransform(scale=float(frame.get("scale", 1.0))),
                Bounds(
                    speed_max=float(b.get("speed_max", 8.0)),
                    steer_max=float(b.get("steer_max", 0.6)),
                    steer_rate_max=float(b.get("steer_rate_max", 3.49)),
                ),
                initial_target_speed=frame.get("initial_target_speed"),
            )
        elif ftype == "intent":
            self.handle_intent(IntentMessage.from_wire(frame))
        else:
            self.emit_event("protocol_error", {"reason": f"unroutable frame type {ftype}"})

    # ----- aggregation ---------------------------------------------------

    def aggregate_tick(self, t_now: float) -> MixedSnapshot:
        """Fuse all queued observations at t_now, broadcast, retry dispatches."""
        self.now = t_now
        limit = self.fusion_policy.staleness_limit
        entities: list[MixedEntityState] = []
        for eid in self._dispatch:
            if eid.kind in FACILITY_KINDS:
                continue
            queued = self._pending_obs[eid]
            if queued:
                self._pending_obs[eid] = []
                try:
                    fused = fuse_observations(queued, self.fusion_policy, t_now)
                except FusionError:
                    fused = None
                if fused is not None:
                    self._last_state[eid] = fused
                    self._stale_announced.discard(eid)
                    entities.append(fused)
                    continue
            last = self._last_state.get(eid)
            if last is None:
                continue
            age = t_now - last.t
            if age <= limit:
                if eid not in self._stale_announced:
                    self._stale_announced.add(eid)
                    self.emit_event("stale", {"id": str(eid), "age": age})
                entities.append(extrapolate_state(last, age, limit))
            else:
                self.emit_event("stale_dropped", {"id": str(eid), "age": age})
                del self._last_state[eid]
                self._stale_announced.discard(eid)

        for obs in self._obstacles.values():
            entities.append(replace(obs, t=t_now))

        self.seq += 1
        snap = MixedSnapshot(
            t=t_now,
            seq=self.seq,
            entities=tuple(entities),
            facilities=tuple(self._facilities.values()),
        )
        self.last_snapshot = snap
        self._flush_retries()
        for sub in list(self._subs):
            sub.push(snap)
        return snap

    # ----- intent pipeline ------------------------------------------------

    def current_target_speed(self, eid: EntityId) -> float:
        if eid in self._target_speed:
            return self._target_speed[eid]
        snap = self.last_snapshot
        state = snap.entity(eid) if snap else None
        if state is None:
            raise IntentError(f"no known target speed for {eid}")
        return state.speed

    def next_obstacle_id(self) -> EntityId:
        eid = EntityId(EntityKind.OBSTACLE, self._obstacle_counter)
        self._obstacle_counter += 1
        return eid

    def map_intent_to_instruction(self, m: IntentMessage) -> Instruction:
        """Translate one operator intent via the interaction-logic table."""
        if m.action not in self.logic_table:
            raise IntentError(f"unknown gesture/action {m.action!r}")
        if m.focus_entity is not None:
            known = (
                m.focus_entity in self._dispatch
                or m.focus_entity in self._obstacles
                or m.focus_entity in self._facilities
            )
            if not known:
                raise IntentError(f"focus entity {m.focus_entity} does not exist")
        if m.focus_point is not None:
            x, y = m.focus_point
            xmin, xmax, ymin, ymax = self.road_bounds
            if not (xmin <= x <= xmax and ymin <= y <= ymax):
                raise IntentError(f"focus point ({x}, {y}) outside road bounds")
        return self.logic_table.instantiate(m, self)

    def validate_instruction(self, i: Instruction) -> tuple[Instruction, list[str]]:
        """Clamp-and-flag safety validation; idempotent for a fixed hub state.

        Raises InstructionRejected for kind/target mismatches and non-finite
        parameters; out-of-bound vehicle commands are clamped and flagged.
        """
        flags: list[str] = []
        if i.kind is InstructionKind.SPAWN_OBSTACLE:
            x, y = i.point
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InstructionRejected("non-finite obstacle position")
            return (i, flags)

        entry = self._dispatch.get(i.target)
        if entry is None:
            raise InstructionRejected(f"target {i.target} not registered")

        if i.kind in VEHICLE_INSTRUCTIONS and entry.format_tag != "vehicle":
            raise InstructionRejected(f"{i.kind.value} cannot target {i.target.kind.value}")
        if i.kind is InstructionKind.FACILITY_SET:
            if entry.format_tag != "facility":
                raise InstructionRejected(f"facility_set cannot target {i.target.kind.value}")
            if i.status not in status_domain(i.target.kind):
                raise InstructionRejected(
                    f"status {i.status.value} outside domain of {i.target.kind.value}"
                )
            return (i, flags)

        b = entry.bounds
        if i.kind is InstructionKind.SET_TARGET_SPEED:
            if not math.isfinite(i.value):
                raise InstructionRejected("non-finite speed")
            clamped = min(max(i.value, 0.0), b.speed_max)
            if clamped != i.value:
                flags.append("clamped")
                i = replace(i, value=clamped)
        elif i.kind is InstructionKind.SET_STEERING:
            if not math.isfinite(i.value):
                raise InstructionRejected("non-finite steering")
            clamped = min(max(i.value, -b.steer_max), b.steer_max)
            current = self._last_steer.get(i.target, 0.0)
            max_delta = b.steer_rate_max * self.tick
            if clamped > current + max_delta:
                clamped = current + max_delta
            elif clamped < current - max_delta:
                clamped = current - max_delta
            if clamped != i.value:
                flags.append("clamped")
                i = replace(i, value=clamped)
        elif i.kind is InstructionKind.SET_SPEED_PROFILE:
            p = i.profile
            values = [p.base] if not isinstance(p, HandDrawn) else [p.base] + [v for _, v in p.samples]
            if not all(math.isfinite(v) for v in values):
                raise InstructionRejected("non-finite profile parameter")
            if p.base > b.speed_max:
                flags.append("clamped")
                i = replace(i, profile=replace(p, base=b.speed_max))
        return (i, flags)

    def dispatch_instruction(self, i: Instruction) -> dict[str, Any]:
        """Convert a validated instruction to the target's native format and
        emit it on the target's link; returns the native command frame."""
        if i.kind is InstructionKind.SPAWN_OBSTACLE:
            x, y = i.point
            self._obstacles[i.target] = MixedEntityState(
                id=i.target, t=self.now, x=x, y=y, heading=0.0, speed=0.0, source=Source.NATIVE
            )
            self.emit_event("obstacle_spawned", {"id": str(i.target), "x": x, "y": y})
            return {"type": "command", "target": str(i.target), "kind": i.kind.value, "t": self.now}

        entry = self._dispatch[i.target]
        cmd: dict[str, Any] = {
            "type": "command",
            "target": str(i.target),
            "kind": i.kind.value,
            "t": self.now,
        }
        scale = entry.transform.scale
        if i.kind is InstructionKind.SET_TARGET_SPEED:
            cmd["value"] = i.value / scale
            self._target_speed[i.target] = i.value
        elif i.kind is InstructionKind.SET_STEERING:
            cmd["value"] = i.value  # steering angle is scale-invariant
            self._last_steer[i.target] = i.value
        elif i.kind is InstructionKind.SET_SPEED_PROFILE:
            native = i.profile if scale == 1.0 else i.profile.scaled(1.0 / scale)
            cmd["profile"] = wire.profile_to_wire(native)
            self._target_speed[i.target] = i.profile.base
        elif i.kind is InstructionKind.FACILITY_SET:
            return self._dispatch_facility(i, cmd)

        send = self._outbound.get(i.target)
        if send is None or not send(cmd):
            self._queue_retry(i, cmd)
        return cmd

    def _dispatch_facility(self, i: Instruction, cmd: dict[str, Any]) -> dict[str, Any]:
        if self.channel_map is None:
            raise InstructionRejected("no channel map loaded")
        ch = self.channel_map.channel_of(i.target)
        entry = self.channel_map.entries[ch]
        byte = entry.on_byte if i.status.active else entry.off_byte
        cmd["kind"] = "board_command"
        cmd["byte"] = byte
        cmd["channel"] = ch
        if self._rsu_outbound is None or not self._rsu_outbound(cmd):
            self._queue_retry(i, cmd)
        return cmd

    def _queue_retry(self, i: Instruction, cmd: dict[str, Any]) -> None:
        self.emit_event("dispatch_error", {"target": str(i.target), "kind": i.kind.value})
        self._retry.append((i, cmd))

    def _flush_retries(self) -> None:
        pending, self._retry = self._retry, []
        for instr, cmd in pending:
            if instr.kind is InstructionKind.FACILITY_SET:
                send = self._rsu_outbound
            else:
                send = self._outbound.get(instr.target)
            if send is None or not send(cmd):
                self.emit_event(
                    "dispatch_dropped", {"target": str(instr.target), "kind": instr.kind.value}
                )

    def handle_intent(self, m: IntentMessage) -> dict[str, Any]:
        """Full pipeline: map, validate, dispatch. Every intent yields exactly
        one ack frame (ok or rejected) and a matching audit event."""
        try:
            instruction = self.map_intent_to_instruction(m)
            validated, flags = self.validate_instruction(instruction)
            self.dispatch_instruction(validated)
        except (IntentError, InstructionRejected) as exc:
            ack = {
                "type": "instruction_ack",
                "intent_seq": m.intent_seq,
                "status": "rejected",
                "reason": str(exc),
            }
            self.emit_event(
                "intent_rejected",
                {"device": m.device, "action": m.action, "intent_seq": m.intent_seq, "reason": str(exc)},
            )
            return ack
        ack = {
            "type": "instruction_ack",
            "intent_seq": m.intent_seq,
            "status": "ok",
            "instruction": validated.to_wire(),
            "flags": flags,
        }
        self.emit_event(
            "intent_dispatched",
            {
                "device": m.device,
                "action": m.action,
                "intent_seq": m.intent_seq,
                "target": str(validated.target),
                "flags": flags,
            },
        )
        return ack

    def issue(self, i: Instruction) -> tuple[Instruction, list[str]]:
        """Validate and dispatch a controller/scenario-originated instruction."""
        validated, flags = self.validate_instruction(i)
        if flags:
            self.emit_event(
                "instruction_clamped",
                {"target": str(validated.target), "kind": validated.kind.value, "flags": flags},
            )
        self.dispatch_instruction(validated)
        return (validated, flags)

    # ----- events ---------------------------------------------------------

    def emit_event(self, name: str, data: dict[str, Any]) -> None:
        evt = {"type": "event", "t": self.now, "event": name, "data": data}
        self.events.append(evt)
        for fn in self._event_listeners:
            fn(evt)
