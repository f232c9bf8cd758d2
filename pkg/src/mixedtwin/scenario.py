"""Experiment orchestration: declarative scenario configs, the tick-
synchronous engine that wires entities, links, and hub together on one
virtual clock, and the per-tick metrics record.

Deterministic mode steps everything on one thread under seeded randomness:
two runs with the same config and seed produce identical records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from . import wire
from .dynamics import (
    CRUISE_SPEED,
    CaccParams,
    HandDrawn,
    HdvParams,
    LateralParams,
    Sinusoid,
    SpeedProfile,
    SuddenBrake,
)
from .entities import ExternalVehicleClient, Realm, Role, RsuProcess, VehicleProcess
from .facility import ChannelMap, ControlBoard, SensorModel, default_channel_map
from .hub import Bounds, Instruction, InstructionKind, Origin, TwinHub, default_logic_table
from .netsim import EventScheduler, Link, LinkSpec, VirtualClock, default_link_specs, derive_rng
from .space import (
    EntityId,
    EntityKind,
    FrameTransform,
    FusionPolicy,
    MixedEntityState,
    Source,
)
from .track import Track, oval_track
from .dynamics import BicycleState


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class VehicleSpec:
    eid: EntityId
    realm: Realm
    role: Role
    accel_limit: float | None = None  # mixed-space override


@dataclass(frozen=True)
class PerturbationSpec:
    """A scripted speed-profile injection; trigger_t None means operator-only."""

    kind: str  # sudden_brake | sinusoid | hand_drawn
    trigger_t: float | None
    target: str = "head"  # "head" or an entity id string
    params: dict[str, Any] = field(default_factory=dict)

    def build_profile(self, t0: float, cruise: float) -> SpeedProfile:
        p = self.params
        if self.kind == "sudden_brake":
            return SuddenBrake(
                t0=t0,
                base=float(p.get("base", cruise)),
                decel=float(p.get("decel", 0.28)),
                floor=float(p.get("floor", 1.01 / 3.6)),
                hold=float(p.get("hold", 20.0)),
                recover=float(p.get("recover", 12.0)),
            )
        if self.kind == "sinusoid":
            return Sinusoid(
                t0=t0,
                base=float(p.get("base", cruise)),
                amplitude=float(p.get("amplitude", 0.3)),
                frequency=float(p.get("frequency", 0.2)),
            )
        if self.kind == "hand_drawn":
            return HandDrawn(
                t0=t0,
                base=float(p.get("base", cruise)),
                samples=tuple((float(u), float(v)) for u, v in p["samples"]),
            )
        raise ScenarioError(f"unknown perturbation kind {self.kind!r}")


# Directed link pairs by endpoint role: (uplink to hub, downlink from hub).
DEFAULT_LINK_ROLES = {
    "virtual": (1, 2),
    "console": (3, 4),
    "external": (5, 6),
    "physical_vehicle": (7, 8),
    "rsu": (9, 10),
}


@dataclass
class ScenarioConfig:
    name: str = "default_platoon"
    duration_s: float = 120.0
    tick_s: float = 0.02
    seed: int = 7
    cruise_speed: float = CRUISE_SPEED
    physical_scale: float = 14.0
    wheelbase: float = 2.66
    vehicle_accel_limit: float = 3.0
    start_arc: float = 30.0
    track_straight: float = 150.0
    track_radius: float = 30.0
    vehicles: list[VehicleSpec] = field(default_factory=list)
    cacc: CaccParams = field(default_factory=CaccParams)
    hdv: HdvParams = field(default_factory=lambda: HdvParams(s0=3.5))
    lateral: LateralParams = field(default_factory=LateralParams)
    bounds: Bounds = field(default_factory=Bounds)
    sensor: SensorModel = field(default_factory=SensorModel)
    fusion_weights: dict[Source, float] = field(
        default_factory=lambda: {Source.ONBOARD: 0.5, Source.ROADSIDE: 0.25, Source.NATIVE: 0.25}
    )
    staleness_limit: float = 0.5
    links: dict[int, LinkSpec] = field(default_factory=default_link_specs)
    link_roles: dict[str, tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_LINK_ROLES))
    fifo_links: bool = False
    roadside_sensing: bool = False
    rsu_query_period: float = 0.1
    gate_travel: float = 1.0
    warn_gap: float = 5.0
    collision_gap: float = 3.0
    perturbations: list[PerturbationSpec] = field(default_factory=list)

    def fusion_policy(self) -> FusionPolicy:
        return FusionPolicy(weights=self.fusion_weights, staleness_limit=self.staleness_limit)

    def track(self) -> Track:
        return oval_track(self.track_straight, self.track_radius)

    def head(self) -> VehicleSpec:
        heads = [v for v in self.vehicles if v.role is Role.HEAD]
        if len(heads) != 1:
            raise ScenarioError(f"need exactly one head vehicle, found {len(heads)}")
        return heads[0]


def default_roster() -> list[VehicleSpec]:
    """Eight-vehicle mixed platoon: head plus followers with human-driver
    surrogates at positions 2, 5, and 8; realms interleave emulated-physical
    and virtual, the tail vehicle joining through the external interface."""
    roster = []
    hdv_positions = {2, 5, 8}
    for pos in range(1, 9):
        if pos == 8:
            realm = Realm.EXTERNAL_VIRTUAL
        elif pos % 2 == 1:
            realm = Realm.EMULATED_PHYSICAL
        else:
            realm = Realm.VIRTUAL
        kind = EntityKind.PHYSICAL_VEHICLE if realm is Realm.EMULATED_PHYSICAL else EntityKind.VIRTUAL_VEHICLE
        role = Role.HEAD if pos == 1 else (Role.HDV if pos in hdv_positions else Role.CACC)
        roster.append(VehicleSpec(EntityId(kind, pos), realm, role))
    return roster


def default_config(**overrides) -> ScenarioConfig:
    cfg = ScenarioConfig(vehicles=default_roster())
    cfg.perturbations = [
        PerturbationSpec(kind="sudden_brake", trigger_t=30.0),
        PerturbationSpec(kind="sudden_brake", trigger_t=75.0),
    ]
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ScenarioError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg


# ----- YAML config IO ------------------------------------------------------


def load_config(path: str | Path) -> ScenarioConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ScenarioError("config root must be a mapping")
    return config_from_dict(raw)


def config_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    cfg = ScenarioConfig()
    simple = {
        "name",
        "duration_s",
        "tick_s",
        "seed",
        "cruise_speed",
        "physical_scale",
        "wheelbase",
        "vehicle_accel_limit",
        "start_arc",
        "track_straight",
        "track_radius",
        "fifo_links",
        "roadside_sensing",
        "rsu_query_period",
        "gate_travel",
        "warn_gap",
        "collision_gap",
        "staleness_limit",
    }
    for key, value in raw.items():
        if key in simple:
            setattr(cfg, key, value)
    if "cacc" in raw:
        cfg.cacc = CaccParams(**raw["cacc"])
    if "hdv" in raw:
        cfg.hdv = HdvParams(**raw["hdv"])
    if "lateral" in raw:
        cfg.lateral = LateralParams(**raw["lateral"])
    if "bounds" in raw:
        cfg.bounds = Bounds(**raw["bounds"])
    if "sensor" in raw:
        cfg.sensor = SensorModel(**raw["sensor"])
    if "fusion_weights" in raw:
        cfg.fusion_weights = {Source(k): float(v) for k, v in raw["fusion_weights"].items()}
    if "links" in raw:
        cfg.links = {
            int(d["link_id"]): LinkSpec(
                link_id=int(d["link_id"]),
                mean_ms=float(d["mean_ms"]),
                std_ms=float(d["std_ms"]),
                p99_ms=float(d["p99_ms"]),
                drop_rate=float(d.get("drop_rate", 0.0)),
            )
            for d in raw["links"]
        }
    if "link_roles" in raw:
        cfg.link_roles = {k: tuple(v) for k, v in raw["link_roles"].items()}
    if "vehicles" in raw:
        cfg.vehicles = [
            VehicleSpec(
                eid=EntityId.parse(d["id"]),
                realm=Realm(d["realm"]),
                role=Role(d["role"]),
                accel_limit=d.get("accel_limit"),
            )
            for d in raw["vehicles"]
        ]
    else:
        cfg.vehicles = default_roster()
    if "perturbations" in raw:
        cfg.perturbations = [
            PerturbationSpec(
                kind=d["profile"],
                trigger_t=d.get("at"),
                target=d.get("target", "head"),
                params={k: v for k, v in d.items() if k not in ("profile", "at", "target")},
            )
            for d in raw["perturbations"]
        ]
    return cfg


def config_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    return {
        "name": cfg.name,
        "duration_s": cfg.duration_s,
        "tick_s": cfg.tick_s,
        "seed": cfg.seed,
        "cruise_speed": cfg.cruise_speed,
        "physical_scale": cfg.physical_scale,
        "wheelbase": cfg.wheelbase,
        "vehicle_accel_limit": cfg.vehicle_accel_limit,
        "start_arc": cfg.start_arc,
        "track_straight": cfg.track_straight,
        "track_radius": cfg.track_radius,
        "fifo_links": cfg.fifo_links,
        "roadside_sensing": cfg.roadside_sensing,
        "rsu_query_period": cfg.rsu_query_period,
        "gate_travel": cfg.gate_travel,
        "warn_gap": cfg.warn_gap,
        "collision_gap": cfg.collision_gap,
        "staleness_limit": cfg.staleness_limit,
        "cacc": cfg.cacc.__dict__ | {},
        "hdv": cfg.hdv.__dict__ | {},
        "lateral": cfg.lateral.__dict__ | {},
        "bounds": cfg.bounds.__dict__ | {},
        "sensor": cfg.sensor.__dict__ | {},
        "fusion_weights": {s.value: w for s, w in cfg.fusion_weights.items()},
        "links": [
            {
                "link_id": s.link_id,
                "mean_ms": s.mean_ms,
                "std_ms": s.std_ms,
                "p99_ms": s.p99_ms,
                "drop_rate": s.drop_rate,
            }
            for s in sorted(cfg.links.values(), key=lambda s: s.link_id)
        ],
        "link_roles": {k: list(v) for k, v in cfg.link_roles.items()},
        "vehicles": [
            {
                "id": str(v.eid),
                "realm": v.realm.value,
                "role": v.role.value,
                **({"accel_limit": v.accel_limit} if v.accel_limit is not None else {}),
            }
            for v in cfg.vehicles
        ],
        "perturbations": [
            {"profile": p.kind, "at": p.trigger_t, "target": p.target, **p.params}
            for p in cfg.perturbations
        ],
    }


def validate_config(cfg: ScenarioConfig) -> tuple[list[str], list[str]]:
    """Semantic checks; returns (errors, warnings)."""
    errors: list[str] = []
    warnings: list[str] = []
    heads = [v for v in cfg.vehicles if v.role is Role.HEAD]
    if len(heads) != 1:
        errors.append(
            "vehicles: exactly one head role required, found "
            + (", ".join(str(v.eid) for v in heads) if heads else "none")
        )
    ids = [v.eid for v in cfg.vehicles]
    if len(set(ids)) != len(ids):
        errors.append("vehicles: duplicate entity ids")
    total = sum(cfg.fusion_weights.values())
    if abs(total - 1.0) > 1e-9:
        errors.append(f"fusion_weights: must sum to 1, got {total}")
    if cfg.tick_s <= 0:
        errors.append("tick_s must be > 0")
    if cfg.duration_s < 0:
        errors.append("duration_s must be >= 0")
    if not cfg.warn_gap > cfg.collision_gap > 0:
        errors.append("need warn_gap > collision_gap > 0")
    for spec in cfg.links.values():
        if not spec.p99_consistent():
            warnings.append(
                f"links[{spec.link_id}]: p99 {spec.p99_ms} deviates from mean + 2.326*std "
                f"= {spec.mean_ms + 2.326 * spec.std_ms:.4f} by more than 0.01 ms"
            )
    try:
        default_channel_map()
    except Exception as exc:  # channel uniqueness is enforced on construction
        errors.append(f"channel map: {exc}")
    for p in cfg.perturbations:
        if p.trigger_t is not None and p.trigger_t > cfg.duration_s:
            warnings.append(f"perturbation at t={p.trigger_t} never fires (duration {cfg.duration_s})")
    return errors, warnings


# ----- metrics record -------------------------------------------------------


@dataclass
class MetricsRecord:
    """Per-tick platoon time series plus the run's event log."""

    tick_s: float
    roster: list[VehicleSpec]
    times: list[float] = field(default_factory=list)
    speeds: list[list[float]] = field(default_factory=list)  # [vehicle][tick]
    accels: list[list[float]] = field(default_factory=list)
    gaps: list[list[float]] = field(default_factory=list)  # [follower-1][tick]
    events: list[dict] = field(default_factory=list)
    link_stats: dict[int, dict] = field(default_factory=dict)
    partial: bool = False
    aborted: bool = False

    @property
    def n_vehicles(self) -> int:
        return len(self.roster)

    def vehicle_index(self, eid: EntityId) -> int:
        for i, v in enumerate(self.roster):
            if v.eid == eid:
                return i
        raise KeyError(str(eid))

    def perturbation_events(self) -> list[dict]:
        return [e for e in self.events if e.get("event") == "perturbation"]


# ----- engine ---------------------------------------------------------------


class ScenarioEngine:
    """Builds and advances one experiment on the virtual clock."""

    def __init__(self, cfg: ScenarioConfig, seed: int | None = None):
        errors, _ = validate_config(cfg)
        if errors:
            raise ScenarioError("; ".join(errors))
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.track = cfg.track()
        self.clock = VirtualClock()
        self.scheduler = EventScheduler(self.clock)
        self.hub_inbox: list = []
        self.channel_map = default_channel_map()

        bbox = self._track_bbox(margin=20.0)
        self.hub = TwinHub(
            tick=cfg.tick_s,
            fusion_policy=cfg.fusion_policy(),
            channel_map=self.channel_map,
            logic_table=default_logic_table(cfg.cruise_speed),
            road_bounds=bbox,
            cruise_speed=cfg.cruise_speed,
        )
        self.record = MetricsRecord(tick_s=cfg.tick_s, roster=list(cfg.vehicles))
        self.vehicles: list[VehicleProcess] = []
        self.external_clients: list[ExternalVehicleClient] = []
        self._engine_events: list[dict] = []
        self._fired_perturbations: set[int] = set()
        self._gap_hints: dict[EntityId, int | None] = {}
        self._frozen_pairs: set[tuple[EntityId, EntityId]] = set()
        self._warned: set[EntityId] = set()
        self._collided: set[EntityId] = set()
        self._links: list[Link] = []
        self._links_by_name: dict[str, Link] = {}
        self.live_intents: list = []  # live mode folds operator intents in here

        self._build_rsu()
        self._build_vehicles()
        self._register_facilities()
        self._initial_reports()

    # -- construction ------------------------------------------------------

    def _track_bbox(self, margin: float) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.track.points]
        ys = [p[1] for p in self.track.points]
        return (min(xs) - margin, max(xs) + margin, min(ys) - margin, max(ys) + margin)

    def _make_link(self, link_id: int, name: str, deliver, fifo: bool | None = None) -> Link:
        spec = self.cfg.links[link_id]
        link = Link(
            spec,
            self.scheduler,
            derive_rng(self.seed, "link", name),
            deliver,
            fifo=self.cfg.fifo_links if fifo is None else fifo,
            on_drop=lambda msg, lid=link_id: self.hub.emit_event("link_drop", {"link": lid}),
        )
        self._links.append(link)
        self._links_by_name[name] = link
        return link

    def link_named(self, name: str) -> Link:
        return self._links_by_name[name]

    def _build_rsu(self) -> None:
        cfg = self.cfg
        board = ControlBoard(self.channel_map, gate_travel=cfg.gate_travel)
        up_id, down_id = cfg.link_roles["rsu"]
        self.rsu = RsuProcess(
            board=board,
            query_period=cfg.rsu_query_period,
            roadside_sensing=cfg.roadside_sensing,
            rng=derive_rng(self.seed, "rsu-noise"),
        )
        self.rsu.roadside_sigma = cfg.sensor.pos_sigma
        self.rsu.uplink = self._make_link(up_id, "rsu-up", self.hub_inbox.append)
        rsu_down = self._make_link(down_id, "rsu-down", self.rsu.receive)
        self.hub.attach_rsu_outbound(rsu_down.send)

    def _build_vehicles(self) -> None:
        cfg = self.cfg
        cruise = cfg.cruise_speed
        arc = cfg.start_arc
        prev_eid: EntityId | None = None
        for pos, spec in enumerate(cfg.vehicles, start=1):
            if spec.role is not Role.HEAD:
                if spec.role is Role.HDV:
                    arc -= cfg.hdv.equilibrium_gap(cruise)
                else:
                    arc -= cfg.cacc.equilibrium_gap(cruise)
            x, y, heading = self.track.point_at(arc)

            scale = cfg.physical_scale if spec.realm is Realm.EMULATED_PHYSICAL else 1.0
            transform = FrameTransform(scale=scale)
            inv = 1.0 / scale
            native_track = self.track if scale == 1.0 else self.track.scaled(inv)
            veh = VehicleProcess(
                eid=spec.eid,
                realm=spec.realm,
                role=spec.role,
                state=BicycleState(x * inv, y * inv, heading, cruise * inv, cfg.wheelbase * inv),
                path=native_track,
                cacc=cfg.cacc if scale == 1.0 else cfg.cacc.scaled(inv),
                hdv_params=cfg.hdv if scale == 1.0 else cfg.hdv.scaled(inv),
                lateral=cfg.lateral if scale == 1.0 else cfg.lateral.scaled(inv),
                cruise_speed=cruise * inv,
                accel_limit=(spec.accel_limit or cfg.vehicle_accel_limit) * inv,
                sensor=cfg.sensor if spec.realm is Realm.EMULATED_PHYSICAL else None,
                rng=derive_rng(self.seed, "sensor", str(spec.eid)),
                predecessor_id=prev_eid,
            )
            prev_eid = spec.eid

            self.hub.register_entity(
                spec.eid,
                transform,
                cfg.bounds,
                initial_target_speed=cruise,
                head=spec.role is Role.HEAD,
            )

            if spec.realm is Realm.EXTERNAL_VIRTUAL:
                self._wire_external(veh, pos)
            else:
                self._wire_internal(veh, spec, pos)
            self.vehicles.append(veh)
            self._gap_hints[spec.eid] = None

    def _wire_internal(self, veh: VehicleProcess, spec: VehicleSpec, pos: int) -> None:
        role_key = "physical_vehicle" if spec.realm is Realm.EMULATED_PHYSICAL else "virtual"
        up_id, down_id = self.cfg.link_roles[role_key]
        veh.uplink = self._make_link(up_id, f"up-{pos}", self.hub_inbox.append)
        downlink = self._make_link(down_id, f"down-{pos}", veh.receive)
        self.hub.attach_outbound(veh.eid, downlink.send)
        pred_ids = [veh.predecessor_id] if veh.predecessor_id is not None else []
        self.hub.subscribe(
            downlink.send,
            kinds={EntityKind.PHYSICAL_VEHICLE, EntityKind.VIRTUAL_VEHICLE, EntityKind.OBSTACLE},
            transform=self.hub.transform_of(veh.eid),
            vehicle_ids=pred_ids,
            name=f"veh-{pos}",
        )
        if spec.realm is Realm.EMULATED_PHYSICAL:
            self.rsu.observed.append(veh)

    def _wire_external(self, veh: VehicleProcess, pos: int) -> None:
        # The external vehicle exchanges only wire-protocol text lines over
        # its (ordered, stream-like) link pair.
        up_id, down_id = self.cfg.link_roles["external"]
        uplink = self._make_link(
            up_id, f"ext-up-{pos}", lambda line: self.hub_inbox.append(("wire", line)), fifo=True
        )
        client = ExternalVehicleClient(
            veh.eid,
            veh,
            send_line=uplink.send,
            bounds={
                "speed_max": self.cfg.bounds.speed_max,
                "steer_max": self.cfg.bounds.steer_max,
                "steer_rate_max": self.cfg.bounds.steer_rate_max,
            },
        )
        downlink = self._make_link(
            down_id, f"ext-down-{pos}", lambda line: client.receive_bytes(line.encode()), fifo=True
        )
        self.hub.attach_outbound(veh.eid, lambda cmd: downlink.send(wire.encode_frame(cmd)))
        pred_ids = [veh.predecessor_id] if veh.predecessor_id is not None else []
        self.hub.subscribe(
            lambda snap: downlink.send(wire.encode_frame(snap.to_wire())),
            kinds={EntityKind.PHYSICAL_VEHICLE, EntityKind.VIRTUAL_VEHICLE, EntityKind.OBSTACLE},
            vehicle_ids=pred_ids,
            name=f"ext-{pos}",
        )
        self.external_clients.append(client)

    def _register_facilities(self) -> None:
        for entry in self.channel_map.entries.values():
            if not self.hub.is_registered(entry.facility):
                self.hub.register_entity(entry.facility, FrameTransform())

    def _initial_reports(self) -> None:
        # Prime the pipeline at t=0 so the very first snapshot is complete.
        for veh in self.vehicles:
            if veh.realm is Realm.EXTERNAL_VIRTUAL:
                continue
            veh.report_now(0.0)
        for client in self.external_clients:
            client.register()
            frame = {"type": "state_update", **wire.state_to_wire(client.vehicle.report_now(0.0))}
            client.send_line(wire.encode_frame(frame))

    # -- per-tick work -------------------------------------------------------

    def _process_hub_inbox(self) -> None:
        msgs, self.hub_inbox[:] = list(self.hub_inbox), []
        for msg in msgs:
            kind = msg[0]
            if kind == "state":
                _, eid, state = msg
                self.hub.ingest_state_update(eid, state, state.source)
            elif kind == "facility_frame":
                _, hex_payload, t = msg
                self.hub.ingest_facility_frame(hex_payload, t)
            elif kind == "wire":
                try:
                    frame = wire.decode_frame(msg[1].rstrip("\n"))
                except wire.WireError as exc:
                    self.hub.emit_event("protocol_error", {"reason": str(exc)})
                    continue
                try:
                    self.hub.ingest_wire_frame(frame)
                except Exception as exc:
                    self.hub.emit_event("protocol_error", {"reason": str(exc)})

    def _fire_perturbations(self, t: float) -> None:
        cfg = self.cfg
        head_eid = cfg.head().eid
        for idx, p in enumerate(cfg.perturbations):
            if idx in self._fired_perturbations or p.trigger_t is None or t < p.trigger_t:
                continue
            self._fired_perturbations.add(idx)
            target = head_eid if p.target == "head" else EntityId.parse(p.target)
            profile = p.build_profile(p.trigger_t, cfg.cruise_speed)
            self.hub.issue(
                Instruction(
                    target,
                    InstructionKind.SET_SPEED_PROFILE,
                    t,
                    Origin.SCENARIO,
                    profile=profile,
                )
            )
            duration = profile.duration if isinstance(profile, SuddenBrake) else cfg.duration_s - t
            self.record.events.append(
                {
                    "type": "event",
                    "t": t,
                    "event": "perturbation",
                    "data": {
                        "kind": p.kind,
                        "target": str(target),
                        "t0": p.trigger_t,
                        "duration": duration,
                    },
                }
            )

    def _record_tick(self, snapshot) -> None:
        cfg = self.cfg
        rec = self.record
        rec.times.append(snapshot.t)
        row_speeds: list[float] = []
        row_accels: list[float] = []
        arcs: list[float] = []
        for spec in rec.roster:
            state = snapshot.entity(spec.eid)
            if state is None:
                rec.partial = True
                row_speeds.append(math.nan)
                row_accels.append(math.nan)
                arcs.append(math.nan)
                continue
            row_speeds.append(state.speed)
            row_accels.append(state.accel)
            arc, _, hint = self.track.project(state.x, state.y, self._gap_hints[spec.eid])
            self._gap_hints[spec.eid] = hint
            arcs.append(arc)
        rec.speeds.append(row_speeds)
        rec.accels.append(row_accels)
        row_gaps: list[float] = []
        for i in range(1, len(rec.roster)):
            if math.isnan(arcs[i]) or math.isnan(arcs[i - 1]):
                row_gaps.append(math.nan)
            else:
                row_gaps.append(self.track.arc_delta(arcs[i], arcs[i - 1]))
        rec.gaps.append(row_gaps)
        self._check_corner_cases(snapshot.t, row_gaps)

    def _check_corner_cases(self, t: float, row_gaps: list[float]) -> None:
        cfg = self.cfg
        for i, gap in enumerate(row_gaps):
            if math.isnan(gap):
                continue
            follower = self.record.roster[i + 1].eid
            leader = self.record.roster[i].eid
            # Events land in the hub's audit log (broadcast to consoles) and
            # are copied into the record when the run finalizes.
            if gap < cfg.collision_gap and follower not in self._collided:
                self._collided.add(follower)
                self.hub.emit_event(
                    "collision", {"follower": str(follower), "leader": str(leader), "gap": gap}
                )
                # Freeze the colliding pair; the record keeps going.
                for veh in self.vehicles:
                    if veh.eid in (follower, leader):
                        veh.freeze()
            elif gap < cfg.warn_gap and follower not in self._warned:
                self._warned.add(follower)
                self.hub.emit_event(
                    "gap_warn", {"follower": str(follower), "leader": str(leader), "gap": gap}
                )
            elif gap >= cfg.warn_gap and follower in self._warned:
                self._warned.discard(follower)  # re-arm for the next episode

    def attach_external_vehicle(
        self, spec: VehicleSpec, arc: float, predecessor: EntityId | None = None
    ) -> ExternalVehicleClient:
        """Join an additional vehicle through the public wire protocol while
        the experiment runs; it appears in snapshots but not in the metrics
        roster, which stays as configured."""
        cfg = self.cfg
        x, y, heading = self.track.point_at(arc)
        veh = VehicleProcess(
            eid=spec.eid,
            realm=Realm.EXTERNAL_VIRTUAL,
            role=spec.role,
            state=BicycleState(x, y, heading, cfg.cruise_speed, cfg.wheelbase),
            path=self.track,
            cacc=cfg.cacc,
            hdv_params=cfg.hdv,
            lateral=cfg.lateral,
            cruise_speed=cfg.cruise_speed,
            accel_limit=spec.accel_limit or cfg.vehicle_accel_limit,
            predecessor_id=predecessor,
        )
        self._wire_external(veh, pos=100 + len(self.external_clients))
        self.vehicles.append(veh)
        client = self.external_clients[-1]
        client.register()
        frame = {"type": "state_update", **wire.state_to_wire(veh.report_now(self.clock.now))}
        client.send_line(wire.encode_frame(frame))
        return client

    def run(self) -> MetricsRecord:
        cfg = self.cfg
        n_ticks = int(round(cfg.duration_s / cfg.tick_s))
        for k in range(1, n_ticks + 1):
            self.step(k * cfg.tick_s)
        self._finalize()
        return self.record

    def step(self, t: float) -> None:
        """One tick: deliver link traffic, aggregate, inject, advance entities."""
        cfg = self.cfg
        self.scheduler.advance_to(t)
        self._process_hub_inbox()
        self._fire_perturbations(t)
        for intent in self.live_intents:
            self.hub.handle_intent(intent)
        self.live_intents.clear()
        snapshot = self.hub.aggregate_tick(t)
        for veh in self.vehicles:
            if veh.realm is Realm.EXTERNAL_VIRTUAL:
                continue
            veh.tick(t, cfg.tick_s)
        for client in self.external_clients:
            client.tick(t, cfg.tick_s)
        self.rsu.tick(t, cfg.tick_s)
        self._record_tick(snapshot)

    def _finalize(self) -> None:
        rec = self.record
        rec.events.extend(self.hub.events)
        for veh in self.vehicles:
            rec.events.extend(
                {"type": "event", "t": e.get("t", 0.0), "event": e["event"], "data": e}
                for e in veh.events
            )
        rec.events.sort(key=lambda e: (e.get("t", 0.0), e.get("event", "")))
        stats: dict[int, dict] = {}
        for link in self._links:
            lid = link.spec.link_id
            agg = stats.setdefault(lid, {"samples": [], "drops": 0})
            agg["samples"].extend(link.stats.samples)
            agg["drops"] += link.stats.drops
        for lid, agg in sorted(stats.items()):
            n = len(agg["samples"])
            if n >= 2:
                from .netsim import LinkStats

                summary = LinkStats(samples=agg["samples"], drops=agg["drops"]).summary()
            else:
                summary = {"mean_ms": math.nan, "std_ms": math.nan, "p99_ms": math.nan,
                           "count": n, "drops": agg["drops"]}
            rec.link_stats[lid] = summary


def run_scenario(cfg: ScenarioConfig, seed: int | None = None) -> MetricsRecord:
    """Build and run one deterministic experiment; see ScenarioEngine."""
    return ScenarioEngine(cfg, seed=seed).run()
