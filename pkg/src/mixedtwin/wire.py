"""Newline-delimited JSON wire protocol for the hub's public endpoint.

One UTF-8 text frame per line, each a JSON object with a ``type`` field:
``state_update``, ``snapshot``, ``intent``, ``instruction_ack``, ``event``,
``register``, ``resync``, ``facility_frame``, or ``command`` (the native
command form sent to entities). Numeric fields are SI units; timestamps are
seconds as decimals. Serialization is canonical (sorted keys, no spaces) so
identical payloads yield identical bytes.
"""

from __future__ import annotations

import json
from typing import Any

from .dynamics import HandDrawn, Sinusoid, SpeedProfile, SuddenBrake
from .space import EntityId, FacilityState, FacilityStatus, MixedEntityState, Source

FRAME_TYPES = frozenset(
    {
        "state_update",
        "snapshot",
        "intent",
        "instruction_ack",
        "event",
        "register",
        "resync",
        "facility_frame",
        "command",
    }
)

_REQUIRED_FIELDS = {
    "state_update": ("id", "source", "t", "x", "y", "heading", "speed"),
    "snapshot": ("t", "seq", "entities", "facilities"),
    "intent": ("device", "action", "intent_seq"),
    "instruction_ack": ("intent_seq", "status"),
    "event": ("t", "event"),
    "register": ("id", "scale", "bounds"),
    "resync": ("seq",),
    "facility_frame": ("t", "hex"),
    "command": ("target", "kind", "t"),
}


class WireError(Exception):
    """A frame failed protocol validation."""


def encode_frame(frame: dict[str, Any]) -> str:
    """Canonical single-line serialization, newline terminated."""
    ftype = frame.get("type")
    if ftype not in FRAME_TYPES:
        raise WireError(f"unknown frame type {ftype!r}")
    return json.dumps(frame, sort_keys=True, separators=(",", ":")) + "\n"


def decode_frame(line: str) -> dict[str, Any]:
    """Parse and validate one frame line."""
    try:
        frame = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"not valid JSON: {exc}") from exc
    if not isinstance(frame, dict):
        raise WireError("frame must be a JSON object")
    ftype = frame.get("type")
    if ftype not in FRAME_TYPES:
        raise WireError(f"unknown frame type {ftype!r}")
    missing = [k for k in _REQUIRED_FIELDS[ftype] if k not in frame]
    if missing:
        raise WireError(f"{ftype} frame missing fields {missing}")
    return frame


def state_to_wire(s: MixedEntityState) -> dict[str, Any]:
    return {
        "id": str(s.id),
        "source": s.source.value,
        "t": s.t,
        "x": s.x,
        "y": s.y,
        "heading": s.heading,
        "speed": s.speed,
        "yaw_rate": s.yaw_rate,
        "accel": s.accel,
    }


def state_from_wire(d: dict[str, Any]) -> MixedEntityState:
    try:
        return MixedEntityState(
            id=EntityId.parse(d["id"]),
            t=float(d["t"]),
            x=float(d["x"]),
            y=float(d["y"]),
            heading=float(d["heading"]),
            speed=float(d["speed"]),
            yaw_rate=float(d.get("yaw_rate", 0.0)),
            accel=float(d.get("accel", 0.0)),
            source=Source(d.get("source", "native")),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise WireError(f"malformed state: {exc}") from exc


def facility_to_wire(f: FacilityState) -> dict[str, Any]:
    return {"id": str(f.id), "channel": f.channel, "status": f.status.value, "t": f.t}


def facility_from_wire(d: dict[str, Any]) -> FacilityState:
    try:
        return FacilityState(
            id=EntityId.parse(d["id"]),
            channel=int(d["channel"]),
            status=FacilityStatus(d["status"]),
            t=float(d["t"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise WireError(f"malformed facility state: {exc}") from exc


def profile_to_wire(p: SpeedProfile) -> dict[str, Any]:
    if isinstance(p, SuddenBrake):
        return {
            "kind": "sudden_brake",
            "t0": p.t0,
            "base": p.base,
            "decel": p.decel,
            "floor": p.floor,
            "hold": p.hold,
            "recover": p.recover,
        }
    if isinstance(p, Sinusoid):
        return {
            "kind": "sinusoid",
            "t0": p.t0,
            "base": p.base,
            "amplitude": p.amplitude,
            "frequency": p.frequency,
        }
    if isinstance(p, HandDrawn):
        return {
            "kind": "hand_drawn",
            "t0": p.t0,
            "base": p.base,
            "samples": [[u, v] for u, v in p.samples],
        }
    raise WireError(f"unknown profile {p!r}")


def profile_from_wire(d: dict[str, Any]) -> SpeedProfile:
    try:
        kind = d["kind"]
        if kind == "sudden_brake":
            return SuddenBrake(
                t0=float(d["t0"]),
                base=float(d["base"]),
                decel=float(d["decel"]),
                floor=float(d["floor"]),
                hold=float(d["hold"]),
                recover=float(d["recover"]),
            )
        if kind == "sinusoid":
            return Sinusoid(
                t0=float(d["t0"]),
                base=float(d["base"]),
                amplitude=float(d["amplitude"]),
                frequency=float(d["frequency"]),
            )
        if kind == "hand_drawn":
            return HandDrawn(
                t0=float(d["t0"]),
                base=float(d["base"]),
                samples=tuple((float(u), float(v)) for u, v in d["samples"]),
            )
    except (KeyError, ValueError, TypeError) as exc:
        raise WireError(f"malformed profile: {exc}") from exc
    raise WireError(f"unknown profile kind {d.get('kind')!r}")


class LineAssembler:
    """Splits a byte stream into decoded frames, tolerating partial reads."""

    def __init__(self):
        self._buf = b""

    def feed(self, data: bytes) -> list[dict[str, Any]]:
        self._buf += data
        frames = []
        while b"\n" in self._buf:
            line, self._buf = self._buf.split(b"\n", 1)
            if line.strip():
                frames.append(decode_frame(line.decode("utf-8")))
        return frames
