"""Emulation of the scaled physical testbed's imperfections and of the
roadside facility control board: sensing noise/quantization, actuation lag,
and the serial status-frame protocol with its channel mapping table.

Frame layout: header 0x55, 11 payload bytes carrying one status bit per
channel (channels 0-87, LSB-first within each byte), one XOR checksum byte
over the payload. 13 bytes total.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

from .space import EntityId, EntityKind, FACILITY_KINDS, FacilityState, FacilityStatus, status_domain

FRAME_HEADER = 0x55
PAYLOAD_BYTES = 11
FRAME_LENGTH = PAYLOAD_BYTES + 2
N_CHANNELS = PAYLOAD_BYTES * 8

# Channel-39 barrier gate command pair on the reference control board.
GATE_LEFT_CHANNEL = 39
GATE_LEFT_OPEN = 0x26
GATE_LEFT_CLOSE = 0x8A

DEFAULT_GATE_TRAVEL_S = 1.0


class FacilityError(Exception):
    pass


class FrameError(FacilityError):
    """A status frame failed header, length, or checksum validation."""


@dataclass(frozen=True)
class SensorModel:
    """Measurement imperfections of the scaled vehicle sensing chain.

    Position/heading noise models the motion-capture accuracy; the speed
    quantum models the Hall-sensor resolution. All quantities are in the
    vehicle's native (scaled) units.
    """

    pos_sigma: float = 1.0e-4
    heading_sigma: float = math.radians(0.1)
    speed_quantum: float = 0.005
    report_period: float = 0.02
    actuation_lag: float = 0.04

    def __post_init__(self):
        if min(self.pos_sigma, self.heading_sigma, self.speed_quantum, self.actuation_lag) < 0:
            raise ValueError("sensor model fields must be >= 0")
        if self.report_period <= 0:
            raise ValueError("report_period must be > 0")

    def scaled(self, factor: float) -> "SensorModel":
        return replace(
            self,
            pos_sigma=self.pos_sigma * factor,
            speed_quantum=self.speed_quantum * factor,
        )


def emulate_sensor_reading(x, y, heading, speed, t, m: SensorModel, rng: random.Random):
    """Noisy sensor report of a true pose: (x, y, heading, speed, t_report)."""
    nx = x + (rng.gauss(0.0, m.pos_sigma) if m.pos_sigma else 0.0)
    ny = y + (rng.gauss(0.0, m.pos_sigma) if m.pos_sigma else 0.0)
    nh = heading + (rng.gauss(0.0, m.heading_sigma) if m.heading_sigma else 0.0)
    if m.speed_quantum:
        speed = round(speed / m.speed_quantum) * m.speed_quantum
    t_report = round(t / m.report_period) * m.report_period
    return nx, ny, nh, max(0.0, speed), t_report


class LagLine:
    """Delays items by a fixed lag while preserving order and spacing."""

    def __init__(self, lag: float):
        if lag < 0:
            raise ValueError("lag must be >= 0")
        self.lag = lag
        self._queue: list[tuple[float, object]] = []

    def push(self, t: float, item) -> None:
        self._queue.append((t + self.lag, item))

    def pop_due(self, now: float) -> list:
        due = [item for eff, item in self._queue if eff <= now + 1e-12]
        self._queue = [(eff, item) for eff, item in self._queue if eff > now + 1e-12]
        return due


@dataclass(frozen=True)
class ChannelEntry:
    facility: EntityId
    on_byte: int
    off_byte: int


class ChannelMap:
    """channel -> (facility, on/open byte, off/close byte), bytes unique."""

    def __init__(self, entries: Mapping[int, ChannelEntry]):
        seen_bytes: dict[int, int] = {}
        for ch, e in entries.items():
            if not 0 <= ch < N_CHANNELS:
                raise FacilityError(f"channel {ch} outside 0..{N_CHANNELS - 1}")
            if e.facility.kind not in FACILITY_KINDS:
                raise FacilityError(f"{e.facility} is not a facility")
            for b in (e.on_byte, e.off_byte):
                if not 0 <= b <= 0xFF:
                    raise FacilityError(f"command byte {b:#x} out of range")
                if b in seen_bytes:
                    raise FacilityError(
                        f"command byte {b:#04x} reused by channels {seen_bytes[b]} and {ch}"
                    )
                seen_bytes[b] = ch
            if e.on_byte == e.off_byte:
                raise FacilityError(f"channel {ch} has identical on/off bytes")
        self.entries = dict(sorted(entries.items()))
        self._by_byte = {}
        for ch, e in self.entries.items():
            self._by_byte[e.on_byte] = (ch, True)
            self._by_byte[e.off_byte] = (ch, False)

    def lookup_command(self, byte: int) -> tuple[int, bool] | None:
        """(channel, activate?) for a command byte, None when unmapped."""
        return self._by_byte.get(byte)

    def channel_of(self, facility: EntityId) -> int:
        for ch, e in self.entries.items():
            if e.facility == facility:
                return ch
        raise FacilityError(f"{facility} not in channel map")

    def facility_of(self, channel: int) -> EntityId:
        return self.entries[channel].facility

    def counts(self) -> dict[EntityKind, int]:
        out: dict[EntityKind, int] = {}
        for e in self.entries.values():
            out[e.facility.kind] = out.get(e.facility.kind, 0) + 1
        return out


def default_channel_map() -> ChannelMap:
    """Reference layout: 73 streetlights, 11 traffic signals, 3 barrier gates.

    Gates sit on channels 39-41 (left/middle/right); channel 39 keeps the
    board's documented 0x26/0x8A pair, all other command bytes are assigned
    contiguously skipping those two values.
    """
    gates = {39: 0, 40: 1, 41: 2}
    entries: dict[int, ChannelEntry] = {}
    next_byte = 0
    reserved = {GATE_LEFT_OPEN, GATE_LEFT_CLOSE}

    def take_byte() -> int:
        nonlocal next_byte
        while next_byte in reserved:
            next_byte += 1
        b = next_byte
        next_byte += 1
        return b

    light_i = 0
    signal_i = 0
    for ch in range(87):
        if ch in gates:
            fid = EntityId(EntityKind.BARRIER_GATE, gates[ch])
            if ch == GATE_LEFT_CHANNEL:
                entries[ch] = ChannelEntry(fid, GATE_LEFT_OPEN, GATE_LEFT_CLOSE)
            else:
                entries[ch] = ChannelEntry(fid, take_byte(), take_byte())
        elif ch >= 76:
            entries[ch] = ChannelEntry(EntityId(EntityKind.TRAFFIC_SIGNAL, signal_i), take_byte(), take_byte())
            signal_i += 1
        else:
            entries[ch] = ChannelEntry(EntityId(EntityKind.STREETLIGHT, light_i), take_byte(), take_byte())
            light_i += 1
    return ChannelMap(entries)


def encode_status_frame(channel_bits: Iterable[bool]) -> bytes:
    """Serialize 88 channel bits into a 13-byte status frame."""
    bits = list(channel_bits)
    if len(bits) != N_CHANNELS:
        raise FacilityError(f"need exactly {N_CHANNELS} channel bits, got {len(bits)}")
    payload = bytearray(PAYLOAD_BYTES)
    for ch, on in enumerate(bits):
        if on:
            payload[ch // 8] |= 1 << (ch % 8)
    checksum = 0
    for b in payload:
        checksum ^= b
    return bytes([FRAME_HEADER]) + bytes(payload) + bytes([checksum])


def parse_status_frame(frame: bytes) -> dict[int, bool]:
    """Validate and decode a status frame into {channel: active}."""
    if len(frame) != FRAME_LENGTH:
        raise FrameError(f"frame length {len(frame)}, expected {FRAME_LENGTH}")
    if frame[0] != FRAME_HEADER:
        raise FrameError(f"bad header {frame[0]:#04x}")
    payload = frame[1:-1]
    checksum = 0
    for b in payload:
        checksum ^= b
    if checksum != frame[-1]:
        raise FrameError(f"checksum mismatch: computed {checksum:#04x}, frame {frame[-1]:#04x}")
    return {ch: bool(payload[ch // 8] >> (ch % 8) & 1) for ch in range(N_CHANNELS)}


def frame_to_facility_states(frame: bytes, cmap: ChannelMap, t: float) -> list[FacilityState]:
    """Decode a frame and resolve each mapped channel to a facility state."""
    bits = parse_status_frame(frame)
    states = []
    for ch, entry in cmap.entries.items():
        inactive, active = status_domain(entry.facility.kind)
        states.append(FacilityState(entry.facility, ch, active if bits[ch] else inactive, t))
    return states


class ControlBoard:
    """Single-owner state machine for the emulated facility control board.

    Commands flip channel status bits, gates only after their travel time;
    queries snapshot all channels into a status frame. A fault-injection
    flag corrupts outgoing checksums for parser tests.
    """

    def __init__(
        self,
        cmap: ChannelMap,
        gate_travel: float = DEFAULT_GATE_TRAVEL_S,
        corrupt_checksum: bool = False,
    ):
        self.cmap = cmap
        self.gate_travel = gate_travel
        self.corrupt_checksum = corrupt_checksum
        self._bits = [False] * N_CHANNELS
        self._pending: list[tuple[float, int, bool]] = []  # (effective t, channel, value)

    def _settle(self, now: float) -> None:
        still = []
        for eff, ch, value in self._pending:
            if eff <= now + 1e-12:
                self._bits[ch] = value
            else:
                still.append((eff, ch, value))
        self._pending = still

    def command(self, byte: int, now: float) -> bool:
        """Apply a command byte; returns ack (True) or nack (False)."""
        self._settle(now)
        hit = self.cmap.lookup_command(byte)
        if hit is None:
            return False
        ch, activate = hit
        if self._bits[ch] == activate and not any(p[1] == ch for p in self._pending):
            return True  # repeat of current state: ack, no change
        if self.cmap.entries[ch].facility.kind is EntityKind.BARRIER_GATE:
            self._pending = [p for p in self._pending if p[1] != ch]
            self._pending.append((now + self.gate_travel, ch, activate))
        else:
            self._bits[ch] = activate
        return True

    def query(self, now: float) -> bytes:
        self._settle(now)
        frame = encode_status_frame(self._bits)
        if self.corrupt_checksum:
            frame = frame[:-1] + bytes([frame[-1] ^ 0xFF])
        return frame

    def channel_state(self, ch: int, now: float) -> bool:
        self._settle(now)
        return self._bits[ch]

    def facility_states(self, now: float) -> list[FacilityState]:
        self._settle(now)
        return frame_to_facility_states(encode_status_frame(self._bits), self.cmap, now)
