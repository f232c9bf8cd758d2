"""Post-run analysis of metrics records: corner-case extraction, string-
stability reporting, reaction-delay identification for the human-driver
surrogate, head-vehicle profile fidelity, and deterministic file export.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import HdvController, HdvParams, SpeedProfile, SuddenBrake, evaluate_profile
from .entities import Role
from .scenario import MetricsRecord, PerturbationSpec, ScenarioConfig

STABILITY_SETTLE_S = 10.0
AMPLIFYING_TOLERANCE = 0.02


class AnalysisError(Exception):
    pass


def detect_corner_cases(
    r: MetricsRecord, warn_gap: float = 5.0, collision_gap: float = 3.0
) -> list[dict]:
    """Re-derive warn/collision events from the recorded gap traces.

    A warn fires on each downward crossing of ``warn_gap``; a collision fires
    once per follower on its first crossing of ``collision_gap``. Events
    carry (t, follower id, gap).
    """
    if not warn_gap > collision_gap > 0:
        raise AnalysisError("need warn_gap > collision_gap > 0")
    events: list[dict] = []
    collided: set[int] = set()
    warned: set[int] = set()
    for k, t in enumerate(r.times):
        for f in range(1, r.n_vehicles):
            gap = r.gaps[k][f - 1]
            if math.isnan(gap):
                continue
            follower = str(r.roster[f].eid)
            leader = str(r.roster[f - 1].eid)
            if gap < collision_gap and f not in collided:
                collided.add(f)
                events.append(
                    {
                        "type": "event",
                        "t": t,
                        "event": "collision",
                        "data": {"follower": follower, "leader": leader, "gap": gap},
                    }
                )
            elif gap < warn_gap and f not in warned:
                warned.add(f)
                events.append(
                    {
                        "type": "event",
                        "t": t,
                        "event": "gap_warn",
                        "data": {"follower": follower, "leader": leader, "gap": gap},
                    }
                )
            elif gap >= warn_gap:
                warned.discard(f)
    return events


@dataclass
class StabilityEntry:
    vehicle: str
    role: str
    peak_to_peak: float
    ratio: float | None  # vs immediate predecessor; None for the head
    min_gap: float | None
    amplifying: bool


@dataclass
class StabilityReport:
    window: tuple[float, float]
    entries: list[StabilityEntry] = field(default_factory=list)

    def entry(self, vehicle: str) -> StabilityEntry:
        for e in self.entries:
            if e.vehicle == vehicle:
                return e
        raise KeyError(vehicle)

    def to_dict(self) -> dict:
        return {
            "window": list(self.window),
            "entries": [e.__dict__ | {} for e in self.entries],
        }


def string_stability_report(
    r: MetricsRecord, window: tuple[float, float] | None = None
) -> StabilityReport:
    """Per-follower speed deviation and amplification over one perturbation.

    Without an explicit window the first recorded perturbation event defines
    it (activation to completion plus a settling margin).
    """
    if window is None:
        perts = r.perturbation_events()
        if not perts:
            raise AnalysisError("record contains no perturbation window")
        first = perts[0]
        t0 = first["data"]["t0"]
        window = (t0, t0 + first["data"]["duration"] + STABILITY_SETTLE_S)
    lo = np.searchsorted(np.asarray(r.times), window[0])
    hi = np.searchsorted(np.asarray(r.times), window[1])
    if hi - lo < 2:
        raise AnalysisError(f"window {window} spans too few ticks")

    speeds = np.asarray(r.speeds)[lo:hi]  # [tick][vehicle]
    gaps = np.asarray(r.gaps)[lo:hi] if r.gaps else None
    report = StabilityReport(window=window)
    prev_ptp: float | None = None
    for i, spec in enumerate(r.roster):
        tr = speeds[:, i]
        tr = tr[~np.isnan(tr)]
        ptp = float(tr.max() - tr.min()) if len(tr) else math.nan
        ratio = None if i == 0 else (ptp / prev_ptp if prev_ptp else math.inf)
        min_gap = None
        if i > 0 and gaps is not None:
            g = gaps[:, i - 1]
            g = g[~np.isnan(g)]
            if len(g):
                min_gap = float(g.min())
        report.entries.append(
            StabilityEntry(
                vehicle=str(spec.eid),
                role=spec.role.value,
                peak_to_peak=ptp,
                ratio=ratio,
                min_gap=min_gap,
                amplifying=(
                    spec.role is Role.CACC
                    and ratio is not None
                    and ratio > 1.0 + AMPLIFYING_TOLERANCE
                ),
            )
        )
        prev_ptp = ptp
    return report


def head_profile_error(r: MetricsRecord, cfg: ScenarioConfig) -> float:
    """Max |recorded head speed - scripted profile| over the whole run."""
    head_idx = 0
    profiles: list[SpeedProfile] = [
        p.build_profile(p.trigger_t, cfg.cruise_speed)
        for p in cfg.perturbations
        if p.trigger_t is not None
    ]

    def target(t: float) -> float:
        # Profiles in the shipped configs share the cruise base, so any
        # profile currently away from its base defines the commanded speed.
        for prof in profiles:
            v = prof.value(t)
            if v != prof.base:
                return v
        return cfg.cruise_speed

    worst = 0.0
    for k, t in enumerate(r.times):
        v = r.speeds[k][head_idx]
        if math.isnan(v):
            continue
        worst = max(worst, abs(v - target(t)))
    return worst


def measure_hdv_response_lag(
    params: HdvParams | None = None,
    dt: float = 0.02,
    cruise: float = 2.8,
    step: float = -0.5,
    t_step: float = 4.0,
    duration: float = 14.0,
) -> float:
    """Identify the surrogate's reaction delay with a constant-gap step probe.

    The predecessor speed steps at ``t_step`` while the fed gap is held at
    its equilibrium value; the surrogate's speed is integrated from the
    commanded acceleration. The lag maximizing the cross-correlation of the
    first-differenced speed traces equals the configured reaction delay.
    """
    p = params or HdvParams()
    ctl = HdvController(p)
    gap = p.equilibrium_gap(cruise)
    own = cruise
    t = 0.0
    leader: list[float] = []
    follower: list[float] = []
    for _ in range(int(round(duration / dt))):
        t += dt
        pred = cruise if t < t_step else cruise + step
        a = ctl.step(gap, own, pred, t, dt)
        own = max(0.0, own + a * dt)
        leader.append(pred)
        follower.append(own)
    return cross_correlation_lag(leader, follower, dt)


def cross_correlation_lag(leader: list[float], follower: list[float], dt: float) -> float:
    """Nonnegative lag (s) maximizing correlation of the speed increments."""
    dl = np.diff(np.asarray(leader, dtype=float))
    df = np.diff(np.asarray(follower, dtype=float))
    if len(dl) != len(df) or len(dl) < 2:
        raise AnalysisError("need two equal-length traces")
    corr = np.correlate(df, dl, mode="full")
    lags = np.arange(-len(dl) + 1, len(dl))
    mask = lags >= 0
    return float(lags[mask][np.argmax(corr[mask])] * dt)


# ----- export ----------------------------------------------------------------


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(x, ".9g")


def export_results(
    r: MetricsRecord,
    out_dir: str | Path,
    report_extra: dict | None = None,
) -> dict[str, Path]:
    """Write timeseries.csv, events.ndjson, and report.json.

    Byte-deterministic for deterministic records: fixed column order, fixed
    number formatting, canonical JSON.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = r.n_vehicles

    ts_path = out / "timeseries.csv"
    header = ["t"] + [f"v_{i}" for i in range(1, n + 1)] + [f"gap_{i}" for i in range(2, n + 1)]
    lines = [",".join(header)]
    for k, t in enumerate(r.times):
        row = [_fmt(t)] + [_fmt(v) for v in r.speeds[k]] + [_fmt(g) for g in r.gaps[k]]
        lines.append(",".join(row))
    ts_path.write_text("\n".join(lines) + ("\n" if lines else ""))

    ev_path = out / "events.ndjson"
    ev_path.write_text(
        "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in r.events)
    )

    rep_path = out / "report.json"
    counts: dict[str, int] = {}
    for e in r.events:
        counts[e["event"]] = counts.get(e["event"], 0) + 1
    report = {
        "vehicles": [str(v.eid) for v in r.roster],
        "ticks": len(r.times),
        "tick_s": r.tick_s,
        "partial": r.partial,
        "aborted": r.aborted,
        "event_counts": dict(sorted(counts.items())),
        "link_stats": {str(k): v for k, v in sorted(r.link_stats.items())},
    }
    if report_extra:
        report.update(report_extra)
    rep_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return {"timeseries": ts_path, "events": ev_path, "report": rep_path}
