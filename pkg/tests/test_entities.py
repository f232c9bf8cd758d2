import math

import pytest

from mixedtwin.entities import Realm, Role
from mixedtwin.scenario import (
    PerturbationSpec,
    ScenarioEngine,
    VehicleSpec,
    default_config,
    run_scenario,
)
from mixedtwin.space import EntityId, EntityKind

PV = lambda i: EntityId(EntityKind.PHYSICAL_VEHICLE, i)
VV = lambda i: EntityId(EntityKind.VIRTUAL_VEHICLE, i)
TICK = 0.02


def two_vehicle_cfg(**overrides):
    overrides.setdefault(
        "vehicles",
        [
            VehicleSpec(VV(1), Realm.VIRTUAL, Role.HEAD),
            VehicleSpec(VV(2), Realm.VIRTUAL, Role.CACC),
        ],
    )
    overrides.setdefault("perturbations", [])
    overrides.setdefault("duration_s", 10.0)
    return default_config(**overrides)


class TestEquilibrium:
    def test_cacc_follower_holds_gap_behind_steady_leader(self):
        cfg = two_vehicle_cfg()
        rec = run_scenario(cfg, seed=3)
        gaps = [row[0] for row in rec.gaps[100:]]
        eq = cfg.cacc.equilibrium_gap(cfg.cruise_speed)
        assert max(abs(g - eq) for g in gaps) < 0.05
        speeds = [row[1] for row in rec.speeds[100:]]
        assert max(abs(v - cfg.cruise_speed) for v in speeds) < 0.02


class TestEmulatedPhysicalLoop:
    def test_converges_within_one_speed_quantum(self):
        cfg = default_config(
            duration_s=8.0,
            cruise_speed=1.4,
            vehicles=[VehicleSpec(PV(1), Realm.EMULATED_PHYSICAL, Role.HEAD)],
            perturbations=[],
        )
        from mixedtwin.hub import Instruction, InstructionKind, Origin

        eng = ScenarioEngine(cfg, seed=7)
        n = int(round(cfg.duration_s / cfg.tick_s))
        for k in range(1, n + 1):
            t = k * cfg.tick_s
            if k == 50:
                eng.hub.issue(
                    Instruction(PV(1), InstructionKind.SET_TARGET_SPEED, t, Origin.OPERATOR, value=2.8)
                )
            eng.step(t)
        eng._finalize()
        veh = eng.vehicles[0]
        # Native command log only ever carries native-scale values.
        cmds = [c for c in veh.command_log if c["kind"] == "set_target_speed"]
        assert len(cmds) == 1
        assert abs(cmds[0]["value"] - 0.2) <= 1e-12
        # Reported mixed speed converges to the command within one quantum x scale.
        tail = [row[0] for row in eng.record.speeds[-50:]]
        assert all(abs(v - 2.8) <= 0.005 * 14.0 for v in tail)

    def test_realm_isolation_no_mixed_scale_values(self):
        cfg = default_config(duration_s=5.0)
        eng = ScenarioEngine(cfg, seed=7)
        eng.run()
        for veh in eng.vehicles:
            if veh.realm is not Realm.EMULATED_PHYSICAL:
                continue
            for cmd in veh.command_log:
                if cmd["kind"] == "set_target_speed":
                    assert cmd["value"] <= 8.0 / 14.0 + 1e-9
                elif cmd["kind"] == "set_speed_profile":
                    assert cmd["profile"]["base"] <= 8.0 / 14.0 + 1e-9


class TestExternalVehicle:
    def test_joins_mid_run_and_appears_in_snapshots(self):
        cfg = two_vehicle_cfg(duration_s=4.0)
        eng = ScenarioEngine(cfg, seed=5)
        joined = EntityId(EntityKind.VIRTUAL_VEHICLE, 9)
        n = int(round(cfg.duration_s / cfg.tick_s))
        join_tick = 60
        seen_tick = None
        for k in range(1, n + 1):
            t = k * cfg.tick_s
            if k == join_tick:
                eng.attach_external_vehicle(
                    VehicleSpec(joined, Realm.EXTERNAL_VIRTUAL, Role.CACC),
                    arc=cfg.start_arc - 25.0,
                    predecessor=VV(2),
                )
            eng.step(t)
            if seen_tick is None and eng.hub.last_snapshot.entity(joined) is not None:
                seen_tick = k
        assert seen_tick is not None
        assert seen_tick - join_tick <= 2
        # The configured roster is unaffected by the visitor.
        assert not eng.record.partial
        assert len(eng.record.speeds[0]) == 2

    def test_external_client_lives_on_wire_frames_only(self):
        cfg = default_config(duration_s=3.0)
        eng = ScenarioEngine(cfg, seed=7)
        eng.run()
        (client,) = eng.external_clients
        assert client.registered
        assert client.protocol_errors == 0
        # The external vehicle keeps following through pure protocol traffic.
        tail_speeds = [row[7] for row in eng.record.speeds[-20:]]
        assert all(abs(v - cfg.cruise_speed) < 0.1 for v in tail_speeds)


class TestFailSafe:
    def test_severed_snapshot_stream_holds_speed_and_flags(self):
        cfg = two_vehicle_cfg(duration_s=12.0)
        eng = ScenarioEngine(cfg, seed=3)
        n = int(round(cfg.duration_s / cfg.tick_s))
        sever_tick = 250
        speeds_after = []
        for k in range(1, n + 1):
            if k == sever_tick:
                eng.link_named("down-2").down = True
            eng.step(k * cfg.tick_s)
            if k > sever_tick + 60:
                speeds_after.append(eng.vehicles[1].state.speed)
        follower = eng.vehicles[1]
        assert any(e["event"] == "command_loss_hold" for e in follower.events)
        # Held speed: no spontaneous acceleration after the cutoff.
        assert max(speeds_after) - min(speeds_after) < 1e-9
        assert abs(speeds_after[0] - cfg.cruise_speed) < 0.05


class TestObstacle:
    def test_spawned_obstacle_brakes_approaching_vehicle(self):
        cfg = default_config(
            duration_s=12.0,
            vehicles=[VehicleSpec(VV(1), Realm.VIRTUAL, Role.HEAD)],
            perturbations=[],
        )
        from mixedtwin.hub import IntentMessage

        eng = ScenarioEngine(cfg, seed=7)
        n = int(round(cfg.duration_s / cfg.tick_s))
        for k in range(1, n + 1):
            t = k * cfg.tick_s
            if k == 100:
                # Drop an obstacle 25 m ahead of the head vehicle on the track.
                arc, _, _ = eng.track.project(eng.vehicles[0].state.x, eng.vehicles[0].state.y)
                ox, oy, _ = eng.track.point_at(arc + 25.0)
                eng.live_intents.append(
                    IntentMessage(device="test", action="spawn_obstacle", intent_seq=1,
                                  focus_point=(ox, oy))
                )
            eng.step(t)
        eng._finalize()
        assert any(e["event"] == "obstacle_spawned" for e in eng.record.events)
        assert eng.vehicles[0].state.speed < 0.5
