import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedtwin.space import (
    CompensationError,
    EntityId,
    EntityKind,
    FacilityState,
    FacilityStatus,
    FrameConversionError,
    FrameTransform,
    FusionError,
    FusionPolicy,
    MixedEntityState,
    Source,
    extrapolate_state,
    from_mixed_frame,
    fuse_observations,
    normalize_angle,
    to_mixed_frame,
)

VEH = EntityId(EntityKind.PHYSICAL_VEHICLE, 1)


def mk_state(**kw):
    base = dict(id=VEH, t=0.0, x=0.0, y=0.0, heading=0.0, speed=0.0, source=Source.ONBOARD)
    base.update(kw)
    return MixedEntityState(**base)


def integrate_arc_oracle(x, y, heading, speed, yaw_rate, dt, steps=4000):
    """Independent oracle: RK4 integration of the constant-speed, constant
    yaw-rate kinematics, never using the closed-form arc solution."""
    h = dt / steps
    th = heading

    def deriv(th):
        return speed * math.cos(th), speed * math.sin(th), yaw_rate

    for _ in range(steps):
        k1 = deriv(th)
        k2 = deriv(th + 0.5 * h * k1[2])
        k3 = deriv(th + 0.5 * h * k2[2])
        k4 = deriv(th + h * k3[2])
        x += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        th += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return x, y, th


class TestEntityId:
    def test_str_roundtrip(self):
        assert EntityId.parse(str(VEH)) == VEH

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            EntityId(EntityKind.VIRTUAL_VEHICLE, -1)

    def test_parse_garbage(self):
        with pytest.raises(ValueError):
            EntityId.parse("not-an-entity")


class TestFacilityState:
    def test_status_domain_enforced(self):
        gate = EntityId(EntityKind.BARRIER_GATE, 0)
        FacilityState(gate, 39, FacilityStatus.OPEN, 0.0)
        with pytest.raises(ValueError):
            FacilityState(gate, 39, FacilityStatus.ON, 0.0)
        light = EntityId(EntityKind.STREETLIGHT, 3)
        FacilityState(light, 3, FacilityStatus.ON, 0.0)
        with pytest.raises(ValueError):
            FacilityState(light, 3, FacilityStatus.OPEN, 0.0)


class TestFrameTransform:
    def test_physical_speed_scales_to_mixed(self):
        # 0.2 m/s native on the 1:14 table corresponds to 2.8 m/s (10.08 km/h).
        f = FrameTransform(scale=14.0)
        out = to_mixed_frame(mk_state(speed=0.2), f)
        assert out.speed == pytest.approx(2.8, abs=1e-12)

    def test_identity_transform_is_noop(self):
        s = mk_state(x=1.2, y=-3.4, heading=0.7, speed=2.0, yaw_rate=0.1, accel=-0.5)
        assert to_mixed_frame(s, FrameTransform()) == s

    def test_position_scaling(self):
        f = FrameTransform(scale=14.0)
        out = to_mixed_frame(mk_state(x=0.5, y=0.25), f)
        assert (out.x, out.y) == (7.0, 3.5)

    def test_mixed_command_maps_to_native(self):
        f = FrameTransform(scale=14.0)
        out = from_mixed_frame(mk_state(speed=2.8), f)
        assert out.speed == pytest.approx(0.2, abs=1e-12)

    def test_position_unscaling(self):
        f = FrameTransform(scale=14.0)
        out = from_mixed_frame(mk_state(x=7.0, y=3.5), f)
        assert out.x == pytest.approx(0.5, abs=1e-12)
        assert out.y == pytest.approx(0.25, abs=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(FrameConversionError):
            to_mixed_frame(mk_state(x=math.nan), FrameTransform(scale=14.0))
        with pytest.raises(FrameConversionError):
            from_mixed_frame(mk_state(x=math.inf), FrameTransform(scale=14.0))

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            FrameTransform(scale=0.0)

    @given(
        x=st.floats(-1e3, 1e3),
        y=st.floats(-1e3, 1e3),
        heading=st.floats(-math.pi + 1e-9, math.pi),
        speed=st.floats(0, 50),
        scale=st.floats(0.1, 20),
        dx=st.floats(-100, 100),
        dy=st.floats(-100, 100),
        rot=st.floats(-math.pi, math.pi),
    )
    @settings(max_examples=200)
    def test_round_trip_property(self, x, y, heading, speed, scale, dx, dy, rot):
        f = FrameTransform(scale=scale, dx=dx, dy=dy, rotation=rot)
        s = mk_state(x=x, y=y, heading=heading, speed=speed)
        back = from_mixed_frame(to_mixed_frame(s, f), f)
        assert back.x == pytest.approx(s.x, abs=1e-9)
        assert back.y == pytest.approx(s.y, abs=1e-9)
        assert back.speed == pytest.approx(s.speed, abs=1e-12)
        assert normalize_angle(back.heading - s.heading) == pytest.approx(0.0, abs=1e-12)

    def test_round_trip_tight_tolerance_default_scale(self):
        # The shipped 1:14 transform has no rotation; round trip is 1e-12 tight.
        f = FrameTransform(scale=14.0)
        s = mk_state(x=123.456, y=-7.89, heading=2.5, speed=2.8, accel=-0.28)
        back = from_mixed_frame(to_mixed_frame(s, f), f)
        assert back.x == pytest.approx(s.x, abs=1e-12)
        assert back.y == pytest.approx(s.y, abs=1e-12)
        assert back.speed == pytest.approx(s.speed, abs=1e-12)
        assert back.heading == pytest.approx(s.heading, abs=1e-12)


class TestExtrapolation:
    def test_zero_dt_identity(self):
        s = mk_state(x=1.0, speed=2.8, yaw_rate=0.3)
        assert extrapolate_state(s, 0.0) == s

    def test_straight_line(self):
        s = mk_state(speed=2.8)
        out = extrapolate_state(s, 0.1)
        assert out.x == pytest.approx(0.28, abs=1e-12)
        assert out.y == pytest.approx(0.0, abs=1e-12)
        assert out.t == pytest.approx(0.1)

    def test_arc_matches_integration_oracle(self):
        s = mk_state(x=3.0, y=-1.0, heading=0.4, speed=2.8, yaw_rate=0.5)
        out = extrapolate_state(s, 0.02)
        ox, oy, oth = integrate_arc_oracle(3.0, -1.0, 0.4, 2.8, 0.5, 0.02)
        assert out.x == pytest.approx(ox, abs=1e-9)
        assert out.y == pytest.approx(oy, abs=1e-9)
        assert out.heading == pytest.approx(oth, abs=1e-9)

    def test_arc_large_dt_oracle(self):
        s = mk_state(speed=5.0, yaw_rate=-1.2, heading=-2.0)
        out = extrapolate_state(s, 0.4)
        ox, oy, oth = integrate_arc_oracle(0.0, 0.0, -2.0, 5.0, -1.2, 0.4)
        assert out.x == pytest.approx(ox, abs=1e-9)
        assert out.y == pytest.approx(oy, abs=1e-9)

    def test_speed_advances_and_clamps(self):
        s = mk_state(speed=0.1, accel=-2.0)
        assert extrapolate_state(s, 0.1).speed == 0.0
        s2 = mk_state(speed=1.0, accel=0.5)
        assert extrapolate_state(s2, 0.1).speed == pytest.approx(1.05)

    def test_out_of_range_dt_rejected(self):
        s = mk_state(speed=1.0)
        with pytest.raises(CompensationError):
            extrapolate_state(s, -0.01)
        with pytest.raises(CompensationError):
            extrapolate_state(s, 0.6)

    @given(
        heading=st.floats(-3.0, 3.0),
        speed=st.floats(0, 30),
        yaw=st.floats(-2, 2),
        a=st.floats(0.001, 0.2),
        b=st.floats(0.001, 0.2),
    )
    @settings(max_examples=150)
    def test_composition_property(self, heading, speed, yaw, a, b):
        s = mk_state(heading=heading, speed=speed, yaw_rate=yaw)
        once = extrapolate_state(extrapolate_state(s, a), b)
        direct = extrapolate_state(s, a + b)
        assert once.x == pytest.approx(direct.x, abs=1e-9)
        assert once.y == pytest.approx(direct.y, abs=1e-9)
        assert normalize_angle(once.heading - direct.heading) == pytest.approx(0.0, abs=1e-9)


class TestFusion:
    policy = FusionPolicy(weights={Source.ONBOARD: 0.5, Source.ROADSIDE: 0.5})

    def test_single_fresh_source(self):
        o = mk_state(t=0.95, x=10.0, speed=2.8)
        fused = fuse_observations([o], self.policy, 1.0)
        assert fused.x == pytest.approx(10.0 + 2.8 * 0.05)
        assert fused.t == 1.0
        assert fused.source is Source.ONBOARD

    def test_symmetric_average(self):
        a = mk_state(t=1.0, x=10.0, source=Source.ONBOARD)
        b = mk_state(t=1.0, x=12.0, source=Source.ROADSIDE)
        fused = fuse_observations([a, b], self.policy, 1.0)
        assert fused.x == pytest.approx(11.0)

    def test_extrapolate_then_average(self):
        # Onboard aged 50 ms moving at 2.8 m/s lands at 10.14; average with
        # the fresh roadside fix at 10.15 gives 10.145.
        onboard = mk_state(t=0.95, x=10.0, speed=2.8, source=Source.ONBOARD)
        roadside = mk_state(t=1.0, x=10.15, speed=2.8, source=Source.ROADSIDE)
        fused = fuse_observations([onboard, roadside], self.policy, 1.0)
        assert fused.x == pytest.approx(10.145, abs=1e-12)

    def test_all_stale_rejected(self):
        o = mk_state(t=0.0, x=1.0)
        with pytest.raises(FusionError):
            fuse_observations([o], self.policy, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(FusionError):
            fuse_observations([], self.policy, 1.0)

    def test_mixed_ids_rejected(self):
        a = mk_state(t=1.0)
        b = MixedEntityState(
            id=EntityId(EntityKind.VIRTUAL_VEHICLE, 2), t=1.0, x=0, y=0, heading=0, speed=0
        )
        with pytest.raises(FusionError):
            fuse_observations([a, b], self.policy, 1.0)

    def test_zero_weight_source_ignored(self):
        prio = FusionPolicy(weights={Source.ONBOARD: 1.0, Source.ROADSIDE: 0.0})
        a = mk_state(t=1.0, x=10.0, source=Source.ONBOARD)
        b = mk_state(t=1.0, x=99.0, source=Source.ROADSIDE)
        fused = fuse_observations([a, b], prio, 1.0)
        assert fused.x == 10.0
        with pytest.raises(FusionError):
            fuse_observations([b], prio, 1.0)

    def test_heading_wraparound(self):
        a = mk_state(t=1.0, heading=3.1, source=Source.ONBOARD)
        b = mk_state(t=1.0, heading=-3.1, source=Source.ROADSIDE)
        fused = fuse_observations([a, b], self.policy, 1.0)
        assert abs(normalize_angle(fused.heading - math.pi)) < 1e-9

    def test_freshest_per_source_wins(self):
        old = mk_state(t=0.90, x=0.0, source=Source.ONBOARD)
        new = mk_state(t=0.99, x=5.0, source=Source.ONBOARD)
        fused = fuse_observations([old, new], self.policy, 1.0)
        assert fused.x == pytest.approx(5.0)

    @given(
        x=st.floats(-100, 100),
        heading=st.floats(-3.0, 3.0),
        speed=st.floats(0, 10),
        n=st.integers(1, 5),
    )
    @settings(max_examples=100)
    def test_idempotence_property(self, x, heading, speed, n):
        o = mk_state(t=1.0, x=x, heading=heading, speed=speed)
        fused = fuse_observations([o] * n, self.policy, 1.0)
        assert fused.x == pytest.approx(o.x)
        assert fused.speed == pytest.approx(o.speed)
        assert normalize_angle(fused.heading - o.heading) == pytest.approx(0.0, abs=1e-9)


class TestFusionPolicy:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            FusionPolicy(weights={Source.ONBOARD: 0.5, Source.ROADSIDE: 0.6})

    def test_weight_range(self):
        with pytest.raises(ValueError):
            FusionPolicy(weights={Source.ONBOARD: 1.5, Source.ROADSIDE: -0.5})

    def test_staleness_positive(self):
        with pytest.raises(ValueError):
            FusionPolicy(weights={Source.ONBOARD: 1.0}, staleness_limit=0.0)


class TestNormalizeAngle:
    @given(st.floats(-50, 50))
    def test_range(self, a):
        out = normalize_angle(a)
        assert -math.pi < out <= math.pi
        # Same direction on the circle.
        assert math.cos(out) == pytest.approx(math.cos(a), abs=1e-9)
        assert math.sin(out) == pytest.approx(math.sin(a), abs=1e-9)

    def test_pi_maps_to_pi(self):
        assert normalize_angle(math.pi) == math.pi
        assert normalize_angle(-math.pi) == math.pi
