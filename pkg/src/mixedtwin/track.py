"""Polyline reference paths: projection, arc-length lookup, and the oval
track used by the default platoon scenario.
"""

from __future__ import annotations

import math
from typing import Sequence


class Track:
    """A piecewise-linear path, optionally closed into a loop.

    Arc positions are in meters from the first waypoint. Projection queries
    accept a segment hint so per-tick lookups on long paths stay O(1).
    """

    def __init__(self, points: Sequence[tuple[float, float]], closed: bool = False):
        if len(points) < 2:
            raise ValueError("a track needs at least 2 waypoints")
        pts = [(float(x), float(y)) for x, y in points]
        if closed and pts[0] != pts[-1]:
            pts.append(pts[0])
        self.points = pts
        self.closed = closed
        self._cum = [0.0]
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            seg = math.hypot(x1 - x0, y1 - y0)
            if seg == 0.0:
                raise ValueError("duplicate consecutive waypoints")
            self._cum.append(self._cum[-1] + seg)
        self.length = self._cum[-1]

    @property
    def n_segments(self) -> int:
        return len(self.points) - 1

    def scaled(self, factor: float) -> "Track":
        """Geometrically similar track with all coordinates multiplied."""
        return Track([(x * factor, y * factor) for x, y in self.points], closed=self.closed)

    def point_at(self, s: float) -> tuple[float, float, float]:
        """(x, y, tangent heading) at arc position s; wraps on closed tracks."""
        if self.closed:
            s = s % self.length
        else:
            s = min(max(s, 0.0), self.length)
        i = self._segment_index(s)
        x0, y0 = self.points[i]
        x1, y1 = self.points[i + 1]
        seg_len = self._cum[i + 1] - self._cum[i]
        u = (s - self._cum[i]) / seg_len
        return (x0 + u * (x1 - x0), y0 + u * (y1 - y0), math.atan2(y1 - y0, x1 - x0))

    def _segment_index(self, s: float) -> int:
        lo, hi = 0, len(self._cum) - 1
        while lo < hi - 1:
            mid = (lo + hi) // 2
            if self._cum[mid] <= s:
                lo = mid
            else:
                hi = mid
        return min(lo, self.n_segments - 1)

    def project(self, x: float, y: float, hint: int | None = None) -> tuple[float, float, int]:
        """Project a point onto the path.

        Returns (arc position, distance to path, segment index). With a hint
        only a window of nearby segments is searched, assuming monotone
        progress along the path between calls.
        """
        if hint is None:
            candidates = range(self.n_segments)
        else:
            window = 4
            n = self.n_segments
            if self.closed:
                candidates = [(hint + k) % n for k in range(-window, window + 1)]
            else:
                candidates = range(max(0, hint - window), min(n, hint + window + 1))
        best = (math.inf, 0.0, 0)
        for i in candidates:
            x0, y0 = self.points[i]
            x1, y1 = self.points[i + 1]
            dx, dy = x1 - x0, y1 - y0
            seg2 = dx * dx + dy * dy
            u = ((x - x0) * dx + (y - y0) * dy) / seg2
            u = min(max(u, 0.0), 1.0)
            px, py = x0 + u * dx, y0 + u * dy
            d = math.hypot(x - px, y - py)
            if d < best[0]:
                best = (d, self._cum[i] + u * math.sqrt(seg2), i)
        return (best[1], best[0], best[2])

    def arc_delta(self, s_from: float, s_to: float) -> float:
        """Forward arc distance from s_from to s_to (wrap-aware when closed)."""
        d = s_to - s_from
        if self.closed:
            d %= self.length
        return d

    def lookahead_point(
        self, x: float, y: float, s_start: float, radius: float
    ) -> tuple[float, float]:
        """First path point beyond arc s_start at chord distance ``radius``.

        Solves the circle/segment intersection analytically, walking forward
        from the segment containing s_start (wrapping on closed tracks). If
        the path never crosses the circle (vehicle far off the path, or an
        open path ends inside it) the point one radius further along the arc
        or beyond the endpoint is returned.
        """
        if self.closed:
            s_start %= self.length
        i = self._segment_index(min(s_start, self.length - 1e-12))
        n = self.n_segments
        seg_offset = s_start - self._cum[i]
        for step in range(n + 1):
            j = (i + step) % n if self.closed else i + step
            if j >= n:
                break
            x0, y0 = self.points[j]
            x1, y1 = self.points[j + 1]
            dx, dy = x1 - x0, y1 - y0
            seg_len2 = dx * dx + dy * dy
            u_min = seg_offset / math.sqrt(seg_len2) if step == 0 else 0.0
            fx, fy = x0 - x, y0 - y
            b = 2.0 * (fx * dx + fy * dy)
            c = fx * fx + fy * fy - radius * radius
            disc = b * b - 4.0 * seg_len2 * c
            if disc >= 0.0:
                root = (-b + math.sqrt(disc)) / (2.0 * seg_len2)  # exit crossing
                if u_min <= root <= 1.0:
                    return (x0 + root * dx, y0 + root * dy)
        if self.closed:
            px, py, _ = self.point_at(s_start + radius)
            return (px, py)
        ex, ey, eh = self.point_at(self.length)
        if math.hypot(ex - x, ey - y) >= radius:
            px, py, _ = self.point_at(min(s_start + radius, self.length))
            return (px, py)
        return (ex + radius * math.cos(eh), ey + radius * math.sin(eh))


def oval_track(
    straight: float = 150.0, radius: float = 30.0, arc_points: int = 24
) -> Track:
    """Stadium-shaped closed loop: two straights joined by semicircular ends.

    Starts at the origin heading +x along the lower straight; total length is
    2*straight + 2*pi*radius.
    """
    pts: list[tuple[float, float]] = []
    pts.append((0.0, 0.0))
    pts.append((straight, 0.0))
    cx, cy = straight, radius
    for k in range(1, arc_points):
        a = -math.pi / 2 + math.pi * k / arc_points
        pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
    pts.append((straight, 2 * radius))
    pts.append((0.0, 2 * radius))
    cx = 0.0
    for k in range(1, arc_points):
        a = math.pi / 2 + math.pi * k / arc_points
        pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
    return Track(pts, closed=True)


def straight_track(length: float = 1000.0, y: float = 0.0) -> Track:
    return Track([(0.0, y), (length, y)])


def circle_track(radius: float, n_points: int = 72) -> Track:
    pts = [
        (radius * math.cos(2 * math.pi * k / n_points), radius * math.sin(2 * math.pi * k / n_points))
        for k in range(n_points)
    ]
    return Track(pts, closed=True)
