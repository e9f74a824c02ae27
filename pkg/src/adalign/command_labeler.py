"""Rule-based driving-command labels from a future trajectory.

Direction: read the lateral drift at 5 m of driven distance, relative to the
initial heading; under 1 m is FORWARD.  Velocity: smooth the step speeds with
a quadratic least-squares fit and threshold the mean acceleration over (at
most) the next 4 s, with thresholds that tighten at low initial speed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TURN_LEFT, TURN_RIGHT, FORWARD = "TURN LEFT", "TURN RIGHT", "FORWARD"
ACCELERATE, DECELERATE, STATIONARY, KEEP_SPEED = "ACCELERATE", "DECELERATE", "STATIONARY", "KEEP SPEED"
DIRECTIONS = (TURN_LEFT, TURN_RIGHT, FORWARD)
VELOCITIES = (ACCELERATE, DECELERATE, STATIONARY, KEEP_SPEED)

DRIVE_DISTANCE = 5.0      # m
MAX_LATERAL = 1.0         # m of drift allowed per DRIVE_DISTANCE
STATIONARY_SPEED = 0.2    # m/s
HORIZON = 4.0             # s
POLY_DEGREE = 2
# (lower bound of the initial-speed band, threshold in m/s^2), checked in order
_BANDS = ((2.0, 0.36), (1.0, 0.12), (0.0, 0.05))


@dataclass(frozen=True)
class CommandLabel:
    direction: str
    velocity: str

    def __str__(self) -> str:
        return f"<{self.direction}>, <{self.velocity}>"

    @classmethod
    def parse(cls, text: str) -> "CommandLabel":
        parts = [p.strip() for p in text.strip().split(",")]
        if len(parts) != 2 or not all(p.startswith("<") and p.endswith(">") for p in parts):
            raise ValueError(f"not a command label: {text!r}")
        d, v = parts[0][1:-1], parts[1][1:-1]
        if d not in DIRECTIONS or v not in VELOCITIES:
            raise ValueError(f"not a command label: {text!r}")
        return cls(d, v)


def _as_traj(traj, min_points: int) -> np.ndarray:
    pts = np.asarray(traj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"trajectory must be a sequence of (x, y) points, got shape {pts.shape}")
    if len(pts) < min_points:
        raise ValueError(f"trajectory needs at least {min_points} points, got {len(pts)}")
    return pts


def lateral_at_distance(traj, distance: float = DRIVE_DISTANCE) -> tuple[float, float]:
    """(signed lateral offset, driven distance) at ``distance`` along the path.

    The offset is measured from the first point, perpendicular to the first
    non-degenerate segment (positive = left).  When the path is shorter than
    ``distance`` the offset at the final point and the full length are returned.
    """
    pts = _as_traj(traj, 2)
    seg = np.diff(pts, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    moving = np.flatnonzero(lengths > 1e-9)
    if moving.size == 0:
        return 0.0, 0.0
    h = seg[moving[0]] / lengths[moving[0]]
    normal = np.array([-h[1], h[0]])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = float(cum[-1])
    if total < distance:
        return float((pts[-1] - pts[0]) @ normal), total
    k = int(np.searchsorted(cum, distance, side="left"))
    k = max(k, 1)
    frac = (distance - cum[k - 1]) / lengths[k - 1] if lengths[k - 1] > 0 else 0.0
    p = pts[k - 1] + frac * seg[k - 1]
    return float((p - pts[0]) @ normal), float(distance)


def directional_command(traj) -> str:
    lateral, driven = lateral_at_distance(traj)
    if driven == 0.0:
        return FORWARD
    limit = MAX_LATERAL * min(driven, DRIVE_DISTANCE) / DRIVE_DISTANCE
    if abs(lateral) < limit:
        return FORWARD
    return TURN_LEFT if lateral > 0 else TURN_RIGHT


def step_speeds(traj, dt: float = 0.5) -> np.ndarray:
    pts = _as_traj(traj, 2)
    d = np.diff(pts, axis=0)
    return np.hypot(d[:, 0], d[:, 1]) / dt


def fit_speed_curve(traj, dt: float = 0.5, horizon: float = HORIZON):
    """Quadratic fit of step speeds over the first ``horizon`` seconds.

    Step speed ``i`` is placed at the interval midpoint ``(i + 0.5) * dt``.
    Returns ``(raw speeds, fitted speeds at the midpoints, fitted v(0), a_avg)``
    with ``a_avg = (v(t_end) - v(0)) / t_end`` and ``t_end = min(horizon, span)``.
    """
    pts = _as_traj(traj, 3)
    n_int = min(len(pts) - 1, int(round(horizon / dt)))
    speeds = step_speeds(pts[: n_int + 1], dt)
    t = (np.arange(n_int) + 0.5) * dt
    deg = min(POLY_DEGREE, n_int - 1)
    coef = np.polynomial.polynomial.polyfit(t, speeds, deg)
    fitted = np.polynomial.polynomial.polyval(t, coef)
    t_end = n_int * dt
    v_start = float(np.polynomial.polynomial.polyval(0.0, coef))
    v_end = float(np.polynomial.polynomial.polyval(t_end, coef))
    return speeds, fitted, v_start, (v_end - v_start) / t_end


def accel_threshold(v0: float) -> float:
    """Band edges: > 2 m/s -> 0.36; [1, 2] -> 0.12; < 1 -> 0.05."""
    if v0 > 2.0:
        return 0.36
    if v0 >= 1.0:
        return 0.12
    return 0.05


def velocity_command(v0: float, a_avg: float, speeds) -> str:
    speeds = np.asarray(speeds, dtype=np.float64)
    if np.any(speeds < 0):
        raise ValueError("speeds must be nonnegative")
    if speeds.size == 0 or speeds.max() < STATIONARY_SPEED:
        return STATIONARY
    theta = accel_threshold(v0)
    if a_avg > theta:
        return ACCELERATE
    if a_avg < -theta:
        return DECELERATE
    return KEEP_SPEED


def label(traj, dt: float = 0.5) -> CommandLabel:
    pts = _as_traj(traj, 3)
    speeds, _, v0, a_avg = fit_speed_curve(pts, dt)
    return CommandLabel(directional_command(pts), velocity_command(max(v0, 0.0), a_avg, speeds))


def label_file(src, dst) -> int:
    """One trajectory per input line (JSON list of [x, y], or {"trajectory": [...]})."""
    out = []
    for lineno, line in enumerate(Path(src).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{src}:{lineno}: malformed trajectory ({exc.msg})") from None
        traj = rec["trajectory"] if isinstance(rec, dict) else rec
        out.append(str(label(traj)))
    Path(dst).write_text("".join(s + "\n" for s in out))
    return len(out)
