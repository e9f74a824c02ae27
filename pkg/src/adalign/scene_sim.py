"""Synthetic driving scenes and a mock perception/prediction/planning stack.

Coordinates are ego-frame meters: x forward, y left.  All time series are
sampled every ``DT`` = 0.5 s.  ``mock_ad_inference`` plays the role of a
frozen end-to-end driving model: it corrupts the ground truth with seeded
noise (its "predictions") and embeds those predictions into token vectors
with fixed full-column-rank linear maps.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics.rng import Rng

DT = 0.5
CATEGORIES = ("car", "pedestrian", "bus", "truck", "bicycle", "traffic_cone")
MAX_SPEED = {"car": 15.0, "pedestrian": 2.0, "bus": 12.0, "truck": 12.0,
             "bicycle": 7.0, "traffic_cone": 0.0}
SCENARIOS = ("straight", "left_turn", "right_turn", "stop", "accelerate", "decelerate")
SCHEMA_VERSION = 1

T_PAST = 4
T_FUTURE = 6
T_PLAN = 6


class SceneParseError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass
class SceneConfig:
    min_objects: int = 1
    max_objects: int = 12
    x_range: tuple[float, float] = (-40.0, 40.0)
    y_range: tuple[float, float] = (-30.0, 30.0)
    radius: float = 50.0
    t_past: int = T_PAST
    t_future: int = T_FUTURE
    t_plan: int = T_PLAN
    scenario: str | None = None   # force one tag; None draws uniformly

    def __post_init__(self):
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.t_plan < 4:
            raise ValueError("t_plan must be >= 4 (the 2 s waypoint is required)")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")


@dataclass
class NoiseConfig:
    sigma_pos: float = 0.2
    sigma_vel: float = 0.1
    sigma_plan: float = 0.1
    p_drop: float = 0.02

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class SceneObject:
    category: str
    position: tuple[float, float]
    velocity: tuple[float, float]
    past_track: list[tuple[float, float]]
    future_traj: list[tuple[float, float]]


@dataclass
class Scene:
    scene_id: int
    objects: list[SceneObject]
    ego_plan: list[tuple[float, float]]
    scenario_tag: str
    ego_speed: float
    ego_accel: float
    ego_yaw_rate: float

    def plan_array(self) -> np.ndarray:
        return np.asarray(self.ego_plan, dtype=np.float64).reshape(-1, 2)

    def trajectory(self) -> np.ndarray:
        """Origin followed by the planned waypoints."""
        return np.vstack([np.zeros((1, 2)), self.plan_array()])


# --- generation -----------------------------------------------------------------
def _ego_profile(tag: str, rng: Rng) -> tuple[float, float, float, float]:
    """(initial speed, acceleration, yaw rate, stop time) for a scenario tag."""
    if tag == "straight":
        return rng.uniform(3.0, 12.0), 0.0, 0.0, math.inf
    if tag in ("left_turn", "right_turn"):
        v = rng.uniform(3.0, 7.0)
        radius = rng.uniform(4.0, 7.0)
        w = v / radius
        return v, 0.0, (w if tag == "left_turn" else -w), math.inf
    if tag == "stop":
        v = rng.uniform(2.0, 8.0)
        t_stop = rng.uniform(1.5, 2.5)
        return v, -v / t_stop, 0.0, t_stop
    if tag == "accelerate":
        return rng.uniform(2.0, 10.0), rng.uniform(1.0, 2.5), 0.0, math.inf
    # decelerate without reaching zero inside the horizon
    a = -rng.uniform(1.0, 2.0)
    return rng.uniform(7.0, 12.0), a, 0.0, math.inf


def _integrate_plan(v0: float, a: float, w: float, t_stop: float, n: int) -> list[tuple[float, float]]:
    sub = 20
    h = DT / sub
    x = y = yaw = 0.0
    v = v0
    out = []
    t = 0.0
    for _ in range(n):
        for _ in range(sub):
            # midpoint rule on speed and heading
            v_next = max(0.0, v + a * h) if t + h <= t_stop else 0.0
            vm = 0.5 * (v + v_next)
            ym = yaw + 0.5 * w * h
            x += vm * math.cos(ym) * h
            y += vm * math.sin(ym) * h
            yaw += w * h
            v = v_next
            t += h
        out.append((x, y))
    return out


def generate_scene(rng: Rng, cfg: SceneConfig | None = None, scene_id: int = 0) -> Scene:
    cfg = cfg or SceneConfig()
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if cfg.max_objects > 0 else 0
    objects = []
    for _ in range(n):
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        while True:
            p = (float(rng.uniform(*cfg.x_range)), float(rng.uniform(*cfg.y_range)))
            if math.hypot(*p) <= cfg.radius:
                break
        speed = float(rng.uniform(0.0, MAX_SPEED[cat]))
        heading = float(rng.uniform(-math.pi, math.pi))
        v = (speed * math.cos(heading), speed * math.sin(heading))
        past = [(p[0] - v[0] * DT * k, p[1] - v[1] * DT * k) for k in range(cfg.t_past, 0, -1)]
        fut = [(p[0] + v[0] * DT * k, p[1] + v[1] * DT * k) for k in range(1, cfg.t_future + 1)]
        objects.append(SceneObject(cat, p, v, past, fut))
    tag = cfg.scenario or SCENARIOS[int(rng.integers(len(SCENARIOS)))]
    v0, a, w, t_stop = _ego_profile(tag, rng)
    plan = _integrate_plan(v0, a, w, t_stop, cfg.t_plan)
    return Scene(scene_id, objects, plan, tag, float(v0), float(a), float(w))


def generate_scenes(rng: Rng, n: int, cfg: SceneConfig | None = None, start_id: int = 0) -> list[Scene]:
    return [generate_scene(rng.child(start_id + i), cfg, start_id + i) for i in range(n)]


# --- mock AD pipeline -------------------------------------------------------------
@dataclass
class ADPrediction:
    """What the mock driving stack believes; the reference for disalignment."""
    categories: list[str]
    positions: np.ndarray      # [N_det, 2]
    velocities: np.ndarray     # [N_det, 2]
    past_tracks: np.ndarray    # [N_det, T_past, 2]
    future_trajs: np.ndarray   # [N_det, T_f, 2]
    plan: np.ndarray           # [T_p, 2]

    @property
    def n_det(self) -> int:
        return len(self.categories)

    def counts(self) -> list[int]:
        return [self.categories.count(c) for c in CATEGORIES]

    def distance_order(self) -> list[int]:
        """Detected-object indices sorted nearest-first (stable on ties)."""
        d = np.hypot(self.positions[:, 0], self.positions[:, 1]) if self.n_det else np.zeros(0)
        return [int(i) for i in np.argsort(d, kind="stable")]


@dataclass
class IntermediateTokens:
    bev: np.ndarray            # [H_b, W_b, C]
    track: np.ndarray          # [N_det, D]
    motion: np.ndarray         # [N_det, D]
    ego_token: np.ndarray      # [D]
    plan_steps: np.ndarray     # [T_p, 2]
    ad_pred: ADPrediction
    scene_id: int = 0

    @property
    def n_det(self) -> int:
        return self.track.shape[0]


@dataclass(frozen=True)
class TokenSpec:
    dim: int = 32
    bev_size: int = 32
    bev_channels: int = 16
    bev_extent: float = 50.0   # half-width of the raster in meters
    t_past: int = T_PAST
    t_future: int = T_FUTURE

    @property
    def track_width(self) -> int:
        return len(CATEGORIES) + 2 + 2 * self.t_past

    @property
    def motion_width(self) -> int:
        return 2 * self.t_future + 2

    ego_width: int = 4


EMBED_SEED = 20240917
_POS_SCALE = 10.0
_VEL_SCALE = 5.0
_embed_cache: dict[TokenSpec, dict[str, np.ndarray]] = {}


def embedding_matrices(spec: TokenSpec = TokenSpec()) -> dict[str, np.ndarray]:
    """Fixed embeddings ``value vector -> token``; rank-checked once per spec."""
    if spec in _embed_cache:
        return _embed_cache[spec]
    rng = Rng(EMBED_SEED).child(f"embed-{spec.dim}-{spec.t_past}-{spec.t_future}")
    mats = {}
    widths = {"track": spec.track_width, "motion": spec.motion_width, "ego": spec.ego_width}
    scales = {
        "track": np.r_[np.ones(len(CATEGORIES)), np.full(2 + 2 * spec.t_past, 1 / _POS_SCALE)],
        "motion": np.r_[np.full(2 * spec.t_future, 1 / _POS_SCALE), np.full(2, 1 / _VEL_SCALE)],
        "ego": np.array([1 / _VEL_SCALE, 1 / _VEL_SCALE, 1.0, 1.0]),
    }
    for kind, width in widths.items():
        if width > spec.dim:
            raise ValueError(f"token dim {spec.dim} too small for {kind} values ({width})")
        m = rng.normal(0.0, 1.0 / math.sqrt(width), size=(spec.dim, width)) * scales[kind]
        if np.linalg.matrix_rank(m) != width:
            raise RuntimeError(f"{kind} embedding is rank deficient")
        mats[kind] = m
    _embed_cache[spec] = mats
    return mats


def track_values(cat: str, pos, past) -> np.ndarray:
    onehot = np.zeros(len(CATEGORIES))
    onehot[CATEGORIES.index(cat)] = 1.0
    return np.concatenate([onehot, np.asarray(pos, float), np.asarray(past, float).ravel()])


def motion_values(fut, vel) -> np.ndarray:
    return np.concatenate([np.asarray(fut, float).ravel(), np.asarray(vel, float)])


def bev_cell(p, spec: TokenSpec) -> tuple[int, int]:
    scale = spec.bev_size / (2 * spec.bev_extent)
    i = int(np.clip(math.floor((p[0] + spec.bev_extent) * scale), 0, spec.bev_size - 1))
    j = int(np.clip(math.floor((p[1] + spec.bev_extent) * scale), 0, spec.bev_size - 1))
    return i, j


def rasterize(pred: ADPrediction, spec: TokenSpec) -> np.ndarray:
    """Occupancy per category (channels 0-5), summed velocity (6-7), ego marker (8)."""
    if spec.bev_channels < 9:
        raise ValueError("BEV needs at least 9 channels")
    bev = np.zeros((spec.bev_size, spec.bev_size, spec.bev_channels))
    for cat, p, v in zip(pred.categories, pred.positions, pred.velocities):
        i, j = bev_cell(p, spec)
        bev[i, j, CATEGORIES.index(cat)] += 1.0
        bev[i, j, 6] += v[0] / _VEL_SCALE
        bev[i, j, 7] += v[1] / _VEL_SCALE
    i, j = bev_cell((0.0, 0.0), spec)
    bev[i, j, 8] = 1.0
    return bev


def mock_ad_inference(scene: Scene, rng: Rng, noise: NoiseConfig | None = None,
                      spec: TokenSpec = TokenSpec()) -> IntermediateTokens:
    noise = NoiseConfig() if noise is None else noise
    mats = embedding_matrices(spec)
    cats, pos, vel, past, fut = [], [], [], [], []
    for obj in scene.objects:
        keep = rng.random() >= noise.p_drop
        dp = rng.normal(0.0, 1.0, 2) * noise.sigma_pos
        dv = rng.normal(0.0, 1.0, 2) * noise.sigma_vel
        if not keep:
            continue
        p = np.asarray(obj.position) + dp
        v = np.asarray(obj.velocity) + dv
        cats.append(obj.category)
        pos.append(p)
        vel.append(v)
        past.append(np.asarray(obj.past_track).reshape(-1, 2) + dp)
        fut.append(p + v * DT * np.arange(1, len(obj.future_traj) + 1)[:, None])
    n = len(cats)
    plan = scene.plan_array() + rng.normal(0.0, 1.0, scene.plan_array().shape) * noise.sigma_plan
    pred = ADPrediction(
        categories=cats,
        positions=np.asarray(pos).reshape(n, 2),
        velocities=np.asarray(vel).reshape(n, 2),
        past_tracks=np.asarray(past).reshape(n, spec.t_past, 2),
        future_trajs=np.asarray(fut).reshape(n, spec.t_future, 2),
        plan=plan,
    )
    track = np.array([mats["track"] @ track_values(c, p, pa)
                      for c, p, pa in zip(cats, pred.positions, pred.past_tracks)]).reshape(n, spec.dim)
    motion = np.array([mats["motion"] @ motion_values(f, v)
                       for f, v in zip(pred.future_trajs, pred.velocities)]).reshape(n, spec.dim)
    ego = mats["ego"] @ np.array([scene.ego_speed, 0.0, scene.ego_accel, scene.ego_yaw_rate])
    return IntermediateTokens(rasterize(pred, spec), track, motion, ego, plan, pred, scene.scene_id)


def decode_track(token: np.ndarray, spec: TokenSpec = TokenSpec()) -> np.ndarray:
    """Pseudo-inverse of the track embedding: token -> value vector."""
    return np.linalg.pinv(embedding_matrices(spec)["track"]) @ token


def decode_motion(token: np.ndarray, spec: TokenSpec = TokenSpec()) -> np.ndarray:
    return np.linalg.pinv(embedding_matrices(spec)["motion"]) @ token


# --- scene files --------------------------------------------------------------------
def scene_to_record(scene: Scene) -> dict:
    rec = asdict(scene)
    rec["schema_version"] = SCHEMA_VERSION
    return rec


def _pairs(seq) -> list[tuple[float, float]]:
    return [(float(a), float(b)) for a, b in seq]


def scene_from_record(rec: dict) -> Scene:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {rec.get('schema_version')!r}")
    objs = [SceneObject(o["category"], tuple(o["position"]), tuple(o["velocity"]),
                        _pairs(o["past_track"]), _pairs(o["future_traj"]))
            for o in rec["objects"]]
    for o in objs:
        if o.category not in CATEGORIES:
            raise ValueError(f"unknown category {o.category!r}")
    return Scene(int(rec["scene_id"]), objs, _pairs(rec["ego_plan"]), rec["scenario_tag"],
                 float(rec["ego_speed"]), float(rec["ego_accel"]), float(rec["ego_yaw_rate"]))


def save_scenes(path, scenes: Iterable[Scene], meta: dict | None = None) -> None:
    """One JSON record per line; an optional leading ``{"meta": ...}`` header."""
    lines = []
    if meta is not None:
        lines.append(json.dumps({"meta": meta}, sort_keys=True))
    lines.extend(json.dumps(scene_to_record(s), sort_keys=True) for s in scenes)
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_scenes(path, with_meta: bool = False):
    scenes: list[Scene] = []
    meta = None
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneParseError(path, lineno, f"malformed record ({exc.msg})") from None
        if lineno == 1 and "meta" in rec:
            meta = rec["meta"]
            continue
        try:
            scenes.append(scene_from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneParseError(path, lineno, f"invalid scene: {exc}") from None
    if text and not text.endswith("\n"):
        # a writer always terminates records; a missing newline means truncation
        raise SceneParseError(path, len(text.splitlines()), "truncated final line")
    return (scenes, meta) if with_meta else scenes
