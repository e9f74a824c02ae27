"""Online question/answer samples with machine-checkable ground values.

Four alignment tasks read the mock AD stack's own predictions back out of
the intermediate tokens (counting, position, motion, planning).  Two more
tasks supply ordinary supervision: an explanation caption built from the
scene's scenario tag, and a driving command labelled from the ego plan.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import command_labeler
from .numerics.rng import Rng
from .scene_sim import CATEGORIES, IntermediateTokens, Scene

ALIGN_TASKS = ("counting", "position", "motion", "planning")
TASKS = ALIGN_TASKS + ("explanation", "command")
N_PLAN_POINTS = 4
TEMPLATE_VERSION = 1

PROMPTS = {
    "counting": "how many objects of each type are there?",
    "position": "what is the position of object {k}?",
    "motion": "what is the velocity of object {k}?",
    "planning": "what are the planned future waypoints?",
    "explanation": "describe the driving behavior and explain why.",
    "command": "what is the driving command?",
}

NARRATION = {
    "straight": ("the car is driving straight", "the car keeps going forward"),
    "left_turn": ("the car is turning left", "the car turns to the left"),
    "right_turn": ("the car is turning right", "the car turns to the right"),
    "stop": ("the car is stopping", "the car is slowing down and stopping"),
    "accelerate": ("the car is speeding up", "the car is accelerating"),
    "decelerate": ("the car is slowing down", "the car is decelerating"),
}
REASONING = {
    "blocked": ("because there is a {cat} ahead", "as a {cat} is in front of the car"),
    "gap": ("to keep a safe distance",),
    "clear": ("because the road ahead is clear", "since there is no object in front"),
    "close": ("while a {cat} is close ahead",),
    "route": ("to follow the route", "to follow the road"),
}
AHEAD_LATERAL = 8.0     # m either side of the ego lane counted as "ahead"
CLOSE_AHEAD = 15.0      # m


class InfeasibleTask(ValueError):
    """The requested task cannot be posed for this frame (e.g. no detections)."""


@dataclass
class AlignmentSample:
    task: str
    prompt: str
    answer: str
    ground: object
    scene_id: int
    instance_index: int | None = None
    references: list[str] = field(default_factory=list)

    def record(self) -> dict:
        return {"task": self.task, "prompt": self.prompt, "answer": self.answer,
                "ground": _jsonable(self.ground), "scene_id": self.scene_id}


def template_hash() -> str:
    blob = json.dumps({"v": TEMPLATE_VERSION, "p": PROMPTS, "n": NARRATION, "r": REASONING},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- canonical formatting --------------------------------------------------------------
def fmt1(x: float) -> str:
    """One decimal, halves rounded away from zero, on the shortest decimal repr of ``x``."""
    s = str(Decimal(repr(float(x))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))
    return "0.0" if s == "-0.0" else s


def round1(x: float) -> float:
    return float(fmt1(x))


def _pair(p) -> str:
    return f"({fmt1(p[0])}, {fmt1(p[1])})"


def format_answer(task: str, ground) -> str:
    if task == "counting":
        if len(ground) != len(CATEGORIES):
            raise ValueError(f"counting ground needs {len(CATEGORIES)} entries")
        return ", ".join(f"{c}: {int(n)}" for c, n in zip(CATEGORIES, ground))
    if task == "position":
        return f"(x, y) = {_pair(ground)}"
    if task == "motion":
        return f"(vx, vy) = {_pair(ground)}"
    if task == "planning":
        return "; ".join(_pair(p) for p in ground)
    if task == "command":
        return str(ground)
    raise ValueError(f"no canonical formatter for task {task!r}")


# --- alignment tasks -------------------------------------------------------------------
def gen_alignment_sample(task: str, tokens: IntermediateTokens, rng: Rng,
                         max_rank: int = 1) -> AlignmentSample:
    """Question about the AD stack's predictions stored in ``tokens.ad_pred``.

    Position and motion questions name an object by distance rank: ``object k``
    is the k-th nearest detection, k drawn from 1..min(max_rank, N_det).
    """
    pred = tokens.ad_pred
    if task == "counting":
        ground = pred.counts()
        return AlignmentSample(task, PROMPTS[task], format_answer(task, ground), ground, tokens.scene_id)
    if task in ("position", "motion"):
        if pred.n_det == 0:
            raise InfeasibleTask(f"{task} question needs at least one detection")
        rank = int(rng.integers(min(max_rank, pred.n_det)))
        idx = pred.distance_order()[rank]
        src = pred.positions if task == "position" else pred.velocities
        ground = (float(src[idx, 0]), float(src[idx, 1]))
        return AlignmentSample(task, PROMPTS[task].format(k=rank + 1), format_answer(task, ground),
                               ground, tokens.scene_id, instance_index=idx)
    if task == "planning":
        if len(pred.plan) < N_PLAN_POINTS:
            raise InfeasibleTask(f"plan has {len(pred.plan)} points, need {N_PLAN_POINTS}")
        ground = [(float(x), float(y)) for x, y in pred.plan[:N_PLAN_POINTS]]
        return AlignmentSample(task, PROMPTS[task], format_answer(task, ground), ground, tokens.scene_id)
    raise ValueError(f"unknown alignment task {task!r}")


# --- explanation ----------------------------------------------------------------------
def _ahead(scene: Scene):
    """Objects in front of the ego lane, nearest first; pedestrians before others."""
    objs = [o for o in scene.objects if o.position[0] > 0 and abs(o.position[1]) < AHEAD_LATERAL]
    objs.sort(key=lambda o: (o.category != "pedestrian", float(np.hypot(*o.position))))
    return objs


def reasoning_case(scene: Scene) -> tuple[str, str | None]:
    """(reasoning template group, object category or None) for a scene."""
    ahead = _ahead(scene)
    tag = scene.scenario_tag
    if tag in ("stop", "decelerate"):
        return ("blocked", ahead[0].category) if ahead else ("gap", None)
    if tag in ("left_turn", "right_turn"):
        return "route", None
    near = [o for o in ahead if np.hypot(*o.position) < CLOSE_AHEAD]
    if near:
        near.sort(key=lambda o: float(np.hypot(*o.position)))
        return "close", near[0].category
    return "clear", None


def explanation_variants(scene: Scene) -> list[str]:
    """Every caption the templates allow for this scene (the reference set)."""
    group, cat = reasoning_case(scene)
    return [f"<Narration> {n}. <Reasoning> {r.format(cat=cat)}."
            for n in NARRATION[scene.scenario_tag] for r in REASONING[group]]


def gen_explanation(scene: Scene, rng: Rng) -> AlignmentSample:
    group, cat = reasoning_case(scene)
    narr = NARRATION[scene.scenario_tag]
    reas = REASONING[group]
    i, j = int(rng.integers(len(narr))), int(rng.integers(len(reas)))
    caption = f"<Narration> {narr[i]}. <Reasoning> {reas[j].format(cat=cat)}."
    ground = {"tag": scene.scenario_tag, "narration": i, "reasoning": f"{group}/{j}", "object": cat}
    return AlignmentSample("explanation", PROMPTS["explanation"], caption, ground, scene.scene_id,
                           references=explanation_variants(scene))


# --- command ------------------------------------------------------------------------------
def gen_command_sample(scene: Scene) -> AlignmentSample:
    traj = scene.trajectory()
    if len(traj) < 3:
        raise ValueError(f"ego plan needs at least 2 points, got {len(scene.ego_plan)}")
    lab = command_labeler.label(traj)
    return AlignmentSample("command", PROMPTS["command"], format_answer("command", lab), lab, scene.scene_id)


# --- batches ---------------------------------------------------------------------------
@dataclass
class MixRatios:
    align: float = 4.0
    explanation: float = 1.0
    command: float = 1.0
    # relative weights of the four alignment tasks inside the ``align`` share
    counting: float = 1.0
    position: float = 1.0
    motion: float = 1.0
    planning: float = 1.0

    def task_probs(self) -> dict[str, float]:
        outer = np.array([self.align, self.explanation, self.command], dtype=float)
        inner = np.array([self.counting, self.position, self.motion, self.planning], dtype=float)
        if np.any(outer < 0) or np.any(inner < 0):
            raise ValueError("mix ratios must be nonnegative")
        if outer.sum() <= 0 or (self.align > 0 and inner.sum() <= 0):
            raise ValueError("mix ratios must have positive total mass")
        outer = outer / outer.sum()
        inner = inner / inner.sum() if inner.sum() > 0 else inner
        probs = {t: outer[0] * w for t, w in zip(ALIGN_TASKS, inner)}
        probs["explanation"], probs["command"] = outer[1], outer[2]
        return probs


MAX_RETRIES = 3


def make_sample(task: str, scene: Scene, tokens: IntermediateTokens, rng: Rng,
                max_rank: int = 1) -> AlignmentSample:
    if task == "explanation":
        return gen_explanation(scene, rng)
    if task == "command":
        return gen_command_sample(scene)
    return gen_alignment_sample(task, tokens, rng, max_rank)


def build_batch(frames: Sequence[tuple[Scene, IntermediateTokens]], ratios: MixRatios, rng: Rng,
                max_rank: int = 1) -> list[AlignmentSample]:
    """One sample per frame, task drawn by ``ratios``.

    An infeasible draw is redrawn up to ``MAX_RETRIES`` times, then the frame
    falls back to a counting question (always feasible).
    """
    probs = ratios.task_probs()
    names = list(probs)
    p = np.array([probs[n] for n in names])
    out = []
    for scene, tokens in frames:
        sample = None
        for _ in range(MAX_RETRIES + 1):
            task = names[int(rng.choice(len(names), p=p))]
            try:
                sample = make_sample(task, scene, tokens, rng, max_rank)
                break
            except InfeasibleTask:
                continue
        if sample is None:
            sample = gen_alignment_sample("counting", tokens, rng)
        out.append(sample)
    return out


def _jsonable(x):
    if isinstance(x, command_labeler.CommandLabel):
        return {"direction": x.direction, "velocity": x.velocity}
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def dump_samples(path, samples: Sequence[AlignmentSample], meta: dict | None = None) -> None:
    lines = []
    if meta is not None:
        lines.append(json.dumps({"meta": meta}, sort_keys=True))
    lines += [json.dumps(s.record(), sort_keys=True) for s in samples]
    Path(path).write_text("".join(line + "\n" for line in lines))
