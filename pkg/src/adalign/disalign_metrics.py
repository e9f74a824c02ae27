"""Disalignment between generated answers and the AD stack's predictions.

    CD  = sqrt(mean_k (c_text[k] - c_AD[k])^2)    over the 6 categories
    PD  = mean ||r_text - r_AD||                  queried object position
    MD  = mean ||v_text - v_AD||                  queried object velocity
    PLD = mean ||r_text(4) - r_AD(4)||            4th plan point (t = 2 s)

Answers are read with a strict parser that mirrors the canonical formatter.
Unparseable answers are left out of the means and reported as failure rates.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .align_tasks import ALIGN_TASKS, N_PLAN_POINTS, AlignmentSample, InfeasibleTask, gen_alignment_sample
from .numerics.rng import Rng
from .scene_sim import CATEGORIES, IntermediateTokens

_NUM = r"(-?\d+\.\d)"
_PAIR = rf"\({_NUM}, {_NUM}\)"
_POSITION = re.compile(rf"\(x, y\) = {_PAIR}")
_MOTION = re.compile(rf"\(vx, vy\) = {_PAIR}")
_POINT = re.compile(_PAIR)
_PLAN = re.compile(rf"{_PAIR}(?:; {_PAIR})*")
_COUNT = re.compile(r"([a-z_]+): (\d+)")


@dataclass(frozen=True)
class ParseFailure:
    task: str
    text: str
    reason: str

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class CountParse:
    counts: tuple[int, ...]
    missing: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.missing)


def parse(task: str, text: str):
    """Structured values from an answer, or a :class:`ParseFailure`."""
    s = text.strip()
    if task == "counting":
        entries = s.split(", ") if s else []
        found: dict[str, int] = {}
        for e in entries:
            m = _COUNT.fullmatch(e)
            if not m or m.group(1) not in CATEGORIES or m.group(1) in found:
                return ParseFailure(task, text, f"bad count entry {e!r}")
            found[m.group(1)] = int(m.group(2))
        if not found:
            return ParseFailure(task, text, "no category counts")
        missing = tuple(c for c in CATEGORIES if c not in found)
        return CountParse(tuple(found.get(c, 0) for c in CATEGORIES), missing)
    if task in ("position", "motion"):
        m = (_POSITION if task == "position" else _MOTION).fullmatch(s)
        if not m:
            return ParseFailure(task, text, f"not a {task} answer")
        return (float(m.group(1)), float(m.group(2)))
    if task == "planning":
        if not _PLAN.fullmatch(s):
            return ParseFailure(task, text, "not a list of (x, y) points")
        pts = [(float(a), float(b)) for a, b in _POINT.findall(s)]
        if len(pts) < N_PLAN_POINTS:
            return ParseFailure(task, text, f"{len(pts)} points, need {N_PLAN_POINTS}")
        return pts
    raise ValueError(f"no parser for task {task!r}")


# --- per-sample metrics ---------------------------------------------------------------
def counting_disalignment(c_text: Sequence[float], c_ad: Sequence[float]) -> float:
    a, b = np.asarray(c_text, dtype=float), np.asarray(c_ad, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"count vectors must have equal nonzero length, got {a.shape} and {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _dist(a, b) -> float:
    return float(math.hypot(float(a[0]) - float(b[0]), float(a[1]) - float(b[1])))


def position_disalignment(r_text, r_ad) -> float:
    return _dist(r_text, r_ad)


def motion_disalignment(v_text, v_ad) -> float:
    return _dist(v_text, v_ad)


def planning_disalignment(traj_text, traj_ad) -> float:
    if len(traj_text) < N_PLAN_POINTS or len(traj_ad) < N_PLAN_POINTS:
        raise ValueError(f"planning disalignment needs {N_PLAN_POINTS} points per trajectory")
    return _dist(traj_text[N_PLAN_POINTS - 1], traj_ad[N_PLAN_POINTS - 1])


METRIC_OF = {"counting": "cd", "position": "pd", "motion": "md", "planning": "pld"}


def sample_disalignment(sample: AlignmentSample, text: str):
    """(metric value or None, parse result) for one generated answer."""
    parsed = parse(sample.task, text)
    if isinstance(parsed, ParseFailure):
        return None, parsed
    if sample.task == "counting":
        return counting_disalignment(parsed.counts, sample.ground), parsed
    if sample.task == "position":
        return position_disalignment(parsed, sample.ground), parsed
    if sample.task == "motion":
        return motion_disalignment(parsed, sample.ground), parsed
    return planning_disalignment(parsed, sample.ground), parsed


# --- report ---------------------------------------------------------------------------
@dataclass
class DisalignmentReport:
    cd: float = float("nan")
    pd: float = float("nan")
    md: float = float("nan")
    pld: float = float("nan")
    n_samples: dict = field(default_factory=dict)
    n_parsed: dict = field(default_factory=dict)
    parse_failure_rate: dict = field(default_factory=dict)
    counting_incomplete_rate: float = 0.0

    def metrics(self) -> dict[str, float]:
        return {"cd": self.cd, "pd": self.pd, "md": self.md, "pld": self.pld}

    def to_kv(self) -> str:
        lines = [f"{k}={v:.6f}" for k, v in self.metrics().items()]
        for t in ALIGN_TASKS:
            lines.append(f"n_{t}={self.n_samples.get(t, 0)}")
            lines.append(f"parse_failure_{t}={self.parse_failure_rate.get(t, 0.0):.6f}")
        lines.append(f"counting_incomplete={self.counting_incomplete_rate:.6f}")
        return "\n".join(lines) + "\n"

    def to_record(self) -> dict:
        return asdict(self)


def report_from(samples: Sequence[AlignmentSample], answers: Sequence[str]) -> DisalignmentReport:
    if len(samples) != len(answers):
        raise ValueError("one answer per sample is required")
    values: dict[str, list[float]] = {t: [] for t in ALIGN_TASKS}
    totals = {t: 0 for t in ALIGN_TASKS}
    incomplete = 0
    for s, a in zip(samples, answers):
        if s.task not in values:
            continue
        totals[s.task] += 1
        v, parsed = sample_disalignment(s, a)
        if v is None:
            continue
        values[s.task].append(v)
        if isinstance(parsed, CountParse) and parsed.flagged:
            incomplete += 1
    rep = DisalignmentReport()
    for t in ALIGN_TASKS:
        vals = values[t]
        setattr(rep, METRIC_OF[t], float(np.mean(vals)) if vals else float("nan"))
        rep.n_samples[t] = totals[t]
        rep.n_parsed[t] = len(vals)
        rep.parse_failure_rate[t] = (1.0 - len(vals) / totals[t]) if totals[t] else 0.0
    rep.counting_incomplete_rate = incomplete / totals["counting"] if totals["counting"] else 0.0
    return rep


def alignment_questions(tokens: Sequence[IntermediateTokens], rng: Rng, max_rank: int = 1):
    """All four alignment questions for every frame (skipping infeasible ones)."""
    out = []
    for i, tk in enumerate(tokens):
        for task in ALIGN_TASKS:
            try:
                out.append((i, gen_alignment_sample(task, tk, rng.child(i), max_rank)))
            except InfeasibleTask:
                continue
    return out


AnswerFn = Callable[[Sequence[AlignmentSample], Sequence[IntermediateTokens]], list[str]]


def evaluate(answer_fn: AnswerFn, tokens: Sequence[IntermediateTokens], rng: Rng,
             max_rank: int = 1) -> DisalignmentReport:
    """Ask every alignment question about every frame and score the answers.

    ``answer_fn(samples, frame_tokens)`` returns one text per sample; the
    model wrapper decides what context it sees (aligned or BEV only).
    """
    qs = alignment_questions(tokens, rng, max_rank)
    samples = [s for _, s in qs]
    answers = answer_fn(samples, [tokens[i] for i, _ in qs])
    return report_from(samples, answers)


def oracle_answers(samples: Sequence[AlignmentSample], _tokens=None) -> list[str]:
    return [s.answer for s in samples]


def report_json(rep: DisalignmentReport) -> str:
    return json.dumps(rep.to_record(), sort_keys=True, indent=1) + "\n"
