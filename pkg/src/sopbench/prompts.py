"""Prompt/response serialization for the four training variants.

Layouts are fixed so samples are byte-reproducible::

    Given a mobile screen and a question, provide the action based on the screen information.
    SOP:                                   (sop variant only)
    id:0 search on the website,state:finish
    Previous Actions:
    id:0,type:DUAL_POINT,text:G,ui_type:ICON_GOOGLE
    Environment:
    id:0, text:Bass Headsets, type:TEXT
    Instruction: Search for the best rated headphones on Amazon.
    Answer:

Responses end in an action tail (``action: TYPE`` / ``text: ...``); the plan
variants put a ``PLAN:`` or ``PLAN&STATE:`` block in front of it.
"""

from __future__ import annotations

import enum
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

from .grounding import GroundingConfig, canonicalize_episode
from .model import (
    SIMPLE_ACTIONS,
    CanonicalAction,
    Click,
    Direction,
    Episode,
    Scroll,
    TypeText,
    action_token,
)
from .sop import EmptyPipeline, RuleSet, SopPipeline, State, build_pipeline, one_line, states_at_step

TASK_LINE = "Given a mobile screen and a question, provide the action based on the screen information."


class Variant(str, enum.Enum):
    BASE = "base"
    PLAN = "plan"
    PLAN_STATE = "plan_state"
    SOP = "sop"


class MissingPipeline(ValueError):
    pass


@dataclass(frozen=True)
class ParseFailure:
    text: str
    reason: str


@dataclass(frozen=True)
class PlanItem:
    id: int
    description: str
    state: Optional[State] = None


def _needs_pipeline(v: Variant, pipeline, where: str):
    if pipeline is None:
        raise MissingPipeline(f"{where} for variant {v.value} needs an SOP pipeline")


def sop_lines(p: SopPipeline, t: int) -> list[str]:
    return [f"id:{e.id} {one_line(e.description)},state:{s.value}" for e, s in states_at_step(p, t)]


def history_line(i: int, a: CanonicalAction) -> str:
    text, ui_type = (one_line(a.text), a.ui_type) if isinstance(a, Click) else ("", "")
    return f"id:{i},type:{action_token(a)},text:{text},ui_type:{ui_type}"


def render_prompt(
    e: Episode,
    t: int,
    canon_history: Sequence[CanonicalAction],
    pipeline: Optional[SopPipeline] = None,
    v: Variant = Variant.BASE,
    max_history: Optional[int] = None,
) -> str:
    if not 0 <= t < len(e.steps):
        raise IndexError(f"step {t} outside episode {e.episode_id} of length {len(e.steps)}")
    v = Variant(v)
    lines = [TASK_LINE]
    if v is Variant.SOP:
        _needs_pipeline(v, pipeline, "prompt")
        lines.append("SOP:")
        lines += sop_lines(pipeline, t)
    lines.append("Previous Actions:")
    history = list(enumerate(canon_history[:t]))
    if max_history is not None:
        history = history[max(0, len(history) - max_history):]
    lines += [history_line(i, a) for i, a in history]
    lines.append("Environment:")
    lines += [f"id:{el.id}, text:{one_line(el.text)}, type:{el.ui_type}" for el in e.steps[t].screen]
    lines.append(f"Instruction: {one_line(e.instruction)}")
    lines.append("Answer:")
    return "\n".join(lines)


def action_tail(a: CanonicalAction) -> str:
    if isinstance(a, Click):
        return f"action: DUAL_POINT\ntext: {a.text} type: {a.ui_type} id:{a.element_id}"
    if isinstance(a, TypeText):
        return f"action: TYPE\ntext: {a.text}"
    return f"action: {action_token(a)}"


def render_response(
    target: CanonicalAction,
    pipeline: Optional[SopPipeline] = None,
    t: int = 0,
    v: Variant = Variant.BASE,
) -> str:
    v = Variant(v)
    tail = action_tail(target)
    if v is Variant.PLAN:
        _needs_pipeline(v, pipeline, "response")
        head = ["PLAN:"] + [f"id:{e.id} {one_line(e.description)}" for e in pipeline.entries]
        return "\n".join(head + [tail])
    if v is Variant.PLAN_STATE:
        _needs_pipeline(v, pipeline, "response")
        return "\n".join(["PLAN&STATE:"] + sop_lines(pipeline, t) + [tail])
    return tail


# --- parsing ---------------------------------------------------------------

_ACTION_LINE = re.compile(r"^action(?: type)?:\s*(.*?)\s*$")
_CLICK_BODY = re.compile(r"^text: (.*) type: (\S*) id:(-?\d+)\s*$", re.S)
_PLAN_ITEM = re.compile(r"^id:(\d+) (.*)$")
_STATE_SUFFIX = re.compile(r"^(.*),state:(finish|unfinish)$")


def _parse_plan(header: str, lines: list[str]) -> Union[list[PlanItem], ParseFailure]:
    items = []
    for line in lines:
        m = _PLAN_ITEM.match(line)
        if not m:
            return ParseFailure(line, "malformed plan line")
        desc, state = m.group(2), None
        if header == "PLAN&STATE:":
            sm = _STATE_SUFFIX.match(desc)
            if not sm:
                return ParseFailure(line, "plan line without state")
            desc, state = sm.group(1), State(sm.group(2))
        items.append(PlanItem(int(m.group(1)), desc, state))
    return items


def _parse_tail(token: str, rest: str) -> Union[CanonicalAction, ParseFailure]:
    if token == "DUAL_POINT":
        m = _CLICK_BODY.match(rest)
        if not m:
            return ParseFailure(rest, "DUAL_POINT without 'text: .. type: .. id:N' line")
        return Click(int(m.group(3)), m.group(1), m.group(2))
    if token == "TYPE":
        if not rest.startswith("text:"):
            return ParseFailure(rest, "TYPE without text line")
        return TypeText(rest[6:] if rest.startswith("text: ") else rest[5:])
    if rest.strip():
        return ParseFailure(rest, f"unexpected text after {token}")
    if token.startswith("SCROLL"):
        parts = token.split()
        if len(parts) != 2 or parts[1] not in Direction.__members__:
            return ParseFailure(token, "bad scroll direction")
        return Scroll(Direction(parts[1]))
    if token in SIMPLE_ACTIONS:
        return SIMPLE_ACTIONS[token]()
    return ParseFailure(token, "unknown action type")


def parse_response(text: str) -> tuple[Union[CanonicalAction, ParseFailure], Optional[list[PlanItem]]]:
    """Inverse of :func:`render_response`.

    Accepts ``action type:`` as a synonym of ``action:``. Never raises;
    malformed input comes back as a :class:`ParseFailure`.
    """
    if not isinstance(text, str):
        return ParseFailure(repr(text), "response is not a string"), None
    lines = text.lstrip("\n").split("\n")
    plan = None
    start = 0
    if lines and lines[0].strip() in ("PLAN:", "PLAN&STATE:"):
        header = lines[0].strip()
        end = next((i for i in range(1, len(lines)) if _ACTION_LINE.match(lines[i])), None)
        if end is None:
            return ParseFailure(text, "plan block without action line"), None
        plan = _parse_plan(header, lines[1:end])
        if isinstance(plan, ParseFailure):
            return plan, None
        start = end
    m = _ACTION_LINE.match(lines[start]) if start < len(lines) else None
    if not m:
        return ParseFailure(text, "no action line"), plan
    rest = "\n".join(lines[start + 1:])
    return _parse_tail(m.group(1), rest), plan


# --- samples ---------------------------------------------------------------


def count_tokens(s: str) -> int:
    return len(s.split())


@dataclass(frozen=True)
class PromptSample:
    episode_id: str
    step_index: int
    variant: Variant
    prompt: str
    response: str
    sop_block: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "step_index": self.step_index,
            "variant": self.variant.value,
            "prompt": self.prompt,
            "response": self.response,
            "sop_block": self.sop_block,
            "meta": {"prompt_tokens": count_tokens(self.prompt), "response_tokens": count_tokens(self.response)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), ensure_ascii=False)

    @classmethod
    def from_record(cls, d: dict) -> "PromptSample":
        return cls(d["episode_id"], int(d["step_index"]), Variant(d["variant"]), d["prompt"], d["response"],
                   d.get("sop_block", ""), d.get("meta", {}))


def make_sample(e: Episode, t: int, canon: Sequence[CanonicalAction], pipeline: Optional[SopPipeline],
                v: Variant, max_history: Optional[int] = None) -> PromptSample:
    prompt = render_prompt(e, t, canon, pipeline, v, max_history)
    response = render_response(canon[t], pipeline, t, v)
    block = "SOP:\n" + "\n".join(sop_lines(pipeline, t)) if v is Variant.SOP else ""
    meta = {"prompt_tokens": count_tokens(prompt), "response_tokens": count_tokens(response)}
    return PromptSample(e.episode_id, t, v, prompt, response, block, meta)


@dataclass
class BuildStats:
    episodes: int = 0
    samples: int = 0
    skipped_ungrounded: int = 0
    skipped_episodes: int = 0  # no usable SOP pipeline

    def merge(self, other: "BuildStats") -> None:
        self.episodes += other.episodes
        self.samples += other.samples
        self.skipped_ungrounded += other.skipped_ungrounded
        self.skipped_episodes += other.skipped_episodes


def episode_samples(e: Episode, rules: RuleSet, cfg: GroundingConfig, v: Variant, mix: bool = False,
                    max_history: Optional[int] = None) -> tuple[list[PromptSample], BuildStats]:
    v = Variant(v)
    stats = BuildStats(episodes=1)
    outcomes = canonicalize_episode(e, cfg)
    canon = [o.action for o in outcomes]
    pipeline = None
    if v is not Variant.BASE:
        try:
            pipeline = build_pipeline(e, canon, rules)
        except EmptyPipeline:
            stats.skipped_episodes = 1
            return [], stats
    out = []
    for t, o in enumerate(outcomes):
        if not o.grounded:
            stats.skipped_ungrounded += 1
            continue
        out.append(make_sample(e, t, canon, pipeline, v, max_history))
        if mix and v is Variant.SOP:
            out.append(make_sample(e, t, canon, None, Variant.BASE, max_history))
    stats.samples = len(out)
    return out, stats


def _episode_job(args):
    return episode_samples(*args)


def build_dataset(
    corpus,
    rules: RuleSet,
    cfg: GroundingConfig = GroundingConfig(),
    v: Variant = Variant.BASE,
    mix: bool = False,
    max_history: Optional[int] = None,
    stats: Optional[BuildStats] = None,
    jobs: int = 1,
) -> Iterator[PromptSample]:
    """Yield one sample per grounded (episode, step), in corpus order.

    With ``mix`` and the SOP variant each SOP sample is followed by its
    base-variant twin. Counters accumulate into ``stats`` when given.
    """
    stats = stats if stats is not None else BuildStats()
    jobs_iter = ((e, rules, cfg, Variant(v), mix, max_history) for e in corpus)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for samples, s in pool.map(_episode_job, jobs_iter, chunksize=16):
                stats.merge(s)
                yield from samples
    else:
        for args in jobs_iter:
            samples, s = _episode_job(args)
            stats.merge(s)
            yield from samples
