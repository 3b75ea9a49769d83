"""Prediction policies and the episode replay loop."""

from __future__ import annotations

import json
import logging
import random
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .grounding import GroundingConfig, canonicalize_episode
from .model import (
    CanonicalAction,
    Click,
    Direction,
    Episode,
    PressBack,
    PressEnter,
    PressHome,
    Scroll,
    TaskComplete,
    TaskImpossible,
    TypeText,
    UiElement,
)
from .prompts import MissingPipeline, ParseFailure, Variant, parse_response, render_prompt
from .sop import TASK_COMPLETE, EmptyPipeline, RuleSet, SopPipeline, State, build_pipeline, classify_action, states_at_step
from .structured import reading_order

log = logging.getLogger(__name__)


class EndpointUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyContext:
    episode: Episode
    step_index: int
    history: tuple[CanonicalAction, ...]
    screen: tuple[UiElement, ...]
    pipeline: Optional[SopPipeline] = None
    # filled only in teacher-forced replay
    gold: Optional[CanonicalAction] = None

    @property
    def instruction(self) -> str:
        return self.episode.instruction

    def states(self):
        if self.pipeline is None:
            return None
        return states_at_step(self.pipeline, self.step_index)


Policy = Callable[[PolicyContext], "CanonicalAction | ParseFailure"]


def oracle_policy(ctx: PolicyContext, gold: Optional[CanonicalAction] = None) -> CanonicalAction:
    gold = gold if gold is not None else ctx.gold
    if gold is None:
        raise ValueError("oracle policy needs the gold action (teacher-forced replay)")
    return gold


class RuleSopPolicy:
    """Acts out the first unfinished SOP entry by inverting the rule table."""

    def __init__(self, rules: RuleSet):
        self.rules = rules

    def _typed_text(self, description: str) -> Optional[str]:
        for template in self.rules.type_templates:
            head, _, tail = template.partition("*")
            if description.startswith(head) and description.endswith(tail) and len(description) >= len(head) + len(tail):
                return description[len(head):len(description) - len(tail)]
        return None

    def __call__(self, ctx: PolicyContext) -> CanonicalAction:
        if ctx.pipeline is None:
            raise MissingPipeline("rule_sop policy needs an SOP pipeline")
        pending = [e for e, s in states_at_step(ctx.pipeline, ctx.step_index) if s is State.UNFINISH]
        if not pending:
            return TaskComplete()
        desc = pending[0].description
        if desc == TASK_COMPLETE:
            return TaskComplete()
        text = self._typed_text(desc)
        if text is not None:
            return TypeText(text)
        for el in reading_order(ctx.screen):
            action = Click.on(el)
            if classify_action(action, self.rules) == desc:
                return action
        kind_cls = self.rules.kind_descriptions.get(desc)
        if kind_cls is Scroll:
            return Scroll(Direction.DOWN)
        if kind_cls is not None:
            return kind_cls()
        # exploration fallback
        return Scroll(Direction.DOWN)


def rule_sop_policy(ctx: PolicyContext, rules: RuleSet) -> CanonicalAction:
    return RuleSopPolicy(rules)(ctx)


class RandomPolicy:
    """Uniform over action kinds; clicks a uniform element, types a screen word."""

    KINDS = ("click", "scroll", "type", "back", "home", "enter", "complete", "impossible")

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, ctx: PolicyContext) -> CanonicalAction:
        rng = random.Random(f"{self.seed}:{ctx.episode.episode_id}:{ctx.step_index}")
        kind = rng.choice(self.KINDS)
        if kind == "click":
            if not ctx.screen:
                return Scroll(Direction.DOWN)
            return Click.on(rng.choice(ctx.screen))
        if kind == "scroll":
            return Scroll(rng.choice(list(Direction)))
        if kind == "type":
            words = [w for el in ctx.screen for w in el.text.split()] or ["hello"]
            return TypeText(" ".join(rng.sample(words, min(len(words), rng.randint(1, 3)))))
        return {"back": PressBack, "home": PressHome, "enter": PressEnter,
                "complete": TaskComplete, "impossible": TaskImpossible}[kind]()


# --- remote ----------------------------------------------------------------


@dataclass(frozen=True)
class RemoteEndpoint:
    url: str
    timeout: int = 30000  # ms
    max_retries: int = 2
    max_concurrency: int = 8

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("remote timeout must be > 0")
        if self.max_retries < 0 or self.max_concurrency < 1:
            raise ValueError("max_retries must be >= 0 and max_concurrency >= 1")


class RemotePolicy:
    """POSTs the rendered prompt and parses the model's reply.

    One instance shares a concurrency limit across every thread using it.
    Episode id and step index travel as headers so a replay stub can key
    its answers; the body is only ``{"prompt": ...}``.
    """

    def __init__(self, endpoint: RemoteEndpoint, variant: Variant = Variant.BASE, max_history: Optional[int] = None,
                 backoff: float = 0.05):
        self.endpoint = endpoint
        self.variant = Variant(variant)
        self.max_history = max_history
        self.backoff = backoff
        self._limit = threading.BoundedSemaphore(endpoint.max_concurrency)

    def post(self, prompt: str, headers: Optional[dict] = None) -> str:
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        hdrs = {"Content-Type": "application/json", **(headers or {})}
        last = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            req = urllib.request.Request(self.endpoint.url, data=body, headers=hdrs, method="POST")
            try:
                with self._limit:
                    with urllib.request.urlopen(req, timeout=self.endpoint.timeout / 1000.0) as resp:
                        if resp.status != 200:
                            raise urllib.error.HTTPError(self.endpoint.url, resp.status, "non-200", resp.headers, None)
                        payload = json.loads(resp.read().decode("utf-8"))
                text = payload["text"]
                if not isinstance(text, str):
                    raise ValueError("'text' is not a string")
                return text
            except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
                last = exc
                log.debug("remote attempt %d failed: %s", attempt + 1, exc)
        raise EndpointUnavailable(f"{self.endpoint.url}: {last}")

    def __call__(self, ctx: PolicyContext):
        prompt = render_prompt(ctx.episode, ctx.step_index, ctx.history, ctx.pipeline, self.variant, self.max_history)
        text = self.post(prompt, {"X-Episode-Id": ctx.episode.episode_id, "X-Step-Index": str(ctx.step_index)})
        action, _plan = parse_response(text)
        return action


def remote_policy(ctx: PolicyContext, v: Variant, ep: RemoteEndpoint):
    return RemotePolicy(ep, v)(ctx)


# --- replay ----------------------------------------------------------------


@dataclass(frozen=True)
class ReplayStep:
    index: int
    gold: Optional[CanonicalAction]
    predicted: "CanonicalAction | ParseFailure | None"
    grounded: bool = True
    error: str = ""

    @property
    def unevaluated(self) -> bool:
        return self.predicted is None

    def __iter__(self):
        # unpacks as (gold, predicted)
        return iter((self.gold, self.predicted))


@dataclass
class Replay:
    episode: Episode
    steps: list[ReplayStep] = field(default_factory=list)
    endpoint_failure: bool = False

    @property
    def pairs(self):
        return [(s.gold, s.predicted) for s in self.steps]


def replay_episode(
    e: Episode,
    policy: Policy,
    mode: str = "teacher_forced",
    rules: Optional[RuleSet] = None,
    cfg: GroundingConfig = GroundingConfig(),
    step_cap: Optional[int] = None,
) -> Replay:
    """Drive ``policy`` over one episode.

    Teacher forcing feeds the gold history at every step. Free running feeds
    the policy's own predictions, reuses the last recorded screen past the
    end, and stops on a terminal status or at ``step_cap`` (2x length).
    An unreachable endpoint marks the remaining steps unevaluated.
    """
    if mode not in ("teacher_forced", "free_running"):
        raise ValueError(f"unknown replay mode {mode!r}")
    outcomes = canonicalize_episode(e, cfg)
    gold = [o.action for o in outcomes]
    pipeline = None
    if rules is not None:
        try:
            pipeline = build_pipeline(e, gold, rules)
        except EmptyPipeline:
            pipeline = None
    out = Replay(e)
    n = len(e.steps)

    if mode == "teacher_forced":
        for t in range(n):
            if out.endpoint_failure:
                out.steps.append(ReplayStep(t, gold[t], None, outcomes[t].grounded, "endpoint unavailable"))
                continue
            ctx = PolicyContext(e, t, tuple(gold[:t]), e.steps[t].screen, pipeline, gold[t])
            out.steps.append(_predict(policy, ctx, t, gold[t], outcomes[t].grounded, out))
        return out

    cap = step_cap if step_cap is not None else 2 * n
    history: list = []
    for t in range(cap):
        screen = e.steps[min(t, n - 1)].screen
        g = gold[t] if t < n else None
        ctx = PolicyContext(e, t, tuple(history), screen, pipeline)
        step = _predict(policy, ctx, t, g, outcomes[t].grounded if t < n else True, out)
        out.steps.append(step)
        if step.predicted is None or out.endpoint_failure:
            break
        history.append(step.predicted)
        if isinstance(step.predicted, (TaskComplete, TaskImpossible)):
            break
    return out


def _predict(policy, ctx, t, gold, grounded, replay: Replay) -> ReplayStep:
    try:
        return ReplayStep(t, gold, policy(ctx), grounded)
    except EndpointUnavailable as exc:
        replay.endpoint_failure = True
        return ReplayStep(t, gold, None, grounded, str(exc))
    except Exception as exc:  # policy bugs become unevaluated steps, never abort a batch
        log.warning("policy failed on %s step %d: %s", ctx.episode.episode_id, t, exc)
        return ReplayStep(t, gold, None, grounded, f"{type(exc).__name__}: {exc}")
