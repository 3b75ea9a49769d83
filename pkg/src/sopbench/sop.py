"""Rule-table SOP annotation.

A :class:`RuleSet` maps each canonical action to a subtask description (or
to :data:`EXCLUDED`). :func:`build_pipeline` collapses an episode's
descriptions into an ordered list of :class:`SopEntry` spans, and
:func:`states_at_step` marks which of them are already done at a step.
"""

from __future__ import annotations

import enum
import json
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Callable, Iterable, Optional, Sequence, Union

from .model import (
    CanonicalAction,
    Click,
    Episode,
    PressBack,
    PressEnter,
    PressHome,
    Scroll,
    TaskComplete,
    TaskImpossible,
    TypeText,
)


class SopError(Exception):
    pass


class EmptyPipeline(SopError):
    def __init__(self, episode_id: str):
        super().__init__(f"episode {episode_id}: every step is excluded, no SOP pipeline")
        self.episode_id = episode_id


class RuleSetError(SopError):
    pass


class _Excluded:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "EXCLUDED"

    def __reduce__(self):
        return (_Excluded, ())


EXCLUDED = _Excluded()

MATCH_ON = ("kind", "text", "ui_type")
# kind patterns accepted in rule files
KIND_PATTERNS = {
    "click": Click,
    "scroll": Scroll,
    "type": TypeText,
    "press_back": PressBack,
    "press_home": PressHome,
    "press_enter": PressEnter,
    "status_complete": TaskComplete,
    "status_impossible": TaskImpossible,
}
_SPECIFICITY = {"text": 2, "ui_type": 1, "kind": 0}

TASK_COMPLETE = "task complete"
TYPE_TEMPLATE = "type '*'"


def normalize_text(s: str) -> str:
    return " ".join(s.split()).lower()


def one_line(s: str) -> str:
    return s.replace("\r", " ").replace("\n", " ")


def fill_type_slot(description: str, text: str) -> str:
    return description.replace("*", one_line(text), 1)


@dataclass(frozen=True)
class SopRule:
    match_on: str
    pattern: str
    description: str = ""
    excluded: bool = False
    priority: int = 0
    mode: str = "exact"  # text matchers only: exact | contains (whole-word phrase)
    source: str = ""

    def __post_init__(self):
        if self.match_on not in MATCH_ON:
            raise RuleSetError(f"match_on must be one of {MATCH_ON}, got {self.match_on!r}")
        if self.match_on == "kind" and self.pattern != "*" and self.pattern not in KIND_PATTERNS:
            raise RuleSetError(f"unknown kind pattern {self.pattern!r}")
        if self.mode not in ("exact", "contains"):
            raise RuleSetError(f"unknown text match mode {self.mode!r}")
        if not self.excluded and not self.description:
            raise RuleSetError(f"rule {self.match_on}:{self.pattern} needs a description")

    @cached_property
    def _regex(self):
        return re.compile(r"(?<!\w)" + re.escape(normalize_text(self.pattern)) + r"(?!\w)")

    def matches(self, action: CanonicalAction) -> bool:
        if self.match_on == "kind":
            return self.pattern == "*" or isinstance(action, KIND_PATTERNS[self.pattern])
        if not isinstance(action, Click):
            return False
        if self.match_on == "ui_type":
            return action.ui_type.lower() == self.pattern.lower()
        text = normalize_text(action.text)
        if self.mode == "exact":
            return text == normalize_text(self.pattern)
        return self._regex.search(text) is not None

    def rank(self, order: int) -> tuple:
        # higher wins: priority, then text > ui_type > kind, exact over contains,
        # longer pattern; earlier rule in the file wins the remaining ties
        return (self.priority, _SPECIFICITY[self.match_on], self.mode == "exact", len(self.pattern), -order)

    def to_record(self) -> dict:
        d = {
            "match_on": self.match_on,
            "pattern": self.pattern,
            "description": self.description,
            "excluded": self.excluded,
            "priority": self.priority,
        }
        if self.match_on == "text":
            d["mode"] = self.mode
        if self.source:
            d["source"] = self.source
        return d

    @classmethod
    def from_record(cls, d: dict) -> "SopRule":
        unknown = set(d) - {"match_on", "pattern", "description", "excluded", "priority", "mode", "source"}
        if unknown:
            raise RuleSetError(f"unknown rule fields {sorted(unknown)}")
        return cls(
            match_on=d["match_on"],
            pattern=str(d["pattern"]),
            description=d.get("description") or "",
            excluded=bool(d.get("excluded", False)),
            priority=int(d.get("priority", 0)),
            mode=d.get("mode", "exact"),
            source=d.get("source", ""),
        )


BUNDLED_RULESETS = ("aitw", "aia_medical")


@dataclass(frozen=True)
class RuleSet:
    name: str
    rules: tuple[SopRule, ...]

    def __post_init__(self):
        if not self.rules:
            raise RuleSetError(f"rule set {self.name!r} is empty")
        if not any(r.match_on == "kind" and r.pattern == "*" for r in self.rules):
            raise RuleSetError(f"rule set {self.name!r} has no catch-all (kind '*') rule")

    @classmethod
    def load(cls, name_or_path: str) -> "RuleSet":
        """Load a bundled set by name (``aitw``, ``aia_medical``) or a rule file path."""
        if name_or_path in BUNDLED_RULESETS:
            text = resources.files("sopbench").joinpath("rules").joinpath(f"{name_or_path}.jsonl").read_text("utf-8")
            return cls.from_lines(name_or_path, text.splitlines())
        with open(name_or_path, encoding="utf-8") as f:
            name = os.path.splitext(os.path.basename(name_or_path))[0]
            return cls.from_lines(name, f)

    @classmethod
    def from_lines(cls, name: str, lines: Iterable[str]) -> "RuleSet":
        rules = []
        for n, line in enumerate(lines, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rules.append(SopRule.from_record(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise RuleSetError(f"{name}: line {n}: {exc}") from exc
        return cls(name, tuple(rules))

    def extended(self, extra: Iterable[SopRule]) -> "RuleSet":
        return RuleSet(self.name, self.rules + tuple(extra))

    def dump(self) -> str:
        return "".join(json.dumps(r.to_record()) + "\n" for r in self.rules)

    def winning_rule(self, action: CanonicalAction) -> SopRule:
        best, best_rank = None, None
        for i, rule in enumerate(self.rules):
            if rule.matches(action):
                rank = rule.rank(i)
                if best_rank is None or rank > best_rank:
                    best, best_rank = rule, rank
        # the catch-all guarantees a match
        return best

    @cached_property
    def kind_descriptions(self) -> dict:
        """description -> action class for descriptions emitted by non-click kind rules."""
        out = {}
        for rule in self.rules:
            if rule.match_on == "kind" and not rule.excluded and rule.pattern not in ("*", "click", "type"):
                out.setdefault(rule.description, KIND_PATTERNS[rule.pattern])
        return out

    @cached_property
    def type_templates(self) -> tuple:
        return tuple(
            r.description for r in self.rules
            if r.match_on == "kind" and r.pattern == "type" and not r.excluded
        )


def classify_action(action: CanonicalAction, rules: RuleSet) -> Union[str, _Excluded]:
    rule = rules.winning_rule(action)
    if rule.excluded:
        return EXCLUDED
    if isinstance(action, TypeText):
        return fill_type_slot(rule.description, action.text)
    return rule.description


ClickTextClassifier = Callable[[str], str]


class KeywordClassifier:
    """Keyword stand-in for a trained click-text classifier.

    Returns the winning text rule's description; anything unmatched or
    matched by a description-less exclusion reads as ``Others``.
    """

    def __init__(self, rules: RuleSet, fallback: str = "Others"):
        self.rules = rules
        self.fallback = fallback

    def __call__(self, text: str) -> str:
        rule = self.rules.winning_rule(Click(0, text, ""))
        return rule.description or self.fallback


def classify_click_text(text: str, rules: RuleSet, classifier: Optional[ClickTextClassifier] = None) -> str:
    return (classifier or KeywordClassifier(rules))(text)


@dataclass(frozen=True)
class SopEntry:
    id: int
    description: str
    first_step: int
    last_step: int


@dataclass(frozen=True)
class SopPipeline:
    entries: tuple[SopEntry, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def descriptions(self) -> list[str]:
        return [e.description for e in self.entries]

    def to_record(self) -> list[dict]:
        return [
            {"id": e.id, "description": e.description, "first_step": e.first_step, "last_step": e.last_step}
            for e in self.entries
        ]

    @classmethod
    def from_record(cls, rows: Sequence[dict]) -> "SopPipeline":
        return cls(tuple(SopEntry(r["id"], r["description"], r["first_step"], r["last_step"]) for r in rows))


def build_pipeline(e: Episode, canon: Sequence[CanonicalAction], rules: RuleSet) -> SopPipeline:
    """Drop excluded steps and merge runs of identical descriptions.

    Ungrounded clicks carry no usable element and are treated as excluded.
    """
    if len(canon) != len(e.steps):
        raise ValueError(f"episode {e.episode_id}: {len(canon)} actions for {len(e.steps)} steps")
    spans: list[list] = []
    for t, action in enumerate(canon):
        if isinstance(action, Click) and not action.grounded:
            continue
        desc = classify_action(action, rules)
        if desc is EXCLUDED:
            continue
        if spans and spans[-1][0] == desc:
            spans[-1][2] = t
        else:
            spans.append([desc, t, t])
    if not spans:
        raise EmptyPipeline(e.episode_id)
    return SopPipeline(tuple(SopEntry(i, d, a, b) for i, (d, a, b) in enumerate(spans)))


class State(str, enum.Enum):
    FINISH = "finish"
    UNFINISH = "unfinish"


def states_at_step(p: SopPipeline, t: int) -> list[tuple[SopEntry, State]]:
    return [(e, State.FINISH if e.last_step < t else State.UNFINISH) for e in p.entries]
