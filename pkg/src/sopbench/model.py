"""Core episode types.

Everything here is an immutable value. Construction does not validate;
call :func:`validate_episode` (ingestion always does).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Optional, Tuple, Union

Point = Tuple[float, float]
BBox = Tuple[float, float, float, float]

SENTINEL: Point = (-1.0, -1.0)


class ActionKind(str, enum.Enum):
    DUAL_POINT = "DUAL_POINT"
    TYPE = "TYPE"
    PRESS_BACK = "PRESS_BACK"
    PRESS_HOME = "PRESS_HOME"
    PRESS_ENTER = "PRESS_ENTER"
    STATUS_TASK_COMPLETE = "STATUS_TASK_COMPLETE"
    STATUS_TASK_IMPOSSIBLE = "STATUS_TASK_IMPOSSIBLE"


TERMINAL_KINDS = frozenset({ActionKind.STATUS_TASK_COMPLETE, ActionKind.STATUS_TASK_IMPOSSIBLE})

KNOWN_SUBSETS = ("general", "install", "google_apps", "single", "web_shopping")

SUBSET_DISPLAY = {
    "general": "General",
    "install": "Install",
    "google_apps": "GoogleApps",
    "single": "Single",
    "web_shopping": "WebShopping",
}


@dataclass(frozen=True)
class UiElement:
    id: int
    text: str
    ui_type: str
    bbox: BBox

    @property
    def center(self) -> Point:
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)

    @property
    def width(self) -> float:
        return self.bbox[2] - self.bbox[0]

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]


@dataclass(frozen=True)
class RawAction:
    kind: ActionKind
    touch: Point = SENTINEL
    lift: Point = SENTINEL
    typed_text: Optional[str] = None

    @classmethod
    def tap(cls, x: float, y: float) -> "RawAction":
        return cls(ActionKind.DUAL_POINT, (x, y), (x, y))

    @classmethod
    def swipe(cls, touch: Point, lift: Point) -> "RawAction":
        return cls(ActionKind.DUAL_POINT, tuple(touch), tuple(lift))

    @classmethod
    def type_text(cls, text: str) -> "RawAction":
        return cls(ActionKind.TYPE, typed_text=text)


@dataclass(frozen=True)
class Step:
    index: int
    screen: Tuple[UiElement, ...]
    action: RawAction


@dataclass(frozen=True)
class Episode:
    episode_id: str
    subset: str
    instruction: str
    steps: Tuple[Step, ...]

    def __len__(self) -> int:
        return len(self.steps)


# --- canonical (element-level) action space -------------------------------


class Direction(str, enum.Enum):
    UP = "UP"
    DOWN = "DOWN"
    LEFT = "LEFT"
    RIGHT = "RIGHT"


UNGROUNDED_ID = -1


@dataclass(frozen=True)
class Click:
    element_id: int
    text: str = ""
    ui_type: str = ""

    @classmethod
    def on(cls, element: UiElement) -> "Click":
        return cls(element.id, element.text, element.ui_type)

    @property
    def grounded(self) -> bool:
        return self.element_id != UNGROUNDED_ID


@dataclass(frozen=True)
class Scroll:
    direction: Direction


@dataclass(frozen=True)
class TypeText:
    text: str


@dataclass(frozen=True)
class PressBack:
    pass


@dataclass(frozen=True)
class PressHome:
    pass


@dataclass(frozen=True)
class PressEnter:
    pass


@dataclass(frozen=True)
class TaskComplete:
    pass


@dataclass(frozen=True)
class TaskImpossible:
    pass


CanonicalAction = Union[Click, Scroll, TypeText, PressBack, PressHome, PressEnter, TaskComplete, TaskImpossible]

# token used in prompts/responses for each canonical variant
_SIMPLE_TOKENS = {
    PressBack: "PRESS_BACK",
    PressHome: "PRESS_HOME",
    PressEnter: "PRESS_ENTER",
    TaskComplete: "TASK_COMPLETE",
    TaskImpossible: "TASK_IMPOSSIBLE",
}
SIMPLE_ACTIONS = {token: cls for cls, token in _SIMPLE_TOKENS.items()}


def action_token(action: CanonicalAction) -> str:
    """The ``KIND`` token shown for an action, e.g. ``DUAL_POINT`` or ``SCROLL DOWN``."""
    if isinstance(action, Click):
        return "DUAL_POINT"
    if isinstance(action, Scroll):
        return f"SCROLL {action.direction.value}"
    if isinstance(action, TypeText):
        return "TYPE"
    return _SIMPLE_TOKENS[type(action)]


def action_to_dict(action: CanonicalAction) -> dict:
    if isinstance(action, Click):
        return {"type": "CLICK", "element_id": action.element_id, "text": action.text, "ui_type": action.ui_type}
    if isinstance(action, Scroll):
        return {"type": "SCROLL", "direction": action.direction.value}
    if isinstance(action, TypeText):
        return {"type": "TYPE", "text": action.text}
    return {"type": _SIMPLE_TOKENS[type(action)]}


def action_from_dict(d: dict) -> CanonicalAction:
    kind = d["type"]
    if kind == "CLICK":
        return Click(int(d["element_id"]), d.get("text", ""), d.get("ui_type", ""))
    if kind == "SCROLL":
        return Scroll(Direction(d["direction"]))
    if kind == "TYPE":
        return TypeText(d["text"])
    try:
        return SIMPLE_ACTIONS[kind]()
    except KeyError:
        raise ValueError(f"unknown canonical action type {kind!r}") from None


# --- validation ------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    step_index: Optional[int]
    field: str
    message: str

    def __str__(self) -> str:
        where = "episode" if self.step_index is None else f"step {self.step_index}"
        return f"{where}: {self.field}: {self.message}"


def _in_unit_square(p: Any) -> bool:
    return len(p) == 2 and all(0.0 <= v <= 1.0 for v in p)


def _check_element(step: int, pos: int, el: UiElement, out: list) -> None:
    where = f"screen[{pos}]"
    if not isinstance(el.id, int) or el.id < 0:
        out.append(Finding(step, f"{where}.id", f"id must be a non-negative integer, got {el.id!r}"))
    if len(el.bbox) != 4:
        out.append(Finding(step, f"{where}.bbox", "bbox must have 4 coordinates"))
        return
    x0, y0, x1, y1 = el.bbox
    if not (0.0 <= x0 < x1 <= 1.0):
        out.append(Finding(step, f"{where}.bbox", f"element {el.id}: need 0 <= x_min < x_max <= 1, got ({x0}, {x1})"))
    if not (0.0 <= y0 < y1 <= 1.0):
        out.append(Finding(step, f"{where}.bbox", f"element {el.id}: need 0 <= y_min < y_max <= 1, got ({y0}, {y1})"))


def _check_action(step: int, a: RawAction, out: list) -> None:
    if not isinstance(a.kind, ActionKind):
        out.append(Finding(step, "action.kind", f"unknown action kind {a.kind!r}"))
        return
    if a.kind is ActionKind.DUAL_POINT:
        if not _in_unit_square(a.touch):
            out.append(Finding(step, "action.touch", f"DUAL_POINT touch outside [0,1]^2: {a.touch}"))
        if not _in_unit_square(a.lift):
            out.append(Finding(step, "action.lift", f"DUAL_POINT lift outside [0,1]^2: {a.lift}"))
    else:
        if tuple(a.touch) != SENTINEL:
            out.append(Finding(step, "action.touch", f"{a.kind.value} must carry sentinel touch (-1,-1)"))
        if tuple(a.lift) != SENTINEL:
            out.append(Finding(step, "action.lift", f"{a.kind.value} must carry sentinel lift (-1,-1)"))
    if a.kind is ActionKind.TYPE and a.typed_text is None:
        out.append(Finding(step, "action.typed_text", "TYPE action without typed_text"))
    if a.kind is not ActionKind.TYPE and a.typed_text is not None:
        out.append(Finding(step, "action.typed_text", f"typed_text present on {a.kind.value}"))


def validate_episode(e: Episode) -> list[Finding]:
    """Check every type invariant; an empty list means the episode is well formed."""
    out: list[Finding] = []
    if not e.episode_id:
        out.append(Finding(None, "episode_id", "empty episode_id"))
    if not e.steps:
        out.append(Finding(None, "steps", "episode has no steps"))
    for pos, step in enumerate(e.steps):
        if step.index != pos:
            out.append(Finding(pos, "index", f"step index {step.index} at position {pos}"))
        ids = [el.id for el in step.screen]
        if len(set(ids)) != len(ids):
            out.append(Finding(pos, "screen", "duplicate element ids"))
        elif sorted(ids) != list(range(len(ids))):
            out.append(Finding(pos, "screen", "element ids are not contiguous from 0"))
        for j, el in enumerate(step.screen):
            _check_element(pos, j, el, out)
        _check_action(pos, step.action, out)

    terminal = [i for i, s in enumerate(e.steps) if s.action.kind in TERMINAL_KINDS]
    if len(terminal) > 1:
        out.append(Finding(terminal[1], "action.kind", "more than one terminal status action"))
    if terminal and terminal[0] != len(e.steps) - 1:
        out.append(Finding(terminal[0], "action.kind", "terminal status not final"))
    return out
