"""Enlarged-element grounding of raw gestures.

Taps are resolved to the element whose bounding box, grown on every side
by a fraction of its own size, contains the touch point. Swipes are reduced
to their dominant direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .model import (
    ActionKind,
    BBox,
    CanonicalAction,
    Click,
    Direction,
    Point,
    PressBack,
    PressEnter,
    PressHome,
    RawAction,
    Scroll,
    TaskComplete,
    TaskImpossible,
    TypeText,
    UiElement,
    UNGROUNDED_ID,
)


@dataclass(frozen=True)
class GroundingConfig:
    expand_fraction: float = 0.10
    click_threshold: float = 0.04
    max_fallback_distance: float = 0.15

    def __post_init__(self):
        for name in ("expand_fraction", "click_threshold", "max_fallback_distance"):
            if getattr(self, name) < 0:
                raise ValueError(f"grounding.{name} must be >= 0")
        if self.click_threshold >= 1:
            raise ValueError("grounding.click_threshold must be < 1")


@dataclass(frozen=True)
class GroundingOutcome:
    action: CanonicalAction
    grounded: bool = True
    candidates_considered: int = 0
    # "containment", "fallback" or "" (no element lookup happened / failed)
    method: str = ""


_PASSTHROUGH = {
    ActionKind.PRESS_BACK: PressBack,
    ActionKind.PRESS_HOME: PressHome,
    ActionKind.PRESS_ENTER: PressEnter,
    ActionKind.STATUS_TASK_COMPLETE: TaskComplete,
    ActionKind.STATUS_TASK_IMPOSSIBLE: TaskImpossible,
}


def expand_bbox(e: UiElement, expand_fraction: float) -> BBox:
    x0, y0, x1, y1 = e.bbox
    dx = expand_fraction * (x1 - x0)
    dy = expand_fraction * (y1 - y0)
    return (max(0.0, x0 - dx), max(0.0, y0 - dy), min(1.0, x1 + dx), min(1.0, y1 + dy))


def bbox_contains(bbox: BBox, p: Point) -> bool:
    x, y = p
    return bbox[0] <= x <= bbox[2] and bbox[1] <= y <= bbox[3]


def _dist(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def swipe_direction(touch: Point, lift: Point) -> Direction:
    dx = lift[0] - touch[0]
    dy = lift[1] - touch[1]
    # ties go to the vertical axis
    if abs(dy) >= abs(dx):
        return Direction.DOWN if dy > 0 else Direction.UP
    return Direction.RIGHT if dx > 0 else Direction.LEFT


def resolve_click(point: Point, screen: Sequence[UiElement], cfg: GroundingConfig) -> GroundingOutcome:
    hits = [el for el in screen if bbox_contains(expand_bbox(el, cfg.expand_fraction), point)]
    if hits:
        best = min(hits, key=lambda el: (_dist(point, el.center), el.id))
        return GroundingOutcome(Click.on(best), True, len(hits), "containment")

    near = [el for el in screen if _dist(point, el.center) <= cfg.max_fallback_distance]
    if near:
        best = min(near, key=lambda el: (_dist(point, el.center), el.id))
        return GroundingOutcome(Click.on(best), True, len(near), "fallback")
    return GroundingOutcome(Click(UNGROUNDED_ID), False, 0, "")


def canonicalize(raw: RawAction, screen: Sequence[UiElement], cfg: GroundingConfig = GroundingConfig()) -> GroundingOutcome:
    if raw.kind in _PASSTHROUGH:
        return GroundingOutcome(_PASSTHROUGH[raw.kind]())
    if raw.kind is ActionKind.TYPE:
        return GroundingOutcome(TypeText(raw.typed_text or ""))
    if _dist(raw.touch, raw.lift) <= cfg.click_threshold:
        return resolve_click(tuple(raw.touch), screen, cfg)
    return GroundingOutcome(Scroll(swipe_direction(raw.touch, raw.lift)))


def canonicalize_episode(episode, cfg: GroundingConfig = GroundingConfig()) -> list[GroundingOutcome]:
    return [canonicalize(s.action, s.screen, cfg) for s in episode.steps]
