"""Confirmation / authorization / slot-selection pages turned into chat payloads.

Detection is keyword and layout based. ``RuleDetector`` is the default; any
callable ``screen -> kind | None`` can stand in for it.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .model import Click, UiElement


class PayloadKind(str, enum.Enum):
    PRIVACY_AUTHORIZATION = "privacy_authorization"
    NOTIFICATION_CONFIRMATION = "notification_confirmation"
    SLOT_SELECTION = "slot_selection"


CONFIRMATION_KINDS = (PayloadKind.PRIVACY_AUTHORIZATION, PayloadKind.NOTIFICATION_CONFIRMATION)


class ExtractionFailure(ValueError):
    pass


class LabelNotFound(LookupError):
    pass


@dataclass(frozen=True)
class Keywords:
    """Keyword inventory; swap in another instance for a different locale."""

    affirmative: tuple[str, ...] = ("i understand", "confirm", "agree", "ok", "accept", "allow", "got it", "continue")
    negative: tuple[str, ...] = ("cancel", "decline", "disagree", "reject", "deny", "not now", "no thanks", "close")
    authorization: tuple[str, ...] = ("authorize", "authorization", "privacy", "permission", "personal information")


DEFAULT_KEYWORDS = Keywords()


def _norm(s: str) -> str:
    return " ".join(s.split()).lower()


def _has_phrase(text: str, phrases: Sequence[str]) -> bool:
    t = _norm(text)
    return any(re.search(r"(?<!\w)" + re.escape(p) + r"(?!\w)", t) for p in phrases)


def reading_order(screen: Sequence[UiElement]) -> list[UiElement]:
    return sorted(screen, key=lambda el: (el.bbox[1], el.bbox[0], el.id))


@dataclass(frozen=True)
class RuleDetector:
    body_threshold: int = 40
    max_button_chars: int = 30
    keywords: Keywords = DEFAULT_KEYWORDS
    # geometry tolerance when grouping sibling options
    align_tolerance: float = 0.01

    def is_button(self, el: UiElement) -> bool:
        text = el.text.strip()
        if not text or len(text) > self.max_button_chars:
            return False
        return ("BUTTON" in el.ui_type.upper()
                or _has_phrase(text, self.keywords.affirmative)
                or _has_phrase(text, self.keywords.negative))

    def is_affirmative(self, el: UiElement) -> bool:
        return self.is_button(el) and _has_phrase(el.text, self.keywords.affirmative)

    def is_body(self, el: UiElement) -> bool:
        return len(el.text.strip()) >= self.body_threshold

    def sibling_options(self, screen: Sequence[UiElement]) -> list[UiElement]:
        """Largest group (>= 2) of short same-type, same-size, aligned elements."""
        cands = [el for el in reading_order(screen)
                 if el.text.strip() and not self.is_body(el) and not self.is_button(el)]
        tol = self.align_tolerance
        best: list[UiElement] = []
        for anchor in cands:
            group = [
                el for el in cands
                if el.ui_type == anchor.ui_type
                and abs(el.width - anchor.width) <= tol and abs(el.height - anchor.height) <= tol
                and (abs(el.bbox[0] - anchor.bbox[0]) <= tol or abs(el.bbox[1] - anchor.bbox[1]) <= tol)
            ]
            if len(group) > len(best):
                best = group
        return best if len(best) >= 2 else []

    def __call__(self, screen: Sequence[UiElement]) -> Optional[PayloadKind]:
        if not screen:
            return None
        has_affirmative = any(self.is_affirmative(el) for el in screen)
        has_body = any(self.is_body(el) for el in screen)
        if has_affirmative and has_body:
            if any(_has_phrase(el.text, self.keywords.authorization) for el in screen):
                return PayloadKind.PRIVACY_AUTHORIZATION
            return PayloadKind.NOTIFICATION_CONFIRMATION
        if self.sibling_options(screen):
            return PayloadKind.SLOT_SELECTION
        return None


Detector = Callable[[Sequence[UiElement]], Optional[PayloadKind]]

_DEFAULT_DETECTOR = RuleDetector()


def detect_structured_page(screen: Sequence[UiElement], detector: Optional[Detector] = None) -> Optional[PayloadKind]:
    return (detector or _DEFAULT_DETECTOR)(screen)


@dataclass(frozen=True)
class StructuredPayload:
    kind: PayloadKind
    title: str
    body: str
    options: tuple[str, ...]
    # element ids backing each option, same order as options
    option_ids: tuple[int, ...] = field(default=(), compare=False)

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "title": self.title, "body": self.body, "options": list(self.options)}

    @classmethod
    def from_record(cls, d: dict) -> "StructuredPayload":
        return cls(PayloadKind(d["kind"]), d["title"], d["body"], tuple(d["options"]))


def extract_payload(screen: Sequence[UiElement], kind: PayloadKind, detector: RuleDetector = _DEFAULT_DETECTOR) -> StructuredPayload:
    kind = PayloadKind(kind)
    ordered = reading_order(screen)
    if kind is PayloadKind.SLOT_SELECTION:
        option_els = detector.sibling_options(screen)
    else:
        option_els = [el for el in ordered if detector.is_button(el)]
    labels, ids = [], []
    for el in option_els:
        label = el.text.strip()
        if label not in labels:
            labels.append(label)
            ids.append(el.id)
    if not labels:
        raise ExtractionFailure(f"no option labels found for {kind.value}")

    used = {el.id for el in option_els}
    rest = [el for el in ordered if el.id not in used and el.text.strip()]
    body = "\n".join(el.text.strip() for el in rest if detector.is_body(el))
    title = next((el.text.strip() for el in rest if not detector.is_body(el)), "")
    if kind in CONFIRMATION_KINDS and not (title or body):
        raise ExtractionFailure(f"{kind.value} page has options but no title or body")
    return StructuredPayload(kind, title, body, tuple(labels), tuple(ids))


@dataclass(frozen=True)
class UserResponseScript:
    """Scripted stand-in for the human answering a payload in chat."""

    strategy: str = "first_affirmative"  # first_affirmative | fixed_label | indexed
    label: Optional[str] = None
    index: Optional[int] = None
    affirmative_keywords: tuple[str, ...] = ("i understand", "confirm", "agree", "ok")

    def __post_init__(self):
        if self.strategy not in ("first_affirmative", "fixed_label", "indexed"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fixed_label" and self.label is None:
            raise ValueError("fixed_label strategy needs a label")
        if self.strategy == "indexed" and self.index is None:
            raise ValueError("indexed strategy needs an index")


def apply_user_script(p: StructuredPayload, s: UserResponseScript) -> str:
    if s.strategy == "indexed":
        return p.options[s.index]
    if s.strategy == "fixed_label":
        for opt in p.options:
            if opt == s.label:
                return opt
        raise LabelNotFound(f"{s.label!r} is not one of {list(p.options)}")
    for opt in p.options:
        if _has_phrase(opt, s.affirmative_keywords):
            return opt
    return p.options[0]


def choice_to_action(p: StructuredPayload, label: str, screen: Sequence[UiElement]) -> Click:
    """Click on the element that backs the chosen option."""
    try:
        el_id = p.option_ids[p.options.index(label)]
    except (ValueError, IndexError):
        raise LabelNotFound(f"{label!r} has no backing element") from None
    el = next(el for el in screen if el.id == el_id)
    return Click.on(el)
