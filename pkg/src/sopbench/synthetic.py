"""Seeded synthetic episodes whose SOP annotation is known in advance.

A template lists the SOP entries an episode must produce. Every entry is
realized by one raw action (scroll entries by a run of one to three swipes)
on a screen whose distractor elements are chosen so they never classify to
the entry being realized. That makes the generated SOP recoverable by the
annotator and invertible by the rule-based policy.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .ingest import Corpus, IngestError
from .model import ActionKind, Click, Episode, RawAction, Scroll, Step, UiElement
from .sop import TASK_COMPLETE, RuleSet, classify_action

_SLOT = re.compile(r"\{(\w+)\}")


class UnrealizableTemplate(IngestError):
    pass


@dataclass(frozen=True)
class SyntheticTemplate:
    name: str
    subset: str
    instruction_pattern: str
    sop_skeleton: tuple[str, ...]
    # named pools of (text, ui_type) used to populate screens
    element_pools: Mapping[str, Sequence[tuple[str, str]]]
    slot_values: Mapping[str, Sequence[str]] = field(default_factory=dict)
    max_distractors: int = 5

    def pool(self) -> list[tuple[str, str]]:
        seen, out = set(), []
        for items in self.element_pools.values():
            for item in items:
                item = (item[0], item[1])
                if item not in seen:
                    seen.add(item)
                    out.append(item)
        return out

    def slots(self) -> list[str]:
        names = _SLOT.findall(self.instruction_pattern)
        for entry in self.sop_skeleton:
            names += _SLOT.findall(entry)
        return list(dict.fromkeys(names))

    def fill(self, slots: Mapping[str, str]) -> tuple[str, tuple[str, ...]]:
        instruction = self.instruction_pattern.format(**slots)
        return instruction, tuple(entry.format(**slots) for entry in self.sop_skeleton)

    def matches(self, descriptions: Sequence[str]) -> bool:
        """True if ``descriptions`` is the skeleton with some slot filling."""
        if len(descriptions) != len(self.sop_skeleton):
            return False
        for entry, desc in zip(self.sop_skeleton, descriptions):
            parts = _SLOT.split(entry)
            pattern = "".join(re.escape(p) if i % 2 == 0 else ".+" for i, p in enumerate(parts))
            if not re.fullmatch(pattern, desc, flags=re.S):
                return False
        return True


def _type_text_for(description: str, rules: RuleSet) -> Optional[str]:
    for template in rules.type_templates:
        head, _, tail = template.partition("*")
        if description.startswith(head) and description.endswith(tail) and len(description) >= len(head) + len(tail):
            return description[len(head):len(description) - len(tail)]
    return None


def _classify_pool(pool, rules):
    return {item: classify_action(Click(0, item[0], item[1]), rules) for item in pool}


def check_template(t: SyntheticTemplate, rules: RuleSet) -> None:
    """Raise UnrealizableTemplate unless every skeleton entry can be produced."""
    missing = [s for s in t.slots() if not t.slot_values.get(s)]
    if missing:
        raise UnrealizableTemplate(f"template {t.name}: no values for slots {missing}")
    if not t.sop_skeleton:
        raise UnrealizableTemplate(f"template {t.name}: empty skeleton")
    for a, b in zip(t.sop_skeleton, t.sop_skeleton[1:]):
        if a == b:
            raise UnrealizableTemplate(f"template {t.name}: consecutive entries {a!r} would merge")
    if TASK_COMPLETE in t.sop_skeleton[:-1]:
        raise UnrealizableTemplate(f"template {t.name}: {TASK_COMPLETE!r} must be the last entry")
    labels = _classify_pool(t.pool(), rules)
    for entry in t.sop_skeleton:
        probe = entry.format(**{s: "x" for s in t.slots()})
        if probe in rules.kind_descriptions or _type_text_for(probe, rules) is not None:
            continue
        if not any(label == entry for label in labels.values()):
            raise UnrealizableTemplate(f"template {t.name}: no pool element realizes {entry!r}")


def _layout(items: list[tuple[str, str]], rng: random.Random) -> tuple[UiElement, ...]:
    out = []
    for i, (text, ui_type) in enumerate(items):
        y0 = round(0.10 + 0.12 * i, 4)
        x0 = round(rng.uniform(0.05, 0.3), 4)
        x1 = round(rng.uniform(0.6, 0.95), 4)
        out.append(UiElement(i, text, ui_type, (x0, y0, x1, round(y0 + 0.08, 4))))
    return tuple(out)


def _screen(rng, labels, avoid: str, target=None, max_distractors=5):
    pool = [item for item, label in labels.items() if label != avoid]
    k = min(len(pool), rng.randint(2, max(2, max_distractors)))
    items = rng.sample(pool, k)
    if target is not None:
        items.insert(rng.randint(0, len(items)), target)
    screen = _layout(items, rng)
    hit = None if target is None else next(el for el in screen if (el.text, el.ui_type) == target)
    return screen, hit


def _swipe_down(rng: random.Random) -> RawAction:
    x = round(rng.uniform(0.3, 0.7), 4)
    y0 = round(rng.uniform(0.2, 0.4), 4)
    y1 = round(y0 + rng.uniform(0.25, 0.45), 4)
    return RawAction.swipe((x, y0), (round(x + rng.uniform(-0.05, 0.05), 4), y1))


_KIND_RAW = {
    "PressBack": ActionKind.PRESS_BACK,
    "PressHome": ActionKind.PRESS_HOME,
    "PressEnter": ActionKind.PRESS_ENTER,
    "TaskComplete": ActionKind.STATUS_TASK_COMPLETE,
    "TaskImpossible": ActionKind.STATUS_TASK_IMPOSSIBLE,
}


def _realize(entry, t, rules, labels, rng) -> list[tuple]:
    """Steps (screen, raw action) realizing one skeleton entry."""
    kind_cls = rules.kind_descriptions.get(entry)
    if kind_cls is Scroll:
        return [(_screen(rng, labels, entry, max_distractors=t.max_distractors)[0], _swipe_down(rng))
                for _ in range(rng.randint(1, 3))]
    if kind_cls is not None:
        screen, _ = _screen(rng, labels, entry, max_distractors=t.max_distractors)
        return [(screen, RawAction(_KIND_RAW[kind_cls.__name__]))]
    text = _type_text_for(entry, rules)
    if text is not None:
        screen, _ = _screen(rng, labels, entry, max_distractors=t.max_distractors)
        return [(screen, RawAction.type_text(text))]
    candidates = [item for item, label in labels.items() if label == entry]
    target = rng.choice(candidates)
    screen, hit = _screen(rng, labels, entry, target, t.max_distractors)
    cx, cy = hit.center
    return [(screen, RawAction.tap(round(cx, 4), round(cy, 4)))]


def generate_episode(t: SyntheticTemplate, rng: random.Random, episode_id: str, rules: RuleSet) -> Episode:
    labels = _classify_pool(t.pool(), rules)
    slots = {name: rng.choice(list(t.slot_values[name])) for name in t.slots()}
    instruction, skeleton = t.fill(slots)
    steps = []
    for entry in skeleton:
        for screen, action in _realize(entry, t, rules, labels, rng):
            steps.append(Step(len(steps), screen, action))
    return Episode(episode_id, t.subset, instruction, tuple(steps))


def generate_synthetic(t: SyntheticTemplate, n: int, seed: int = 0, rules: Optional[RuleSet] = None) -> Corpus:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rules = rules or RuleSet.load("aitw")
    check_template(t, rules)
    rng = random.Random(f"{t.name}:{seed}")
    return Corpus(tuple(generate_episode(t, rng, f"{t.name}-{seed}-{i:05d}", rules) for i in range(n)))


def generate_mixed(n: int, seed: int = 0, templates: Optional[Sequence[SyntheticTemplate]] = None,
                   rules: Optional[RuleSet] = None) -> Corpus:
    """``n`` episodes cycling through ``templates`` (all bundled ones by default)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rules = rules or RuleSet.load("aitw")
    templates = list(templates or TEMPLATES.values())
    for t in templates:
        check_template(t, rules)
    rng = random.Random(f"mixed:{seed}")
    episodes = []
    for i in range(n):
        t = templates[i % len(templates)]
        episodes.append(generate_episode(t, rng, f"{t.name}-{seed}-{i:05d}", rules))
    return Corpus(tuple(episodes))


# --- bundled templates ----------------------------------------------------

_CHROME = [
    ("", "ICON_SHOPPING_CART"),
    ("", "ICON_THREE_DOTS"),
    ("", "ICON_MIC"),
    ("", "ICON_HOME"),
    ("Close", "TEXT"),
    ("", "ICON_PERSON"),
    ("History", "TEXT"),
    ("", "ICON_PLAY"),
    ("Add to cart", "TEXT"),
]
_CONTENT = [
    ("amazon.com", "TEXT"),
    ("Bass Headsets", "TEXT"),
    ("Sony WH-1000XM4 Wireless", "TEXT"),
    ("Customer reviews", "TEXT"),
    ("Deals of the day", "TEXT"),
    ("Free delivery", "TEXT"),
    ("4.5 out of 5 stars", "TEXT"),
]

TEMPLATES: dict[str, SyntheticTemplate] = {
    "amazon": SyntheticTemplate(
        name="amazon",
        subset="web_shopping",
        instruction_pattern="Search for the {query} on Amazon.",
        sop_skeleton=(
            "search on the website",
            "view and click page content",
            "type '{query}'",
            "view and click page content",
            "task complete",
        ),
        element_pools={
            "search": [("G", "ICON_GOOGLE"), ("Search", "TEXT"), ("", "ICON_MAGNIFYING_GLASS")],
            "content": _CONTENT,
            "chrome": _CHROME,
        },
        slot_values={"query": ["best rated headphones", "usb c charger", "wireless mouse", "running shoes"]},
    ),
    "install": SyntheticTemplate(
        name="install",
        subset="install",
        instruction_pattern="Install {app} from the Play Store.",
        sop_skeleton=(
            "search on the website",
            "type '{app}'",
            "press enter",
            "view and click page content",
            "install the app",
            "open the app",
            "task complete",
        ),
        element_pools={
            "search": [("Search", "TEXT"), ("", "ICON_MAGNIFYING_GLASS")],
            "actions": [("Install", "BUTTON"), ("Open", "BUTTON"), ("Uninstall", "BUTTON")],
            "content": [("Top charts", "TEXT"), ("Ratings and reviews", "TEXT"), ("About this app", "TEXT")],
            "chrome": _CHROME,
        },
        slot_values={"app": ["Duolingo", "Spotify", "Calm", "Waze"]},
    ),
    "google_apps": SyntheticTemplate(
        name="google_apps",
        subset="google_apps",
        instruction_pattern="Turn on notifications for {app}.",
        sop_skeleton=(
            "switch to the home screen",
            "scroll and view page content",
            "display menu options",
            "check messages",
            "task complete",
        ),
        element_pools={
            "menus": [("Settings", "TEXT"), ("", "ICON_THREE_BARS")],
            "messages": [("Notifications", "TEXT")],
            "content": [("Battery", "TEXT"), ("Storage", "TEXT"), ("Display", "TEXT")],
            "chrome": [("", "ICON_MIC"), ("Close", "TEXT"), ("", "ICON_PLAY"), ("", "ICON_TAKE_PHOTO")],
        },
        slot_values={"app": ["Gmail", "Calendar", "Photos"]},
    ),
    "general": SyntheticTemplate(
        name="general",
        subset="general",
        instruction_pattern="What's the weather in {city}?",
        sop_skeleton=(
            "open the browser",
            "search or type web address",
            "type '{city} weather'",
            "press enter",
            "scroll and view page content",
            "task complete",
        ),
        element_pools={
            "browser": [("Chrome", "TEXT")],
            "bar": [("Search or type web address", "TEXT")],
            "content": [("Weather forecast", "TEXT"), ("News", "TEXT"), ("Images", "TEXT")],
            "chrome": _CHROME,
        },
        slot_values={"city": ["Paris", "Tokyo", "Nairobi", "Lima"]},
    ),
    "single": SyntheticTemplate(
        name="single",
        subset="single",
        instruction_pattern="Add the first {item} to the cart.",
        sop_skeleton=("add goods to cart", "task complete"),
        element_pools={
            "cart": [("Add to cart", "TEXT"), ("", "ICON_PLUS"), ("Add", "BUTTON")],
            "content": _CONTENT,
            "chrome": [("", "ICON_MIC"), ("Close", "TEXT"), ("", "ICON_THREE_DOTS")],
        },
        slot_values={"item": ["item", "laptop", "phone case"]},
    ),
}
