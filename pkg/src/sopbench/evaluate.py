"""Step matching, partial scores and the task-completion aggregate.

A partial score is correct steps over episode length; a subset score is
100x the mean partial of its episodes; the overall score is the unweighted
mean of the subset scores present.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

from .grounding import GroundingConfig, bbox_contains, expand_bbox
from .model import KNOWN_SUBSETS, SUBSET_DISPLAY, Click, Point, Scroll, TypeText, UiElement
from .policy import Policy, Replay, replay_episode
from .prompts import ParseFailure, PromptSample, Variant
from .sop import RuleSet


class EmptyEpisode(ValueError):
    pass


def _mean(values) -> float:
    values = list(values)
    # fsum is exact, so the mean does not depend on episode order
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class MatchConfig:
    click_mode: str = "exact_element"  # exact_element | enlarged_containment
    text_norm: bool = True
    expand_fraction: float = 0.10

    def __post_init__(self):
        if self.click_mode not in ("exact_element", "enlarged_containment"):
            raise ValueError(f"unknown click_mode {self.click_mode!r}")


def _norm(s: str) -> str:
    return " ".join(s.split()).lower()


def match_action(pred, gold, screen: Optional[Sequence[UiElement]] = None, cfg: MatchConfig = MatchConfig(),
                 touch: Optional[Point] = None) -> bool:
    if pred is None or gold is None or isinstance(pred, ParseFailure) or isinstance(gold, ParseFailure):
        return False
    if type(pred) is not type(gold):
        return False
    if isinstance(gold, Click):
        if pred.element_id == gold.element_id:
            return True
        if cfg.click_mode == "exact_element" or not screen:
            return False
        by_id = {el.id: el for el in screen}
        target = by_id.get(pred.element_id)
        if target is None:
            return False
        if touch is None:
            if gold.element_id not in by_id:
                return False
            touch = by_id[gold.element_id].center
        return bbox_contains(expand_bbox(target, cfg.expand_fraction), touch)
    if isinstance(gold, Scroll):
        return pred.direction == gold.direction
    if isinstance(gold, TypeText):
        return _norm(pred.text) == _norm(gold.text) if cfg.text_norm else pred.text == gold.text
    return True


def score_episode(pairs: Sequence, cfg: MatchConfig = MatchConfig(), screens: Optional[Sequence] = None,
                  touches: Optional[Sequence] = None) -> float:
    """Fraction of ``(gold, predicted)`` pairs that match; unevaluated steps count as wrong."""
    if not pairs:
        raise EmptyEpisode("cannot score an episode with no steps")
    correct = 0
    for i, (gold, pred) in enumerate(pairs):
        screen = screens[i] if screens is not None else None
        touch = touches[i] if touches is not None else None
        correct += match_action(pred, gold, screen, cfg, touch)
    return correct / len(pairs)


@dataclass(frozen=True)
class EpisodeScore:
    episode_id: str
    subset: str
    partial: float
    steps: int
    correct: int
    ungrounded: int = 0
    parse_failures: int = 0
    unevaluated_steps: int = 0
    unevaluated: bool = False  # endpoint gave up on this episode

    def to_record(self) -> dict:
        return dict(self.__dict__)


def score_replay(r: Replay, cfg: MatchConfig = MatchConfig()) -> EpisodeScore:
    """Score a teacher-forced replay. Steps whose gold click failed to ground are left out."""
    e = r.episode
    kept = [s for s in r.steps if s.grounded and s.gold is not None]
    if not kept:
        raise EmptyEpisode(f"episode {e.episode_id} has no gradable steps")
    screens = [e.steps[s.index].screen for s in kept]
    touches = [tuple(e.steps[s.index].action.touch) for s in kept]
    pairs = [(s.gold, s.predicted) for s in kept]
    correct = sum(match_action(p, g, sc, cfg, tc) for (g, p), sc, tc in zip(pairs, screens, touches))
    return EpisodeScore(
        episode_id=e.episode_id,
        subset=e.subset,
        partial=correct / len(kept),
        steps=len(kept),
        correct=correct,
        ungrounded=sum(1 for s in r.steps if not s.grounded),
        parse_failures=sum(1 for s in kept if isinstance(s.predicted, ParseFailure)),
        unevaluated_steps=sum(1 for s in kept if s.predicted is None),
        unevaluated=r.endpoint_failure,
    )


def subset_order(subsets: Iterable[str]) -> list[str]:
    subsets = set(subsets)
    return [s for s in KNOWN_SUBSETS if s in subsets] + sorted(subsets - set(KNOWN_SUBSETS))


@dataclass
class EvalReport:
    subset_scores: dict[str, float]
    overall: float
    episodes: list[EpisodeScore] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    token_stats: dict = field(default_factory=dict)
    unevaluated_episodes: list[str] = field(default_factory=list)
    model: str = ""

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "overall": round(self.overall, 2),
            "subsets": {s: round(v, 2) for s, v in self.subset_scores.items()},
            "counts": self.counts,
            "unevaluated_episodes": self.unevaluated_episodes,
            "token_stats": self.token_stats,
            "episodes": [e.to_record() for e in self.episodes],
        }


def aggregate(by_subset: Union[Mapping[str, Sequence[float]], Sequence[EpisodeScore]], model: str = "") -> EvalReport:
    """Subset score = 100 x mean partial; overall = unweighted mean over subsets."""
    episodes: list[EpisodeScore] = []
    if isinstance(by_subset, Mapping):
        partials = {s: list(v) for s, v in by_subset.items()}
    else:
        episodes = list(by_subset)
        partials = {}
        for ep in episodes:
            partials.setdefault(ep.subset, []).append(ep.partial)
    partials = {s: v for s, v in partials.items() if v}
    if not partials:
        raise ValueError("aggregate needs at least one subset with episodes")
    for s, values in partials.items():
        if any(not 0.0 <= p <= 1.0 for p in values):
            raise ValueError(f"partial scores for {s} must lie in [0, 1]")
    subset_scores = {s: 100.0 * _mean(partials[s]) for s in subset_order(partials)}
    overall = _mean(subset_scores.values())
    counts = {
        "episodes": sum(len(v) for v in partials.values()),
        "steps": sum(e.steps for e in episodes),
        "correct": sum(e.correct for e in episodes),
        "ungrounded": sum(e.ungrounded for e in episodes),
        "parse_failures": sum(e.parse_failures for e in episodes),
        "unevaluated": sum(e.unevaluated_steps for e in episodes),
    }
    return EvalReport(
        subset_scores=subset_scores,
        overall=overall,
        episodes=episodes,
        counts=counts,
        unevaluated_episodes=[e.episode_id for e in episodes if e.unevaluated],
        model=model,
    )


def overall_from_subset_scores(scores: Mapping[str, float]) -> float:
    """Overall score from subset scores already on the 0-100 scale."""
    return aggregate({s: [v / 100.0] for s, v in scores.items()}).overall


def run_evaluation(corpus, policy: Policy, rules: Optional[RuleSet] = None,
                   gcfg: GroundingConfig = GroundingConfig(), mcfg: MatchConfig = MatchConfig(),
                   jobs: int = 1, model: str = "") -> EvalReport:
    """Teacher-forced replay of every episode, scored and aggregated in corpus order."""
    def one(e):
        return replay_episode(e, policy, "teacher_forced", rules, gcfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            replays = list(pool.map(one, corpus))
    else:
        replays = [one(e) for e in corpus]
    scores, skipped = [], 0
    for r in replays:
        try:
            scores.append(score_replay(r, mcfg))
        except EmptyEpisode:
            skipped += 1
    report = aggregate(scores, model=model)
    report.counts["skipped_episodes"] = skipped
    return report


# --- token accounting ------------------------------------------------------


def token_stats(samples: Iterable[PromptSample]) -> dict[str, dict]:
    """Mean whitespace-token counts per variant."""
    acc: dict[str, list] = {}
    for s in samples:
        prompt_tokens = s.meta.get("prompt_tokens", len(s.prompt.split()))
        response_tokens = s.meta.get("response_tokens", len(s.response.split()))
        acc.setdefault(Variant(s.variant).value, []).append((prompt_tokens, response_tokens))
    out = {}
    for v in (x.value for x in Variant):
        if v in acc:
            rows = acc[v]
            out[v] = {
                "count": len(rows),
                "mean_prompt_tokens": _mean(r[0] for r in rows),
                "mean_response_tokens": _mean(r[1] for r in rows),
            }
    return out


def token_ordering_holds(stats: Mapping[str, dict]) -> bool:
    """BASE = SOP < PLAN <= PLAN_STATE on mean response tokens."""
    m = {v: stats[v]["mean_response_tokens"] for v in ("base", "sop", "plan", "plan_state")}
    return m["base"] == m["sop"] < m["plan"] <= m["plan_state"]


# --- text table ------------------------------------------------------------


def render_table(rows: Sequence[tuple[str, Mapping]]) -> str:
    """Model x (Overall, subsets) table built from report documents (never rescored)."""
    seen = {s for _, doc in rows for s in doc.get("subsets", {})}
    subsets = list(KNOWN_SUBSETS) + sorted(seen - set(KNOWN_SUBSETS))
    header = ["Model", "Overall"] + [SUBSET_DISPLAY.get(s, s) for s in subsets]
    body = []
    for name, doc in rows:
        cells = [name or doc.get("model") or "-", f"{doc['overall']:.2f}"]
        for s in subsets:
            v = doc.get("subsets", {}).get(s)
            cells.append("-" if v is None else f"{v:.2f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines)
