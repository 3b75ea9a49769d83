"""Line-delimited episode corpora: parse, validate, serialize, split."""

from __future__ import annotations

import io
import json
import logging
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

from .model import (
    SENTINEL,
    ActionKind,
    Episode,
    Finding,
    RawAction,
    Step,
    UiElement,
    validate_episode,
)

log = logging.getLogger(__name__)


class IngestError(Exception):
    pass


class ParseError(IngestError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason

    def __reduce__(self):
        return (ParseError, (self.line_number, self.reason))


class ValidationError(IngestError):
    def __init__(self, episode_id: str, findings: Sequence[Finding]):
        detail = "; ".join(str(f) for f in findings)
        super().__init__(f"episode {episode_id}: {detail}")
        self.episode_id = episode_id
        self.findings = list(findings)

    def __reduce__(self):
        return (ValidationError, (self.episode_id, self.findings))


class EmptyCorpus(IngestError):
    pass


def compute_manifest(episodes: Iterable[Episode]) -> dict:
    counts: dict[str, dict] = {}
    instructions: dict[str, set] = {}
    for e in episodes:
        c = counts.setdefault(e.subset, {"episodes": 0, "screens": 0, "instructions": 0})
        c["episodes"] += 1
        c["screens"] += len(e.steps)
        instructions.setdefault(e.subset, set()).add(e.instruction)
    for subset, c in counts.items():
        c["instructions"] = len(instructions[subset])
    return {k: counts[k] for k in sorted(counts)}


@dataclass(frozen=True)
class Corpus:
    episodes: tuple[Episode, ...]
    manifest: dict = field(default=None, compare=False)
    # records dropped in lenient mode
    rejected: tuple[IngestError, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(self.episodes))
        if self.manifest is None:
            object.__setattr__(self, "manifest", compute_manifest(self.episodes))

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def manifest_is_consistent(self) -> bool:
        return self.manifest == compute_manifest(self.episodes)

    def manifest_document(self) -> dict:
        total = {"episodes": 0, "screens": 0, "instructions": len({e.instruction for e in self.episodes})}
        for c in self.manifest.values():
            total["episodes"] += c["episodes"]
            total["screens"] += c["screens"]
        return {"subsets": self.manifest, "total": total, "rejected": len(self.rejected)}


# --- records ---------------------------------------------------------------

_EPISODE_KEYS = ("episode_id", "subset", "instruction", "steps")


def _point(v, scale) -> tuple:
    if v is None:
        return SENTINEL
    x, y = (float(c) for c in v)
    if scale and (x, y) != SENTINEL:
        return (x / scale[0], y / scale[1])
    return (x, y)


def _element(d: dict, scale) -> UiElement:
    bbox = tuple(float(c) for c in d["bbox"])
    if len(bbox) != 4:
        raise ValueError("bbox must have 4 numbers")
    if scale:
        w, h = scale
        bbox = (bbox[0] / w, bbox[1] / h, bbox[2] / w, bbox[3] / h)
    return UiElement(int(d["id"]), str(d.get("text", "")), str(d.get("ui_type", "")), bbox)


def _reindex(elements: list[UiElement]) -> tuple[UiElement, ...]:
    ids = [el.id for el in elements]
    if ids == list(range(len(ids))) or len(set(ids)) != len(ids):
        # already canonical, or duplicated ids that validation will report
        return tuple(elements)
    ordered = sorted(elements, key=lambda el: el.id)
    return tuple(UiElement(i, el.text, el.ui_type, el.bbox) for i, el in enumerate(ordered))


def episode_from_record(rec: dict) -> Episode:
    """Build an Episode from a decoded record. Raises KeyError/ValueError/TypeError on bad shape."""
    if not isinstance(rec, dict):
        raise TypeError("record is not an object")
    for key in _EPISODE_KEYS:
        if key not in rec:
            raise KeyError(key)
    steps = []
    for i, s in enumerate(rec["steps"]):
        screen = s["screen"]
        # optional pixel dimensions; present only in exports that were not normalized
        scale = screen.get("pixel_size")
        elements = _reindex([_element(el, scale) for el in screen.get("elements", [])])
        a = s["action"]
        kind = ActionKind(a["type"])
        typed = a.get("typed_text")
        action = RawAction(kind, _point(a.get("touch"), scale), _point(a.get("lift"), scale),
                           None if typed is None else str(typed))
        steps.append(Step(i, elements, action))
    return Episode(str(rec["episode_id"]), str(rec["subset"]), str(rec["instruction"]), tuple(steps))


def episode_to_record(e: Episode) -> dict:
    steps = []
    for s in e.steps:
        action = {"type": s.action.kind.value, "touch": list(s.action.touch), "lift": list(s.action.lift)}
        if s.action.typed_text is not None:
            action["typed_text"] = s.action.typed_text
        steps.append({
            "screen": {"elements": [
                {"id": el.id, "text": el.text, "ui_type": el.ui_type, "bbox": list(el.bbox)}
                for el in s.screen
            ]},
            "action": action,
        })
    return {"episode_id": e.episode_id, "subset": e.subset, "instruction": e.instruction, "steps": steps}


def dumps_episode(e: Episode) -> str:
    return json.dumps(episode_to_record(e), ensure_ascii=False, separators=(",", ":"))


def dump_corpus(corpus: Union[Corpus, Iterable[Episode]], out: IO[str]) -> int:
    n = 0
    for e in corpus:
        out.write(dumps_episode(e))
        out.write("\n")
        n += 1
    return n


def serialize_corpus(corpus: Union[Corpus, Iterable[Episode]]) -> bytes:
    buf = io.StringIO()
    dump_corpus(corpus, buf)
    return buf.getvalue().encode("utf-8")


# --- parsing ---------------------------------------------------------------


def _parse_line(line_number: int, line: str) -> Union[Episode, IngestError, None]:
    """Parse one record; errors are returned (not raised) so worker processes can ship them back."""
    if not line.strip():
        return None
    try:
        rec = json.loads(line)
        e = episode_from_record(rec)
    except KeyError as exc:
        return ParseError(line_number, f"missing field {exc.args[0]!r}")
    except (ValueError, TypeError, AttributeError, IndexError) as exc:
        return ParseError(line_number, str(exc) or type(exc).__name__)
    findings = validate_episode(e)
    if findings:
        return ValidationError(e.episode_id, findings)
    return e


def _parse_chunk(chunk: list[tuple[int, str]]) -> list:
    return [_parse_line(n, line) for n, line in chunk]


def _decode(source: Union[bytes, str, IO]) -> Iterator[str]:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        # not str.splitlines(): records may legally contain U+2028 and friends
        yield from source.split("\n")
        return
    for line in source:
        yield line.decode("utf-8") if isinstance(line, bytes) else line


def _chunks(lines: Iterable[str], size: int) -> Iterator[list[tuple[int, str]]]:
    chunk = []
    for n, line in enumerate(lines, 1):
        chunk.append((n, line))
        if len(chunk) >= size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def iter_episodes(source, lenient: bool = False, jobs: int = 1, chunk_size: int = 256,
                  rejected: Optional[list] = None) -> Iterator[Episode]:
    """Stream episodes from a line-delimited source, in input order.

    With ``jobs > 1`` line chunks are parsed in worker processes and merged
    back in order. In lenient mode bad records are logged, appended to
    ``rejected`` and skipped; otherwise the first one is raised.
    """
    chunks = _chunks(_decode(source), chunk_size)
    if jobs > 1:
        pool = ProcessPoolExecutor(max_workers=jobs)
        results = pool.map(_parse_chunk, chunks)
    else:
        pool = None
        results = map(_parse_chunk, chunks)
    try:
        for chunk in results:
            for item in chunk:
                if item is None:
                    continue
                if isinstance(item, IngestError):
                    if not lenient:
                        raise item
                    log.warning("skipping record: %s", item)
                    if rejected is not None:
                        rejected.append(item)
                    continue
                yield item
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)


def parse_corpus(source, lenient: bool = False, jobs: int = 1) -> Corpus:
    rejected: list = []
    episodes = list(iter_episodes(source, lenient=lenient, jobs=jobs, rejected=rejected))
    return Corpus(tuple(episodes), rejected=tuple(rejected))


def load_corpus(path: str, lenient: bool = False, jobs: int = 1) -> Corpus:
    with open(path, encoding="utf-8") as f:
        return parse_corpus(f, lenient=lenient, jobs=jobs)


# --- splitting -------------------------------------------------------------


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * fraction``; sizes sum to ``n``."""
    raw = [n * f for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    remainders = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_corpus(c: Corpus, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[Corpus, Corpus, Corpus]:
    """Episode-wise train/val/test split. Each split keeps corpus order."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    if not c.episodes:
        raise EmptyCorpus("cannot split an empty corpus")
    order = list(range(len(c.episodes)))
    random.Random(seed).shuffle(order)
    out = []
    start = 0
    for size in split_sizes(len(order), fractions):
        picked = sorted(order[start:start + size])
        out.append(Corpus(tuple(c.episodes[i] for i in picked)))
        start += size
    return tuple(out)
