import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sopbench.grounding import GroundingConfig, canonicalize_episode
from sopbench.model import (
    ActionKind,
    Click,
    Direction,
    Episode,
    PressHome,
    RawAction,
    Scroll,
    Step,
    TaskComplete,
    TypeText,
)
from sopbench.prompts import (
    MissingPipeline,
    ParseFailure,
    PromptSample,
    Variant,
    BuildStats,
    build_dataset,
    parse_response,
    render_prompt,
    render_response,
)
from sopbench.evaluate import token_ordering_holds, token_stats
from sopbench.sop import build_pipeline, one_line, states_at_step
from sopbench.synthetic import generate_mixed

from conftest import read_golden
from strategies import canonical_actions, pipelines


@pytest.fixture(scope="module")
def amazon_parts(amazon, aitw):
    canon = [o.action for o in canonicalize_episode(amazon)]
    return canon, build_pipeline(amazon, canon, aitw)


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_golden_step_two(amazon, amazon_parts, variant):
    canon, p = amazon_parts
    assert render_prompt(amazon, 2, canon, p, variant) == read_golden(f"amazon_t2_{variant}.prompt.txt")
    assert render_response(canon[2], p, 2, variant) == read_golden(f"amazon_t2_{variant}.response.txt")


def test_sop_block_lines(amazon, amazon_parts):
    canon, p = amazon_parts
    prompt = render_prompt(amazon, 2, canon, p, Variant.SOP)
    block = prompt.split("SOP:\n")[1].split("\nPrevious Actions:")[0].split("\n")
    assert block[0] == "id:0 search on the website,state:finish"
    assert block[-1] == "id:4 task complete,state:unfinish"
    assert len(block) == 5


@pytest.mark.parametrize("variant", ["plan", "plan_state", "sop"])
def test_variants_need_a_pipeline(amazon, amazon_parts, variant):
    canon, _ = amazon_parts
    with pytest.raises(MissingPipeline):
        render_prompt(amazon, 0, canon, None, variant) if variant == "sop" else render_response(canon[0], None, 0, variant)


def test_max_history_truncates(amazon, amazon_parts):
    canon, _ = amazon_parts
    prompt = render_prompt(amazon, 4, canon, None, Variant.BASE, max_history=1)
    history = prompt.split("Previous Actions:\n")[1].split("\nEnvironment:")[0].split("\n")
    assert len(history) == 1 and history[0].startswith("id:3,type:DUAL_POINT,text:")


def test_step_out_of_range(amazon, amazon_parts):
    with pytest.raises(IndexError):
        render_prompt(amazon, 5, amazon_parts[0])


# --- round trip -----------------------------------------------------------


def _check_round_trip(action, p, t, v):
    text = render_response(action, p, t, v)
    parsed, plan = parse_response(text)
    assert parsed == action, text
    if v is Variant.PLAN:
        assert [(i.id, i.description) for i in plan] == [(e.id, one_line(e.description)) for e in p.entries]
    elif v is Variant.PLAN_STATE:
        expect = [(e.id, one_line(e.description), s) for e, s in states_at_step(p, t)]
        assert [(i.id, i.description, i.state) for i in plan] == expect
    else:
        assert plan is None


@given(canonical_actions, pipelines(), st.integers(0, 20), st.sampled_from(list(Variant)))
@settings(max_examples=1500)
def test_render_parse_round_trip(action, p, t, v):
    _check_round_trip(action, p, t, v)


@pytest.mark.parametrize("text,expected", [
    ("action type: PRESS_HOME", PressHome()),
    ("action type: SCROLL DOWN", Scroll(Direction.DOWN)),
    ("action:   TASK_COMPLETE  ", TaskComplete()),
    ("action type: DUAL_POINT\ntext: XXX type: ICON_STAR id:1", Click(1, "XXX", "ICON_STAR")),
    ("action: TYPE\ntext: hi there", TypeText("hi there")),
    ("\naction: PRESS_HOME", PressHome()),
])
def test_parse_accepts_variants(text, expected):
    assert parse_response(text)[0] == expected


@pytest.mark.parametrize("text", [
    "", "garbage", "action: DANCE", "action: SCROLL SIDEWAYS", "action: DUAL_POINT\ntext: a type: B",
    "action: TYPE", "action: PRESS_HOME\nextra", "PLAN:\nid:0 a", "PLAN&STATE:\nid:0 a\naction: PRESS_HOME",
    "PLAN:\nnot an item\naction: PRESS_HOME",
])
def test_parse_failures(text):
    action, _ = parse_response(text)
    assert isinstance(action, ParseFailure)


@given(st.one_of(st.text(), st.binary(), st.none(), st.integers()))
@settings(max_examples=300)
def test_parse_never_raises(junk):
    action, _ = parse_response(junk)
    assert action is not None


# --- datasets -------------------------------------------------------------


def test_mix_doubles_samples(amazon, aitw):
    plain = list(build_dataset([amazon], aitw, v=Variant.SOP))
    mixed = list(build_dataset([amazon], aitw, v=Variant.SOP, mix=True))
    assert len(plain) == 5 and len(mixed) == 10
    assert [s.variant for s in mixed] == [Variant.SOP, Variant.BASE] * 5


def test_samples_skip_ungrounded_clicks(aitw):
    corpus = generate_mixed(10, seed=2)
    e = corpus.episodes[0]
    cfg = GroundingConfig(expand_fraction=0.0, max_fallback_distance=0.0)
    # move every tap far away from the layout to force ungrounded steps
    steps = tuple(
        Step(s.index, s.screen, RawAction.tap(0.99, 0.99) if s.action.kind is ActionKind.DUAL_POINT
             and s.action.touch == s.action.lift else s.action) for s in e.steps)
    e2 = Episode(e.episode_id, e.subset, e.instruction, steps)
    stats = BuildStats()
    samples = list(build_dataset([e2], aitw, cfg, Variant.BASE, stats=stats))
    taps = sum(1 for s in steps if s.action.kind is ActionKind.DUAL_POINT and s.action.touch == s.action.lift)
    assert stats.skipped_ungrounded == taps
    assert len(samples) == len(steps) - taps


def test_parallel_build_matches_serial(aitw):
    corpus = generate_mixed(30, seed=4)
    serial = [s.to_json() for s in build_dataset(corpus, aitw, v=Variant.PLAN_STATE)]
    parallel = [s.to_json() for s in build_dataset(corpus, aitw, v=Variant.PLAN_STATE, jobs=3)]
    assert serial == parallel


def test_sample_record_round_trip(amazon, aitw):
    s = next(iter(build_dataset([amazon], aitw, v=Variant.SOP)))
    assert PromptSample.from_record(s.to_record()) == s
    assert s.sop_block.startswith("SOP:\nid:0 ")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_token_ordering(aitw, seed):
    corpus = list(generate_mixed(40, seed=seed))
    samples = []
    for v in Variant:
        samples += list(build_dataset(corpus, aitw, v=v))
    stats = token_stats(samples)
    assert token_ordering_holds(stats), stats


def test_token_ordering_on_amazon(amazon, aitw):
    samples = [s for v in Variant for s in build_dataset([amazon], aitw, v=v)]
    assert token_ordering_holds(token_stats(samples))
