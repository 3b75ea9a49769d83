import pytest

from sopbench.grounding import canonicalize_episode
from sopbench.ingest import serialize_corpus
from sopbench.model import validate_episode
from sopbench.sop import build_pipeline
from sopbench.synthetic import (
    TEMPLATES,
    SyntheticTemplate,
    UnrealizableTemplate,
    check_template,
    generate_mixed,
    generate_synthetic,
)


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_generated_sop_matches_skeleton(name, aitw):
    t = TEMPLATES[name]
    corpus = generate_synthetic(t, 40, seed=3, rules=aitw)
    for e in corpus:
        assert validate_episode(e) == []
        canon = [o.action for o in canonicalize_episode(e)]
        assert t.matches(build_pipeline(e, canon, aitw).descriptions), e.episode_id


def test_generation_is_seeded():
    a = serialize_corpus(generate_mixed(25, seed=8))
    assert a == serialize_corpus(generate_mixed(25, seed=8))
    assert a != serialize_corpus(generate_mixed(25, seed=9))


def test_mixed_covers_all_templates():
    subsets = {e.subset for e in generate_mixed(len(TEMPLATES), seed=0)}
    assert subsets == {t.subset for t in TEMPLATES.values()}


def _template(**kw):
    base = dict(name="t", subset="general", instruction_pattern="do {thing}",
                sop_skeleton=("search on the website", "task complete"),
                element_pools={"p": [("Search", "TEXT")]}, slot_values={"thing": ["x"]})
    base.update(kw)
    return SyntheticTemplate(**base)


@pytest.mark.parametrize("kw", [
    {"slot_values": {}},
    {"sop_skeleton": ()},
    {"sop_skeleton": ("search on the website", "search on the website")},
    {"sop_skeleton": ("task complete", "search on the website")},
    {"sop_skeleton": ("open the fridge",)},
])
def test_unrealizable_templates(aitw, kw):
    with pytest.raises(UnrealizableTemplate):
        check_template(_template(**kw), aitw)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        generate_synthetic(TEMPLATES["amazon"], 0)
