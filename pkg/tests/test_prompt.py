import json

import pytest

from app.core.errors import ConfigError, MalformedDemonstrationError
from app.core.schemas import Instance
from app.helpers.permutation_helper import all_permutations, default_permutation, permutation_from_id
from app.services.prompt_service import PromptTemplate, render, render_prefix
from tests.conftest import WINE_SENTENCE, make_engine, make_instances


def test_zero_shot_prefix(template, asqp):
    prefix = render_prefix(template, default_permutation(asqp), [])
    assert "The sentiment elements are defined as follows:" in prefix
    assert "- aspect term:" in prefix
    assert "Sentiment elements: [(" not in prefix
    assert prefix.endswith("Text: ")


def test_demonstration_label(template, asqp, wine_instance):
    prefix = render_prefix(template, default_permutation(asqp), [wine_instance])
    assert ("Sentiment elements: [(wine list, drinks#style, excellent, positive), "
            "(service, service#general, slow, negative)]") in prefix
    assert f"Text: {WINE_SENTENCE}" in prefix


def test_format_follows_permutation(template, asqp):
    prefix = render_prefix(template, permutation_from_id(asqp, "p-ot-at-ac"), [])
    assert "[(sentiment polarity, opinion term, aspect term, aspect category), ...]" in prefix
    lines = [line for line in prefix.splitlines() if line.startswith("- ")]
    assert [line.split(":")[0] for line in lines] == [
        "- sentiment polarity", "- opinion term", "- aspect term", "- aspect category",
    ]


def test_prompt_split(template, asqp, wine_instance):
    prompt = render(template, default_permutation(asqp), [wine_instance], wine_instance)
    assert prompt.suffix == f"{WINE_SENTENCE}\nSentiment elements:"
    assert prompt.text == prompt.prefix + prompt.suffix
    assert prompt.shot_k == 1
    assert len(prompt.prefix_hash) == 64


def test_prefix_is_shared_across_instances(template, asqp, wine_instance):
    other = Instance(id="b", text="The pasta is fresh .")
    permutation = default_permutation(asqp)
    a = render(template, permutation, [wine_instance], wine_instance)
    b = render(template, permutation, [wine_instance], other)
    assert a.prefix == b.prefix and a.prefix_hash == b.prefix_hash
    assert a.suffix != b.suffix


def test_prefixes_differ_per_view(template, asqp):
    prefixes = {render_prefix(template, p, []) for p in all_permutations(asqp)}
    assert len(prefixes) == 24


def test_demonstrations_keep_sampling_order(template, tasd):
    shots = [Instance(id=str(i), text=f"text {i}", gold=()) for i in range(3)]
    prefix = render_prefix(template, default_permutation(tasd), list(reversed(shots)))
    assert prefix.index("text 2") < prefix.index("text 1") < prefix.index("text 0")


def test_unlabelled_demonstration(template, asqp):
    with pytest.raises(MalformedDemonstrationError):
        render_prefix(template, default_permutation(asqp), [Instance(id="u", text="no labels")])


def test_custom_template_dir(tmp_path, asqp):
    (tmp_path / "element_descriptions.json").write_text(json.dumps({
        "instruction": "Find quads.",
        "elements": {code: {"name": code.upper(), "description": code} for code in ("at", "ac", "ot", "p")},
    }))
    (tmp_path / "prefix.j2").write_text("{{ instruction }} [({{ slots }})]\n")
    template = PromptTemplate.load(tmp_path)
    assert render_prefix(template, default_permutation(asqp), []) == "Find quads. [(AT, AC, OT, P)]\nText: "


def test_incomplete_template_dir(tmp_path):
    (tmp_path / "element_descriptions.json").write_text(json.dumps({"elements": {"at": {"name": "a", "description": "b"}}}))
    (tmp_path / "prefix.j2").write_text("x")
    with pytest.raises(ConfigError):
        PromptTemplate.load(tmp_path)
    with pytest.raises(ConfigError):
        PromptTemplate.load(tmp_path / "missing")


def test_category_list_in_shared_prefix(template, asqp, categories, wine_instance):
    permutation = default_permutation(asqp)
    prefix = render_prefix(template, permutation, [wine_instance], categories)
    line = "The predefined aspect categories are: " + ", ".join(categories.categories) + "."
    assert prefix.count(line) == 1
    assert prefix.index("- aspect category:") < prefix.index(line) < prefix.index("Answer with")
    other = Instance(id="b", text="The pasta is fresh .")
    assert render(template, permutation, [wine_instance], other, categories).prefix == prefix


def test_prefix_without_categories_is_unchanged(template, asqp):
    prefix = render_prefix(template, default_permutation(asqp), [])
    assert "predefined aspect categories" not in prefix
    assert "\n\nAnswer with" in prefix


def test_engine_prefix_lists_categories(tasd):
    instances = make_instances(2, tasd)
    engine = make_engine(instances, tasd, guided=False)
    requests = engine.build_requests(instances, default_permutation(tasd))
    assert all("food#prices" in r.prefix for r in requests)
    assert all("food#prices" not in r.suffix for r in requests)
