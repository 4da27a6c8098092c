import dataclasses
import json
import shutil

import pytest

from config import settings
from src.context_sampler import (
    GenerationContext,
    Persona,
    SamplerKnobs,
    load_personas,
    render_prompt,
    sample_context,
)
from src.domain_env import EntityStore
from src.domain_pack import SamplingSpec, load_domain_pack
from src.prompts import NONE_MARKER, PromptError, load_template, placeholders, render, section


def test_render_reports_unbound_placeholders():
    with pytest.raises(PromptError, match="unbound placeholder"):
        render("Hello {name} from {place}", name="x")
    assert render("Hello {name}", name="x") == "Hello x"


def test_section_marks_empty_lists():
    assert section([]) == NONE_MARKER
    assert section(["a", "b"]) == "- a\n- b"


def test_bundled_templates_have_expected_placeholders():
    assert set(placeholders(load_template("generation"))) == {
        "domain",
        "persona",
        "guidelines",
        "user_data",
        "order_data",
        "write_apis",
        "tools",
        "examples",
    }
    assert set(placeholders(load_template("validation"))) == {"task", "tools", "diff_patch"}
    assert set(placeholders(load_template("human"))) == {"intent"}


def test_persona_pool():
    personas = load_personas()
    assert len(personas) == 20
    assert len({p.id for p in personas}) == 20
    with pytest.raises(ValueError):
        Persona(id="p", description="   ")


def test_sampling_is_deterministic(pack, graph, personas):
    a = sample_context(pack, graph, 42, personas)
    b = sample_context(pack, graph, 42, personas)
    assert a == b
    assert a.manifest() == b.manifest()


def test_different_seeds_vary(pack, graph, personas):
    manifests = {sample_context(pack, graph, seed, personas).manifest() for seed in range(20)}
    assert len(manifests) > 1


@pytest.mark.parametrize("seed", range(25))
def test_context_respects_knobs(pack, graph, personas, seed):
    knobs = SamplerKnobs()
    ctx = sample_context(pack, graph, seed, personas, knobs)
    assert 1 <= len(ctx.write_apis) <= 3
    assert all(pack.registry.specs[name].kind == "write" for name in ctx.write_apis)
    assert 1 <= len(ctx.policy_excerpts) <= 3
    assert 2 <= len(ctx.domain_samples) <= 5
    assert 1 <= len(ctx.examples) <= 2
    assert ctx.persona in personas
    owners = {s.document["user_id"] for s in ctx.domain_samples}
    assert {u.id for u in ctx.user_samples} == owners


def test_domain_samples_carry_metadata(pack, graph, personas):
    ctx = sample_context(pack, graph, 3, personas)
    for sample in ctx.domain_samples:
        assert sample.collection == "orders"
        assert set(sample.metadata) == {"cost", "item_count", "status"}
        assert json.loads(sample.render())["id"] == sample.id


def test_sample_count_is_clamped_to_pool(pack, graph, personas):
    knobs = SamplerKnobs(domain_samples=(10, 10), examples=(9, 9))
    ctx = sample_context(pack, graph, 1, personas, knobs)
    assert len(ctx.domain_samples) == len(pack.seed.collections["orders"])
    assert len(ctx.examples) == len(pack.examples)


def test_empty_pools_raise(pack, graph, personas):
    with pytest.raises(ValueError, match="persona"):
        sample_context(pack, graph, 0, [])
    with pytest.raises(ValueError, match="example"):
        sample_context(pack, graph, 0, personas, examples=[])


def test_knob_ranges_are_validated():
    with pytest.raises(ValueError):
        SamplerKnobs(policies=(3, 1))
    with pytest.raises(ValueError):
        SamplerKnobs(write_apis=(0, 2))


def test_context_requires_write_apis(personas):
    with pytest.raises(ValueError):
        GenerationContext(
            domain="retail",
            write_apis=[],
            read_apis_available=[],
            policy_excerpts=[],
            domain_samples=[],
            persona=personas[0],
            examples=["x"],
            seed=0,
        )


def test_render_prompt_lists_every_tool(pack, graph, personas):
    ctx = sample_context(pack, graph, 5, personas)
    prompt = render_prompt(ctx, load_template("generation"), pack)
    for name in ctx.write_apis + ctx.read_apis_available:
        assert f"def {name}(" in prompt
    assert ctx.persona.description in prompt
    assert "{" + "persona" + "}" not in prompt
    assert prompt.rstrip().endswith("Generate the task now.")


def test_render_prompt_marks_empty_sections(pack, graph, personas):
    ctx = sample_context(pack, graph, 5, personas)
    ctx = ctx.model_copy(update={"user_samples": [], "policy_excerpts": []})
    prompt = render_prompt(ctx, load_template("generation"), pack)
    assert "### User Data\n" + NONE_MARKER in prompt


def test_sampler_follows_the_pack_sampling_spec(pack, graph, personas):
    other = dataclasses.replace(
        pack,
        seed=EntityStore(
            {
                "reservations": {
                    "r_1": {"id": "r_1", "passenger": "p_1"},
                    "r_2": {"id": "r_2", "passenger": "p_2"},
                },
                "passengers": {"p_1": {"id": "p_1"}, "p_2": {"id": "p_2"}},
            }
        ),
        sampling=SamplingSpec(collection="reservations", owner_field="passenger", owner_collection="passengers"),
    )
    ctx = sample_context(other, graph, 4, personas, SamplerKnobs(domain_samples=(2, 2)))
    assert {s.collection for s in ctx.domain_samples} == {"reservations"}
    assert [u.id for u in ctx.user_samples] == ["p_1", "p_2"]


def test_sampler_without_owners(pack, graph, personas):
    products = dataclasses.replace(pack, sampling=SamplingSpec(collection="products"))
    ctx = sample_context(products, graph, 2, personas)
    assert ctx.domain_samples and all(s.collection == "products" for s in ctx.domain_samples)
    assert ctx.user_samples == []


def _pack_copy(tmp_path, **sampling):
    root = tmp_path / "pack"
    shutil.copytree(settings.DATA_DIR / "retail", root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if sampling:
        manifest["sampling"] = sampling
    else:
        del manifest["sampling"]
    (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    return root


@pytest.mark.parametrize(
    "sampling, message",
    [
        ({}, "must name the sampled collection"),
        ({"collection": "flights"}, "not in the schema"),
        ({"collection": "orders", "owner_field": "user_id"}, "go together"),
    ],
)
def test_pack_sampling_spec_is_validated(tmp_path, sampling, message):
    with pytest.raises(ValueError, match=message):
        load_domain_pack(_pack_copy(tmp_path, **sampling))
