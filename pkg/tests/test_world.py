import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangle.world import (
    PLACEHOLDER,
    AttributeSpec,
    SpecError,
    SplitError,
    World,
    WorldSpec,
    empirical_violation_rate,
    expected_label,
    few_shot_prefix,
    generate_world,
    load_splits,
    load_tuples,
    make_splits,
    pair_interventions,
    partition_counts,
    save_splits,
    save_tuples,
    split_view,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec())


def test_default_world_is_complete(world):
    assert len(world.entities) == 200
    assert len(world.attributes) == 4
    for e in world.entities:
        assert set(world.table[e]) == set(world.attributes)


def test_function_dependency_holds(world):
    dep = world.dependencies["continent"]
    for e in world.entities:
        assert world.getattr("continent", e) == dep["map"][world.getattr("country", e)]


def test_noisy_dependency_rate(world):
    # counted straight from the table
    assert abs(empirical_violation_rate(world, "language") - 0.2) <= 0.05


def test_attributes_have_multiple_values(world):
    for a in world.attributes:
        assert len({world.getattr(a, e) for e in world.entities}) >= 2


def test_templates_have_one_placeholder_and_json(world):
    assert all(t.text.count(PLACEHOLDER) == 1 for t in world.templates)
    assert {t.format for t in world.templates} == {"nl", "json"}
    assert world.entity_templates()


def test_cycle_is_rejected():
    spec = WorldSpec(
        attributes=(
            AttributeSpec("a", 3, "function", "b"),
            AttributeSpec("b", 3, "function", "a"),
        )
    )
    with pytest.raises(SpecError, match="cyclic"):
        generate_world(spec)


def test_single_value_attribute_rejected():
    with pytest.raises(SpecError):
        generate_world(WorldSpec(attributes=(AttributeSpec("a", 1), AttributeSpec("b", 3))))


def test_generation_is_deterministic():
    a, b = generate_world(WorldSpec(n_entities=30, seed=4)), generate_world(WorldSpec(n_entities=30, seed=4))
    assert a.entities == b.entities and a.table == b.table
    assert generate_world(WorldSpec(n_entities=30, seed=5)).entities != a.entities


def test_world_round_trip(tmp_path, world):
    world.save(tmp_path)
    back = World.load(tmp_path)
    assert back.entities == world.entities
    assert back.table == world.table
    assert back.templates == world.templates
    assert back.values == world.values
    assert back.dependencies == world.dependencies


# splits


def test_entity_split_counts(world):
    sp = make_splits(world, "entity")
    assert (len(sp.train), len(sp.dev), len(sp.test)) == (100, 50, 50)


def test_partition_rounding_rule():
    # train keeps the remainder after floor(n/4) for dev and test
    assert partition_counts(7) == (5, 1, 1)
    assert partition_counts(8) == (4, 2, 2)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(4, 500))
def test_partition_counts_exhaustive(n):
    tr, dv, te = partition_counts(n)
    assert tr + dv + te == n and dv == te == n // 4 and tr >= dv


def test_context_split_partitions_each_attribute(world):
    sp = make_splits(world, "context")
    for a in world.attributes:
        ids = {t.id for t in world.attribute_templates(a)}
        parts = [ids & set(sp.part(p)) for p in ("train", "dev", "test")]
        assert [len(p) for p in parts] == [4, 2, 2]
    assert set(sp.train).isdisjoint(sp.dev) and set(sp.dev).isdisjoint(sp.test)


def test_splits_round_trip(tmp_path, world):
    splits = {m: make_splits(world, m) for m in ("entity", "context")}
    save_splits(tmp_path / "splits.json", splits)
    assert load_splits(tmp_path / "splits.json") == splits


def test_make_splits_too_few():
    tiny = generate_world(WorldSpec(n_entities=3))
    with pytest.raises(SplitError):
        make_splits(tiny, "entity")


# tuples


def test_tuples_consistent_with_table(world):
    sp = make_splits(world, "entity")
    ts = pair_interventions(world, sp, "train", "continent", 200, seed=3)
    assert sum(t.kind == "cause" for t in ts) == 100
    for t in ts:
        assert t.label == expected_label(world, t)
        assert t.base_entity != t.source_entity
        if t.kind == "cause":
            assert t.target == "continent" and t.label == world.getattr("continent", t.source_entity)
        else:
            assert t.target != "continent" and t.label == world.getattr(t.target, t.base_entity)


def test_iso_balanced_over_distractors(world):
    sp = make_splits(world, "entity")
    ts = pair_interventions(world, sp, "dev", "country", 120, seed=0)
    counts = {}
    for t in ts:
        if t.kind == "iso":
            counts[t.target] = counts.get(t.target, 0) + 1
    assert counts == {"continent": 20, "language": 20, "climate": 20}


def test_source_prompts_mix_entity_and_attribute(world):
    sp = make_splits(world, "entity")
    ts = pair_interventions(world, sp, "train", "climate", 400, seed=1)
    frac = np.mean([world.template(t.source_template).attribute is None for t in ts])
    assert 0.4 < frac < 0.6


def test_distinct_source_values(world):
    sp = make_splits(world, "entity")
    for t in pair_interventions(world, sp, "test", "continent", 100, seed=2):
        assert world.getattr(t.target, t.base_entity) != world.getattr(t.target, t.source_entity)


def test_entity_split_test_tuples_hold_out_training_entities(world):
    sp = make_splits(world, "entity")
    train = set(sp.train)
    for t in pair_interventions(world, sp, "test", "language", 100, seed=5):
        assert t.base_entity not in train and t.source_entity not in train


def test_context_split_test_tuples_hold_out_training_templates(world):
    sp = make_splits(world, "context")
    train = set(sp.train)
    for t in pair_interventions(world, sp, "test", "language", 100, seed=5):
        assert t.base_template not in train and t.source_template not in train


def test_zero_tuples_and_too_few_entities(world):
    sp = make_splits(world, "entity")
    assert pair_interventions(world, sp, "test", "country", 0) == []
    small = world.subset(entities=world.entities[:1])
    with pytest.raises(SplitError):
        pair_interventions(small, make_splits(world, "context"), "test", "country", 4)


def test_tuples_round_trip(tmp_path, world):
    sp = make_splits(world, "entity")
    ts = pair_interventions(world, sp, "dev", "climate", 10)
    save_tuples(tmp_path / "tuples.jsonl", {("entity", "dev", "climate"): ts})
    assert load_tuples(tmp_path / "tuples.jsonl") == {("entity", "dev", "climate"): ts}
    rec = json.loads((tmp_path / "tuples.jsonl").read_text().splitlines()[0])
    assert {"x", "x_source", "A*", "y", "kind"} <= set(rec)


def test_few_shot_prefix_uses_pool_only(world):
    sp = make_splits(world, "entity")
    rng = np.random.default_rng(0)
    t = world.attribute_templates("country")[0]
    assert few_shot_prefix(world, t, sp.train, 3, rng).count(". ") == 3
    e = sp.train[0]
    assert few_shot_prefix(world, t, [e], 3, rng) == f"{t.fill(e)} {world.getattr('country', e)}. "


def test_split_view_shapes(world):
    sp = make_splits(world, "context")
    ents, tmpls = split_view(world, sp, "dev")
    assert ents == world.entities
    assert {t.id for t in tmpls} == set(sp.dev)
