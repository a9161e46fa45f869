"""Synthetic entity/attribute worlds, splits and intervention tuples."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_text, dump_json

PLACEHOLDER = "{E}"

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
SYLLABLES = tuple(c + v for c in CONSONANTS for v in VOWELS)

ATTRIBUTE_FORMS = (
    ("nl", "{E} has the {a}"),
    ("nl", "The {a} of {E} is"),
    ("nl", "Q: What is the {a} of {E}? A:"),
    ("nl", "{E}'s {a} is"),
    ("nl", "In terms of {a}, {E} is"),
    ("nl", "Tell me the {a} of {E}:"),
    ("nl", "As for {E}, its {a} is"),
    ("nl", "Known {a} of {E}:"),
    ("json", '{"name": "{E}", "{a}":'),
    ("json", '{"entity": "{E}", "{a}":'),
    ("json", '["{E}", {"{a}":'),
    ("json", '{"item": "{E}", "{a}":'),
)

ENTITY_FORMS = (
    ("nl", "{E} is a large place"),
    ("nl", "People often visit {E}"),
    ("nl", "{E} was founded long ago"),
    ("nl", "I heard about {E} yesterday"),
    ("nl", "Many people live in {E}"),
    ("nl", "We talked about {E} today"),
    ("nl", "Nobody forgets {E}"),
    ("nl", "The old town of {E} is quiet"),
    ("json", '{"name": "{E}"}'),
    ("json", '{"entity": "{E}", "type": "place"}'),
)


class SpecError(ValueError):
    pass


class SplitError(ValueError):
    pass


class EmptyInstanceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    n_values: int
    dependency: str = "independent"  # independent | function | noisy
    parent: str | None = None
    noise: float = 0.0


def default_attributes() -> tuple[AttributeSpec, ...]:
    return (
        AttributeSpec("country", 12),
        AttributeSpec("continent", 4, "function", "country"),
        AttributeSpec("language", 8, "noisy", "country", 0.2),
        AttributeSpec("climate", 5),
    )


@dataclass
class WorldSpec:
    n_entities: int = 200
    attributes: tuple[AttributeSpec, ...] = field(default_factory=default_attributes)
    n_attribute_templates: int = 8
    n_entity_templates: int = 8
    few_shot: int = 0
    seed: int = 0
    entity_type: str = "place"

    def validate(self) -> list[AttributeSpec]:
        """Check the spec and return attributes in dependency order."""
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SpecError("duplicate attribute names")
        if len(names) < 2:
            raise SpecError("need at least two attributes")
        if self.n_entities < 2:
            raise SpecError("need at least two entities")
        if not 1 <= self.n_attribute_templates <= len(ATTRIBUTE_FORMS):
            raise SpecError(f"n_attribute_templates must be in [1, {len(ATTRIBUTE_FORMS)}]")
        if not 1 <= self.n_entity_templates <= len(ENTITY_FORMS):
            raise SpecError(f"n_entity_templates must be in [1, {len(ENTITY_FORMS)}]")
        byname = {a.name: a for a in self.attributes}
        for a in self.attributes:
            if a.n_values < 2:
                raise SpecError(f"attribute {a.name} needs >= 2 values")
            if a.dependency not in ("independent", "function", "noisy"):
                raise SpecError(f"unknown dependency {a.dependency!r}")
            if a.dependency != "independent":
                if a.parent not in byname:
                    raise SpecError(f"attribute {a.name} depends on unknown {a.parent!r}")
                if a.dependency == "noisy" and not 0 <= a.noise <= 1:
                    raise SpecError("noise rate must be in [0, 1]")
        order: list[AttributeSpec] = []
        state: dict[str, int] = {}

        def visit(a: AttributeSpec, stack: tuple[str, ...]) -> None:
            if state.get(a.name) == 2:
                return
            if state.get(a.name) == 1:
                raise SpecError("cyclic dependency: " + " -> ".join(stack + (a.name,)))
            state[a.name] = 1
            if a.dependency != "independent":
                visit(byname[a.parent], stack + (a.name,))
            state[a.name] = 2
            order.append(a)

        for a in self.attributes:
            visit(a, ())
        return order


@dataclass(frozen=True)
class Template:
    id: str
    text: str
    attribute: str | None
    format: str

    def fill(self, entity: str) -> str:
        return self.text.replace(PLACEHOLDER, entity)


@dataclass
class World:
    entity_type: str
    entities: list[str]
    attributes: list[str]
    values: dict[str, list[str]]
    table: dict[str, dict[str, str]]
    templates: list[Template]
    few_shot: int = 0
    dependencies: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        self._templates = {t.id: t for t in self.templates}
        for t in self.templates:
            if t.text.count(PLACEHOLDER) != 1:
                raise SpecError(f"template {t.id} must contain exactly one {PLACEHOLDER}")
        for e in self.entities:
            missing = set(self.attributes) - set(self.table.get(e, {}))
            if missing:
                raise SpecError(f"entity {e} lacks {sorted(missing)}")

    def getattr(self, attribute: str, entity: str) -> str:
        return self.table[entity][attribute]

    def template(self, tid: str) -> Template:
        return self._templates[tid]

    def attribute_templates(self, attribute: str) -> list[Template]:
        return [t for t in self.templates if t.attribute == attribute]

    def entity_templates(self) -> list[Template]:
        return [t for t in self.templates if t.attribute is None]

    def surface_strings(self) -> list[str]:
        """Every filled template plus every value as it follows a prompt."""
        return [t.fill(e) for t in self.templates for e in self.entities] + [
            " " + v for a in self.attributes for v in self.values[a]
        ]

    def subset(self, entities=None, templates=None) -> "World":
        keep_e = self.entities if entities is None else [e for e in self.entities if e in set(entities)]
        keep_t = self.templates if templates is None else [t for t in self.templates if t.id in set(templates)]
        return World(
            entity_type=self.entity_type,
            entities=list(keep_e),
            attributes=list(self.attributes),
            values={a: list(v) for a, v in self.values.items()},
            table={e: dict(self.table[e]) for e in keep_e},
            templates=list(keep_t),
            few_shot=self.few_shot,
            dependencies=dict(self.dependencies),
        )

    # serialization -------------------------------------------------------

    def save(self, out: str | Path) -> None:
        out = Path(out)
        atomic_write_text(
            out / "entities.jsonl",
            "".join(json.dumps({"name": e, "attributes": self.table[e]}, sort_keys=True) + "\n" for e in self.entities),
        )
        atomic_write_text(
            out / "templates.jsonl",
            "".join(
                json.dumps({"id": t.id, "template": t.text, "attribute": t.attribute, "format": t.format}, sort_keys=True)
                + "\n"
                for t in self.templates
            ),
        )
        meta = {
            "entity_type": self.entity_type,
            "attributes": self.attributes,
            "values": self.values,
            "few_shot": self.few_shot,
            "dependencies": self.dependencies,
        }
        atomic_write_text(out / "world.json", dump_json(meta))

    @classmethod
    def load(cls, src: str | Path) -> "World":
        src = Path(src)
        meta = json.loads((src / "world.json").read_text())
        ents = [json.loads(line) for line in (src / "entities.jsonl").read_text().splitlines() if line]
        tmpls = [json.loads(line) for line in (src / "templates.jsonl").read_text().splitlines() if line]
        return cls(
            entity_type=meta["entity_type"],
            entities=[e["name"] for e in ents],
            attributes=list(meta["attributes"]),
            values={k: list(v) for k, v in meta["values"].items()},
            table={e["name"]: dict(e["attributes"]) for e in ents},
            templates=[Template(t["id"], t["template"], t["attribute"], t["format"]) for t in tmpls],
            few_shot=meta.get("few_shot", 0),
            dependencies=meta.get("dependencies", {}),
        )


def _entity_names(n: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(names) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise SpecError(f"cannot draw {n} distinct entity names")
        length = int(rng.integers(2, 4))
        sylls = [SYLLABLES[int(i)] for i in rng.integers(0, len(SYLLABLES), size=length)]
        name = "".join(sylls).capitalize()
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _value_names(total: int, rng: np.random.Generator) -> list[str]:
    # vowel-initial so they never collide with consonant-initial entity names
    out: list[str] = []
    seen: set[str] = set()
    cons = "lnrstvmk"
    while len(out) < total:
        v1, v2 = (VOWELS[int(i)] for i in rng.integers(0, len(VOWELS), size=2))
        c1, c2 = (cons[int(i)] for i in rng.integers(0, len(cons), size=2))
        w = (v1 + c1 + v2 + c2).capitalize()
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def generate_world(spec: WorldSpec) -> World:
    order = spec.validate()
    rng = np.random.default_rng(spec.seed)
    entities = _entity_names(spec.n_entities, rng)
    names = _value_names(sum(a.n_values for a in spec.attributes), rng)
    values: dict[str, list[str]] = {}
    i = 0
    for a in spec.attributes:
        values[a.name] = names[i : i + a.n_values]
        i += a.n_values

    table: dict[str, dict[str, str]] = {e: {} for e in entities}
    dependencies: dict[str, dict] = {}
    for a in order:
        vals = values[a.name]
        if a.dependency == "independent":
            for e in entities:
                table[e][a.name] = vals[int(rng.integers(0, len(vals)))]
            dependencies[a.name] = {"kind": "independent"}
            continue
        pvals = values[a.parent]
        # surjective where possible: cycle the child values over a shuffled parent order
        perm = rng.permutation(len(pvals))
        mapping = {pvals[int(p)]: vals[j % len(vals)] for j, p in enumerate(perm)}
        dependencies[a.name] = {"kind": a.dependency, "parent": a.parent, "map": mapping, "noise": a.noise}
        for e in entities:
            v = mapping[table[e][a.parent]]
            if a.dependency == "noisy" and rng.random() < a.noise:
                others = [x for x in vals if x != v]
                v = others[int(rng.integers(0, len(others)))]
            table[e][a.name] = v

    templates: list[Template] = []
    for a in spec.attributes:
        picks = rng.permutation(len(ATTRIBUTE_FORMS))[: spec.n_attribute_templates]
        for j, p in enumerate(sorted(int(x) for x in picks)):
            fmt, form = ATTRIBUTE_FORMS[p]
            templates.append(Template(f"{a.name}/{j}", form.replace("{a}", a.name), a.name, fmt))
    picks = rng.permutation(len(ENTITY_FORMS))[: spec.n_entity_templates]
    for j, p in enumerate(sorted(int(x) for x in picks)):
        fmt, form = ENTITY_FORMS[p]
        templates.append(Template(f"entity/{j}", form, None, fmt))

    return World(
        entity_type=spec.entity_type,
        entities=entities,
        attributes=[a.name for a in spec.attributes],
        values=values,
        table=table,
        templates=templates,
        few_shot=spec.few_shot,
        dependencies=dependencies,
    )


# splits --------------------------------------------------------------------


@dataclass
class Split:
    mode: str  # entity | context
    train: list[str]
    dev: list[str]
    test: list[str]

    def part(self, name: str) -> list[str]:
        if name not in ("train", "dev", "test"):
            raise SplitError(f"unknown split part {name!r}")
        return getattr(self, name)

    def to_json(self) -> dict:
        return {"mode": self.mode, "train": self.train, "dev": self.dev, "test": self.test}

    @classmethod
    def from_json(cls, d: dict) -> "Split":
        return cls(d["mode"], list(d["train"]), list(d["dev"]), list(d["test"]))


def partition_counts(n: int) -> tuple[int, int, int]:
    quarter = n // 4
    return n - 2 * quarter, quarter, quarter


def _partition(items: list[str], rng: np.random.Generator) -> tuple[list[str], list[str], list[str]]:
    if len(items) < 4:
        raise SplitError(f"need at least 4 items to split, got {len(items)}")
    n_train, n_dev, _ = partition_counts(len(items))
    order = [items[int(i)] for i in rng.permutation(len(items))]
    return order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :]


def make_splits(world: World, mode: str, seed: int = 0) -> Split:
    rng = np.random.default_rng(seed)
    if mode == "entity":
        tr, dv, te = _partition(list(world.entities), rng)
        return Split("entity", tr, dv, te)
    if mode == "context":
        tr, dv, te = [], [], []
        groups = [[t.id for t in world.attribute_templates(a)] for a in world.attributes]
        groups.append([t.id for t in world.entity_templates()])
        for g in groups:
            a, b, c = _partition(g, rng)
            tr += a
            dv += b
            te += c
        return Split("context", tr, dv, te)
    raise SplitError(f"unknown split mode {mode!r}")


def split_view(world: World, split: Split, part: str) -> tuple[list[str], list[Template]]:
    """Entities and templates visible in one part of a split."""
    members = set(split.part(part))
    if split.mode == "entity":
        return [e for e in world.entities if e in members], list(world.templates)
    return list(world.entities), [t for t in world.templates if t.id in members]


def save_splits(path: str | Path, splits: dict[str, Split]) -> None:
    atomic_write_text(path, dump_json({k: s.to_json() for k, s in splits.items()}))


def load_splits(path: str | Path) -> dict[str, Split]:
    raw = json.loads(Path(path).read_text())
    return {k: Split.from_json(v) for k, v in raw.items()}


# intervention tuples -----------------------------------------------------------


@dataclass(frozen=True)
class InterventionTuple:
    attribute: str  # the attribute A the featurizer targets
    target: str  # A*
    kind: str  # cause | iso
    base_entity: str
    base_template: str
    source_entity: str
    source_template: str
    label: str
    base_text: str
    source_text: str

    def to_json(self) -> dict:
        d = asdict(self)
        d["x"] = d.pop("base_text")
        d["x_source"] = d.pop("source_text")
        d["A*"] = d.pop("target")
        d["y"] = d.pop("label")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "InterventionTuple":
        return cls(
            attribute=d["attribute"],
            target=d["A*"],
            kind=d["kind"],
            base_entity=d["base_entity"],
            base_template=d["base_template"],
            source_entity=d["source_entity"],
            source_template=d["source_template"],
            label=d["y"],
            base_text=d["x"],
            source_text=d["x_source"],
        )


def expected_label(world: World, t: InterventionTuple) -> str:
    if t.kind == "cause":
        return world.getattr(t.attribute, t.source_entity)
    return world.getattr(t.target, t.base_entity)


def pair_interventions(
    world: World,
    split: Split,
    part: str,
    attribute: str,
    n: int,
    seed: int = 0,
    distinct: bool = True,
    entity_prompt_rate: float = 0.5,
) -> list[InterventionTuple]:
    """Sample ``n`` tuples for ``attribute``: half cause, half iso.

    Iso tuples cycle through the other attributes so each distractor gets an
    equal share. With ``distinct`` the source entity is resampled until its
    value for the queried attribute differs from the base entity's.
    """
    if attribute not in world.attributes:
        raise KeyError(attribute)
    if n <= 0:
        return []
    entities, templates = split_view(world, split, part)
    if len(entities) < 2:
        raise SplitError(f"need at least two entities in {part}, got {len(entities)}")
    by_attr = {a: [t for t in templates if t.attribute == a] for a in world.attributes}
    ent_tmpls = [t for t in templates if t.attribute is None]
    if not by_attr[attribute]:
        raise SplitError(f"no templates for {attribute} in {part}")
    rng = np.random.default_rng(seed)
    distractors = [a for a in world.attributes if a != attribute]
    n_iso = n // 2
    jobs = [(attribute, "cause")] * (n - n_iso) + [(distractors[i % len(distractors)], "iso") for i in range(n_iso)]

    out: list[InterventionTuple] = []
    for target, kind in jobs:
        base_pool = by_attr[target]
        if not base_pool:
            raise SplitError(f"no templates for {target} in {part}")
        e = entities[int(rng.integers(0, len(entities)))]
        candidates = [x for x in entities if x != e]
        if distinct:
            candidates = [x for x in candidates if world.getattr(target, x) != world.getattr(target, e)]
            if not candidates:
                raise SplitError(f"no source entity differs from {e} on {target}")
        e2 = candidates[int(rng.integers(0, len(candidates)))]
        bt = base_pool[int(rng.integers(0, len(base_pool)))]
        if ent_tmpls and rng.random() < entity_prompt_rate:
            pool = ent_tmpls
        else:
            pool = [t for t in templates if t.attribute is not None]
        st = pool[int(rng.integers(0, len(pool)))]
        label = world.getattr(attribute, e2) if kind == "cause" else world.getattr(target, e)
        out.append(
            InterventionTuple(attribute, target, kind, e, bt.id, e2, st.id, label, bt.fill(e), st.fill(e2))
        )
    return out


def save_tuples(path: str | Path, tuples_by_key: dict[tuple[str, str, str], list[InterventionTuple]]) -> None:
    lines = []
    for (mode, part, attribute), ts in sorted(tuples_by_key.items()):
        for t in ts:
            d = t.to_json()
            d["mode"] = mode
            d["part"] = part
            lines.append(json.dumps(d, sort_keys=True) + "\n")
    atomic_write_text(path, "".join(lines))


def load_tuples(path: str | Path) -> dict[tuple[str, str, str], list[InterventionTuple]]:
    out: dict[tuple[str, str, str], list[InterventionTuple]] = {}
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        d = json.loads(line)
        out.setdefault((d["mode"], d["part"], d["attribute"]), []).append(InterventionTuple.from_json(d))
    return out


def build_tuple_sets(
    world: World, splits: dict[str, Split], sizes: dict[str, int], seed: int, distinct: bool = True
) -> dict[tuple[str, str, str], list[InterventionTuple]]:
    out = {}
    for mode, split in splits.items():
        for part, n in sizes.items():
            for a in world.attributes:
                sub_seed = seed * 1000 + hash_label(f"{mode}/{part}/{a}")
                out[(mode, part, a)] = pair_interventions(world, split, part, a, n, seed=sub_seed, distinct=distinct)
    return out


def hash_label(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")


def empirical_violation_rate(world: World, attribute: str) -> float:
    dep = world.dependencies.get(attribute, {})
    if dep.get("kind") not in ("function", "noisy"):
        raise SpecError(f"{attribute} has no declared parent")
    mapping, parent = dep["map"], dep["parent"]
    bad = sum(world.getattr(attribute, e) != mapping[world.getattr(parent, e)] for e in world.entities)
    return bad / len(world.entities)


def few_shot_prefix(world: World, template: Template, pool: list[str], k: int, rng: np.random.Generator) -> str:
    """Demonstrations drawn from ``pool`` (training entities only)."""
    if k <= 0 or template.attribute is None:
        return ""
    picks = [pool[int(i)] for i in rng.choice(len(pool), size=min(k, len(pool)), replace=False)]
    return "".join(f"{template.fill(e)} {world.getattr(template.attribute, e)}. " for e in picks)
