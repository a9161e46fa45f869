"""Keep only the entities and templates a model answers correctly."""

from __future__ import annotations

from dataclasses import dataclass

from .lm import attribute_accuracy
from .tokenizer import Tokenizer
from .world import EmptyInstanceError, World


@dataclass
class FilterReport:
    threshold: float
    entity_accuracy: dict[str, float]
    template_accuracy: dict[str, float]
    kept_entities: list[str]
    kept_templates: list[str]
    accuracy_before: float
    accuracy_after: float

    @property
    def retained_fraction(self) -> float:
        return len(self.kept_entities) / max(len(self.entity_accuracy), 1)

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "accuracy_before": round(self.accuracy_before, 6),
            "accuracy_after": round(self.accuracy_after, 6),
            "retained_fraction": round(self.retained_fraction, 6),
            "kept_entities": self.kept_entities,
            "kept_templates": self.kept_templates,
            "entity_accuracy": {k: round(v, 6) for k, v in self.entity_accuracy.items()},
            "template_accuracy": {k: round(v, 6) for k, v in self.template_accuracy.items()},
        }


def _mean(xs) -> float:
    xs = list(xs)
    return sum(xs) / len(xs) if xs else 0.0


def filter_instance(world: World, model, tokenizer: Tokenizer, threshold: float = 0.9) -> tuple[World, FilterReport]:
    """Drop entities, then attribute templates, whose first-token accuracy is below ``threshold``.

    Entity accuracy is taken over all attribute templates; template accuracy
    over the surviving entities. Entity templates carry no label and are kept.
    """
    _, correct = attribute_accuracy(model, world, tokenizer)
    attr_templates = [t.id for t in world.templates if t.attribute is not None]
    ent_acc = {e: _mean(correct[(t, e)] for t in attr_templates) for e in world.entities}
    kept_e = [e for e in world.entities if ent_acc[e] >= threshold]
    tmpl_acc = {t: _mean(correct[(t, e)] for e in kept_e) for t in attr_templates}
    kept_t = [t for t in attr_templates if tmpl_acc[t] >= threshold]
    diagnostics = {
        "threshold": threshold,
        "best_entity_accuracy": max(ent_acc.values(), default=0.0),
        "mean_entity_accuracy": _mean(ent_acc.values()),
        "entities_kept": len(kept_e),
        "templates_kept": len(kept_t),
    }
    if not kept_e or not kept_t:
        raise EmptyInstanceError(f"nothing survives filtering at threshold {threshold}", diagnostics)
    kept_t += [t.id for t in world.entity_templates()]
    filtered = world.subset(entities=kept_e, templates=kept_t)
    after = _mean(correct[(t.id, e)] for e in kept_e for t in filtered.templates if t.attribute is not None)
    report = FilterReport(
        threshold=threshold,
        entity_accuracy=ent_acc,
        template_accuracy=tmpl_acc,
        kept_entities=kept_e,
        kept_templates=[t.id for t in filtered.templates],
        accuracy_before=_mean(correct.values()),
        accuracy_after=after,
    )
    return filtered, report
