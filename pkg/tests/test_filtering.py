import pytest
import torch

from disentangle.filtering import filter_instance
from disentangle.world import EmptyInstanceError


class Spoiled:
    """Wraps a model and answers wrongly for chosen (entity, template) pairs."""

    def __init__(self, model, world, bad_entities=(), bad_templates=()):
        self.model = model
        self.bad_e = {world.entities.index(e) for e in bad_entities}
        self.bad_t = {i for i, t in enumerate(world.templates) if t.id in bad_templates}

    def clean_logits(self, batch):
        logits = self.model.clean_logits(batch).clone()
        for i in range(len(batch)):
            if int(batch.entity[i]) in self.bad_e or int(batch.template[i]) in self.bad_t:
                # swap the top two entries so argmax changes
                top = logits[i].topk(2).indices
                logits[i, top[0]], logits[i, top[1]] = logits[i, top[1]].item(), logits[i, top[0]].item()
        return logits


def test_perfect_model_is_identity(small_world, small_tok, planted):
    out, rep = filter_instance(small_world, planted, small_tok, 0.9)
    assert out.entities == small_world.entities
    assert [t.id for t in out.templates] == [t.id for t in small_world.templates]
    assert rep.accuracy_before == rep.accuracy_after == 1.0
    assert rep.retained_fraction == 1.0


def test_impossible_threshold(small_world, small_tok, planted):
    with pytest.raises(EmptyInstanceError) as err:
        filter_instance(small_world, planted, small_tok, 1.01)
    assert err.value.diagnostics["best_entity_accuracy"] == 1.0


def test_bad_entities_and_templates_dropped(small_world, small_tok, planted):
    bad_e = small_world.entities[:3]
    attr_t = [t.id for t in small_world.templates if t.attribute]
    model = Spoiled(planted, small_world, bad_e, attr_t[:1])
    out, rep = filter_instance(small_world, model, small_tok, 0.9)
    assert out.entities == small_world.entities[3:]
    kept = {t.id for t in out.templates}
    assert attr_t[0] not in kept and set(attr_t[1:]) <= kept
    # entity templates carry no label and always survive
    assert {t.id for t in small_world.entity_templates()} <= kept
    assert rep.accuracy_after == 1.0 > rep.accuracy_before
    assert rep.to_json()["retained_fraction"] == round(77 / 80, 6)


def test_low_threshold_keeps_partial_entities(small_world, small_tok, planted):
    attr_t = [t.id for t in small_world.templates if t.attribute]
    model = Spoiled(planted, small_world, bad_templates=attr_t[:2])
    frac = 1 - 2 / len(attr_t)
    out, rep = filter_instance(small_world, model, small_tok, frac)
    assert out.entities == small_world.entities
    assert rep.entity_accuracy[small_world.entities[0]] == pytest.approx(frac)
    with pytest.raises(EmptyInstanceError):
        filter_instance(small_world, model, small_tok, frac + 0.01)


def test_logits_unchanged_by_wrapper_when_clean(small_world, small_tok, planted, factory):
    batch = factory.batch([(small_world.templates[0].id, e) for e in small_world.entities[:5]])
    assert torch.equal(Spoiled(planted, small_world).clean_logits(batch), planted.clean_logits(batch))
