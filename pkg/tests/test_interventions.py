import json

import pytest
import torch

from disentangle.featurizers import BasisFeaturizer, DasFeaturizer, IdentityFeaturizer, fit_pca
from disentangle.interventions import (
    ActivationSite,
    FeatureHandle,
    InterventionError,
    clean_predictions,
    dump_traces,
    empty_handle,
    full_rep_handle,
    full_rep_intervene,
    get_feature,
    get_vals,
    interchange_generate,
    interchange_intervene,
    intervened_logits,
    predict_tuples,
    tuple_batch,
)
from disentangle.lm import Hook, SiteError, decode_greedy
from disentangle.tensor import qr_orthonormalize
from disentangle.world import pair_interventions


@pytest.fixture(scope="module")
def tb(small_world, small_tok, small_split):
    ts = pair_interventions(small_world, small_split, "train", "country", 100, seed=0)
    return tuple_batch(small_world, small_tok, ts)


def random_rotation(n, seed=0):
    return qr_orthonormalize(torch.randn(n, n, generator=torch.Generator().manual_seed(seed)))


def test_get_vals_deterministic_and_layer0(tiny_lm, tb):
    site = ActivationSite(0)
    a, b = get_vals(tiny_lm, tb.base, site), get_vals(tiny_lm, tb.base, site)
    assert torch.equal(a, b)
    rows = torch.arange(len(tb))
    ids = tb.base.ids[rows, tb.base.ent_pos]
    expected = tiny_lm.tok_emb[ids] + tiny_lm.pos_emb[tb.base.ent_pos]
    assert torch.equal(a, expected)


def test_get_vals_differs_between_entities(tiny_lm, tb):
    v = get_vals(tiny_lm, tb.base, ActivationSite(1))
    assert (v[0] - v[1]).abs().max() > 0


def test_site_out_of_range(tiny_lm, tb):
    with pytest.raises(InterventionError):
        get_vals(tiny_lm, tb.base, ActivationSite(2))
    with pytest.raises(SiteError):
        tiny_lm(tb.base.ids[0], [Hook(5, 0, lambda v: None)])


def test_get_feature_identity_and_empty(tiny_lm, tb):
    site = ActivationSite(1)
    vals = get_vals(tiny_lm, tb.source, site)
    assert torch.equal(get_feature(tiny_lm, tb.source, full_rep_handle(16, site)), vals)
    assert get_feature(tiny_lm, tb.source, empty_handle(16, site)).shape == (len(tb), 0)


def test_orthogonal_featurizer_preserves_norm(tiny_lm, tb):
    fz = BasisFeaturizer(random_rotation(16))
    vals = get_vals(tiny_lm, tb.source, ActivationSite(0))
    feats = fz.encode(vals)
    assert torch.allclose(feats.norm(dim=1), vals.norm(dim=1), atol=1e-4)


def test_self_interchange_is_clean_decoding(tiny_lm, tb):
    h = FeatureHandle(BasisFeaturizer(random_rotation(16, 1)), range(5), ActivationSite(1))
    clean = clean_predictions(tiny_lm, tb.base)
    assert torch.equal(interchange_intervene(tiny_lm, h, tb.base, tb.base), clean)


def test_empty_features_equal_clean_logits(tiny_lm, tb):
    h = empty_handle(16, ActivationSite(1))
    rows = torch.arange(len(tb))
    clean = tiny_lm(tb.base.ids)[rows, tb.base.last]
    assert torch.equal(intervened_logits(tiny_lm, h, tb.base, tb.source), clean)


def test_full_orthogonal_equals_full_rep_bit_exact(tiny_lm, tb):
    site = ActivationSite(1)
    das = DasFeaturizer(random_rotation(16, 2))
    rep = intervened_logits(tiny_lm, full_rep_handle(16, site), tb.base, tb.source)
    assert torch.equal(intervened_logits(tiny_lm, FeatureHandle(das, range(16), site), tb.base, tb.source), rep)
    basis = BasisFeaturizer(random_rotation(16, 3))
    assert torch.equal(intervened_logits(tiny_lm, FeatureHandle(basis, range(16), site), tb.base, tb.source), rep)
    assert torch.equal(full_rep_intervene(tiny_lm, site, tb.base, tb.source), rep.argmax(-1))


def test_reduced_das_matches_generic_edit(tiny_lm, tb):
    w = random_rotation(16, 4)[:3]
    das = DasFeaturizer(w)
    base = get_vals(tiny_lm, tb.base, ActivationSite(0))
    src = get_vals(tiny_lm, tb.source, ActivationSite(0))
    fast = das.intervene(base, src, torch.arange(3))
    proj = w.T @ w
    assert torch.allclose(fast, base - base @ proj + src @ proj, atol=1e-5)
    generic = BasisFeaturizer(das.basis).intervene(base, src, torch.arange(3))
    assert torch.allclose(fast, generic, atol=1e-5)


def test_dimension_mismatch(tiny_lm, tb):
    h = full_rep_handle(8, ActivationSite(0))
    with pytest.raises(InterventionError):
        intervened_logits(tiny_lm, h, tb.base, tb.source)


def test_feature_indices_validated():
    fz = IdentityFeaturizer(4)
    with pytest.raises(InterventionError):
        FeatureHandle(fz, [0, 0], ActivationSite(0))
    with pytest.raises(InterventionError):
        FeatureHandle(fz, [4], ActivationSite(0))


def test_hooks_are_transparent(tiny_lm, tb):
    ids = tb.base.ids[0, : tb.base.lengths[0]]
    plain = tiny_lm(ids)
    seen = []
    read = tiny_lm(ids, [Hook(1, int(tb.base.ent_pos[0]), lambda v: seen.append(v.clone()))])
    same = tiny_lm(ids, [Hook(1, int(tb.base.ent_pos[0]), lambda v: v)])
    assert torch.equal(plain, read) and torch.equal(plain, same)
    assert len(seen) == 1


def test_causality(tiny_lm, tb):
    ids = tb.base.ids[0, : tb.base.lengths[0]].clone()
    out = tiny_lm(ids)
    ids[-1] = (ids[-1] + 1) % tiny_lm.cfg.vocab_size
    assert torch.equal(tiny_lm(ids)[:-1], out[:-1])


def test_zero_ablation_final_layer_changes_output(tiny_lm, tb):
    ids = tb.base.ids[0, : tb.base.lengths[0]]
    p = tiny_lm(ids).softmax(-1)[-1]
    q = tiny_lm(ids, [Hook(1, len(ids) - 1, lambda v: torch.zeros_like(v))]).softmax(-1)[-1]
    assert float((p * (p / q).log()).sum()) > 0


def test_interchange_generate_matches_single_step(tiny_lm, small_world, small_tok, tb):
    t = tb.tuples[0]
    bp = small_tok.render(small_world.template(t.base_template).text, t.base_entity)
    sp = small_tok.render(small_world.template(t.source_template).text, t.source_entity)
    h = FeatureHandle(BasisFeaturizer(random_rotation(16, 5)), range(6), ActivationSite(1))
    out = interchange_generate(tiny_lm, h, bp, sp, 3)
    assert len(out) == 3
    assert out[0] == int(interchange_intervene(tiny_lm, h, tb.base.select([0]), tb.source.select([0]))[0])
    assert interchange_generate(tiny_lm, h, bp, bp, 2) == decode_greedy(tiny_lm, bp.ids, 2)


def test_predict_tuples_chunking(tiny_lm, tb):
    h = FeatureHandle(BasisFeaturizer(random_rotation(16, 6)), range(4), ActivationSite(0))
    assert torch.equal(predict_tuples(tiny_lm, h, tb, chunk=7), predict_tuples(tiny_lm, h, tb, chunk=1000))


def test_trace_dump(tmp_path, tiny_lm, small_tok, tb):
    h = full_rep_handle(16, ActivationSite(0))
    dump_traces(tmp_path / "t.jsonl", tb, predict_tuples(tiny_lm, h, tb), small_tok)
    rows = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(rows) == len(tb)
    assert set(rows[0]) == {"x", "x_source", "A*", "y", "prediction", "kind"}


def test_pca_featurizer_roundtrip_on_lm_activations(tiny_lm, small_world, factory):
    pairs = [(t.id, e) for e in small_world.entities for t in small_world.templates]
    x = get_vals(tiny_lm, factory.batch(pairs), ActivationSite(1))
    assert fit_pca(x).roundtrip_error(x) < 1e-4
