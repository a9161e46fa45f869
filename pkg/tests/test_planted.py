import itertools

import numpy as np
import pytest
import torch

from disentangle.evaluation import evaluate_handle
from disentangle.featurizers import BasisFeaturizer, IdentityFeaturizer
from disentangle.interventions import ActivationSite, FeatureHandle, full_rep_handle, tuple_batch
from disentangle.planted import PlantedModelError, build_planted_model, simplex_codes
from disentangle.world import pair_interventions


def test_simplex_codes_equiangular():
    c = simplex_codes(5)
    g = c @ c.T
    assert np.allclose(np.diag(g), 1.0)
    off = g[~np.eye(5, dtype=bool)]
    assert np.allclose(off, -1 / 4)


def test_readout_matches_table_for_every_entity(small_world, small_tok, planted, factory):
    # brute force: every entity x every attribute template
    pairs = [(t.id, e) for e in small_world.entities for t in small_world.templates if t.attribute]
    batch = factory.batch(pairs)
    got = planted.readout_values(batch)
    want = [small_world.getattr(small_world.template(t).attribute, e) for t, e in pairs]
    assert got == want


def test_subspaces_orthogonal_at_90(planted):
    pa, pb = planted.projector("country"), planted.projector("continent")
    assert np.abs(pa @ pb).max() < 1e-12


def test_overlap_angle_sets_principal_angle(small_world, small_tok):
    m = build_planted_model(small_world, small_tok, angle=30.0, pair=("country", "climate"))
    wa, wb = m.subspace("country"), m.subspace("climate")
    cosines = np.linalg.svd(wa @ wb.T, compute_uv=False)
    assert np.isclose(cosines.max(), np.cos(np.radians(30.0)))


def test_zero_angle_needs_functional_sharing(small_world, small_tok):
    with pytest.raises(PlantedModelError):
        build_planted_model(small_world, small_tok, angle=0.0)
    m = build_planted_model(small_world, small_tok, share_functions=True)
    assert np.allclose(m.projector("continent"), m.projector("country"))


def test_dimension_overflow(small_world, small_tok):
    with pytest.raises(PlantedModelError):
        build_planted_model(small_world, small_tok, d_model=5)


def _tb(world, tok, split, attr, n=120, seed=0):
    return tuple_batch(world, tok, pair_interventions(world, split, "test", attr, n, seed=seed))


def test_correct_subspace_handle_scores_perfectly(small_world, small_tok, small_split, planted):
    site = ActivationSite(0)
    for attr in small_world.attributes:
        fz = BasisFeaturizer(torch.eye(planted.d_model))
        dims = np.nonzero(np.diag(planted.projector(attr)) > 0.5)[0]
        table = evaluate_handle(
            planted, FeatureHandle(fz, dims, site), _tb(small_world, small_tok, small_split, attr), "oracle", "entity", attr
        )
        assert table.cause == 1.0 and table.iso == 1.0


def test_full_rep_on_planted(small_world, small_tok, small_split, planted):
    tb = _tb(small_world, small_tok, small_split, "country")
    table = evaluate_handle(planted, full_rep_handle(planted.d_model, ActivationSite(0)), tb, "full-rep", "entity", "country")
    assert table.cause == 1.0
    assert table.iso < 0.5


def test_shared_subspace_forbids_disentanglement(small_world, small_tok, small_split):
    """Brute force over neuron subsets of the shared block plus some others."""
    m = build_planted_model(small_world, small_tok, share_functions=True)
    site = ActivationSite(0)
    fz = IdentityFeaturizer(m.d_model)
    block = list(np.nonzero(np.diag(m.projector("country")) > 0.5)[0])
    others = [i for i in range(m.d_model) if i not in block]
    tb = _tb(small_world, small_tok, small_split, "continent", n=90, seed=4)
    subsets = [list(s) for r in range(len(block) + 1) for s in itertools.combinations(block, r)]
    subsets += [block + others[:j] for j in range(1, len(others) + 1)]
    for s in subsets:
        t = evaluate_handle(m, FeatureHandle(fz, s, site), tb, "grid", "entity", "continent")
        assert not (t.cause >= 0.9 and t.iso >= 0.9), s
