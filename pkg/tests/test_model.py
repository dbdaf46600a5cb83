import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cclis import numerics as nx
from cclis.losses import prd
from cclis.model import (
    ModelState,
    checksum,
    encode,
    features,
    grow_prototypes,
    init_model,
    load_checkpoint,
    prototype_scores,
    save_checkpoint,
    snapshot,
)
from cclis.numerics import Tensor

from conftest import small_model


def test_encode_unit_rows_and_shape(rng):
    model = init_model(7, rng, embed_dim=8)
    z = encode(model, rng.normal(size=(5, 7)))
    assert z.shape == (5, 8)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-10)


def test_encode_identical_rows(rng):
    model = small_model()
    x = np.tile(rng.normal(size=(1, 5)), (3, 1))
    z = encode(model, x).data
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])


def test_zero_weight_network_maps_to_bias_image(rng):
    model = small_model()
    zeroed = ModelState(
        [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.encoder],
        [(np.zeros_like(w), b) for w, b in model.projection],
        model.prototypes,
    )
    bias = np.array([3.0, 0.0, 4.0, 0.0])
    zeroed.projection[-1] = (zeroed.projection[-1][0], bias)
    z = encode(zeroed, rng.normal(size=(4, 5))).data
    np.testing.assert_allclose(z, np.tile(bias / 5.0, (4, 1)), atol=1e-15)


def test_encode_dimension_mismatch():
    with pytest.raises(nx.ShapeError):
        encode(small_model(), np.ones((2, 3)))


def _with_prototypes(rows, tau=0.5):
    model = small_model(embed_dim=2, num_prototypes=len(rows), tau=tau)
    model.prototypes = np.asarray(rows, dtype=np.float64)
    return model


def test_aligned_score_is_inverse_temperature():
    s = prototype_scores(_with_prototypes([[1.0, 0.0]]), Tensor(np.array([[1.0, 0.0]])))
    assert s.data[0, 0] == pytest.approx(2.0, abs=1e-15)


def test_orthogonal_score_is_zero():
    s = prototype_scores(_with_prototypes([[1.0, 0.0]]), Tensor(np.array([[0.0, 1.0]])))
    assert s.data[0, 0] == 0.0


def test_kappa_override():
    model = _with_prototypes([[1.0, 0.0]])
    z = Tensor(np.array([[1.0, 0.0]]))
    for kappa in (0.5, 0.1, 0.2):
        assert prototype_scores(model, z, kappa).data[0, 0] == pytest.approx(1.0 / kappa)


def test_zero_prototype_row_errors():
    with pytest.raises(nx.NumericsError):
        prototype_scores(_with_prototypes([[0.0, 0.0]]), Tensor(np.array([[1.0, 0.0]])))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scores_invariant_to_prototype_scale_and_bounded(seed, alpha):
    rng = np.random.default_rng(seed)
    model = small_model(seed=seed)
    z = encode(model, rng.normal(size=(6, 5)), safe=True)
    s = prototype_scores(model, z).data
    scaled = small_model(seed=seed)
    scaled.prototypes = alpha * scaled.prototypes
    np.testing.assert_allclose(prototype_scores(scaled, z).data, s, atol=1e-12)
    assert np.all(np.abs(s) <= 1.0 / model.tau + 1e-12)


def test_grow_prototypes_appends_and_keeps_rows():
    model = small_model(num_prototypes=2)
    grown = grow_prototypes(model, 2, np.random.default_rng(5))
    assert grown.num_prototypes == 4
    assert np.array_equal(grown.prototypes[:2], model.prototypes)
    again = grow_prototypes(model, 2, np.random.default_rng(5))
    assert np.array_equal(grown.prototypes, again.prototypes)


def test_grow_prototypes_zero_scale_then_scores_error(rng):
    grown = grow_prototypes(small_model(num_prototypes=1), 1, rng, scale=0.0)
    assert np.all(grown.prototypes[1] == 0)
    with pytest.raises(nx.NumericsError):
        prototype_scores(grown, encode(grown, rng.normal(size=(2, 5))))


def test_grow_prototypes_rejects_zero():
    with pytest.raises(ValueError):
        grow_prototypes(small_model(), 0, np.random.default_rng(0))


def test_snapshot_is_immutable_and_detached(rng):
    model = small_model()
    frozen = snapshot(model)
    x = rng.normal(size=(3, 5))
    before = prototype_scores(frozen, encode(frozen, x)).data
    model.encoder[0][0][:] += 1.0
    model.prototypes[:] *= -1
    after = prototype_scores(frozen, encode(frozen, x)).data
    assert np.array_equal(before, after)
    with pytest.raises(ValueError):
        frozen.state.prototypes[0, 0] = 1.0
    assert frozen.checksum == checksum(frozen)


def test_snapshot_of_copy_scores_equal(rng):
    model = small_model()
    x = rng.normal(size=(3, 5))
    a, b = snapshot(model), snapshot(snapshot(model).state)
    assert np.array_equal(prototype_scores(a, encode(a, x)).data, prototype_scores(b, encode(b, x)).data)


def test_prd_against_own_snapshot_is_entropy(rng):
    model = small_model()
    x = rng.normal(size=(6, 5))
    frozen = snapshot(model)
    loss = prd(model, frozen, x, kappa_cur=0.2, kappa_past=0.2).item()
    q = nx.softmax(nx.transpose(prototype_scores(model, encode(model, x), 0.2))).data
    assert loss == pytest.approx(float(-(q * np.log(q)).sum()), abs=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    model = small_model()
    save_checkpoint(model, tmp_path / "ck.json")
    loaded = load_checkpoint(tmp_path / "ck.json")
    assert checksum(loaded) == checksum(model)
    assert loaded.tau == model.tau


def test_checkpoint_schema_checked(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text('{"schema_version": 99}')
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(path)


def test_features_sources(rng):
    model = small_model()
    x = rng.normal(size=(2, 5))
    assert features(model, x, "projection").shape == (2, 4)
    assert features(model, x, "backbone").shape == (2, 6)
    with pytest.raises(ValueError):
        features(model, x, "logits")
