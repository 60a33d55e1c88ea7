import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbench.engine import (AuxTerm, Batch, ModelSpec, ParamVector, backprop, bce_loss, extract_patches,
                             finite_diff_check, forward_multilabel, forward_segmentation, init_model,
                             load_params, make_layout, masked_ce_loss, prox_sgd_step, save_params, sgd_step)
from fedbench.errors import ConfigurationError, NumericError, ParseError, ShapeError


def ml_spec(d=5, labels=3, hidden=4):
    return ModelSpec.multilabel(d, labels, hidden)


def seg_spec(hidden=4, radius=1, h=6, w=5):
    return ModelSpec.segmentation(n_classes=4, hidden_dim=hidden, grid_h=h, grid_w=w, patch_radius=radius)


def ml_batch(rng, n=10, d=5, labels=3):
    return Batch(rng.normal(size=(n, d)), (rng.random((n, labels)) < 0.4).astype(np.int64))


def seg_batch(rng, n=3, h=6, w=5, ignore_frac=0.3):
    return Batch(rng.normal(size=(n, h, w)), rng.integers(0, 4, size=(n, h, w)),
                 (rng.random((n, h, w)) < ignore_frac).astype(np.int8))


def with_values(spec, fill):
    layout = make_layout(spec)
    return ParamVector(np.full(layout[-1].offset + layout[-1].length, fill), layout)


# -- ParamVector ----------------------------------------------------------------

def test_param_vector_layout_must_cover_values():
    layout = make_layout(ml_spec())
    n = layout[-1].offset + layout[-1].length
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(n + 1), layout)


def test_param_vector_rejects_non_finite_and_names_layer():
    spec = ml_spec()
    vals = init_model(spec, 0).values.copy()
    vals[-1] = np.nan
    with pytest.raises(NumericError) as err:
        ParamVector(vals, make_layout(spec))
    assert err.value.layer == "out.bias"


def test_param_vector_is_immutable():
    w = init_model(ml_spec(), 0)
    with pytest.raises(ValueError):
        w.values[0] = 1.0


def test_layer_groups_ordered_input_to_output():
    groups = init_model(ml_spec(), 0).layer_groups()
    assert list(groups) == ["hidden", "out"]
    assert [s.name for s in groups["out"]] == ["out.weight", "out.bias"]


# -- init_model -------------------------------------------------------------------

def test_init_is_deterministic_per_seed():
    spec = ml_spec()
    assert init_model(spec, 3).bitwise_equal(init_model(spec, 3))
    assert not init_model(spec, 1).bitwise_equal(init_model(spec, 2))


def test_init_bounds_and_zero_biases():
    spec = ModelSpec.multilabel(30, 10, 20)
    w = init_model(spec, 0)
    assert np.all(np.abs(w.segment("hidden.weight")) <= math.sqrt(6 / 50))
    assert np.all(np.abs(w.segment("out.weight")) <= math.sqrt(6 / 30))
    assert not w.segment("hidden.bias").any() and not w.segment("out.bias").any()


@pytest.mark.parametrize("spec", [
    ModelSpec.multilabel(5, 3, 0),
    ModelSpec.multilabel(5, 1, 4),
    ModelSpec.segmentation(n_classes=1),
    ModelSpec("nonsense", 4),
])
def test_invalid_specs_raise_configuration_error(spec):
    with pytest.raises(ConfigurationError):
        init_model(spec, 0)


# -- forward passes -------------------------------------------------------------

def test_zero_weights_give_half_probabilities():
    p = forward_multilabel(with_values(ml_spec(), 0.0), np.random.default_rng(0).normal(size=(4, 5)))
    assert np.all(p == 0.5)


def test_identical_rows_identical_outputs():
    x = np.random.default_rng(1).normal(size=(1, 5))
    p = forward_multilabel(init_model(ml_spec(), 0), np.vstack([x, x]))
    assert np.array_equal(p[0], p[1])


def test_forward_multilabel_hand_computed():
    spec = ModelSpec.multilabel(2, 2, 1)
    layout = make_layout(spec)
    # hidden.weight (2x1), hidden.bias (1), out.weight (1x2), out.bias (2)
    w = ParamVector([0.5, -1.0, 0.25, 2.0, -3.0, 0.1, 0.2], layout)
    x = np.array([[1.0, 2.0]])
    h = math.tanh(0.5 * 1.0 - 1.0 * 2.0 + 0.25)
    expected = [1 / (1 + math.exp(-(2.0 * h + 0.1))), 1 / (1 + math.exp(-(-3.0 * h + 0.2)))]
    assert np.allclose(forward_multilabel(w, x)[0], expected, rtol=0, atol=1e-15)


def test_forward_multilabel_shape_mismatch():
    with pytest.raises(ShapeError):
        forward_multilabel(init_model(ml_spec(), 0), np.zeros((2, 4)))


def test_constant_image_zero_weights_zero_logits():
    z = forward_segmentation(with_values(seg_spec(), 0.0), np.full((6, 5), 0.7))
    assert z.shape == (6, 5, 4) and not z.any()


def test_segmentation_translation_equivariance_in_interior():
    rng = np.random.default_rng(2)
    w = init_model(seg_spec(radius=1, h=12, w=12), 0)
    img = np.zeros((12, 12))
    img[4:7, 4:7] = rng.normal(size=(3, 3))
    shifted = np.roll(img, 1, axis=1)
    z, zs = forward_segmentation(w, img), forward_segmentation(w, shifted)
    assert np.array_equal(z[2:10, 2:9], zs[2:10, 3:10])


def test_segmentation_center_pixel_hand_computed():
    spec = ModelSpec.segmentation(n_classes=2, hidden_dim=1, grid_h=3, grid_w=3, patch_radius=1)
    layout = make_layout(spec)
    w1 = np.arange(9) / 10.0
    vals = np.concatenate([w1, [0.3], [1.5, -2.0], [0.05, -0.05]])
    w = ParamVector(vals, layout)
    img = np.arange(9, dtype=float).reshape(3, 3) - 4.0
    h = math.tanh(float(img.ravel() @ w1) + 0.3)
    assert np.allclose(forward_segmentation(w, img)[1, 1], [1.5 * h + 0.05, -2.0 * h - 0.05], atol=1e-15)


def test_patches_use_edge_replication():
    img = np.arange(9, dtype=float).reshape(1, 3, 3)
    corner = extract_patches(img, 1)[0].reshape(3, 3)
    assert np.array_equal(corner, [[0, 0, 1], [0, 0, 1], [3, 3, 4]])


def test_forward_segmentation_rejects_bad_rank():
    with pytest.raises(ShapeError):
        forward_segmentation(init_model(seg_spec(), 0), np.zeros(5))


# -- losses -----------------------------------------------------------------------

def test_bce_perfect_prediction_near_zero():
    y = np.array([[1, 0, 1]], dtype=float)
    assert bce_loss(y, y) <= 3 * 2e-7


def test_bce_single_label_half():
    assert bce_loss([[0.5]], [[1]]) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_two_labels():
    assert bce_loss([[0.9, 0.1]], [[1, 0]]) == pytest.approx(-2 * math.log(0.9), abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(np.zeros((2, 3)), np.zeros((2, 2)))


def test_masked_ce_all_ignored_is_zero_with_zero_gradient():
    rng = np.random.default_rng(0)
    b = seg_batch(rng, ignore_frac=1.1)
    assert masked_ce_loss(rng.normal(size=(3, 6, 5, 4)), b.targets, b.ignore_mask) == 0.0
    loss, grad = backprop(init_model(seg_spec(), 0), b, "masked_ce")
    assert loss == 0.0 and not grad.values.any()


def test_masked_ce_one_of_two_pixels_uniform_logits():
    logits = np.zeros((1, 2, 4))
    assert masked_ce_loss(logits, np.array([[2, 1]]), np.array([[0, 1]])) == pytest.approx(math.log(4), abs=1e-12)


def test_masked_ce_no_ignore_is_plain_mean_ce():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 3, 4))
    mask = rng.integers(0, 4, size=(4, 3))
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    plain = -np.mean(np.take_along_axis(lp, mask[..., None], -1))
    assert masked_ce_loss(logits, mask, np.zeros((4, 3))) == pytest.approx(plain, abs=1e-12)
    assert masked_ce_loss(logits, mask) == pytest.approx(plain, abs=1e-12)


# -- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_finite_differences_bce(seed):
    rng = np.random.default_rng(seed)
    assert finite_diff_check(init_model(ml_spec(), seed), ml_batch(rng), "bce") <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_finite_differences_masked_ce(seed):
    rng = np.random.default_rng(seed)
    assert finite_diff_check(init_model(seg_spec(), seed), seg_batch(rng), "masked_ce") <= 1e-4


def test_finite_differences_softmax_and_consistency():
    rng = np.random.default_rng(7)
    spec = ModelSpec.classifier(5, 3, 4)
    t = rng.dirichlet(np.ones(3), size=8)
    assert finite_diff_check(init_model(spec, 0), Batch(rng.normal(size=(8, 5)), t), "softmax_ce") <= 1e-4
    img = seg_batch(rng)
    target = rng.dirichlet(np.ones(4), size=img.targets.shape)
    cons = Batch(img.features, target, img.ignore_mask)
    assert finite_diff_check(init_model(seg_spec(), 1), cons, "consistency") <= 1e-4


def test_finite_difference_zero_loss_batch():
    # every pixel ignored: loss and gradient are identically zero
    rng = np.random.default_rng(0)
    err = finite_diff_check(init_model(seg_spec(), 0), seg_batch(rng, ignore_frac=1.1), "masked_ce")
    assert err <= 1e-6


def test_finite_difference_eps_zero_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        finite_diff_check(init_model(ml_spec(), 0), ml_batch(rng), "bce", eps=0)


def test_prox_term_vanishes_at_anchor():
    rng = np.random.default_rng(0)
    w = init_model(ml_spec(), 0)
    batch = ml_batch(rng)
    plain = backprop(w, batch, "bce")
    prox = backprop(w, batch, "bce", AuxTerm(prox_anchor=w, mu=5.0))
    assert plain[0] == prox[0] and plain[1].bitwise_equal(prox[1])


def test_prox_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    w = init_model(ml_spec(), 0)
    anchor = init_model(ml_spec(), 9)
    aux = AuxTerm(prox_anchor=anchor, mu=0.7)
    b = ml_batch(rng)
    assert finite_diff_check(w, b, "bce", aux=aux) <= 1e-4
    # the proximal part of the gradient is mu * (w - anchor)
    g_aux = backprop(w, b, "bce", aux)[1] - backprop(w, b, "bce")[1]
    assert np.allclose(g_aux.values, 0.7 * (w.values - anchor.values), atol=1e-12)


def test_duplicated_batch_same_mean_gradient():
    rng = np.random.default_rng(4)
    b = ml_batch(rng)
    doubled = Batch(np.vstack([b.features, b.features]), np.vstack([b.targets, b.targets]))
    w = init_model(ml_spec(), 0)
    assert np.allclose(backprop(w, b, "bce")[1].values, backprop(w, doubled, "bce")[1].values, atol=1e-14)


def test_nan_input_raises_numeric_error_with_layer():
    x = np.zeros((2, 5))
    x[0, 0] = np.nan
    with pytest.raises(NumericError) as err:
        backprop(init_model(ml_spec(), 0), Batch(x, np.zeros((2, 3), dtype=int)), "bce")
    assert err.value.layer == "hidden"


def test_unknown_loss_kind():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        backprop(init_model(ml_spec(), 0), ml_batch(rng), "hinge")


# -- SGD ------------------------------------------------------------------------

def _pv(values):
    return ParamVector(values, [("w", 0, len(values), (len(values),))])


def test_sgd_arithmetic():
    out = sgd_step(_pv([1.0, 1.0]), _pv([2.0, -2.0]), 0.5)
    assert np.array_equal(out.values, [0.0, 2.0])


def test_sgd_lr_zero_unchanged():
    w = init_model(ml_spec(), 0)
    assert sgd_step(w, w, 0.0).bitwise_equal(w)


def test_sgd_two_steps_equal_one_summed():
    w, g = _pv([0.5, -1.5, 2.0]), _pv([0.25, 1.0, -0.5])
    two = sgd_step(sgd_step(w, g, 0.5), g, 0.5)
    one = sgd_step(w, g, 1.0)
    assert np.array_equal(two.values, one.values)


def test_sgd_layout_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(_pv([1.0, 2.0]), _pv([1.0, 2.0, 3.0]), 0.1)


def test_prox_step_reduces_to_sgd_and_solves_quadratic():
    w, g, a = _pv([1.0, -2.0]), _pv([0.5, 0.5]), _pv([0.0, 0.0])
    assert prox_sgd_step(w, g, 0.1, a, 0.0).bitwise_equal(sgd_step(w, g, 0.1))
    # implicit step: w+ = argmin <g, v> + |v - w|^2 / (2 lr) + mu/2 |v - a|^2
    lr, mu = 0.1, 3.0
    out = prox_sgd_step(w, g, lr, a, mu)
    assert np.allclose(out.values, (w.values - lr * g.values + lr * mu * a.values) / (1 + lr * mu))
    # stationarity of the proximal objective
    assert np.allclose(g.values + (out.values - w.values) / lr + mu * (out.values - a.values), 0.0)


# -- persistence ---------------------------------------------------------------

def test_params_round_trip_exact(tmp_path):
    w = init_model(seg_spec(), 5)
    save_params(w, tmp_path / "w.params", kind="segmentation")
    back, kind = load_params(tmp_path / "w.params")
    assert kind == "segmentation" and back.bitwise_equal(w)


def test_params_bad_file(tmp_path):
    p = tmp_path / "bad.params"
    p.write_text("hello\n")
    with pytest.raises(ParseError):
        load_params(p)


# -- properties ---------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_sigmoid_outputs_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    p = forward_multilabel(init_model(ml_spec(), seed), scale * rng.normal(size=(6, 5)))
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((5, 4))
    assert bce_loss(probs, (rng.random((5, 4)) < 0.5).astype(int)) >= 0
    b = seg_batch(rng)
    assert masked_ce_loss(rng.normal(size=(3, 6, 5, 4)), b.targets, b.ignore_mask) >= 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ignored_pixel_labels_never_matter(seed):
    rng = np.random.default_rng(seed)
    b = seg_batch(rng)
    perturbed = np.where(b.ignore_mask == 1, rng.integers(0, 4, size=b.targets.shape), b.targets)
    w = init_model(seg_spec(), seed)
    l1, g1 = backprop(w, b, "masked_ce")
    l2, g2 = backprop(w, Batch(b.features, perturbed, b.ignore_mask), "masked_ce")
    assert l1 == l2 and g1.bitwise_equal(g2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_backprop_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    b = ml_batch(rng)
    w = init_model(ml_spec(), seed)
    l1, g1 = backprop(w, b, "bce")
    l2, g2 = backprop(w, b, "bce")
    assert l1 == l2 and g1.bitwise_equal(g2)
