import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_absa import autodiff as ad
from moe_absa.autodiff import DimensionError
from moe_absa.losses import (
    DegenerateInputError,
    LossWeights,
    aux_importance,
    cce,
    cov2,
    mse_uniform,
    total_loss,
)
from moe_absa.metrics import classification_report, multilabel_report, pr_curve, pr_curves

from oracles import sweep_pr

SKEWED = [0.5, 0.1, 0.1, 0.1, 0.1, 0.1]


def test_cce_closed_forms():
    y = np.eye(3)[[0, 2, 1, 1]]
    assert cce(ad.constant(np.full((4, 3), 1 / 3)), y).item() == pytest.approx(math.log(3), abs=1e-9)
    assert cce(ad.constant(y), y).item() == pytest.approx(0.0, abs=1e-11)
    perm = [2, 0, 3, 1]
    p = np.random.default_rng(0).dirichlet(np.ones(3), size=4)
    assert cce(ad.constant(p), y).item() == pytest.approx(cce(ad.constant(p[perm]), y[perm]).item(), abs=1e-15)


def test_cce_clamps_and_checks_shape():
    loss = cce(ad.constant([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])).item()
    assert loss == pytest.approx(-math.log(1e-12))
    with pytest.raises(DimensionError):
        cce(ad.constant(np.ones((2, 3)) / 3), np.ones((2, 2)))


def test_cov2_closed_forms():
    assert abs(cov2(np.full(6, 1 / 6))) < 1e-12
    assert abs(cov2([1, 0, 0, 0, 0, 0]) - 5.0) < 1e-12
    assert abs(cov2(SKEWED) - 0.8) < 1e-12
    for e in (2, 3, 9):
        assert abs(cov2(np.eye(e)[0]) - (e - 1)) < 1e-12
    with pytest.raises(DegenerateInputError):
        cov2(np.zeros(6))


def test_aux_importance_values():
    assert abs(aux_importance(SKEWED, 0.011822).item() - 0.00945760) < 1e-9
    assert aux_importance(np.full(6, 0.2), 0.011822).item() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        aux_importance(np.zeros(6))


def test_mse_uniform_values():
    assert abs(mse_uniform(np.eye(6)[0], 1.0).item() - 5 / 36) < 1e-12
    assert mse_uniform(np.eye(6)[0], 0.011822).item() == pytest.approx(0.011822 * 5 / 36, abs=1e-15)
    assert mse_uniform(np.full(6, 1 / 6)).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8),
    st.floats(0.1, 50.0),
    st.randoms(use_true_random=False),
)
def test_balance_terms_invariances(values, c, rnd):
    u = np.array(values)
    perm = np.array(rnd.sample(range(len(u)), len(u)))
    assert cov2(u * c) == pytest.approx(cov2(u), rel=1e-9, abs=1e-12)
    assert cov2(u[perm]) == pytest.approx(cov2(u), rel=1e-12, abs=1e-15)
    assert aux_importance(u * c).item() == pytest.approx(aux_importance(u).item(), rel=1e-9, abs=1e-14)
    p = u / u.sum()
    assert mse_uniform(p[perm]).item() == pytest.approx(mse_uniform(p).item(), rel=1e-12, abs=1e-18)


def test_balance_gradients_match_finite_differences():
    u = ad.parameter([[0.3, 0.05, 0.2, 0.15, 0.1, 0.2]])
    for fn in (lambda: aux_importance(u, 0.5), lambda: mse_uniform(u, 2.0)):
        assert ad.grad_check(fn, {"u": u}, tol=1e-6).passed


def test_total_loss_combinations():
    ce = ad.constant(1.0)
    aux = aux_importance(SKEWED)
    mse = ad.constant(0.001)
    assert total_loss(ce, aux, mse, LossWeights()).item() == pytest.approx(1.01045760, abs=1e-9)
    assert total_loss(ce, aux, mse, LossWeights(enable_aux=False, enable_mse=False)).item() == 1.0
    uniform = np.full(6, 1 / 6)
    t = total_loss(ce, aux_importance(uniform), mse_uniform(uniform), LossWeights()).item()
    assert t == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        LossWeights(lambda_aux=-1.0)


# --- classification reports ---------------------------------------------------------

def test_report_hand_confusion_matrix():
    r = classification_report(["pos", "neg", "neg"], ["pos", "pos", "neg"], ["neg", "pos"])
    # pos: P=1, R=1/2, F=2/3 (support 2); neg: P=1/2, R=1, F=2/3 (support 1)
    assert r.per_class["pos"] == {"precision": 1.0, "recall": 0.5, "f1": 2 / 3, "support": 2}
    assert r.per_class["neg"] == {"precision": 0.5, "recall": 1.0, "f1": 2 / 3, "support": 1}
    assert r.weighted["f1"] == 2 / 3
    assert r.confusion == [[1, 0], [1, 1]]
    assert r.accuracy == pytest.approx(2 / 3, abs=1e-15)
    assert r.micro["f1"] == pytest.approx(2 / 3, abs=1e-15)


def test_report_perfect_and_zero_division():
    r = classification_report(list("abca"), list("abca"))
    assert all(v == 1.0 for k, v in r.weighted.items() if k != "support")
    r = classification_report(["a", "a"], ["a", "b"], ["a", "b", "c"])
    assert r.per_class["c"] == {"precision": 0.0, "recall": 0.0, "f1": 0.0, "support": 0}
    assert r.per_class["b"]["precision"] == 0.0
    with pytest.raises(ValueError):
        classification_report([], [])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_report_identities(pairs):
    preds = [p for p, _ in pairs]
    labels = [y for _, y in pairs]
    r = classification_report(preds, labels, [0, 1, 2])
    assert sum(v["support"] for v in r.per_class.values()) == len(pairs)
    assert r.micro["f1"] == pytest.approx(r.accuracy, abs=1e-12)
    f1s = [v["f1"] for v in r.per_class.values() if v["support"] > 0]
    assert min(f1s) - 1e-12 <= r.weighted["f1"] <= max(f1s) + 1e-12
    cm = np.array(r.confusion)
    assert r.micro["precision"] == pytest.approx(np.trace(cm) / cm.sum())


def test_multilabel_report():
    true = np.array([[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    pred = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 1]])
    r = multilabel_report(pred, true, ["x", "y", "z"])
    assert r.confusion == [[1, 0, 0, 2], [1, 0, 1, 1], [1, 1, 0, 1]]
    assert r.per_class["z"]["precision"] == 0.5
    assert r.micro["precision"] == 3 / 4 and r.micro["recall"] == 3 / 4
    assert r.weighted["support"] == 4


# --- precision-recall ---------------------------------------------------------------

def test_pr_curve_simple_cases():
    pts = pr_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert (1.0, 1.0, 0.8) in pts
    assert pr_curve([0.5] * 4, [1, 0, 0, 0]) == [(0.25, 1.0, 0.5)]
    with pytest.raises(DegenerateInputError):
        pr_curve([0.1, 0.2], [0, 0])


def test_pr_curve_matches_threshold_sweep():
    rng = np.random.default_rng(8)
    for _ in range(200):
        scores = np.round(rng.random(20), int(rng.integers(1, 3)))  # forces ties
        labels = rng.random(20) < 0.4
        if not labels.any():
            labels[0] = True
        assert pr_curve(scores, labels) == sweep_pr(scores, labels)


def test_pr_curves_per_class_and_micro():
    probs = np.random.default_rng(9).dirichlet(np.ones(3), size=30)
    truth = np.arange(30) % 3
    curves = pr_curves(probs, truth, ["a", "b", "c"])
    assert set(curves) == {"a", "b", "c", "micro"}
    for pts in curves.values():
        recalls = [r for _, r, _ in pts]
        assert recalls == sorted(recalls) and recalls[-1] == 1.0
    onehot = np.eye(3)[truth]
    assert curves["micro"] == sweep_pr(probs.reshape(-1), onehot.reshape(-1))
