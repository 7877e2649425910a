import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import linear_model
from landet.attacks import (AdversarialExample, AttackConfig, attack_success, cw_l2, cw_l2_batch,
                            fgsm, fgsm_batch, jsma, jsma_batch, jsma_saliency,
                            load_adversarial_set, run_attack, saliency_from_terms,
                            save_adversarial_set)
from landet.models import ModelRole, UntrainedModelError, build_model, predict_labels

IDENTITY = linear_model(np.eye(2))


# ---------------------------------------------------------------------------
# FGSM


def _ce_input_grad(weight, bias, x, y):
    """Closed-form d CE(Wx + b, y) / dx = W^T (softmax(Wx + b) - onehot(y))."""
    z = weight @ x + bias
    p = np.exp(z - z.max())
    p /= p.sum()
    return weight.T @ (p - np.eye(len(z))[y])


def test_fgsm_linear_closed_form():
    x = np.array([0.6, 0.4])
    grad = _ce_input_grad(np.eye(2), np.zeros(2), x, 0)
    np.testing.assert_array_equal(np.sign(grad), [-1, 1])
    ae = fgsm(IDENTITY, x.reshape(1, 1, 2), 0, 0.1)
    np.testing.assert_allclose(ae.perturbed.ravel(), [0.5, 0.5], atol=1e-6)
    np.testing.assert_allclose(ae.perturbed.ravel(), x + 0.1 * np.sign(grad), atol=1e-6)


def test_fgsm_zero_eps_is_identity():
    x = np.array([0.7, 0.2], np.float32).reshape(1, 1, 2)
    ae = fgsm(IDENTITY, x, 0, 0.0)
    np.testing.assert_array_equal(ae.perturbed, x)
    assert not ae.success


def test_fgsm_clamps_at_one():
    # y_true = 1: the gradient on pixel 0 is p0 > 0, so the 0.95 pixel is pushed to 1
    x = np.array([0.95, 0.4], np.float32).reshape(1, 1, 2)
    assert _ce_input_grad(np.eye(2), np.zeros(2), x.ravel(), 1)[0] > 0
    ae = fgsm(IDENTITY, x, 1, 0.1)
    assert ae.perturbed.ravel()[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_fgsm_linf_bound(seed, eps):
    rng = np.random.default_rng(seed)
    victim = linear_model(rng.normal(size=(3, 6)))
    x = rng.random((5, 1, 1, 6), dtype=np.float32)
    for ae in fgsm_batch(victim, x, rng.integers(0, 3, 5), eps):
        assert ae.linf <= eps + 1e-6
        assert ae.perturbed.min() >= 0 and ae.perturbed.max() <= 1


def test_attacks_need_trained_victim():
    raw = build_model(ModelRole.IMAGE_CLASSIFIER, (3, 16, 16), 10, 0)
    x = np.zeros((3, 16, 16), np.float32)
    for fn in (lambda: fgsm(raw, x, 0, 0.1), lambda: jsma(raw, x, 0, AttackConfig()),
               lambda: cw_l2(raw, x, 0, AttackConfig())):
        with pytest.raises(UntrainedModelError):
            fn()


@pytest.mark.parametrize("bad", [dict(fgsm_eps=-0.1), dict(jsma_theta=0.0), dict(jsma_theta=1.5),
                                 dict(jsma_gamma=1.2), dict(cw_c=0.0), dict(cw_iterations=0),
                                 dict(cw_kappa=-1.0)])
def test_attack_config_invariants(bad):
    with pytest.raises(ValueError):
        AttackConfig(**bad)


# ---------------------------------------------------------------------------
# JSMA


def test_saliency_zero_branches():
    alpha = np.array([-1.0, 2.0, 2.0, 0.0])
    beta = np.array([-3.0, 1.0, -0.5, -1.0])
    np.testing.assert_array_equal(saliency_from_terms(alpha, beta), [0.0, 0.0, 1.0, 0.0])


def test_saliency_on_linear_model():
    # prediction is class 0; target class 1 has alpha = W[1], beta = W[0] + W[2]
    w = np.array([[2.0, 2.0, 2.0], [-1.0, 1.0, 3.0], [0.0, -4.0, 1.0]])
    victim = linear_model(w)
    x = np.full((1, 1, 3), 0.5, np.float32)
    score = jsma_saliency(victim, x, 1).ravel()
    # pixel 0: alpha < 0; pixel 1: alpha 1, beta -2; pixel 2: alpha 3, beta 3 > 0
    np.testing.assert_allclose(score, [0.0, 2.0, 0.0], atol=1e-6)
    with pytest.raises(ValueError):
        jsma_saliency(victim, x, 0)


def _bump_oracle(victim, x, target, theta):
    """Saliency rebuilt from forward differences of the logits under single-pixel bumps."""
    base = victim(x[None])[0].astype(np.float64)
    d = x.size
    alpha, beta = np.zeros(d), np.zeros(d)
    for i in range(d):
        bumped = x.copy().ravel()
        bumped[i] += theta
        dz = (victim(bumped.reshape(x.shape)[None])[0] - base) / theta
        alpha[i] = dz[target]
        beta[i] = dz.sum() - dz[target]
    return np.where((alpha > 0) & (beta < 0), alpha * np.abs(beta), 0.0)


def test_jsma_pick_matches_bump_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 60:
        d, classes = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        victim = linear_model(rng.normal(size=(classes, d)), rng.normal(size=classes) * 0.1)
        x = rng.uniform(0.0, 0.9, size=(1, 1, d)).astype(np.float32)
        logits = victim(x[None])[0]
        y = int(np.argmax(logits))
        target = int(np.argsort(logits)[-2])
        oracle = _bump_oracle(victim, x, target, theta=0.05)
        if oracle.max() <= 0 or np.sort(oracle)[-1] - np.sort(oracle)[-2] < 1e-3:
            continue  # no move possible or a near tie
        score = jsma_saliency(victim, x, target).ravel()
        np.testing.assert_allclose(score, oracle, rtol=1e-3, atol=1e-4)
        assert int(np.argmax(score)) == int(np.argmax(oracle))
        # one-pixel budget with theta 1 saturates exactly the chosen pixel
        ae = jsma(victim, x, y, AttackConfig(jsma_theta=1.0, jsma_gamma=1.0 / d))
        changed = np.flatnonzero(ae.perturbed.ravel() != x.ravel())
        assert changed.tolist() == [int(np.argmax(oracle))]
        checked += 1


def test_jsma_zero_budget_is_identity():
    x = np.array([0.7, 0.2], np.float32).reshape(1, 1, 2)
    ae = jsma(IDENTITY, x, 0, AttackConfig(jsma_gamma=0.0))
    np.testing.assert_array_equal(ae.perturbed, x)
    assert not ae.success and ae.budget["pixels"] == 0


def test_jsma_dead_end_stops():
    # raising any pixel lowers the runner-up logit, so every score is 0
    victim = linear_model([[1.0, 1.0], [-1.0, -1.0]])
    x = np.full((1, 1, 2), 0.5, np.float32)
    ae = jsma(victim, x, 0, AttackConfig(jsma_gamma=1.0))
    np.testing.assert_array_equal(ae.perturbed, x)
    assert not ae.success


def test_jsma_toy_budget_and_direction(toy_run):
    f1 = toy_run.models["f1"]
    test = toy_run.data[1].head(100)
    cfg = AttackConfig()
    d = int(np.prod(test.image_dims))
    results = run_attack(f1, test, "jsma", cfg)
    assert any(ae.success for ae in results)
    for ae in results:
        if ae.success:
            assert ae.l0 <= cfg.jsma_gamma * d
        assert (ae.perturbed >= ae.original).all()
        assert ae.l0 <= ae.budget["pixels"]


# ---------------------------------------------------------------------------
# Carlini-Wagner


def test_cw_already_misclassified_stays_put():
    # true class 0, but class 1 already wins by 0.4, so the hinge is at its floor
    x = np.array([0.3, 0.7], np.float32).reshape(1, 1, 2)
    ae = cw_l2(IDENTITY, x, 0, AttackConfig(cw_iterations=50, cw_search_steps=2))
    assert ae.l2 < 0.05
    assert not ae.success


def test_cw_outputs_inside_open_box(toy_run):
    f1 = toy_run.models["f1"]
    test = toy_run.data[1]
    x = test.images[:6].copy()
    x[0] = 0.0
    x[1] = 1.0
    results = cw_l2_batch(f1, x, test.labels[:6], AttackConfig(cw_iterations=30, cw_search_steps=2))
    results += toy_run.paired_sets["direct_cw_l2"].adversarial
    for ae in results:
        assert ae.perturbed.min() > 0 and ae.perturbed.max() < 1
        recomputed = np.sqrt(np.sum((ae.perturbed.astype(np.float64)
                                     - ae.original.astype(np.float64)) ** 2))
        assert abs(ae.budget["l2"] - recomputed) < 1e-5


def test_cw_successes_are_misclassified(toy_run):
    f1 = toy_run.models["f1"]
    adv = toy_run.paired_sets["direct_cw_l2"].adversarial
    preds = predict_labels(f1, np.stack([ae.perturbed for ae in adv]))
    assert (preds != np.array([ae.y_true for ae in adv])).all()


def test_cw_smaller_than_fgsm(toy_run):
    fg = {ae.source_id: ae for ae in toy_run.paired_sets["direct_fgsm"].adversarial}
    cw = {ae.source_id: ae for ae in toy_run.paired_sets["direct_cw_l2"].adversarial}
    both = sorted(set(fg) & set(cw))
    assert len(both) >= 20
    assert np.median([cw[i].l2 for i in both]) < np.median([fg[i].l2 for i in both])


# ---------------------------------------------------------------------------
# success accounting, determinism, serialization


def _example(original, perturbed, y):
    return AdversarialExample(np.asarray(original, np.float32).reshape(1, 1, 2),
                              np.asarray(perturbed, np.float32).reshape(1, 1, 2),
                              "fgsm", y, 0, 0, False)


def test_attack_success_cases():
    assert not attack_success(IDENTITY, _example([0.8, 0.2], [0.8, 0.2], 0), 0)
    assert attack_success(IDENTITY, _example([0.8, 0.2], [0.2, 0.8], 0), 0)
    # original already wrong: never a success
    assert not attack_success(IDENTITY, _example([0.2, 0.8], [0.9, 0.1], 0), 0)
    assert not attack_success(IDENTITY, _example([0.2, 0.8], [0.1, 0.9], 0), 0)


def test_fgsm_toy_success_rate(toy_run):
    f1 = toy_run.models["f1"]
    test = toy_run.data[1]
    correct = test.subset(np.flatnonzero(predict_labels(f1, test.images) == test.labels))
    results = run_attack(f1, correct, "fgsm", AttackConfig(fgsm_eps=0.1))
    rate = np.mean([ae.success for ae in results])
    print(f"FGSM eps=0.1 success rate {rate:.3f} on {len(results)} images")
    assert rate > 0.5


@pytest.mark.parametrize("attack", ["fgsm", "jsma", "cw_l2"])
def test_attacks_are_deterministic(toy_run, attack):
    f1 = toy_run.models["f1"]
    data = toy_run.data[1].head(4)
    cfg = AttackConfig(cw_iterations=20, cw_search_steps=2)
    a, b = run_attack(f1, data, attack, cfg), run_attack(f1, data, attack, cfg)
    assert [x.perturbed.tobytes() for x in a] == [x.perturbed.tobytes() for x in b]


def test_adversarial_set_round_trip(tmp_path, toy_run):
    f1 = toy_run.models["f1"]
    cfg = AttackConfig()
    examples = run_attack(f1, toy_run.data[1].head(10), "fgsm", cfg)
    save_adversarial_set(examples, tmp_path, "fg", cfg)
    back = load_adversarial_set(tmp_path, "fg")
    assert len(back) == len(examples)
    for a, b in zip(examples, back):
        assert a.perturbed.tobytes() == b.perturbed.tobytes()
        assert a.original.tobytes() == b.original.tobytes()
        assert (a.success, a.y_true, a.source_id, a.budget) == (b.success, b.y_true, b.source_id,
                                                                 b.budget)
    save_adversarial_set([], tmp_path, "none")
    assert load_adversarial_set(tmp_path, "none") == []
