import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import constant_classifier, identity_attention
from landet.attacks import AttackConfig, run_attack
from landet.datasets import ImageSet
from landet.detector import (EmptyFilterError, RoleMismatchError, check_roles, detect,
                             detect_batch, filter_benign_set, generate_mask, read_verdicts,
                             write_verdicts)
from landet.models import model_predict, predict_labels
from landet.tensor import ShapeError

DIMS = (1, 2, 2)


def _stub(y1, y2, classes=10):
    return (constant_classifier(y1, classes, DIMS, "image_classifier_f1"),
            identity_attention(DIMS, classes=classes),
            constant_classifier(y2, classes, DIMS, "mask_classifier_f2"))


def test_agreement_is_benign():
    v = detect(*_stub(3, 3), np.full(DIMS, 0.2, np.float32))
    assert (v.y1, v.y2, v.is_adversarial) == (3, 3, False)


def test_disagreement_is_adversarial():
    v = detect(*_stub(2, 7), np.full(DIMS, 0.2, np.float32))
    assert (v.y1, v.y2, v.is_adversarial) == (2, 7, True)
    np.testing.assert_allclose(v.mask, 0.5)


def test_mask_range_and_determinism(toy_run):
    g = toy_run.models["g"]
    rng = np.random.default_rng(0)
    for x in rng.random((5,) + g.input_dims, dtype=np.float32):
        m = generate_mask(g, x)
        assert m.min() >= 0 and m.max() <= 1
        assert m.tobytes() == generate_mask(g, x).tobytes()
    with pytest.raises(ShapeError):
        generate_mask(g, np.zeros((3, 8, 8), np.float32))


def test_filter_keeps_everything_when_perfect():
    labels = np.array([4, 4, 4])
    data = ImageSet(np.zeros((3,) + DIMS), labels, [0, 1, 2])
    kept, frac = filter_benign_set(*_stub(4, 4), data)
    assert frac == 1.0 and len(kept) == 3


def test_filter_empty_raises():
    data = ImageSet(np.zeros((3,) + DIMS), [4, 4, 4], [0, 1, 2])
    with pytest.raises(EmptyFilterError):
        filter_benign_set(*_stub(4, 1), data)


def test_filter_lenient_ignores_f1():
    data = ImageSet(np.zeros((2,) + DIMS), [4, 4], [0, 1])
    f1, g, f2 = _stub(0, 4)
    with pytest.raises(EmptyFilterError):
        filter_benign_set(f1, g, f2, data, strict=True)
    assert filter_benign_set(f1, g, f2, data, strict=False)[1] == 1.0


def test_role_mismatch():
    f1, g, f2 = _stub(1, 1)
    check_roles(f1, g, f2)
    with pytest.raises(RoleMismatchError):
        check_roles(f2, g, f1)
    with pytest.raises(RoleMismatchError):
        check_roles(f1, f2, f2)
    wider = constant_classifier(1, 10, (1, 2, 3), "mask_classifier_f2")
    with pytest.raises(RoleMismatchError):
        check_roles(f1, g, wider)


def test_composition_consistency(toy_run):
    f1, g, f2 = (toy_run.models[k] for k in ("f1", "g", "f2"))
    images = toy_run.data[1].images[:20]
    y1, y2, flag = detect_batch(f1, g, f2, images)
    for i, x in enumerate(images):
        v = detect(f1, g, f2, x)
        assert v.y2 == model_predict(f2, generate_mask(g, x))[0] == y2[i]
        assert v.y1 == y1[i] and v.is_adversarial == flag[i] == (v.y1 != v.y2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_verdict_rule_holds(seed):
    rng = np.random.default_rng(seed)
    a, b = (int(v) for v in rng.integers(0, 10, 2))
    v = detect(*_stub(a, b), rng.random(DIMS, dtype=np.float32))
    assert v.is_adversarial == (a != b)


def test_fgsm_masks_stay_close(toy_run):
    # a mask moves less under FGSM than between benign images of different classes
    f1, g = toy_run.models["f1"], toy_run.models["g"]
    test = toy_run.data[1]
    adv = [ae for ae in run_attack(f1, test.head(200), "fgsm", AttackConfig()) if ae.success]
    m = g(np.stack([ae.original for ae in adv]))
    m_star = g(np.stack([ae.perturbed for ae in adv]))
    pair_dist = np.linalg.norm((m - m_star).reshape(len(adv), -1), axis=1)

    masks = g(test.images[:200]).reshape(200, -1)
    labels = test.labels[:200]
    diff = [np.linalg.norm(masks[i] - masks[j]) for i in range(200) for j in range(i + 1, 200)
            if labels[i] != labels[j]]
    print(f"median mask l2: adversarial pair {np.median(pair_dist):.3f}, "
          f"cross-class {np.median(diff):.3f}")
    assert np.median(pair_dist) < np.median(diff)


def test_retained_mask_recovers_clean_label(toy_run):
    f1, g, f2 = (toy_run.models[k] for k in ("f1", "g", "f2"))
    adv = toy_run.paired_sets["direct_fgsm"].adversarial
    clean = predict_labels(f1, np.stack([ae.original for ae in adv]))
    hits = 0
    for ae, y_clean in zip(adv, clean):
        if model_predict(f2, generate_mask(g, ae.perturbed))[0] != y_clean:
            continue  # mask did not keep its class
        v = detect(f1, g, f2, ae.perturbed)
        assert v.is_adversarial and v.y2 == y_clean
        hits += 1
    assert hits > 0


def test_verdict_csv_round_trip(tmp_path):
    rows = [(0, 3, 3, 3, False, "benign"), (17, 2, 5, 2, True, "fgsm"),
            (9, 1, 4, 4, False, "cw_l2")]
    path = write_verdicts(tmp_path / "v.csv", rows)
    assert path.read_text().splitlines()[0] == "index,y_true,y1,y2,is_adversarial,kind"
    back = read_verdicts(path)
    assert [tuple(r.values()) for r in back] == rows
