"""The contrastive detector: compare f1's label with f2's label on the mask.

Run: python3 demos/05_detection.py
"""

import numpy as np

from _small import small_pipeline
from landet.attacks import AttackConfig, run_attack
from landet.datasets import build_paired_set
from landet.detector import detect, filter_benign_set, mask_predictions
from landet.evaluation import detection_metrics, recovery_rate, retention_rate

(train, test), (f1, g, f2) = small_pipeline()

# An image is flagged when the two classifiers disagree.
adv = [ae for ae in run_attack(f1, test.head(120), "fgsm", AttackConfig()) if ae.success]
v_clean, v_adv = detect(f1, g, f2, adv[0].original), detect(f1, g, f2, adv[0].perturbed)
print(f"clean image:       y1={v_clean.y1} y2={v_clean.y2} adversarial={v_clean.is_adversarial}")
print(f"its FGSM version:  y1={v_adv.y1} y2={v_adv.y2} adversarial={v_adv.is_adversarial}")

# Masks barely move under the attack, so f2 tends to keep the original class.
print(f"retention over {len(adv)} FGSM pairs: {retention_rate(g, f2, adv):.3f}")

# Pair successes with the same number of clean images f1 gets right, drawn
# from images that were not attacked.
paired = build_paired_set(f1, test, "fgsm", AttackConfig(), n=60, seed=0)
m = detection_metrics(f1, g, f2, paired)
print(f"direct, {len(paired)} pairs: TP {m['tp_rate']:.3f}  TN {m['tn_rate']:.3f}")

# Filtering keeps images where both f1 and f2(g(x)) are right; on that set
# clean images are never flagged.
kept, frac = filter_benign_set(f1, g, f2, test)
print(f"filter keeps {frac:.3f} of the test split")
adv_f = [ae for ae in adv if ae.source_id in set(kept.ids.tolist())]
y2 = mask_predictions(g, f2, np.stack([ae.perturbed for ae in adv_f]))
print(f"recovery on filtered sources: {recovery_rate(y2, [ae.y_true for ae in adv_f]):.3f}")
