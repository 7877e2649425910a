"""FGSM, JSMA and C&W against the toy image classifier.

Run: python3 demos/04_attacks.py
"""

import numpy as np

from _small import small_pipeline
from landet.attacks import AttackConfig, run_attack
from landet.models import predict_labels

(train, test), (f1, g, f2) = small_pipeline()

correct = test.subset(np.flatnonzero(predict_labels(f1, test.images) == test.labels)).head(60)
config = AttackConfig(fgsm_eps=0.1, jsma_gamma=0.05, cw_iterations=100, cw_search_steps=3)

# FGSM moves every pixel by eps; JSMA raises a few salient pixels; C&W looks
# for the smallest l2 change that flips the label.
print(f"{'attack':<7}{'success':>9}{'median l2':>11}{'median linf':>13}{'median l0':>11}")
for attack in ("fgsm", "jsma", "cw_l2"):
    results = run_attack(f1, correct, attack, config)
    ok = [ae for ae in results if ae.success]
    print(f"{attack:<7}{len(ok) / len(results):>9.2f}"
          f"{np.median([ae.l2 for ae in ok]):>11.3f}"
          f"{np.median([ae.linf for ae in ok]):>13.3f}"
          f"{np.median([ae.l0 for ae in ok]):>11.0f}")
