"""Attention masks: what the noise-corruption objective learns, exported as PGM.

Run: python3 demos/03_attention_masks.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from _small import small_pipeline
from landet.evaluation import export_mask_images
from landet.training import corrupt_with_mask, lan_agreement

(train, test), (f1, g, f2) = small_pipeline()

# A mask keeps a pixel where it is near 1 and replaces it with noise near 0.
x = test.images[0]
m = g(x)
rng = np.random.default_rng(0)
print(f"mask mean {m.mean():.3f}, fraction above 0.5: {(m > 0.5).mean():.3f}")
print("keep everything :", np.array_equal(corrupt_with_mask(x, np.ones_like(x), rng), x))
corrupted = corrupt_with_mask(x, m, rng)
print("f1 on clean / corrupted:", int(np.argmax(f1(x))), int(np.argmax(f1(corrupted))))
print(f"agreement over the test split: {lan_agreement(g, f1, test, rng):.3f}")

# Each file shows the image next to its mask (channels laid side by side).
out = Path(sys.argv[1] if len(sys.argv) > 1 else "mask_demo")
paths = export_mask_images([(test.images[i], g(test.images[i])) for i in range(6)], out)
print(f"wrote {len(paths)} PGM files to {out}/")
