"""Synthetic toy classes, the four model roles and checkpoint files.

Run: python3 demos/02_toy_data_and_models.py
"""

import tempfile
from pathlib import Path

import numpy as np

from landet.datasets import gen_toy_dataset
from landet.models import ModelRole, build_model, checkpoint_load, checkpoint_save
from landet.training import TrainConfig, accuracy, train_classifier

# Each class is a stripe orientation plus a blob position, with seeded jitter
# and pixel noise. Images are 3 x 16 x 16 floats in [0, 1].
train, test = gen_toy_dataset(class_count=10, samples_per_class=80, seed=0)
print(f"train {train.images.shape}, test {test.images.shape}")
print("class balance:", np.bincount(train.labels))

# The image classifier f1 is a small CNN. Training is seeded, so rerunning
# this script gives the same weights.
f1 = build_model(ModelRole.IMAGE_CLASSIFIER, train.image_dims, 10, seed=0)
print("f1 layers:", [layer["kind"] for layer in f1.layers])
f1, report = train_classifier(f1, train, TrainConfig(epochs=6, seed=0), test)
print("epoch losses:", np.round(report.epoch_losses, 3))
print(f"f1 test accuracy {report.test_accuracy:.3f}")

# The other roles: f1' (deeper transfer model), g (attention net producing a
# mask the shape of the image) and f2 (LeNet-style mask classifier).
for role in (ModelRole.TRANSFER_CLASSIFIER, ModelRole.ATTENTION_NET, ModelRole.MASK_CLASSIFIER):
    m = build_model(role, train.image_dims, 10, seed=0)
    n = sum(p.size for p in m.params.values())
    print(f"{role.value:<26} {n:>8} parameters, output {m.output_shape}")

# Checkpoints are a magic string, a JSON header and raw float32 blobs.
with tempfile.TemporaryDirectory() as tmp:
    path = checkpoint_save(f1, Path(tmp) / "f1.ckpt")
    print("checkpoint starts with", path.read_bytes()[:8], f"({path.stat().st_size} bytes)")
    again = checkpoint_load(path)
    print(f"reloaded accuracy {accuracy(again, test):.3f}")
