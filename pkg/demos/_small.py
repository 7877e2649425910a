"""Shared setup for the demos: a small trained detector triple on toy data."""

from landet.datasets import gen_toy_dataset
from landet.models import ModelRole, build_model
from landet.training import TrainConfig, build_mask_dataset, train_classifier, train_lan


def small_pipeline(seed=0, samples_per_class=80, verbose=True):
    train, test = gen_toy_dataset(samples_per_class=samples_per_class, seed=seed)
    dims = train.image_dims

    f1 = build_model(ModelRole.IMAGE_CLASSIFIER, dims, 10, seed)
    f1, r1 = train_classifier(f1, train, TrainConfig(epochs=8, seed=seed), test)

    # g learns which pixels f1 relies on; sparsity pushes unused pixels to 0
    g = build_model(ModelRole.ATTENTION_NET, dims, 10, seed + 1)
    g, rg = train_lan(g, f1, train, TrainConfig(epochs=15, sparsity=1.0, seed=seed), test)

    f2 = build_model(ModelRole.MASK_CLASSIFIER, dims, 10, seed + 2)
    f2, r2 = train_classifier(f2, build_mask_dataset(g, train), TrainConfig(epochs=8, seed=seed),
                              build_mask_dataset(g, test))
    if verbose:
        print(f"f1 test acc {r1.test_accuracy:.3f} | g keeps f1's label on "
              f"{rg.test_accuracy:.3f} of corrupted images | f2 mask acc {r2.test_accuracy:.3f}")
    return (train, test), (f1, g, f2)
