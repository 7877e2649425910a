"""Finite-difference gradient oracle shared by the tensor and model tests."""

import numpy as np

from landet.tensor import Tensor, backprop

F64 = np.float64


def leaf(a, grad=True):
    return Tensor(np.array(a, dtype=F64), requires_grad=grad, dtype=F64)


def central_difference(fn, arrays, which, idx, h=1e-6):
    """d fn / d arrays[which][idx] by central differences, everything in float64."""
    arr = arrays[which]
    orig = arr[idx]
    arr[idx] = orig + h
    up = fn(*[Tensor(a, dtype=F64) for a in arrays]).item()
    arr[idx] = orig - h
    down = fn(*[Tensor(a, dtype=F64) for a in arrays]).item()
    arr[idx] = orig
    return (up - down) / (2 * h)


def grad_errors(fn, arrays, coords=None, rng=None, h=1e-6):
    """Compare backprop against central differences.

    ``fn`` maps tensors to a scalar tensor. ``coords`` limits each array to that
    many random coordinates (``None`` checks all). Returns a list of
    ``(analytic, numeric)`` pairs.
    """
    arrays = [np.array(a, dtype=F64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=F64) for a in arrays]
    analytic = backprop(fn(*tensors), tensors)
    pairs = []
    for which, (a, g) in enumerate(zip(arrays, analytic)):
        if coords is None:
            indices = list(np.ndindex(a.shape))
        else:
            flat = rng.choice(a.size, size=min(coords, a.size), replace=False)
            indices = [np.unravel_index(i, a.shape) for i in flat]
        for idx in indices:
            pairs.append((float(g[idx]), central_difference(fn, arrays, which, idx, h)))
    return pairs


def assert_grads_close(pairs, rel=1e-3, abs_floor=1e-4):
    """Relative error < ``rel`` where |g| > ``abs_floor``, absolute error < ``abs_floor`` elsewhere."""
    for a, n in pairs:
        scale = max(abs(a), abs(n))
        if scale > abs_floor:
            assert abs(a - n) / scale < rel, (a, n)
        else:
            assert abs(a - n) < abs_floor, (a, n)


def projected(op, out_shape_seed=0):
    """Turn a tensor-valued op into a scalar via a fixed random projection."""
    from landet import tensor as T

    cache = {}

    def fn(*ts):
        out = op(*ts)
        if out.shape not in cache:
            r = np.random.default_rng(out_shape_seed).normal(size=out.shape)
            cache[out.shape] = r
        return T.tensor_sum(T.mul(out, Tensor(cache[out.shape], dtype=F64)))

    return fn


def linear_model(weight, bias=None, dims=None, role="image_classifier_f1"):
    """Trained-looking ``flatten -> affine`` classifier with the given weights."""
    from landet.models import Model

    weight = np.asarray(weight, dtype=np.float32)
    classes, d = weight.shape
    bias = np.zeros(classes, np.float32) if bias is None else np.asarray(bias, np.float32)
    dims = (1, 1, d) if dims is None else tuple(dims)
    return Model(role, [{"kind": "flatten"}, {"kind": "affine", "out": classes}], dims, classes,
                 {"1.weight": weight, "1.bias": bias}, {"epochs_trained": 1})


def constant_classifier(label, classes, dims, role="mask_classifier_f2"):
    """Classifier whose logits ignore the input and always favour ``label``."""
    d = int(np.prod(dims))
    return linear_model(np.zeros((classes, d)), np.eye(classes)[label], dims, role)


def identity_attention(dims, gain=0.0, classes=2):
    """Attention net returning ``sigmoid(gain * x)``; gain 0 gives a flat 0.5 mask."""
    from landet.models import Model

    d = int(np.prod(dims))
    layers = [{"kind": "flatten"}, {"kind": "affine", "out": d}, {"kind": "sigmoid"},
              {"kind": "reshape", "shape": list(dims)}]
    params = {"1.weight": (gain * np.eye(d)).astype(np.float32), "1.bias": np.zeros(d, np.float32)}
    return Model("attention_net_g", layers, dims, classes, params, {"epochs_trained": 1})
