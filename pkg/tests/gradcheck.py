"""Compare engine.backward against the finite-difference oracle."""

import numpy as np

from tumorscope.engine import Tensor, backward, default_dtype
from tumorscope.harness import OracleReport, finite_diff, rel_error


def check_grads(build_loss, arrays, eps=1e-5, tol=1e-4, name="op", seed=None, skip=()):
    """``build_loss(*tensors) -> scalar Tensor``; every array not in ``skip`` is checked."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with default_dtype(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        backward(build_loss(*tensors))
        worst = 0.0
        for i, (a, t) in enumerate(zip(arrays, tensors)):
            if i in skip:
                continue

            def f(x, i=i):
                args = [Tensor(arr) for arr in arrays]
                args[i] = Tensor(x)
                return build_loss(*args).item()

            num = finite_diff(f, a.copy(), eps)
            worst = max(worst, rel_error(t.grad, num))
    return OracleReport(name, worst, tol, seed)


def project(out, weights):
    """Fixed random projection so every output element carries a distinct weight."""
    return (out * Tensor(weights, dtype=out.dtype)).sum()


TINY_SPEC = dict(input_size=16, filters=(2, 3, 3, 4), kernels=(3, 3, 3, 3), dropout=0.3)


def check_cnn(seed, batch=2, eps=1e-5, tol=1e-3, train=True, floor=1e-7):
    """Backprop through the whole 12-layer network versus central differences.

    Every parameter tensor is checked. Dropout draws from a generator
    re-seeded on each forward so the mask is fixed across evaluations.
    ``floor`` bounds the relative-error denominator from below: conv4's bias
    gradient is exactly zero in train mode (batchnorm removes any per-channel
    shift), so its finite-difference estimate is pure rounding noise.
    """
    from tumorscope.cnn import ModelSpec, ScratchCNN
    from tumorscope.engine import softmax_cross_entropy

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        model = ScratchCNN(ModelSpec(**TINY_SPEC), seed=seed)
        for t in model.parameters():
            t.data = t.data + rng.normal(0, 0.05, t.shape)
        x = rng.normal(size=(batch, 1, 16, 16))
        y = np.arange(batch) % 2

        def loss():
            drop = np.random.default_rng(seed + 1)
            return softmax_cross_entropy(model.forward(x, train=train, rng=drop).logits, y)

        for t in model.parameters():
            t.grad = None
        backward(loss())
        worst = 0.0
        for t in model.parameters():
            def f(arr, t=t):
                saved = t.data
                t.data = arr
                try:
                    return loss().item()
                finally:
                    t.data = saved

            num = finite_diff(f, t.data.copy(), eps)
            worst = max(worst, rel_error(t.grad, num, floor))
    return OracleReport("cnn", worst, tol, seed)
