"""Compare taped gradients against central finite differences."""
import numpy as np

from oracles import numeric_grad, rel_error
from rcnet.tensor import Tape, Tensor, backward, dot


def check(fn, arrays, seed=0, eps=1e-5):
    """``fn(*tensors) -> Tensor``; returns the worst relative error over inputs.

    The scalar loss is a fixed random projection of the output so every
    output entry contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        probe = np.random.default_rng(seed).standard_normal(out.shape)
        loss = dot(out, probe)
    grads = backward(tape, loss)

    def value(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * probe).sum())

    numeric = numeric_grad(value, arrays, eps)
    return max(rel_error(grads.get(leaf, np.zeros_like(a)), g) for leaf, a, g in zip(leaves, arrays, numeric))
