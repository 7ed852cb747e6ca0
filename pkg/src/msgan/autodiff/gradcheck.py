"""Central finite differences, the oracle for every analytic gradient."""
import numpy as np

from .tensor import Tensor, grad


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (evaluated in float64).

    ``f`` receives a float64 :class:`Tensor` and must return a scalar Tensor or
    number. Raises ``ValueError`` if ``f`` is not finite at a probe point.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def evaluate(arr):
        value = f(Tensor(arr.reshape(base.shape).copy(), requires_grad=True, dtype=np.float64))
        value = float(value.item() if isinstance(value, Tensor) else value)
        if not np.isfinite(value):
            raise ValueError("finite_diff_grad: f returned a non-finite value")
        return value

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(flat)
        flat[i] = orig - h
        fm = evaluate(flat)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def relative_error(analytic, numeric):
    """max |a - n| divided by the largest magnitude in either array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_grad(f, inputs, h=1e-5, dtype=np.float64):
    """Worst relative error between backward and finite differences.

    ``f`` maps a list of tensors to a scalar tensor. The analytic gradient is
    computed in ``dtype``; the finite-difference oracle always runs in float64.
    """
    arrays = [np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    analytic = grad(f(tensors), tensors)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f_i(xi, i=i):
            args = [Tensor(b, requires_grad=True) for b in arrays]
            args[i] = xi
            return f(args)
        numeric = finite_diff_grad(f_i, a, h)
        worst = max(worst, relative_error(analytic[i].data, numeric))
    return worst
