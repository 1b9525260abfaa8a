"""Central finite-difference gradient checking for scalar-valued graphs."""
import numpy as np

FD_EPS = 1e-5


def numeric_grad(f, x, eps=FD_EPS, index=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``index`` optionally restricts the check to a subset of flat positions;
    unchecked entries are left as NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in range(flat.size) if index is None else index:
        old = flat[i]
        flat[i] = old + eps
        hi = float(f())
        flat[i] = old - eps
        lo = float(f())
        flat[i] = old
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(x.shape)


def relative_error(analytic, numeric):
    """max|a - n| / max(max|a|, max|n|, 1e-12) over the compared entries.

    Normalizing by the largest magnitude in either gradient (rather than per
    element) keeps near-zero entries from dominating the score.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def check_gradients(loss_fn, tensors, eps=FD_EPS, max_entries=None, rng=None):
    """Compare backprop gradients with central differences.

    ``loss_fn()`` builds a fresh graph and returns a scalar Tensor;
    ``tensors`` maps names to the leaf Tensors to check. With ``max_entries``
    only a random subset of each tensor's entries is differenced. Returns a
    dict name -> relative error.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for k, t in tensors.items():
        index = None
        if max_entries is not None and t.data.size > max_entries:
            index = rng.choice(t.data.size, size=max_entries, replace=False)
        num = numeric_grad(lambda: loss_fn().data, t.data, eps, index)
        errors[k] = relative_error(analytic[k], num)
    return errors
