"""Central finite-difference checks for layer and network gradients."""

import numpy as np

from .layers import cross_entropy_loss
from .network import BranchSpec, Model, NetworkConfig

STEP = 1e-5
# relative errors are taken against max(|analytic|, |numeric|, FLOOR) so that
# entries that are zero up to round-off do not blow up the ratio
FLOOR = 1e-7


def numeric_gradient(f, x, h=STEP, index=None):
    """Central differences of scalar ``f()`` w.r.t. the array ``x``, perturbed in place.

    ``index`` restricts the check to an iterable of flat positions; the other
    entries of the result are NaN.
    """
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = grad.reshape(-1)
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=FLOOR):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over entries where ``numeric`` is defined."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    ok = ~np.isnan(n)
    if not ok.any():
        return 0.0
    a, n = a[ok], n[ok]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def reduced_config(num_classes=3, seed=0, fc_width=10, keep_prob=0.5):
    """Three-branch network at patch sizes 9/13/17 with 4/6/8 kernels per layer."""
    branches = [
        BranchSpec(9, (3, 3, 3), (4, 6, 8), (False, True, False), fc_width),
        BranchSpec(13, (3, 3, 2), (4, 6, 8), (True, True, False), fc_width),
        BranchSpec(17, (5, 3, 3), (4, 6, 8), (True, True, True), fc_width),
    ]
    return NetworkConfig(branches=branches, num_classes=num_classes, keep_prob=keep_prob, seed=seed)


def check_model(model, patches, targets, drop_seed=0, h=STEP, max_per_tensor=None, rng=None):
    """Max relative error per parameter tensor of a float64 ``model``.

    Dropout masks are redrawn from the same seed on every evaluation so the
    loss is a fixed function of the parameters. The loss is evaluated without
    the log guard, which is the function the analytic gradient belongs to.
    With ``max_per_tensor`` only that many randomly chosen entries per tensor
    are perturbed.
    """
    def loss():
        probs = model.forward(patches, training=True, rng=np.random.default_rng(drop_seed))
        return cross_entropy_loss(probs, targets, eps=0.0)

    loss()
    analytic = {k: v.copy() for k, v in model.backward(targets).items()}
    errors = {}
    for name, arr in model.param_arrays():
        index = None
        if max_per_tensor is not None and arr.size > max_per_tensor:
            index = (rng or np.random.default_rng(0)).choice(arr.size, max_per_tensor, replace=False)
        errors[name] = relative_error(analytic[name], numeric_gradient(loss, arr, h, index))
    return errors


def random_instance(config, batch, seed):
    """Float64 model plus random patches and targets for ``config``."""
    rng = np.random.default_rng(seed)
    model = Model(config, dtype=np.float64)
    # perturb biases off zero so ReLU units are not all sitting on the same side
    for _, p in model.named_params():
        p.biases[...] = rng.normal(0, 0.1, p.biases.shape)
    patches = [rng.uniform(0, 1023, (batch, s, s)) for s in config.patch_sizes]
    targets = rng.integers(0, config.num_classes, batch)
    return model, patches, targets
