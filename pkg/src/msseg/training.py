"""Class-balanced sampling, RMSprop and the epoch loop."""

import logging
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError, InputError, OptimizationError
from .layers import cross_entropy_loss
from .patches import extract_patches, plane_stack
from .volume import validate_geometry

log = logging.getLogger(__name__)

# stream ids mixed into the master seed; keep stable, checkpoints depend on them
_SAMPLE_STREAM = 0
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2


def stream(seed, *keys):
    """Independent generator for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class TrainingConfig:
    samples_per_class: int = 50_000
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    keep_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.samples_per_class >= 1, "samples_per_class must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (0 < self.rho < 1, "rho must lie in (0, 1)"),
            (self.epsilon > 0, "epsilon must be > 0"),
            (0 < self.keep_prob <= 1, "keep_prob must lie in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)

    def to_dict(self):
        return asdict(self)


def class_indices(labels, mask, num_classes=None):
    """Flat voxel indices of every class inside the mask."""
    inside = mask.data.astype(bool)
    if not inside.any():
        raise InputError("brain mask is empty")
    n = num_classes or labels.num_classes
    lab = labels.data.ravel()
    flat_inside = np.flatnonzero(inside.ravel())
    lab_inside = lab[flat_inside]
    return [flat_inside[lab_inside == c] for c in range(n)]


def balanced_sample(labels, mask, k, rng, num_classes=None, indices=None):
    """Up to ``k`` distinct in-mask coordinates per class, drawn uniformly.

    Returns a list indexed by class of ``[n_c, 3]`` coordinate arrays with
    ``n_c = min(k, count_c)``. Classes absent from the image give empty arrays.
    """
    if k < 1:
        raise ConfigurationError(f"samples per class must be >= 1, got {k}")
    if indices is None:
        indices = class_indices(labels, mask, num_classes)
    out = []
    for idx in indices:
        if idx.size > k:
            idx = idx[np.sort(rng.choice(idx.size, size=k, replace=False))]
        out.append(np.stack(np.unravel_index(idx, labels.shape), axis=1))
    return out


def rmsprop_step(param, grad, r, rate, rho, eps):
    """In-place RMSprop update of ``param`` and its mean-square accumulator ``r``."""
    if not np.all(np.isfinite(grad)):
        raise OptimizationError("non-finite gradient encountered")
    dt = param.dtype.type
    r *= dt(rho)
    r += dt(1 - rho) * grad * grad
    param -= dt(rate) * grad / (np.sqrt(r) + dt(eps))


def optimizer_step(model, cfg):
    for name, p in model.named_params():
        for suffix, value, grad in (("weights", p.weights, p.grad_weights),
                                    ("biases", p.biases, p.grad_biases)):
            key = f"{name}.{suffix}"
            r = model.optimizer_state.get(key)
            if r is None:
                r = model.optimizer_state[key] = np.zeros_like(value)
            try:
                rmsprop_step(value, grad, r, cfg.learning_rate, cfg.rho, cfg.epsilon)
            except OptimizationError as exc:
                raise OptimizationError(f"{exc} in {key}") from None


class _Image:
    """Per-image training state: planes for patch extraction and class index lists."""

    def __init__(self, volume, labels, mask, num_classes, dtype):
        validate_geometry(volume, mask, labels)
        self.volume = volume
        self.shape = volume.shape
        self.planes = plane_stack(volume, dtype)
        self.indices = class_indices(labels, mask, num_classes)
        self.labels = labels


def draw_epoch(images, k, seed, epoch):
    """Balanced draw over all images plus a global shuffle for one epoch.

    ``images`` holds per-image class index lists. Returns ``(image_ids,
    coords, labels)`` in training order.
    """
    ids, coords, labels = [], [], []
    for i, img in enumerate(images):
        per_class = balanced_sample(img.labels, None, k, stream(seed, epoch, i, _SAMPLE_STREAM),
                                    indices=img.indices)
        for c, xyz in enumerate(per_class):
            ids.append(np.full(len(xyz), i))
            coords.append(xyz)
            labels.append(np.full(len(xyz), c))
    ids = np.concatenate(ids)
    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    order = stream(seed, epoch, _SHUFFLE_STREAM).permutation(len(ids))
    return ids[order], coords[order], labels[order]


def gather_patches(images, ids, coords, sizes, dtype):
    out = [np.empty((len(ids), s, s), dtype=dtype) for s in sizes]
    for i in np.unique(ids):
        sel = ids == i
        img = images[i]
        for arr, s in zip(out, sizes):
            arr[sel] = extract_patches(img.volume, coords[sel], s, img.planes)
    return out


def train(model, images, cfg, validation=None, callback=None):
    """Train ``model`` in place on ``(volume, labels, mask)`` triplets.

    Intensities must already be scaled. ``validation`` is an optional
    ``(volume, labels, mask)`` triplet segmented after each epoch to record
    per-class Dice. Returns ``(model, history)``.
    """
    from .inference import segment
    from .metrics import evaluate

    if not images:
        raise InputError("no training images given")
    n = model.config.num_classes
    axes = {v.slice_axis for v, _, _ in images}
    if len(axes) != 1:
        raise ConfigurationError("training images disagree on the acquisition plane")
    model.config.slice_axis = axes.pop()
    model.set_keep_prob(cfg.keep_prob)
    for _, lab, _ in images:
        if lab.num_classes > n:
            raise ConfigurationError(
                f"labels have {lab.num_classes} classes but the network outputs {n}")
    state = [_Image(v, l, m, n, model.dtype) for v, l, m in images]
    sizes = model.config.patch_sizes
    history = []
    batch_id = 0
    for epoch in range(cfg.epochs):
        ids, coords, labels = draw_epoch(state, cfg.samples_per_class, cfg.seed, epoch)
        drop_rng = stream(cfg.seed, epoch, _DROPOUT_STREAM)
        total, count = 0.0, 0
        for start in range(0, len(ids), cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            patches = gather_patches(state, ids[sl], coords[sl], sizes, model.dtype)
            probs = model.forward(patches, training=True, rng=drop_rng)
            loss = cross_entropy_loss(probs, labels[sl])
            if not np.isfinite(loss):
                raise OptimizationError(f"non-finite loss in epoch {epoch}, batch {batch_id}")
            model.backward(labels[sl])
            try:
                optimizer_step(model, cfg)
            except OptimizationError as exc:
                raise OptimizationError(f"{exc} (epoch {epoch}, batch {batch_id})") from None
            total += loss * len(probs)
            count += len(probs)
            batch_id += 1
        record = {"epoch": epoch + 1, "mean_loss": total / max(count, 1), "samples": count}
        if validation is not None:
            vol, ref, mask = validation
            report = evaluate(segment(vol, mask, model), ref, num_classes=n)
            record["dice"] = {c: report.dice[c] for c in report.classes}
        log.info("epoch %d: mean loss %.5f over %d samples", epoch + 1, record["mean_loss"], count)
        history.append(record)
        if callback is not None:
            callback(record)
    return model, history


def write_history(history, path):
    """Tab-separated table: epoch, mean loss, then one Dice column per class if recorded."""
    classes = sorted({c for rec in history for c in rec.get("dice", {})})
    header = ["epoch", "mean_loss"] + [f"dice_{c}" for c in classes]
    lines = ["\t".join(header)]
    for rec in history:
        row = [str(rec["epoch"]), repr(float(rec["mean_loss"]))]
        for c in classes:
            d = rec.get("dice", {}).get(c)
            row.append("n/a" if d is None else f"{d:.6f}")
        lines.append("\t".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
