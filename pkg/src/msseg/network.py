"""Multi-branch, multi-scale patch classifier.

One convolutional branch per patch size, each ending in its own fully
connected layer. The branch outputs are concatenated and fed to a single
shared dense layer followed by softmax.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor
from .errors import ConfigurationError, DimensionError, UsageError
from .layers import ConvBlock, Dense, Dropout, init_params, relu, relu_backward, softmax, \
    softmax_cross_entropy_grad


@dataclass(frozen=True)
class BranchSpec:
    patch_size: int
    kernel_sizes: tuple
    kernel_counts: tuple
    pools: tuple
    fc_width: int = 256

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "kernel_counts", tuple(int(k) for k in self.kernel_counts))
        object.__setattr__(self, "pools", tuple(bool(p) for p in self.pools))
        if not len(self.kernel_sizes) == len(self.kernel_counts) == len(self.pools):
            raise ConfigurationError("kernel_sizes, kernel_counts and pools must have equal length")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigurationError(f"patch size must be odd and positive, got {self.patch_size}")
        if self.fc_width < 1 or any(c < 1 for c in self.kernel_counts):
            raise ConfigurationError("layer widths must be positive")

    @property
    def final_extent(self):
        return shape_chain(self)[-1]

    @property
    def flat_features(self):
        channels = self.kernel_counts[-1] if self.kernel_counts else 1
        return channels * self.final_extent ** 2


def shape_chain(spec):
    """Spatial extent after the input, each convolution and each pooling step.

    >>> shape_chain(default_config(9).branches[0])
    [25, 21, 11, 9, 5, 3]
    """
    extents = [spec.patch_size]
    h = spec.patch_size
    for i, (k, pool) in enumerate(zip(spec.kernel_sizes, spec.pools)):
        if k < 1 or k > h:
            raise ConfigurationError(
                f"branch {spec.patch_size}: layer {i} kernel {k} does not fit a {h}x{h} map")
        h = h - k + 1
        extents.append(h)
        if pool:
            h = (h + 1) // 2
            extents.append(h)
    return extents


@dataclass
class NetworkConfig:
    branches: list
    num_classes: int
    keep_prob: float = 0.5
    seed: int = 0
    # inputs arrive scaled to [0, 1023]; this maps them to [-1, 1]
    input_offset: float = 511.5
    input_scale: float = 1.0 / 511.5
    # acquisition plane of the training data, recorded by train()
    slice_axis: int = None

    def __post_init__(self):
        self.branches = [b if isinstance(b, BranchSpec) else BranchSpec(**b) for b in self.branches]
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        if not self.branches:
            raise ConfigurationError("need at least one branch")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigurationError(f"keep probability must be in (0, 1], got {self.keep_prob}")
        for b in self.branches:
            shape_chain(b)

    @property
    def patch_sizes(self):
        return [b.patch_size for b in self.branches]

    def to_dict(self):
        d = asdict(self)
        for b in d["branches"]:
            for key in ("kernel_sizes", "kernel_counts", "pools"):
                b[key] = list(b[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["branches"] = [BranchSpec(**b) for b in d["branches"]]
        return cls(**d)


DEFAULT_BRANCHES = (
    BranchSpec(25, (5, 3, 3), (24, 32, 48), (True, True, False)),
    BranchSpec(51, (7, 5, 3), (24, 32, 48), (True, True, True)),
    BranchSpec(75, (9, 7, 5), (24, 32, 48), (True, True, True)),
)


def default_config(num_classes, patch_sizes=None, **kwargs):
    """The three-branch 25/51/75 network, optionally restricted to some branches."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    branches = list(DEFAULT_BRANCHES)
    if patch_sizes is not None:
        by_size = {b.patch_size: b for b in branches}
        try:
            branches = [by_size[int(s)] for s in patch_sizes]
        except KeyError as exc:
            raise ConfigurationError(f"no default branch for patch size {exc.args[0]}") from None
    return NetworkConfig(branches=branches, num_classes=num_classes, **kwargs)


class Branch:
    def __init__(self, spec, rng, dtype):
        self.spec = spec
        self.convs = []
        c_in = 1
        for i, (k, c_out, pool) in enumerate(zip(spec.kernel_sizes, spec.kernel_counts, spec.pools)):
            params = init_params((c_out, c_in, k, k), c_in * k * k, rng, dtype)
            self.convs.append(ConvBlock(params, pool, need_input_grad=i > 0))
            c_in = c_out
        self.fc = Dense(init_params((spec.flat_features, spec.fc_width), spec.flat_features, rng, dtype))
        self.dropout = None
        self._fc_out = None
        self._map_shape = None

    def named_params(self, prefix):
        for i, conv in enumerate(self.convs):
            yield f"{prefix}.conv{i}", conv.params
        yield f"{prefix}.fc", self.fc.params

    def forward(self, x, training, rng):
        """``x`` is ``[1, B, S, S]``; returns ``[B, fc_width]``."""
        for conv in self.convs:
            x = conv.forward(x)
        self._map_shape = x.shape
        flat = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        out = relu(self.fc.forward(flat))
        self._fc_out = out
        return self.dropout.forward(out, training, rng)

    def backward(self, grad):
        grad = self.dropout.backward(grad)
        grad = relu_backward(grad, self._fc_out)
        grad = self.fc.backward(grad)
        c, b, h, w = self._map_shape
        grad = np.ascontiguousarray(grad.reshape(b, c, h, w).transpose(1, 0, 2, 3))
        for conv in reversed(self.convs):
            grad = conv.backward(grad)
            conv.release()


class Model:
    """Weights, biases and optimizer state of a configured network."""

    def __init__(self, config, dtype=tensor.TRAIN_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        # one init stream per branch, keyed by patch size, so adding or removing a
        # branch leaves the others untouched
        self.branches = []
        seen = {}
        for spec in config.branches:
            occurrence = seen.get(spec.patch_size, 0)
            seen[spec.patch_size] = occurrence + 1
            rng = np.random.default_rng([config.seed, 1, spec.patch_size, occurrence])
            self.branches.append(Branch(spec, rng, self.dtype))
        self.set_keep_prob(config.keep_prob)
        width = sum(spec.fc_width for spec in config.branches)
        rng = np.random.default_rng([config.seed, 0])
        self.head = Dense(init_params((width, config.num_classes), width, rng, self.dtype))
        self.optimizer_state = {}
        self._probs = None

    def set_keep_prob(self, keep_prob):
        for br in self.branches:
            br.dropout = Dropout(keep_prob)
        self.config.keep_prob = keep_prob

    def named_params(self):
        """``(name, LayerParams)`` pairs in a fixed order."""
        for i, br in enumerate(self.branches):
            yield from br.named_params(f"branch{i}")
        yield "head", self.head.params

    def param_arrays(self):
        """Flat ``(name, array)`` list of every trainable tensor."""
        out = []
        for name, p in self.named_params():
            out.append((f"{name}.weights", p.weights))
            out.append((f"{name}.biases", p.biases))
        return out

    def grad_arrays(self):
        out = []
        for name, p in self.named_params():
            out.append((f"{name}.weights", p.grad_weights))
            out.append((f"{name}.biases", p.grad_biases))
        return out

    def num_parameters(self):
        return sum(a.size for _, a in self.param_arrays())

    def astype(self, dtype):
        """Copy of this model with every parameter cast to ``dtype``."""
        other = Model(self.config, dtype)
        for (_, dst), (_, src) in zip(other.named_params(), self.named_params()):
            dst.weights = src.weights.astype(dtype)
            dst.biases = src.biases.astype(dtype)
            dst.grad_weights = np.zeros_like(dst.weights)
            dst.grad_biases = np.zeros_like(dst.biases)
        other.optimizer_state = {k: v.astype(dtype) for k, v in self.optimizer_state.items()}
        return other

    def _prepare(self, patches):
        if len(patches) != len(self.branches):
            raise DimensionError(
                f"expected {len(self.branches)} patch arrays (one per branch), got {len(patches)}")
        xs = []
        batch = None
        for spec, p in zip(self.config.branches, patches):
            p = np.asarray(p)
            if p.ndim != 3 or p.shape[1:] != (spec.patch_size, spec.patch_size):
                raise DimensionError(
                    f"branch {spec.patch_size} expects [B, {spec.patch_size}, {spec.patch_size}] "
                    f"patches, got shape {p.shape}")
            if batch is None:
                batch = p.shape[0]
            elif p.shape[0] != batch:
                raise DimensionError("patch arrays disagree on batch size (axis 0)")
            x = (p.astype(self.dtype) - self.dtype.type(self.config.input_offset)) \
                * self.dtype.type(self.config.input_scale)
            xs.append(x[None])
        return xs

    def forward(self, patches, training=False, rng=None):
        """Class probabilities ``[B, N]`` for one patch array per branch.

        ``patches[i]`` has shape ``[B, S_i, S_i]``. Dropout is active only when
        ``training`` is true, in which case ``rng`` drives the masks.
        """
        xs = self._prepare(patches)
        feats = [br.forward(x, training, rng) for br, x in zip(self.branches, xs)]
        logits = self.head.forward(np.concatenate(feats, axis=1))
        self._probs = softmax(logits)
        if not training:
            for br in self.branches:
                for conv in br.convs:
                    conv.release()
        return self._probs

    def backward(self, targets, loss_scale=1.0):
        """Reverse-mode pass for the mean cross-entropy of the last training forward.

        Parameter gradients are left in each ``LayerParams``; the same arrays
        are returned by name.
        """
        if self._probs is None or any(
                conv._cache is None for br in self.branches for conv in br.convs):
            raise UsageError("backward needs the state of a preceding training-mode forward pass")
        grad = softmax_cross_entropy_grad(self._probs, targets)
        if loss_scale != 1.0:
            grad = grad * self.dtype.type(loss_scale)
        grad = self.head.backward(grad)
        start = 0
        for br in self.branches:
            width = br.spec.fc_width
            br.backward(grad[:, start:start + width])
            start += width
        self._probs = None
        return dict(self.grad_arrays())
