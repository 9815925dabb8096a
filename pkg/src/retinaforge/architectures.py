"""The four segmentation network kinds and their parameter accounting.

Every network is an encoder-decoder built from double-conv blocks. The two
"iter" kinds append refinery mini networks after the base: each mini takes
the channel-concat of the base's first-level features and the previous
module's feature tap, and emits its own probability map plus a widened
feature tap for the next iteration. The last map is the model prediction.

Default filter ladders:
    unet        encoder 32, 64, 128, 256   bottleneck 512
    miunet      encoder 32, 16, 16, 8      bottleneck 8    (reversed ladder)
    iternet     unet base + 3 minis of encoder 32, 32, bottleneck 32
    itermiunet  miunet base + 3 minis of encoder 16, 8, bottleneck 8
"""

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .engine import ParamStore, Tensor
from .errors import ConfigError, ShapeError

KINDS = ("unet", "miunet", "iternet", "itermiunet")

# (base encoder + bottleneck, mini encoder + bottleneck, iterations)
_DEFAULTS = {
    "unet": ((32, 64, 128, 256, 512), (), 1),
    "miunet": ((32, 16, 16, 8, 8), (), 1),
    "iternet": ((32, 64, 128, 256, 512), (32, 32, 32), 4),
    "itermiunet": ((32, 16, 16, 8, 8), (16, 8, 8), 4),
}


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of one network: filter ladders and N.

    ``base_filters`` and ``mini_filters`` list encoder filter counts per
    level with the bottleneck count last; ``mini_filters`` is empty for the
    non-iterative kinds. ``iterations`` is the number of probability maps
    the model produces (1 for unet/miunet, paper default 4 for the rest).
    """

    kind: str
    base_filters: tuple
    mini_filters: tuple
    iterations: int
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture kind {self.kind!r}; pick one of {KINDS}")
        if len(self.base_filters) < 2:
            raise ConfigError("base_filters needs at least one encoder level plus a bottleneck")
        if any(f < 1 for f in self.base_filters):
            raise ConfigError(f"filter counts must be positive, got {self.base_filters}")
        iterative = self.kind in ("iternet", "itermiunet")
        if iterative:
            if self.iterations < 2:
                raise ConfigError(f"{self.kind} needs iterations >= 2, got {self.iterations}")
            if len(self.mini_filters) < 2:
                raise ConfigError("mini_filters needs at least one encoder level plus a bottleneck")
        else:
            if self.iterations != 1:
                raise ConfigError(f"{self.kind} produces exactly one output, got iterations={self.iterations}")
            if self.mini_filters:
                raise ConfigError(f"{self.kind} takes no mini_filters")
        ladders = [self.base_filters] + ([self.mini_filters] if iterative else [])
        for ladder in ladders:
            if self.kind in ("miunet", "itermiunet"):
                if any(a < b for a, b in zip(ladder, ladder[1:])):
                    raise ConfigError(
                        f"{self.kind} requires a non-increasing filter ladder, got {ladder}"
                    )
            else:
                if any(a > b for a, b in zip(ladder, ladder[1:])):
                    raise ConfigError(
                        f"{self.kind} requires a non-decreasing filter ladder, got {ladder}"
                    )

    def to_dict(self):
        return {
            "kind": self.kind,
            "base_filters": list(self.base_filters),
            "mini_filters": list(self.mini_filters),
            "iterations": self.iterations,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            base_filters=tuple(d["base_filters"]),
            mini_filters=tuple(d["mini_filters"]),
            iterations=int(d["iterations"]),
            in_channels=int(d.get("in_channels", 1)),
            out_channels=int(d.get("out_channels", 1)),
        )


def default_spec(kind, iterations=None):
    if kind not in _DEFAULTS:
        raise ConfigError(f"unknown architecture kind {kind!r}; pick one of {KINDS}")
    base, mini, n = _DEFAULTS[kind]
    if iterations is not None and kind in ("iternet", "itermiunet"):
        n = iterations
    return ArchitectureSpec(kind=kind, base_filters=base, mini_filters=mini, iterations=n)


@dataclass
class ForwardResult:
    """N probability maps plus the feature taps the wiring exposes."""

    maps: list
    low_level: Tensor
    feature_taps: list

    @property
    def prediction(self):
        return self.maps[-1]


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[:-1]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape).astype(np.float32)


class Model:
    """A built network: parameter store plus the wiring to run it."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.store = ParamStore()
        self._rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A7]))
        feat_ch = spec.base_filters[0]  # width of every feature tap
        self._register_encdec("base", spec.in_channels, spec.base_filters)
        self._register_head("base", spec.base_filters[0])
        for k in range(1, spec.iterations):
            name = f"mini{k}"
            self._register_encdec(name, spec.base_filters[0] + feat_ch, spec.mini_filters)
            self._conv(f"{name}.tap", 1, spec.mini_filters[0], feat_ch)
            self._register_head(name, spec.mini_filters[0])
        del self._rng

    # -- parameter registration (order fixes the init stream) --

    def _conv(self, name, k, c_in, c_out):
        self.store.add(f"{name}.w", _he_uniform(self._rng, (k, k, c_in, c_out)))
        self.store.add(f"{name}.b", np.zeros(c_out, np.float32))

    def _up(self, name, c_in, c_out):
        self.store.add(f"{name}.w", _he_uniform(self._rng, (2, 2, c_in, c_out)))
        self.store.add(f"{name}.b", np.zeros(c_out, np.float32))

    def _double(self, name, c_in, c_out):
        self._conv(f"{name}.conv1", 3, c_in, c_out)
        self._conv(f"{name}.conv2", 3, c_out, c_out)

    def _register_encdec(self, prefix, c_in, filters):
        encoder, bottleneck = filters[:-1], filters[-1]
        c = c_in
        for i, f in enumerate(encoder, 1):
            self._double(f"{prefix}.enc{i}", c, f)
            c = f
        self._double(f"{prefix}.bottleneck", c, bottleneck)
        c = bottleneck
        for i in range(len(encoder), 0, -1):
            f = encoder[i - 1]
            self._up(f"{prefix}.dec{i}.up", c, f)
            self._double(f"{prefix}.dec{i}", 2 * f, f)
            c = f

    def _register_head(self, prefix, c_in):
        self._conv(f"{prefix}.head", 1, c_in, self.spec.out_channels)

    # -- forward --

    @property
    def pool_divisor(self):
        return 2 ** (len(self.spec.base_filters) - 1)

    def _run_double(self, name, h, training, rng, p):
        st = self.store
        h = L.relu(L.conv2d(h, st.tensor(f"{name}.conv1.w"), st.tensor(f"{name}.conv1.b")))
        h = L.dropout(h, p, training, rng)
        h = L.relu(L.conv2d(h, st.tensor(f"{name}.conv2.w"), st.tensor(f"{name}.conv2.b")))
        return h

    def _run_encdec(self, prefix, h, filters, training, rng, p):
        st = self.store
        encoder = filters[:-1]
        skips = []
        for i in range(1, len(encoder) + 1):
            h = self._run_double(f"{prefix}.enc{i}", h, training, rng, p)
            skips.append(h)
            h = L.max_pool2d(h)
        h = self._run_double(f"{prefix}.bottleneck", h, training, rng, p)
        for i in range(len(encoder), 0, -1):
            h = L.transposed_conv2d(h, st.tensor(f"{prefix}.dec{i}.up.w"), st.tensor(f"{prefix}.dec{i}.up.b"))
            h = L.concat_channels(h, skips[i - 1])
            h = self._run_double(f"{prefix}.dec{i}", h, training, rng, p)
        return h, skips[0]

    def forward(self, batch, training=False, rng=None, dropout_rate=0.1):
        """Run the network; returns N probability maps plus feature taps.

        ``batch`` is (n, h, w, in_channels) with h and w divisible by
        2^depth; in training mode dropout is live and ops record on the
        active tape.
        """
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 4 or x.data.shape[3] != self.spec.in_channels:
            raise ShapeError(
                f"expected batch shaped (n, h, w, {self.spec.in_channels}), got {x.shape}"
            )
        n, h, w, _ = x.data.shape
        d = self.pool_divisor
        if h % d or w % d:
            raise ShapeError(
                f"spatial size {h}x{w} not divisible by {d}; zero-pad the input "
                f"to the next multiple of {d} and crop the output"
            )
        if training and rng is None:
            raise ConfigError("training-mode forward needs an rng for dropout")
        st = self.store
        p = dropout_rate
        feat, low = self._run_encdec("base", x, self.spec.base_filters, training, rng, p)
        maps = [L.sigmoid(L.conv2d(feat, st.tensor("base.head.w"), st.tensor("base.head.b")))]
        taps = [feat]
        for k in range(1, self.spec.iterations):
            name = f"mini{k}"
            h_in = L.concat_channels(low, taps[-1])
            feat_k, _ = self._run_encdec(name, h_in, self.spec.mini_filters, training, rng, p)
            tap = L.relu(L.conv2d(feat_k, st.tensor(f"{name}.tap.w"), st.tensor(f"{name}.tap.b")))
            maps.append(L.sigmoid(L.conv2d(feat_k, st.tensor(f"{name}.head.w"), st.tensor(f"{name}.head.b"))))
            taps.append(tap)
        return ForwardResult(maps=maps, low_level=low, feature_taps=taps)


def _check_kind(spec, kind):
    if spec.kind != kind:
        raise ConfigError(f"spec kind is {spec.kind!r}, expected {kind!r}")


def build_unet(spec, seed=0):
    _check_kind(spec, "unet")
    return Model(spec, seed)


def build_miunet(spec, seed=0):
    _check_kind(spec, "miunet")
    return Model(spec, seed)


def build_iternet(spec, seed=0):
    _check_kind(spec, "iternet")
    return Model(spec, seed)


def build_itermiunet(spec, seed=0):
    _check_kind(spec, "itermiunet")
    return Model(spec, seed)


def build_model(spec, seed=0):
    """Dispatch on spec.kind."""
    builder = {
        "unet": build_unet,
        "miunet": build_miunet,
        "iternet": build_iternet,
        "itermiunet": build_itermiunet,
    }[spec.kind]
    return builder(spec, seed)


def count_parameters(model):
    """Exact number of trainable scalars (weights plus biases)."""
    store = model.store if isinstance(model, Model) else model
    return store.size()


def _encdec_structure(levels):
    double = ("conv3", "relu", "dropout", "conv3", "relu")
    ops = []
    for _ in range(levels):
        ops += [*double, "pool"]
    ops += double
    for _ in range(levels):
        ops += ["upconv", "concat", *double]
    return ops


def structure(spec):
    """Layer-kind sequence of the built graph, free of channel widths.

    Two specs are depth-isomorphic exactly when their structures match.
    """
    ops = _encdec_structure(len(spec.base_filters) - 1)
    ops += ["conv1", "sigmoid"]
    for _ in range(1, spec.iterations):
        ops += ["concat"]
        ops += _encdec_structure(len(spec.mini_filters) - 1)
        ops += ["conv1", "relu", "conv1", "sigmoid"]
    return tuple(ops)
