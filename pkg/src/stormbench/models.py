"""Forecasting backbones and the parameter-budget controller.

All models map a history of h vorticity frames to the next frame on the
same grid. Window models (fno2d, tfno2d, unet) consume the h frames
channel-stacked; convlstm consumes them sequentially as recurrent inputs;
persistence returns the last frame.

Parameter counts are in real scalars: a complex weight entry counts as 2
(it is stored as two floats). This is the convention under which the
published width tables land in their budget buckets.
"""

import dataclasses
import math

import numpy as np

from . import ops
from .simulate import BlowUpError
from .tensor import ComplexTensor, Tensor, no_grad

FAMILIES = ("fno2d", "tfno2d", "convlstm", "unet", "persistence")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    family: str
    width: int = 0
    n_layers: int = 4
    modes: tuple = (12, 12)
    tucker_rank_fraction: float = 0.5
    history_len: int = 10
    pad_mode: str = "circular_both"
    lift_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")
        if self.family != "persistence":
            if self.width < 1:
                raise ValueError(f"{self.family} requires width >= 1")
            if self.n_layers < 1:
                raise ValueError("n_layers must be >= 1")
        if self.family in ("fno2d", "tfno2d"):
            m1, m2 = self.modes
            if m1 < 1 or m2 < 1:
                raise ValueError("modes must be >= 1")
        if not 0.0 < self.tucker_rank_fraction <= 1.0:
            raise ValueError("tucker_rank_fraction must be in (0, 1]")
        if self.pad_mode not in ops.PAD_MODES:
            raise ValueError(f"unknown pad_mode {self.pad_mode!r}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                  requires_grad=True)


def _complex_normal(rng, shape, scale):
    z = scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    t = ComplexTensor(z.astype(np.complex64))
    t.requires_grad = True
    return t


class Model:
    """Named-parameter container with a single-step forward definition."""

    def __init__(self, config):
        self.config = config
        self.params = {}

    def _add(self, name, tensor):
        self.params[name] = tensor
        return tensor

    def forward(self, history):
        raise NotImplementedError

    def load_params(self, arrays):
        for name, value in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != value.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape} != "
                                 f"{self.params[name].shape}")
            self.params[name].data = value.astype(self.params[name].data.dtype, copy=True)

    def export_params(self):
        return {name: p.data.copy() for name, p in self.params.items()}


class Persistence(Model):
    """Predicts the last observed frame for every lead time."""

    def forward(self, history):
        last = history.data[:, -1:, :, :]
        return Tensor(np.ascontiguousarray(last))


class FNO2D(Model):
    """Fourier neural operator; tfno2d stores spectral weights Tucker-factored."""

    def __init__(self, config):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        c = config.width
        lift = config.lift_dim
        h = config.history_len
        m1, m2 = config.modes
        self.tucker = config.family == "tfno2d"

        self._add("lift.w1", _uniform(rng, (h, lift), h))
        self._add("lift.b1", _uniform(rng, (lift,), h))
        self._add("lift.w2", _uniform(rng, (lift, c), lift))
        self._add("lift.b2", _uniform(rng, (c,), lift))

        scale = 1.0 / (c * c)
        for layer in range(config.n_layers):
            if self.tucker:
                r1 = max(1, round(config.tucker_rank_fraction * 2 * m1))
                r2 = max(1, round(config.tucker_rank_fraction * m2))
                self._add(f"block{layer}.core", _complex_normal(rng, (c, c, r1, r2), scale))
                self._add(f"block{layer}.u1", _complex_normal(rng, (c, c), 1.0 / math.sqrt(c)))
                self._add(f"block{layer}.u2", _complex_normal(rng, (c, c), 1.0 / math.sqrt(c)))
                self._add(f"block{layer}.u3", _complex_normal(rng, (2 * m1, r1), 1.0 / math.sqrt(2 * m1)))
                self._add(f"block{layer}.u4", _complex_normal(rng, (m2, r2), 1.0 / math.sqrt(m2)))
            else:
                self._add(f"block{layer}.spectral", _complex_normal(rng, (c, c, 2 * m1, m2), scale))
            self._add(f"block{layer}.skip.w", _uniform(rng, (c, c), c))
            self._add(f"block{layer}.skip.b", _uniform(rng, (c,), c))

        self._add("proj.w1", _uniform(rng, (c, lift), c))
        self._add("proj.b1", _uniform(rng, (lift,), c))
        self._add("proj.w2", _uniform(rng, (lift, 1), lift))
        self._add("proj.b2", _uniform(rng, (1,), lift))

    def _spectral_weight(self, layer):
        p = self.params
        if self.tucker:
            return ops.tucker_reconstruct(p[f"block{layer}.core"], p[f"block{layer}.u1"],
                                          p[f"block{layer}.u2"], p[f"block{layer}.u3"],
                                          p[f"block{layer}.u4"])
        return p[f"block{layer}.spectral"]

    def forward(self, history):
        p = self.params
        width = history.shape[-1]
        x = ops.channel_linear_pair(history, p["lift.w1"], p["lift.b1"],
                                    p["lift.w2"], p["lift.b2"])
        n = self.config.n_layers
        for layer in range(n):
            spec = ops.irfft2(ops.spectral_mul(ops.rfft2(x), self._spectral_weight(layer)), width)
            skip = ops.channel_linear(x, p[f"block{layer}.skip.w"], p[f"block{layer}.skip.b"])
            x = ops.add(spec, skip)
            if layer < n - 1:
                x = ops.gelu(x)
        return ops.channel_linear_pair(x, p["proj.w1"], p["proj.b1"],
                                       p["proj.w2"], p["proj.b2"])


class ConvLSTM(Model):
    """Conv encoder + stacked ConvLSTM cells + 1x1 decoder, fed frame by frame."""

    N_CELLS = 4
    GATES = ("i", "f", "g", "o")

    def __init__(self, config):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        d = config.width
        for i, (cin, cout) in enumerate([(1, d), (d, d), (d, d)]):
            self._add(f"enc{i}.w", _uniform(rng, (cout, cin, 3, 3), cin * 9))
            self._add(f"enc{i}.b", _uniform(rng, (cout,), cin * 9))
        for cell in range(self.N_CELLS):
            for gate in self.GATES:
                self._add(f"cell{cell}.{gate}.w", _uniform(rng, (d, 2 * d, 3, 3), 2 * d * 9))
                self._add(f"cell{cell}.{gate}.b", _uniform(rng, (d,), 2 * d * 9))
        self._add("dec.w", _uniform(rng, (d, 1), d))
        self._add("dec.b", _uniform(rng, (1,), d))

    def init_state(self, batch, h, w):
        d = self.config.width
        zeros = lambda: Tensor(np.zeros((batch, d, h, w), dtype=np.float32))
        return [(zeros(), zeros()) for _ in range(self.N_CELLS)]

    def _encode(self, frame):
        x = frame
        for i in range(3):
            x = ops.tanh(ops.conv2d(x, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"],
                                    pad_mode=self.config.pad_mode))
        return x

    def step_frame(self, frame, state):
        """Consume one [B,1,H,W] frame; returns (prediction, new state)."""
        x = self._encode(frame)
        new_state = []
        for cell, (h_prev, c_prev) in enumerate(state):
            xh = ops.concat([x, h_prev], axis=1)
            gate = lambda g: ops.conv2d(xh, self.params[f"cell{cell}.{g}.w"],
                                        self.params[f"cell{cell}.{g}.b"],
                                        pad_mode=self.config.pad_mode)
            i = ops.sigmoid(gate("i"))
            f = ops.sigmoid(gate("f"))
            g = ops.tanh(gate("g"))
            o = ops.sigmoid(gate("o"))
            c_new = ops.add(ops.mul(f, c_prev), ops.mul(i, g))
            h_new = ops.mul(o, ops.tanh(c_new))
            new_state.append((h_new, c_new))
            x = h_new
        pred = ops.channel_linear(x, self.params["dec.w"], self.params["dec.b"])
        return pred, new_state

    def forward(self, history):
        b, h_frames, hh, ww = history.shape
        state = self.init_state(b, hh, ww)
        pred = None
        for t in range(h_frames):
            frame = Tensor(np.ascontiguousarray(history.data[:, t:t + 1]))
            pred, state = self.step_frame(frame, state)
        return pred


class UNet(Model):
    """Five-level encoder-decoder with avgpool, transposed-conv upsampling,
    channel-concatenation skips, and a single bottleneck conv."""

    LEVELS = 4  # encoder/decoder levels; +1 bottleneck = five layers

    def __init__(self, config):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        w = config.width
        dims = [w * (2 ** i) for i in range(self.LEVELS + 1)]  # e.g. [3,6,12,24,48]
        self.dims = dims
        h = config.history_len

        def conv(name, cin, cout, k=3):
            self._add(f"{name}.w", _uniform(rng, (cout, cin, k, k), cin * k * k))
            self._add(f"{name}.b", _uniform(rng, (cout,), cin * k * k))

        cin = h
        for lvl in range(self.LEVELS):
            conv(f"enc{lvl}.c0", cin, dims[lvl])
            conv(f"enc{lvl}.c1", dims[lvl], dims[lvl])
            cin = dims[lvl]
        conv("bottleneck", dims[self.LEVELS - 1], dims[self.LEVELS])
        for lvl in reversed(range(self.LEVELS)):
            up_in = dims[lvl + 1]
            self._add(f"dec{lvl}.up.w", _uniform(rng, (up_in, dims[lvl], 2, 2), up_in * 4))
            self._add(f"dec{lvl}.up.b", _uniform(rng, (dims[lvl],), up_in * 4))
            conv(f"dec{lvl}.c0", 2 * dims[lvl], dims[lvl])
            conv(f"dec{lvl}.c1", dims[lvl], dims[lvl])
        self._add("head.w", _uniform(rng, (dims[0], 1), dims[0]))
        self._add("head.b", _uniform(rng, (1,), dims[0]))

    def _conv(self, name, x):
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                          pad_mode=self.config.pad_mode)

    def forward(self, history):
        x = history
        skips = []
        for lvl in range(self.LEVELS):
            x = ops.relu(self._conv(f"enc{lvl}.c0", x))
            x = ops.relu(self._conv(f"enc{lvl}.c1", x))
            skips.append(x)
            x = ops.avgpool2(x)
        x = ops.relu(self._conv("bottleneck", x))
        for lvl in reversed(range(self.LEVELS)):
            x = ops.conv_transpose2_stride2(x, self.params[f"dec{lvl}.up.w"],
                                            self.params[f"dec{lvl}.up.b"])
            x = ops.concat([x, skips[lvl]], axis=1)
            x = ops.relu(self._conv(f"dec{lvl}.c0", x))
            x = ops.relu(self._conv(f"dec{lvl}.c1", x))
        return ops.channel_linear(x, self.params["head.w"], self.params["head.b"])


_CLASSES = {"fno2d": FNO2D, "tfno2d": FNO2D, "convlstm": ConvLSTM,
            "unet": UNet, "persistence": Persistence}


def build_model(config):
    return _CLASSES[config.family](config)


def count_params(model):
    """Total real scalars: complex entries count as two."""
    total = 0
    for p in model.params.values():
        total += p.size * (2 if np.iscomplexobj(p.data) else 1)
    return total


def forward_step(model, history):
    """One-frame prediction from exactly h history frames."""
    h = model.config.history_len
    if history.data.ndim != 4 or history.shape[1] != h:
        raise ValueError(f"forward_step: expected [B,{h},H,W] history, got {history.shape}")
    return model.forward(history)


def rollout_frames(model, ics):
    """Infinite generator of closed-loop forecast frames from [N,h,H,W] contexts.

    Yields one [N,H,W] float32 frame per step, without finite checks; the
    consumer decides how many steps to take and what counts as a blow-up.
    Window models roll the most recent h frames forward; convlstm warms its
    recurrent state on the context and continues closed-loop.
    """
    ics = np.asarray(getattr(ics, "data", ics), dtype=np.float32)
    h = model.config.history_len
    if ics.ndim != 4 or ics.shape[1] != h:
        raise ValueError(f"rollout: expected [N,{h},H,W] contexts, got {ics.shape}")
    with no_grad():
        if isinstance(model, ConvLSTM):
            state = model.init_state(ics.shape[0], ics.shape[2], ics.shape[3])
            pred = None
            for t in range(h):
                pred, state = model.step_frame(Tensor(np.ascontiguousarray(ics[:, t:t + 1])), state)
            while True:
                yield pred.data[:, 0]
                pred, state = model.step_frame(Tensor(pred.data), state)
        else:
            window = [np.ascontiguousarray(ics[:, t:t + 1]) for t in range(h)]
            while True:
                x = Tensor(np.concatenate(window[-h:], axis=1))
                pred = model.forward(x)
                yield pred.data[:, 0]
                window.append(pred.data)


def rollout_batch(model, ics, steps):
    """Batched closed-loop forecast: [N,h,H,W] contexts -> [N,steps,H,W].

    Raises BlowUpError (with the offending step index) on a non-finite frame.
    """
    if steps < 1:
        raise ValueError("rollout: steps must be >= 1")
    ics = np.asarray(getattr(ics, "data", ics), dtype=np.float32)
    out = None
    for s, frame in enumerate(rollout_frames(model, ics)):
        if not np.isfinite(frame).all():
            raise BlowUpError(s)
        if out is None:
            out = np.empty((frame.shape[0], steps) + frame.shape[1:], dtype=np.float32)
        out[:, s] = frame
        if s + 1 >= steps:
            break
    return out


def rollout(model, ic, steps):
    """Autoregressive forecast of `steps` frames from a single [h,H,W] context."""
    ic = np.asarray(getattr(ic, "data", ic), dtype=np.float32)
    h = model.config.history_len
    if ic.ndim != 3 or ic.shape[0] != h:
        raise ValueError(f"rollout: expected [{h},H,W] context, got {ic.shape}")
    return rollout_batch(model, ic[None], steps)[0]


def fit_width_to_budget(family, budget, **fixed):
    """Smallest-width-biased nearest fit of count_params to `budget`.

    Width is searched monotonically with all other config fields fixed;
    ties between the two bracketing widths go to the smaller one.
    """
    if family == "persistence":
        raise ValueError("persistence has no parameters to budget")
    budget = int(budget)

    def count(width):
        return count_params(build_model(ModelConfig(family=family, width=width, **fixed)))

    if budget < count(1):
        raise ValueError(f"budget {budget} below smallest achievable count {count(1)}")
    lo, hi = 1, 2
    while count(hi) < budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) < budget:
            lo = mid
        else:
            hi = mid
    # lo is the largest width below budget, hi the smallest at/above
    width = lo if budget - count(lo) <= count(hi) - budget else hi
    return ModelConfig(family=family, width=width, **fixed)
