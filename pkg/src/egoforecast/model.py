"""Multi-stream 1D convolution-deconvolution forecaster.

Each enabled input stream (location-scale, ego-motion, pose) is four
Conv(K=3)+BN+ReLU layers with 32, 64, 128, 128 channels that shrink the time
axis to length 2. The stream outputs are concatenated and decoded by two
Conv(K=1, 256)+BN+ReLU layers, four Deconv+BN+ReLU layers with 256, 128, 64,
32 channels that grow the time axis to ``t_future``, and a final linear
Conv(K=1) to ``output_dim`` channels.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, FormatError, UsageError

STREAM_KINDS = ("location_scale", "ego_motion", "pose")
STREAM_SHORT = {"location_scale": "ls", "ego_motion": "ego", "pose": "pose"}
ENCODER_CHANNELS = (32, 64, 128, 128)
ENCODER_KERNEL = 3
HIDDEN_CHANNELS = 256
DECODER_CHANNELS = (256, 128, 64, 32)

MAGIC = b"EGF1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class StreamSpec:
    kind: str
    input_dim: int
    enabled: bool = True

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise ConfigError(f"unknown stream kind {self.kind!r}")
        allowed = {"location_scale": (3,), "ego_motion": (6, 24), "pose": (36,)}[self.kind]
        if self.input_dim not in allowed:
            raise ConfigError(f"{self.kind} stream needs input_dim in {allowed}, got {self.input_dim}")


def default_streams(ego_dim=6, enabled=("location_scale", "ego_motion", "pose")):
    dims = {"location_scale": 3, "ego_motion": ego_dim, "pose": 36}
    return tuple(StreamSpec(k, dims[k], k in enabled) for k in STREAM_KINDS)


@dataclass(frozen=True)
class NetConfig:
    t_prev: int = 10
    t_future: int = 10
    streams: tuple = field(default_factory=default_streams)
    input_paddings: tuple = (0, 0, 0, 0)
    deconv_kernels: tuple = (3, 3, 3, 3)
    output_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        object.__setattr__(self, "input_paddings", tuple(int(p) for p in self.input_paddings))
        object.__setattr__(self, "deconv_kernels", tuple(int(k) for k in self.deconv_kernels))
        if not any(s.enabled for s in self.streams):
            raise ConfigError("at least one stream must be enabled")
        kinds = [s.kind for s in self.streams]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("duplicate stream kinds")
        if len(self.input_paddings) != len(ENCODER_CHANNELS):
            raise ConfigError("input_paddings needs one entry per encoder layer")
        if len(self.deconv_kernels) != len(DECODER_CHANNELS):
            raise ConfigError("deconv_kernels needs one entry per deconvolution layer")
        if self.t_prev < 1 or self.t_future < 1 or self.output_dim < 1:
            raise ConfigError("t_prev, t_future and output_dim must be positive")
        if any(k < 1 for k in self.deconv_kernels) or any(p < 0 for p in self.input_paddings):
            raise ConfigError("kernel sizes must be positive and paddings non-negative")
        enc = self.encoder_lengths()
        if min(enc) < 1 or enc[-1] != 2:
            raise ConfigError(f"encoder lengths {enc} must stay positive and end at 2")
        if self.decoder_lengths()[-1] != self.t_future:
            raise ConfigError(
                f"deconv kernels {self.deconv_kernels} give length {self.decoder_lengths()[-1]}, "
                f"need t_future={self.t_future}")

    @property
    def enabled_streams(self):
        return [s for s in self.streams if s.enabled]

    def encoder_lengths(self):
        lengths, length = [], self.t_prev
        for pad in self.input_paddings:
            length = length + 2 * pad - ENCODER_KERNEL + 1
            lengths.append(length)
        return lengths

    def decoder_lengths(self):
        lengths, length = [], 2
        for k in self.deconv_kernels:
            length = length + k - 1
            lengths.append(length)
        return lengths

    def to_dict(self):
        d = asdict(self)
        d["streams"] = [asdict(s) for s in self.streams]
        d["input_paddings"] = list(self.input_paddings)
        d["deconv_kernels"] = list(self.deconv_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["streams"] = tuple(StreamSpec(**s) for s in d["streams"])
        return cls(**d)

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()

    def activation_shapes(self):
        """Expected [channels, length] after every layer, in network order."""
        shapes = {}
        enc = self.encoder_lengths()
        for s in self.enabled_streams:
            shapes[s.kind] = [(s.input_dim, self.t_prev)] + [
                (c, n) for c, n in zip(ENCODER_CHANNELS, enc)]
        width = ENCODER_CHANNELS[-1] * len(self.enabled_streams)
        out = [(width, 2), (HIDDEN_CHANNELS, 2), (HIDDEN_CHANNELS, 2)]
        out += [(c, n) for c, n in zip(DECODER_CHANNELS, self.decoder_lengths())]
        out.append((self.output_dim, self.t_future))
        shapes["output"] = out
        return shapes


def _uniform_init(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _ConvBlock:
    """Conv1d (or transposed) optionally followed by BN + ReLU."""

    def __init__(self, name, c_in, c_out, k, rng, padding=0, transposed=False, bn=True):
        self.name = name
        self.padding = padding
        self.transposed = transposed
        if transposed:
            w = _uniform_init(rng, (c_in, c_out, k), c_in * k)
        else:
            w = _uniform_init(rng, (c_out, c_in, k), c_in * k)
        self.weight = tc.Parameter(f"{name}.weight", w)
        self.bias = tc.Parameter(f"{name}.bias", np.zeros(c_out))
        self.bn = tc.BatchNorm(f"{name}.bn", c_out) if bn else None

    def parameters(self):
        ps = [self.weight, self.bias]
        if self.bn is not None:
            ps += self.bn.parameters()
        return ps

    def __call__(self, x):
        if self.transposed:
            y = tc.deconv1d(x, self.weight.tensor, self.bias.tensor)
        else:
            y = tc.conv1d(x, self.weight.tensor, self.bias.tensor, self.padding)
        if self.bn is None:
            return y
        return tc.relu(tc.batchnorm1d(y, self.bn))


class Network:
    """The forecaster. Build with :func:`build_network`."""

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.streams = {}
        for s in config.enabled_streams:
            short = STREAM_SHORT[s.kind]
            c_in, layers = s.input_dim, []
            for i, (c, pad) in enumerate(zip(ENCODER_CHANNELS, config.input_paddings)):
                layers.append(_ConvBlock(f"{short}.conv{i + 1}", c_in, c, ENCODER_KERNEL, rng, pad))
                c_in = c
            self.streams[s.kind] = layers
        width = ENCODER_CHANNELS[-1] * len(config.enabled_streams)
        self.head = [
            _ConvBlock("out.conv1", width, HIDDEN_CHANNELS, 1, rng),
            _ConvBlock("out.conv2", HIDDEN_CHANNELS, HIDDEN_CHANNELS, 1, rng),
        ]
        c_in = HIDDEN_CHANNELS
        for i, (c, k) in enumerate(zip(DECODER_CHANNELS, config.deconv_kernels)):
            self.head.append(_ConvBlock(f"out.deconv{i + 1}", c_in, c, k, rng, transposed=True))
            c_in = c
        self.head.append(_ConvBlock("out.final", c_in, config.output_dim, 1, rng, bn=False))

    @property
    def blocks(self):
        for layers in self.streams.values():
            yield from layers
        yield from self.head

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def batchnorms(self):
        return {b.bn.gamma.name.rsplit(".", 1)[0]: b.bn for b in self.blocks if b.bn is not None}

    def parameter_count(self):
        return int(sum(p.tensor.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        for bn in self.batchnorms().values():
            bn.mode = mode

    def forward(self, x_in, e_in=None, p_in=None, mode="eval", trace=None):
        """Predict normalized future offsets [N, output_dim, t_future].

        ``trace``, when a list, receives (layer name, output shape) pairs.
        """
        self.set_mode(mode)
        given = {"location_scale": x_in, "ego_motion": e_in, "pose": p_in}
        feats = []
        for s in self.config.enabled_streams:
            h = given[s.kind]
            if h is None:
                raise UsageError(f"stream {s.kind!r} is enabled but received no input")
            h = tc._as_tensor(h)
            expect = (s.input_dim, self.config.t_prev)
            if h.data.ndim != 3 or h.shape[1:] != expect:
                raise UsageError(f"{s.kind} input must be [N, {expect[0]}, {expect[1]}], got {h.shape}")
            for block in self.streams[s.kind]:
                h = block(h)
                if trace is not None:
                    trace.append((block.name, h.shape))
            feats.append(h)
        for kind in STREAM_KINDS:
            if given[kind] is not None and kind not in self.streams:
                raise UsageError(f"stream {kind!r} is disabled but received input")
        h = tc.concat_channels(feats)
        if trace is not None:
            trace.append(("out.concat", h.shape))
        for block in self.head:
            h = block(h)
            if trace is not None:
                trace.append((block.name, h.shape))
        return h

    __call__ = forward


def build_network(config: NetConfig | None = None, seed: int = 0) -> Network:
    """Instantiate the forecaster with seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""
    return Network(config if config is not None else NetConfig(), seed)


def expected_parameter_count(config: NetConfig) -> int:
    """Closed-form parameter count (conv weights + biases + BN gamma/beta)."""
    total = 0
    for s in config.enabled_streams:
        c_in = s.input_dim
        for c in ENCODER_CHANNELS:
            total += c * c_in * ENCODER_KERNEL + c + 2 * c
            c_in = c
    width = ENCODER_CHANNELS[-1] * len(config.enabled_streams)
    total += HIDDEN_CHANNELS * width + 3 * HIDDEN_CHANNELS
    total += HIDDEN_CHANNELS * HIDDEN_CHANNELS + 3 * HIDDEN_CHANNELS
    c_in = HIDDEN_CHANNELS
    for c, k in zip(DECODER_CHANNELS, config.deconv_kernels):
        total += c_in * c * k + 3 * c
        c_in = c
    total += config.output_dim * c_in + config.output_dim
    return total


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 17000
    batch_size: int = 64
    learning_rate: float = 1e-3
    decay_points: tuple = (5000, 10000, 15000)
    decay_factor: float = 0.5
    hflip: bool = True

    def __post_init__(self):
        pts = tuple(int(p) for p in self.decay_points)
        object.__setattr__(self, "decay_points", pts)
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ConfigError("decay points must be strictly increasing")
        if pts and pts[-1] >= self.iterations:
            raise ConfigError("decay points must lie below the iteration count")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")

    def lr_at(self, iteration):
        n = sum(1 for p in self.decay_points if iteration >= p)
        return self.learning_rate * self.decay_factor ** n

    @classmethod
    def full(cls):
        """17,000 iterations, halving the rate at 5k, 10k and 15k."""
        return cls()

    @classmethod
    def desk(cls):
        return cls(iterations=2000, decay_points=(1000, 1500, 1800))


@dataclass
class TrainLog:
    losses: list
    learning_rates: list

    def to_csv(self):
        lines = ["iteration,learning_rate,loss"]
        lines += [f"{i},{lr!r},{loss!r}" for i, (lr, loss) in
                  enumerate(zip(self.learning_rates, self.losses))]
        return "\n".join(lines) + "\n"


def train(net: Network, dataset, schedule: TrainSchedule | None = None, seed: int = 0,
          progress=None) -> TrainLog:
    """Fit ``net`` with Adam on the MSE of normalized future offsets.

    ``dataset`` is a :class:`egoforecast.data.SampleSet` carrying its
    normalization statistics. Each iteration draws a mini-batch with
    replacement and mirrors every drawn sample with probability 1/2.
    """
    from .data import batch_arrays  # local: data imports model types lazily

    schedule = schedule or TrainSchedule.desk()
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if dataset.norm is None:
        raise UsageError("dataset has no normalization statistics")
    rng = np.random.default_rng(seed)
    params = net.parameters()
    enabled = {s.kind for s in net.config.enabled_streams}
    losses, lrs = [], []
    for it in range(schedule.iterations):
        idx = rng.integers(0, len(dataset), size=schedule.batch_size)
        flips = rng.random(schedule.batch_size) < 0.5 if schedule.hflip else None
        x_in, e_in, p_in, x_out = batch_arrays(dataset, idx, flips)
        net.zero_grad()
        pred = net.forward(x_in, e_in if "ego_motion" in enabled else None,
                           p_in if "pose" in enabled else None, mode="train")
        loss = tc.mse_loss(pred, x_out)
        loss.backward()
        lr = schedule.lr_at(it)
        tc.adam_step(params, lr)
        losses.append(float(loss.data))
        lrs.append(lr)
        if progress is not None:
            progress(it, losses[-1])
    return TrainLog(losses, lrs)


def predict_offsets(net: Network, dataset, idx=None, batch_size=256):
    """Denormalized predicted offsets [S, output_dim, t_future] in eval mode."""
    from .data import batch_arrays

    enabled = {s.kind for s in net.config.enabled_streams}
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    out = []
    with tc.no_grad():
        for start in range(0, len(idx), batch_size):
            x_in, e_in, p_in, _ = batch_arrays(dataset, idx[start:start + batch_size], None)
            pred = net.forward(x_in, e_in if "ego_motion" in enabled else None,
                               p_in if "pose" in enabled else None, mode="eval")
            out.append(dataset.norm.denormalize_out(pred.data))
    if not out:
        return np.zeros((0, net.config.output_dim, net.config.t_future))
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# persistence

def _pack_array(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _pack_name(buf, name):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def weights_to_bytes(net: Network) -> bytes:
    """Serialize parameters, BN running stats and Adam state.

    Layout (little-endian): b"EGF1", u32 version, 32-byte config fingerprint,
    u32 parameter count, then per parameter: name, rank, dims, f64 payload;
    u32 BN count, then per BN: name, running mean, running var; then per
    parameter: u64 step count, Adam m, Adam v; finally a SHA-256 of all
    preceding bytes.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(net.config.fingerprint())
    params = net.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        _pack_name(buf, p.name)
        _pack_array(buf, p.data)
    bns = net.batchnorms()
    buf.write(struct.pack("<I", len(bns)))
    for name, bn in bns.items():
        _pack_name(buf, name)
        _pack_array(buf, bn.running_mean)
        _pack_array(buf, bn.running_var)
    for p in params:
        buf.write(struct.pack("<Q", p.step_count))
        _pack_array(buf, p.adam_m)
        _pack_array(buf, p.adam_v)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError("weights file is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def name(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("weights file has a corrupted name") from exc

    def array(self):
        rank = self.u32()
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)


def weights_from_bytes(raw: bytes, config: NetConfig) -> Network:
    """Rebuild a network from :func:`weights_to_bytes` output.

    The whole file is parsed and verified before a network is built, so a
    bad file never yields a partially loaded model.
    """
    if len(raw) < 4 + 4 + 32 + 32 or raw[:4] != MAGIC:
        raise FormatError("not an egoforecast weights file (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("weights file is truncated or corrupted (checksum mismatch)")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported weights format version {version}")
    if r.take(32) != config.fingerprint():
        raise FormatError("weights were saved for a different network configuration (fingerprint mismatch)")
    values = {}
    for _ in range(r.u32()):
        name = r.name()
        values[name] = r.array()
    stats = {}
    for _ in range(r.u32()):
        name = r.name()
        stats[name] = (r.array(), r.array())
    net = build_network(config, seed=0)
    params = net.parameters()
    if [p.name for p in params] != list(values):
        raise FormatError("parameter table does not match the configuration")
    adam = []
    for p in params:
        adam.append((r.u64(), r.array(), r.array()))
    if r.pos != len(body):
        raise FormatError("trailing bytes in weights file")
    bns = net.batchnorms()
    if set(bns) != set(stats):
        raise FormatError("batch-norm table does not match the configuration")
    for p, (steps, m, v) in zip(params, adam):
        if values[p.name].shape != p.data.shape or m.shape != p.adam_m.shape:
            raise FormatError(f"shape mismatch for {p.name}")
    for p, (steps, m, v) in zip(params, adam):
        p.tensor.data[...] = values[p.name]
        p.step_count = int(steps)
        p.adam_m[...] = m
        p.adam_v[...] = v
    for name, bn in bns.items():
        bn.running_mean = stats[name][0].copy()
        bn.running_var = stats[name][1].copy()
    return net


def save_weights(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(net))


def load_weights(path, config: NetConfig) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    return weights_from_bytes(raw, config)
