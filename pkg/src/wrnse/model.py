"""Wide residual network with 1-D temporal convolutions.

Structure (pre-activation residual blocks)::

    x (T x in_channels)
    first = Conv1D k=3 (in_channels -> w0)
    h = concat(first, x)                      # first WRB sees both
    for each of the 4 WRBs (width w_i = base_widths[i] * widen_factor):
        for each of blocks_per_wrb residual blocks:
            main = Conv3(PReLU(BN(Conv3(PReLU(BN(h))))))   # widen in first conv
            short = h, or Conv1D k=1 (h) when the channel count changes
            h = main + short
    h = PReLU(BN(h))
    h = Conv1D k=1 (w3 -> out_dim)            # position-wise fully connected
    y = ReLU(Conv1D k=3 (out_dim -> out_dim)) # one 512-dim enhanced magnitude per frame

Parameter count (trainable only; running statistics are buffers)::

    conv(k, a, b)  = k*a*b + b
    block(a, b)    = 3a + conv(3, a, b) + 3b + conv(3, b, b) + [a != b] * conv(1, a, b)
    total = conv(3, D, w0)
          + sum_i [ block(c_i, w_i) + (n - 1) * block(w_i, w_i) ]
          + 3*w3 + conv(1, w3, O) + conv(3, O, O)

with ``c_0 = w0 + D``, ``c_i = w_{i-1}``, ``D = in_channels``, ``O = out_dim``,
``n = blocks_per_wrb``. See :func:`parameter_count_formula`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

OUT_DIM = 512
PRELU_INIT = 0.25
OUTPUT_BIAS_INIT = 0.1
OUTPUT_WEIGHT_GAIN = 0.1


class CheckpointError(ValueError):
    """Raised for corrupt, mismatched or incompatible checkpoints."""


@dataclass(frozen=True)
class WrnConfig:
    in_channels: int = 1900
    base_widths: tuple = (16, 32, 64, 128)
    widen_factor: int = 2
    blocks_per_wrb: int = 2
    out_dim: int = OUT_DIM

    def __post_init__(self):
        object.__setattr__(self, "base_widths", tuple(int(b) for b in self.base_widths))
        if len(self.base_widths) != 4:
            raise ValueError(f"base_widths needs 4 entries, got {len(self.base_widths)}")
        if any(b < 1 for b in self.base_widths):
            raise ValueError(f"base_widths must be positive, got {self.base_widths}")
        if self.widen_factor < 1:
            raise ValueError(f"widen_factor must be >= 1, got {self.widen_factor}")
        if self.blocks_per_wrb < 1:
            raise ValueError(f"blocks_per_wrb must be >= 1, got {self.blocks_per_wrb}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")
        if self.out_dim != OUT_DIM:
            raise ValueError(f"out_dim must be {OUT_DIM}, got {self.out_dim}")

    @property
    def widths(self):
        return [b * self.widen_factor for b in self.base_widths]

    def to_text(self):
        """Canonical ``key=value`` text, keys sorted."""
        items = {f.name: getattr(self, f.name) for f in fields(self)}
        items["base_widths"] = ",".join(str(b) for b in self.base_widths)
        return "".join(f"{k}={items[k]}\n" for k in sorted(items))

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(
            in_channels=int(kv["in_channels"]),
            base_widths=tuple(int(b) for b in kv["base_widths"].split(",")),
            widen_factor=int(kv["widen_factor"]),
            blocks_per_wrb=int(kv["blocks_per_wrb"]),
            out_dim=int(kv["out_dim"]),
        )


# ---------------------------------------------------------------------------
# layers


class Layer:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, ad.Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")


class Conv1d(Layer):
    def __init__(self, in_channels, out_channels, kernel, rng):
        fan_in = kernel * in_channels
        w = rng.standard_normal((kernel, in_channels, out_channels)) * np.sqrt(2.0 / fan_in)
        self.weight = ad.Tensor(w, requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_channels), requires_grad=True)
        self.kernel = kernel

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.bias)


class BatchNorm(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = ad.Tensor(np.ones(channels), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training, self.momentum, self.eps)


class PReLU(Layer):
    def __init__(self, channels):
        self.slope = ad.Tensor(np.full(channels, PRELU_INIT), requires_grad=True)

    def __call__(self, x):
        return ad.prelu(x, self.slope)


class ResidualBlock(Layer):
    """Pre-activation block: BN-PReLU-Conv3-BN-PReLU-Conv3 plus a shortcut."""

    def __init__(self, in_channels, out_channels, rng):
        self.bn1 = BatchNorm(in_channels)
        self.act1 = PReLU(in_channels)
        self.conv1 = Conv1d(in_channels, out_channels, 3, rng)
        self.bn2 = BatchNorm(out_channels)
        self.act2 = PReLU(out_channels)
        self.conv2 = Conv1d(out_channels, out_channels, 3, rng)
        self.shortcut = Conv1d(in_channels, out_channels, 1, rng) if in_channels != out_channels else None
        self.in_channels = in_channels
        self.out_channels = out_channels

    @property
    def widening(self):
        return self.shortcut is not None

    def main_path(self, x, training):
        h = self.conv1(self.act1(self.bn1(x, training)))
        return self.conv2(self.act2(self.bn2(h, training)))

    def __call__(self, x, training):
        short = self.shortcut(x) if self.shortcut is not None else x
        return ad.residual_add(self.main_path(x, training), short)


class WRN(Layer):
    """The enhancement network; call with features ``(T, C)`` or ``(B, T, C)``."""

    def __init__(self, config, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        widths = config.widths
        self.first = Conv1d(config.in_channels, widths[0], 3, rng)
        self.wrbs = []
        c_in = widths[0] + config.in_channels
        for w in widths:
            wrb = Sequence([])
            for _ in range(config.blocks_per_wrb):
                wrb.items.append(ResidualBlock(c_in, w, rng))
                c_in = w
            self.wrbs.append(wrb)
        self.bn = BatchNorm(widths[-1])
        self.act = PReLU(widths[-1])
        self.fc = Conv1d(widths[-1], config.out_dim, 1, rng)
        self.out = Conv1d(config.out_dim, config.out_dim, 3, rng)
        # start every output unit in the live region of the final ReLU
        self.out.weight.data *= OUTPUT_WEIGHT_GAIN
        self.out.bias.data[:] = OUTPUT_BIAS_INIT
        self.training = False

    def train(self, mode=True):
        self.training = bool(mode)
        return self

    def eval(self):
        return self.train(False)

    def blocks(self):
        return [b for wrb in self.wrbs for b in wrb.items]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        """Parameters and running statistics by name (arrays, not copies)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise CheckpointError(f"missing tensor {name!r} (expected shape {arr.shape})")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != arr.shape:
                raise CheckpointError(f"tensor {name!r} has shape {value.shape}, config expects {arr.shape}")
        extra = sorted(set(state) - set(own))
        if extra:
            raise CheckpointError(f"unexpected tensor {extra[0]!r} not produced by the config")
        for name, arr in own.items():
            arr[...] = state[name]

    def __call__(self, features, training=None):
        training = self.training if training is None else training
        x = ad.as_batch(features)
        if x.shape[-1] != self.config.in_channels:
            raise ValueError(f"features have {x.shape[-1]} channels, model expects {self.config.in_channels}")
        h = ad.concat([self.first(x), x], axis=-1)
        for wrb in self.wrbs:
            for block in wrb.items:
                h = block(h, training)
        h = self.act(self.bn(h, training))
        return ad.relu(self.out(self.fc(h)))

    forward = __call__


class Sequence(Layer):
    def __init__(self, items):
        self.items = items


def build_model(config, rng=None):
    return WRN(config, rng)


def wrb_output_channels(config):
    return list(config.widths)


def parameter_count(model):
    return sum(p.data.size for p in model.parameters())


def parameter_count_formula(config):
    D, O, n = config.in_channels, config.out_dim, config.blocks_per_wrb
    w = config.widths

    def conv(k, a, b):
        return k * a * b + b

    def block(a, b):
        return 3 * a + conv(3, a, b) + 3 * b + conv(3, b, b) + (conv(1, a, b) if a != b else 0)

    total = conv(3, D, w[0])
    c = w[0] + D
    for wi in w:
        total += block(c, wi) + (n - 1) * block(wi, wi)
        c = wi
    return total + 3 * w[-1] + conv(1, w[-1], O) + conv(3, O, O)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"WRNSECK\x00"
FORMAT_VERSION = 1
_CRC64_POLY = 0x42F0E1EBA9EA3693  # ECMA-182


def _crc64_tables():
    base = []
    for i in range(256):
        crc = i << 56
        for _ in range(8):
            crc = ((crc << 1) ^ _CRC64_POLY) if crc & (1 << 63) else (crc << 1)
            crc &= 0xFFFFFFFFFFFFFFFF
        base.append(crc)
    tables = [base]
    for _ in range(7):
        prev = tables[-1]
        tables.append([((prev[i] << 8) & 0xFFFFFFFFFFFFFFFF) ^ base[prev[i] >> 56] for i in range(256)])
    return tables


_CRC_TABLES = None


def crc64(data, crc=0):
    """CRC-64/ECMA-182 (non-reflected, zero init, no final xor), slicing-by-8."""
    global _CRC_TABLES
    if _CRC_TABLES is None:
        _CRC_TABLES = _crc64_tables()
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC_TABLES
    mv = memoryview(data)
    n8 = len(mv) // 8
    for (word,) in struct.iter_unpack(">Q", mv[: n8 * 8]):
        x = crc ^ word
        crc = (t7[x >> 56] ^ t6[(x >> 48) & 0xFF] ^ t5[(x >> 40) & 0xFF] ^ t4[(x >> 32) & 0xFF]
               ^ t3[(x >> 24) & 0xFF] ^ t2[(x >> 16) & 0xFF] ^ t1[(x >> 8) & 0xFF] ^ t0[x & 0xFF])
    for b in mv[n8 * 8:]:
        crc = ((crc << 8) & 0xFFFFFFFFFFFFFFFF) ^ t0[(crc >> 56) ^ b]
    return crc


def pack_tensors(tensors):
    """Named-tensor archive: count, then (name, ndim, shape, float64 row-major data) per entry."""
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_tensors(buf):
    (count,), pos = struct.unpack_from("<I", buf, 0), 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + n]).decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError("trailing bytes in tensor archive")
    return out


@dataclass
class Checkpoint:
    config: WrnConfig
    tensors: dict
    train_step: int = 0
    rng_seed: int = 0
    norm_stats_policy: str = "per-utterance"
    optimizer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def header_text(self):
        lines = [self.config.to_text()]
        extras = {"norm_stats_policy": self.norm_stats_policy, "rng_seed": self.rng_seed,
                  "train_step": self.train_step}
        extras.update({f"meta.{k}": v for k, v in self.meta.items()})
        lines.extend(f"{k}={extras[k]}\n" for k in sorted(extras))
        return "".join(lines)


def make_checkpoint(model, train_step=0, rng_seed=0, optimizer=None, meta=None):
    opt = {}
    if optimizer is not None and optimizer.state.m:
        names = [n for n, _ in model.named_parameters()]
        for name, m, v in zip(names, optimizer.state.m, optimizer.state.v):
            opt[f"adamw.m.{name}"] = m
            opt[f"adamw.v.{name}"] = v
        opt["adamw.step"] = np.array(float(optimizer.state.step))
    return Checkpoint(model.config, {k: v.copy() for k, v in model.state_dict().items()},
                      train_step, rng_seed, optimizer=opt, meta=dict(meta or {}))


def save_checkpoint(model_or_ckpt, path, **kwargs):
    """Write magic, version, config text, tensor archive and a trailing CRC-64."""
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else make_checkpoint(model_or_ckpt, **kwargs)
    header = ckpt.header_text().encode()
    archive = pack_tensors({**ckpt.tensors, **ckpt.optimizer})
    body = b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(header)), header,
        struct.pack("<Q", len(archive)), archive,
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<Q", crc64(body)))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 24 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if crc64(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt or tampered)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<I", body, pos + 4)
    pos += 8
    header = body[pos:pos + hlen].decode()
    pos += hlen
    (alen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    tensors = unpack_tensors(memoryview(body)[pos:pos + alen])
    kv = dict(line.split("=", 1) for line in header.splitlines() if line.strip())
    config = WrnConfig.from_text(header)
    optimizer = {k: v for k, v in tensors.items() if k.startswith("adamw.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("adamw.")}
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return Checkpoint(config, params, int(kv.get("train_step", 0)), int(kv.get("rng_seed", 0)),
                      kv.get("norm_stats_policy", "per-utterance"), optimizer, meta)


def load_checkpoint(path, config=None):
    """Rebuild a model from ``path``; ``config`` (if given) must match the stored one."""
    ckpt = read_checkpoint(path)
    cfg = ckpt.config if config is None else config
    model = WRN(cfg, np.random.default_rng(0))
    model.load_state_dict(ckpt.tensors)
    return model.eval()


def restore_optimizer(optimizer, model, ckpt):
    if not ckpt.optimizer:
        return optimizer
    names = [n for n, _ in model.named_parameters()]
    optimizer.state.m = [ckpt.optimizer[f"adamw.m.{n}"].copy() for n in names]
    optimizer.state.v = [ckpt.optimizer[f"adamw.v.{n}"].copy() for n in names]
    optimizer.state.step = int(ckpt.optimizer["adamw.step"])
    return optimizer


def with_config(config, **changes):
    return replace(config, **changes)
