"""The five networks (encoder, mapper, pose head, view decoder, discriminator).

Architectures follow the usual deep-prior / DCGAN templates scaled down to
desk resolution.  All parameters live in :class:`Tensor` leaves owned by
exactly one network; :class:`Model` bundles the five and enforces routing:
synthetic latents go straight to the heads, real latents pass the mapper.
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

NETWORKS = ("f", "m", "p", "g", "h")
SYNTH, REAL = "synthetic", "real"


@dataclass
class ArchConfig:
    resolution: int = 32
    latent: int = 64
    joints: int = 7
    stem: int = 32
    stages: tuple = (16, 32, 64, 64)
    blocks_per_stage: int = 1
    decoder: tuple = (64, 32, 16)

    def __post_init__(self):
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 16, got {r}")
        if len(self.decoder) != 3:
            raise ValueError("decoder needs three hidden widths (four transposed convs)")


class Net:
    """Named parameter container with He-style initialisation helpers."""

    def __init__(self, name: str, rng: np.random.Generator):
        self.name = name
        self.rng = rng
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()
        self.training = True

    def _add(self, key: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True, name=f"{self.name}.{key}")
        self.params[key] = t
        return t

    def _he(self, key: str, shape, fan_in: int) -> Tensor:
        return self._add(key, self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    def _zeros(self, key: str, shape) -> Tensor:
        return self._add(key, np.zeros(shape))

    def linear_params(self, key: str, nin: int, nout: int, zero: bool = False) -> None:
        if zero:
            self._zeros(key + ".w", (nin, nout))
        else:
            self._he(key + ".w", (nin, nout), nin)
        self._zeros(key + ".b", (nout,))

    def linear(self, key: str, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.params[key + ".w"]), self.params[key + ".b"])

    def conv_params(self, key: str, cin: int, cout: int, k: int) -> None:
        self._he(key + ".w", (k, k, cin, cout), cin * k * k)
        self._zeros(key + ".b", (cout,))

    def conv(self, key: str, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
        return ad.conv2d(x, self.params[key + ".w"], self.params[key + ".b"], stride=stride, pad=pad)

    def bn_params(self, key: str, ch: int) -> None:
        self._add(key + ".gamma", np.ones(ch))
        self._zeros(key + ".beta", (ch,))
        self.bn[key] = BatchNormState(ch)

    def batchnorm(self, key: str, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.params[key + ".gamma"], self.params[key + ".beta"], self.bn[key], self.training)

    def n_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_arrays(self):
        """(layer, array) pairs: parameters, then batch-norm running stats."""
        for k, t in self.params.items():
            yield k, t.data
        for k, s in self.bn.items():
            yield k + ".running_mean", s.running_mean
            yield k + ".running_var", s.running_var

    def load_array(self, layer: str, arr: np.ndarray) -> None:
        if layer in self.params:
            t = self.params[layer]
            if t.shape != arr.shape:
                raise ValueError(f"{self.name}.{layer}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.data.dtype).copy()
            return
        for suffix in (".running_mean", ".running_var"):
            if layer.endswith(suffix):
                state = self.bn[layer[: -len(suffix)]]
                setattr(state, suffix[1:], arr.astype(ad.get_dtype()).copy())
                return
        raise KeyError(f"{self.name} has no layer {layer!r}")


class Encoder(Net):
    """Conv stem, 2x2 max-pool, residual stages, fully connected to the latent."""

    def __init__(self, cfg: ArchConfig, rng):
        super().__init__("f", rng)
        self.cfg = cfg
        self.conv_params("stem", 1, cfg.stem, 5)
        cin = cfg.stem
        size = cfg.resolution // 2
        self.plan = []
        for si, width in enumerate(cfg.stages):
            for bi in range(cfg.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                key = f"s{si}b{bi}"
                self.conv_params(key + ".c1", cin, width, 3)
                self.conv_params(key + ".c2", width, width, 3)
                proj = cin != width or stride != 1
                if proj:
                    self.conv_params(key + ".proj", cin, width, 1)
                self.plan.append((key, stride, proj))
                cin = width
                size //= stride
        self.flat = cin * size * size
        self.linear_params("fc", self.flat, cfg.latent)

    def __call__(self, x: Tensor) -> Tensor:
        r = self.cfg.resolution
        if x.data.ndim != 4 or x.shape[1:] != (r, r, 1):
            raise ad.ShapeError("encode", x.shape, (None, r, r, 1))
        # relu and max-pool commute; pooling first is 4x cheaper
        h = ad.relu(ad.max_pool2x2(self.conv("stem", x, pad=2)))
        for key, stride, proj in self.plan:
            y = ad.relu(self.conv(key + ".c1", h, stride=stride, pad=1))
            y = self.conv(key + ".c2", y, pad=1)
            skip = self.conv(key + ".proj", h, stride=stride) if proj else h
            h = ad.relu(ad.add(y, skip))
        h = ad.reshape(h, (h.shape[0], self.flat))
        return self.linear("fc", h)


class _ResidualTrunk(Net):
    """Two fully connected residual blocks of constant width."""

    def __init__(self, name, width, rng, zero_last: bool):
        super().__init__(name, rng)
        for i in range(2):
            self.linear_params(f"r{i}.l1", width, width)
            self.linear_params(f"r{i}.l2", width, width, zero=zero_last)

    def trunk(self, z: Tensor) -> Tensor:
        for i in range(2):
            branch = self.linear(f"r{i}.l2", ad.relu(self.linear(f"r{i}.l1", z)))
            z = ad.add(z, branch)
        return z


class Mapper(_ResidualTrunk):
    """Residual latent-to-latent map; exact identity at initialisation."""

    def __init__(self, cfg: ArchConfig, rng):
        super().__init__("m", cfg.latent, rng, zero_last=True)
        self.width = cfg.latent

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.width:
            raise ad.ShapeError("map_latent", z.shape, (None, self.width))
        return self.trunk(z)


class Discriminator(_ResidualTrunk):
    """Mapper-shaped trunk plus a linear layer to one unbounded score."""

    def __init__(self, cfg: ArchConfig, rng):
        super().__init__("h", cfg.latent, rng, zero_last=False)
        self.width = cfg.latent
        self.linear_params("out", cfg.latent, 1)

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.width:
            raise ad.ShapeError("discriminate", z.shape, (None, self.width))
        return self.linear("out", self.trunk(z))


class PoseHead(Net):
    def __init__(self, cfg: ArchConfig, rng):
        super().__init__("p", rng)
        self.width = cfg.latent
        self.linear_params("fc1", cfg.latent, cfg.latent)
        # zero output layer: predictions start at the (centred) mean pose
        self.linear_params("fc2", cfg.latent, 3 * cfg.joints, zero=True)

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.width:
            raise ad.ShapeError("predict_pose", z.shape, (None, self.width))
        return self.linear("fc2", ad.relu(self.linear("fc1", z)))


class Decoder(Net):
    """DCGAN-style decoder: four transposed convs, bilinear 2x, tanh.

    The first three transposed convs are followed by batch-norm and
    leaky-relu; the last one feeds the upsampler directly.
    """

    def __init__(self, cfg: ArchConfig, rng):
        super().__init__("g", rng)
        self.cfg = cfg
        self.k0 = cfg.resolution // 8
        widths = (cfg.latent,) + tuple(cfg.decoder) + (1,)
        self.specs = [(self.k0, 1, 0), (4, 2, 1), (4, 2, 1), (3, 1, 1)]
        for i, (k, _, _) in enumerate(self.specs):
            cin, cout = widths[i], widths[i + 1]
            self._he(f"t{i}.w", (cin, k, k, cout), cin * k * k // (self.specs[i][1] ** 2))
            self._zeros(f"t{i}.b", (cout,))
            if i < 3:
                self.bn_params(f"bn{i}", cout)

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.cfg.latent:
            raise ad.ShapeError("decode_view", z.shape, (None, self.cfg.latent))
        h = ad.reshape(z, (z.shape[0], 1, 1, z.shape[1]))
        for i, (k, s, p) in enumerate(self.specs):
            h = ad.conv_transpose2d(h, self.params[f"t{i}.w"], self.params[f"t{i}.b"], stride=s, pad=p)
            if i < 3:
                h = ad.leaky_relu(self.batchnorm(f"bn{i}", h))
        h = ad.tanh(ad.bilinear_upsample2x(h))
        return h


@dataclass
class RouteTracer:
    """Records which networks each domain's latents passed through."""

    routes: list = field(default_factory=list)

    def log(self, domain: str, path: tuple) -> None:
        self.routes.append((domain, path))

    def violations(self) -> list:
        bad = []
        for domain, path in self.routes:
            if domain == SYNTH and "m" in path:
                bad.append((domain, path))
            if domain == REAL and "m" not in path:
                bad.append((domain, path))
        return bad


class Model:
    """Bundle of f, m, p, g, h with domain-aware routing."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        self.cfg = cfg
        ss = np.random.SeedSequence(seed)
        rngs = [np.random.default_rng(s) for s in ss.spawn(len(NETWORKS))]
        self.f = Encoder(cfg, rngs[0])
        self.m = Mapper(cfg, rngs[1])
        self.p = PoseHead(cfg, rngs[2])
        self.g = Decoder(cfg, rngs[3])
        self.h = Discriminator(cfg, rngs[4])
        self.tracer: RouteTracer | None = None

    @property
    def nets(self) -> "OrderedDict[str, Net]":
        return OrderedDict((n, getattr(self, n)) for n in NETWORKS)

    def train(self, flag: bool = True) -> None:
        for net in self.nets.values():
            net.training = flag

    def eval(self) -> None:
        self.train(False)

    def latent(self, x: Tensor, domain: str) -> Tensor:
        """Shared-space latent: f(x) for synthetic input, m(f(x)) for real."""
        z = self.f(x)
        if domain == REAL:
            z = self.m(z)
            path = ("f", "m")
        elif domain == SYNTH:
            path = ("f",)
        else:
            raise ValueError(f"unknown domain {domain!r}")
        if self.tracer is not None:
            self.tracer.log(domain, path)
        return z

    def predict(self, x: Tensor, domain: str) -> Tensor:
        return self.p(self.latent(x, domain))

    def partition_report(self) -> "OrderedDict[str, int]":
        return OrderedDict((n, net.n_params()) for n, net in self.nets.items())

    def param_count(self) -> int:
        return sum(self.partition_report().values())

    def state_entries(self):
        for n, net in self.nets.items():
            for layer, arr in net.state_arrays():
                yield n, layer, arr

    def load_entries(self, entries) -> None:
        nets = self.nets
        for n, layer, arr in entries:
            if n in nets:
                nets[n].load_array(layer, arr)


# --------------------------------------------------------------------------
# checkpoint file
#
#   magic  b"MRCK", u32 version, u32 entry count
#   per entry: u32 len + utf-8 network, u32 len + utf-8 layer,
#              u32 ndim, ndim x u32 dims
#   u32 total float count, then float32 data in entry order
# All integers little-endian.

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _put_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def encode_checkpoint(entries) -> bytes:
    entries = [(n, l, np.asarray(a)) for n, l, a in entries]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(entries)))
    for n, layer, arr in entries:
        _put_str(buf, n)
        _put_str(buf, layer)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    total = sum(a.size for _, _, a in entries)
    buf.write(struct.pack("<I", total))
    for _, _, arr in entries:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> list:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = []
    for _ in range(count):
        names = []
        for _ in range(2):
            (ln,) = struct.unpack("<I", take(4))
            names.append(bytes(take(ln)).decode("utf-8"))
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append((names[0], names[1], shape))
    (total,) = struct.unpack("<I", take(4))
    expected = sum(int(np.prod(s, dtype=np.int64)) for _, _, s in manifest)
    if total != expected or len(view) - pos != 4 * total:
        raise CheckpointError(f"checkpoint length mismatch: header {total}, manifest {expected}, payload {(len(view) - pos) // 4}")
    data = np.frombuffer(blob, dtype="<f4", offset=pos, count=total)
    out, off = [], 0
    for n, layer, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64))
        out.append((n, layer, data[off : off + size].reshape(shape).copy()))
        off += size
    return out


def save_checkpoint(path, entries) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(entries))


def load_checkpoint(path) -> list:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
