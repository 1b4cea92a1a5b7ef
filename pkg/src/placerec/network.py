"""The FPN descriptor network: configuration, construction, forward pass, checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigHashMismatch, CorruptFile, EmptyCloud, InvalidConfig
from .geometry import VoxelizedCloud
from .sparse import (
    BatchNorm,
    GeMParams,
    Parameter,
    SparseTensor3D,
    Tape,
    Variable,
    batch_norm,
    eca,
    gem_pool,
    relu,
    sparse_add,
    sparse_conv,
    sparse_transposed_conv,
)

CKPT_MAGIC = b"PRCK"
ECA_KERNEL = 3


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple[int, int, int, int, int] = (64, 64, 128, 64, 32)
    lateral_dim: int = 256
    descriptor_dim: int = 256
    quantization_step: float = 0.01
    gem_p: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise InvalidConfig(f"channels must be five positive ints, got {self.channels}")
        if self.lateral_dim < 1 or self.descriptor_dim < 1:
            raise InvalidConfig("lateral_dim and descriptor_dim must be >= 1")
        if self.lateral_dim != self.descriptor_dim:
            raise InvalidConfig("GeM pools the lateral map directly, so lateral_dim must equal descriptor_dim")
        if self.quantization_step <= 0:
            raise InvalidConfig("quantization_step must be positive")
        if self.gem_p < 1:
            raise InvalidConfig("GeM p must be >= 1")

    @classmethod
    def toy(cls, **kw) -> "NetworkConfig":
        return cls(channels=(16, 16, 32, 16, 8), lateral_dim=64, descriptor_dim=64, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "channels": tuple(d["channels"])})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(eq=False)
class Model:
    config: NetworkConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    bns: dict[str, BatchNorm] = field(default_factory=dict)
    gem: GeMParams = field(default_factory=GeMParams)

    def parameters(self) -> list[Parameter]:
        """All learnable parameters in a fixed order (BN affine terms and GeM p included)."""
        out = list(self.params.values())
        for bn in self.bns.values():
            out += [bn.gamma, bn.beta]
        out.append(self.gem.p)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def has_shortcut_conv(self, k: int) -> bool:
        return f"conv{k}.shortcut.weight" in self.params

    def describe(self, cloud: VoxelizedCloud, mode: str = "eval") -> np.ndarray:
        return forward(self, cloud, mode=mode).value.copy()


def _kaiming(rng: np.random.Generator, taps: int, c_in: int, c_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (taps * c_in))
    return rng.uniform(-bound, bound, size=(taps, c_in, c_out))


def build(config: NetworkConfig, seed: int = 0) -> Model:
    """Create every block of the network with seeded initial weights."""
    if not isinstance(config, NetworkConfig):
        raise InvalidConfig("config must be a NetworkConfig")
    rng = np.random.default_rng(seed)
    c = config.channels
    lat = config.lateral_dim
    model = Model(config, gem=GeMParams(Parameter("gem.p", np.array([config.gem_p]))))
    P, B = model.params, model.bns

    def conv(name, k, c_in, c_out):
        P[name] = Parameter(name, _kaiming(rng, k ** 3, c_in, c_out))

    conv("conv0.weight", 5, 1, c[0])
    B["conv0.bn"] = BatchNorm.create("conv0.bn", c[0])
    for k in range(1, 5):
        c_prev, c_k = c[k - 1], c[k]
        conv(f"conv{k}.down.weight", 2, c_prev, c_prev)
        B[f"conv{k}.down.bn"] = BatchNorm.create(f"conv{k}.down.bn", c_prev)
        conv(f"conv{k}.res.conv1.weight", 3, c_prev, c_k)
        B[f"conv{k}.res.bn1"] = BatchNorm.create(f"conv{k}.res.bn1", c_k)
        conv(f"conv{k}.res.conv2.weight", 3, c_k, c_k)
        B[f"conv{k}.res.bn2"] = BatchNorm.create(f"conv{k}.res.bn2", c_k)
        P[f"conv{k}.res.eca.kernel"] = Parameter(f"conv{k}.res.eca.kernel", np.zeros(ECA_KERNEL))
        if c_prev != c_k:
            conv(f"conv{k}.shortcut.weight", 1, c_prev, c_k)
    for k in (2, 3, 4):
        conv(f"lateral{k}.weight", 1, c[k], lat)
    for k in (3, 4):
        conv(f"tconv{k}.weight", 2, lat, lat)
    return model


def input_tensor(cloud: VoxelizedCloud) -> SparseTensor3D:
    """Single-channel tensor with feature 1.0 at every occupied voxel."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot run the network on an empty cloud")
    return SparseTensor3D(cloud.coords, np.ones((len(cloud), 1)), stride=1)


def forward(model: Model, cloud: VoxelizedCloud | SparseTensor3D, mode: str = "eval",
            tape: Tape | None = None, update_stats: bool | None = None,
            trace: list | None = None) -> Variable:
    """Compute the descriptor of one cloud.

    ``update_stats`` controls running batch-norm statistics in train mode and
    defaults to "only when recording a tape".  ``trace`` (a list) receives
    ``(block, stride, channels, n_voxels)`` for every block output.
    """
    if update_stats is None:
        update_stats = mode == "train" and tape is not None
    P, B = model.params, model.bns
    x = cloud if isinstance(cloud, SparseTensor3D) else input_tensor(cloud)

    def bn(t, name):
        return batch_norm(t, B[name], mode, update_stats, tape)

    def log(name, t):
        if trace is not None:
            trace.append((name, t.stride, t.channels, len(t)))
        return t

    x = relu(bn(sparse_conv(x, P["conv0.weight"], 5, 1, tape), "conv0.bn"), tape)
    feats = [log("conv0", x)]
    for k in range(1, 5):
        x = sparse_conv(x, P[f"conv{k}.down.weight"], 2, 2, tape)
        x = relu(bn(x, f"conv{k}.down.bn"), tape)
        y = sparse_conv(x, P[f"conv{k}.res.conv1.weight"], 3, 1, tape)
        y = relu(bn(y, f"conv{k}.res.bn1"), tape)
        y = sparse_conv(y, P[f"conv{k}.res.conv2.weight"], 3, 1, tape)
        y = eca(bn(y, f"conv{k}.res.bn2"), P[f"conv{k}.res.eca.kernel"], tape)
        shortcut = x
        if f"conv{k}.shortcut.weight" in P:
            shortcut = sparse_conv(x, P[f"conv{k}.shortcut.weight"], 1, 1, tape)
        x = relu(sparse_add(y, shortcut, tape), tape)
        feats.append(log(f"conv{k}", x))

    t = log("lateral4", sparse_conv(feats[4], P["lateral4.weight"], 1, 1, tape))
    for k in (3, 2):
        up = log(f"tconv{k + 1}", sparse_transposed_conv(t, P[f"tconv{k + 1}.weight"], tape))
        lateral = sparse_conv(feats[k], P[f"lateral{k}.weight"], 1, 1, tape)
        t = log(f"fuse{k}", sparse_add(up, lateral, tape))
    return gem_pool(t, model.gem, tape)


def save_checkpoint(model: Model, path: str | Path) -> None:
    params = model.parameters()
    header = {
        "format": "placerec-checkpoint-1",
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "gem_p": float(model.gem.p.value[0]),
        "gem_eps": model.gem.eps,
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "bn": {name: {"running_mean": bn.running_mean.tolist(), "running_var": bn.running_var.tolist(),
                      "eps": bn.eps, "momentum": bn.momentum}
               for name, bn in model.bns.items()},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blobs = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blobs)


def load_checkpoint(path: str | Path, expected_config: NetworkConfig | None = None) -> Model:
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != CKPT_MAGIC:
            raise CorruptFile("not a checkpoint file")
        (hlen,) = struct.unpack_from("<Q", buf, 4)
        header = json.loads(buf[12:12 + hlen].decode())
        config = NetworkConfig.from_dict(header["config"])
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"unreadable checkpoint header: {exc}") from exc
    if config.hash() != header.get("config_hash"):
        raise ConfigHashMismatch("stored config hash does not match the stored config")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise ConfigHashMismatch("checkpoint was written for a different network config")

    model = build(config, seed=0)
    params = model.parameters()
    if [e["name"] for e in header["params"]] != [p.name for p in params]:
        raise CorruptFile("parameter list does not match the config")
    off = 12 + hlen
    for p, entry in zip(params, header["params"]):
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise CorruptFile(f"shape mismatch for {p.name}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(buf):
            raise CorruptFile("checkpoint is truncated")
        p.value = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64).reshape(shape)
        p.zero_grad()
        off += nbytes
    if off != len(buf):
        raise CorruptFile("trailing bytes after parameter blobs")
    for name, st in header["bn"].items():
        bn = model.bns[name]
        bn.running_mean[:] = st["running_mean"]
        bn.running_var[:] = st["running_var"]
    model.gem.eps = header["gem_eps"]
    return model
