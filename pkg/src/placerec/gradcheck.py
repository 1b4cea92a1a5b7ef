"""Central finite-difference checks for every operator, the network and the losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import VoxelizedCloud
from .losses import BatchRelations, LossConfig, triplet_loss_batch_hard, tsap_loss
from .network import NetworkConfig, build, forward
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

H = 1e-6


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = H, entries=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (modified in place and restored)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def random_sparse(rng: np.random.Generator, n: int, channels: int, stride: int = 1, extent: int = 4,
                  requires_grad: bool = True) -> SparseTensor3D:
    cells = rng.choice(extent ** 3, size=min(n, extent ** 3), replace=False)
    coords = np.stack(np.unravel_index(cells, (extent,) * 3), axis=1) * stride
    feats = Variable(rng.normal(size=(len(coords), channels)), requires_grad=requires_grad)
    return SparseTensor3D(coords, feats, stride)


def _op_check(name, build_out, holders: list[Variable], rng, tol) -> CheckResult:
    """``build_out(tape)`` returns a Variable; the scalar is <out, fixed random projection>."""
    proj = rng.normal(size=build_out(None).value.shape)

    def scalar():
        return float(np.sum(build_out(None).value * proj))

    tape = Tape()
    out = build_out(tape)
    for h in holders:
        if isinstance(h, Parameter):
            h.zero_grad()
        else:
            h.grad = None
    tape.backward(out, proj)
    worst = 0.0
    for h in holders:
        num = numeric_grad(scalar, h.value)
        ana = h.grad if h.grad is not None else np.zeros_like(h.value)
        worst = max(worst, rel_error(ana, num))
    return CheckResult(name, worst, tol)


def operator_checks(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def case(name, fn, holders):
        results.append(_op_check(name, fn, list(holders.values()), rng, tol))

    x = random_sparse(rng, 30, 3)
    w3 = Parameter("w3", rng.normal(size=(27, 3, 2)))
    case("sparse_conv k3", lambda t: sparse_conv(x, w3, 3, 1, t).feats, {"x": x.feats, "w": w3})
    w1 = Parameter("w1", rng.normal(size=(1, 3, 4)))
    case("sparse_conv k1", lambda t: sparse_conv(x, w1, 1, 1, t).feats, {"x": x.feats, "w": w1})
    w2 = Parameter("w2", rng.normal(size=(8, 3, 2)))
    case("sparse_conv stride2", lambda t: sparse_conv(x, w2, 2, 2, t).feats, {"x": x.feats, "w": w2})
    x2 = random_sparse(rng, 12, 3, stride=2)
    wt = Parameter("wt", rng.normal(size=(8, 3, 2)))
    case("sparse_transposed_conv", lambda t: sparse_transposed_conv(x2, wt, t).feats, {"x": x2.feats, "w": wt})
    y = random_sparse(rng, 30, 3)
    case("sparse_add", lambda t: sparse_add(x, y, t).feats, {"x": x.feats, "y": y.feats})
    case("relu", lambda t: relu(x, t).feats, {"x": x.feats})
    bn = BatchNorm(Parameter("g", rng.uniform(0.5, 1.5, 3)), Parameter("b", rng.normal(size=3)),
                   rng.normal(size=3), rng.uniform(0.5, 2, 3))
    case("batch_norm train", lambda t: batch_norm(x, bn, "train", False, t).feats,
         {"x": x.feats, "g": bn.gamma, "b": bn.beta})
    case("batch_norm eval", lambda t: batch_norm(x, bn, "eval", False, t).feats,
         {"x": x.feats, "g": bn.gamma, "b": bn.beta})
    xe = random_sparse(rng, 20, 6)
    ke = Parameter("k", rng.normal(size=3))
    case("eca", lambda t: eca(xe, ke, t).feats, {"x": xe.feats, "k": ke})
    xg = SparseTensor3D(x.coords, Variable(rng.uniform(0.2, 2.0, size=(len(x), 3)), True))
    gp = GeMParams(Parameter("p", np.array([2.5])))
    case("gem_pool", lambda t: gem_pool(xg, gp, t), {"x": xg.feats, "p": gp.p})
    return results


def network_check(seed: int = 0, tol: float = 1e-4, config: NetworkConfig | None = None,
                  per_tensor: int | None = None) -> CheckResult:
    """Descriptor projection gradient vs finite differences for every parameter tensor.

    ``per_tensor`` limits the check to that many random entries per tensor (for
    configs too large to difference exhaustively).
    """
    rng = np.random.default_rng(seed)
    cfg = config or NetworkConfig(channels=(2, 2, 2, 2, 2), lateral_dim=3, descriptor_dim=3)
    model = build(cfg, seed)
    for name, p in model.params.items():
        if name.endswith("eca.kernel"):
            p.value = rng.normal(scale=0.5, size=p.value.shape)
    for bn in model.bns.values():
        bn.gamma.value = rng.uniform(0.5, 1.5, bn.gamma.value.shape)
        bn.beta.value = rng.normal(scale=0.3, size=bn.beta.value.shape)
    pts = rng.integers(-12, 12, size=(80, 3))
    cloud = VoxelizedCloud(pts, 0.01)
    proj = rng.normal(size=cfg.descriptor_dim)

    def scalar():
        return float(forward(model, cloud, "train", update_stats=False).value @ proj)

    model.zero_grad()
    tape = Tape()
    d = forward(model, cloud, "train", tape=tape, update_stats=False)
    tape.backward(d, proj)
    worst = 0.0
    for p in model.parameters():
        entries = None
        if per_tensor is not None and p.value.size > per_tensor:
            entries = rng.choice(p.value.size, per_tensor, replace=False)
        num = numeric_grad(scalar, p.value, entries=entries)
        ana = p.grad
        if entries is not None:
            mask = np.zeros(p.value.size, dtype=bool)
            mask[entries] = True
            ana = np.where(mask.reshape(p.value.shape), p.grad, 0.0)
        worst = max(worst, rel_error(ana, num))
    return CheckResult(f"network {cfg.channels}", worst, tol)


def loss_checks(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 4)
    rel = BatchRelations.from_labels(labels)
    x = rng.normal(scale=0.05, size=(16, 8)) + labels[:, None] * 0.01
    out = []
    for name, fn in [
        ("tsap_loss", lambda z: tsap_loss(z, rel, LossConfig(tau=0.01, k=2))),
        ("triplet_loss_batch_hard", lambda z: triplet_loss_batch_hard(z, rel, 0.2)),
    ]:
        _, g = fn(x)
        num = numeric_grad(lambda: fn(x)[0], x)
        out.append(CheckResult(name, rel_error(g, num), tol))
    return out


def run_all(seed: int = 0, tolerance: float | None = None) -> list[CheckResult]:
    """Operator and network checks at 1e-4, loss checks at 1e-5, unless ``tolerance`` overrides both."""
    op_tol = 1e-4 if tolerance is None else tolerance
    loss_tol = 1e-5 if tolerance is None else tolerance
    return operator_checks(seed, op_tol) + [network_check(seed, op_tol)] + loss_checks(seed, loss_tol)
