"""Large-batch training with multistaged backpropagation and Adam."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .datasets import Dataset
from .errors import InsufficientData
from .geometry import AugmentConfig, VoxelizedCloud, augment, quantize
from .losses import BatchRelations, LossConfig, triplet_loss_batch_hard, tsap_loss
from .network import Model, forward, save_checkpoint
from .retrieval import DescriptorDB, evaluate
from .sparse import Parameter, Tape

PROTOCOLS = {
    "baseline": {"epochs": 400, "lr_decay_epochs": (250, 350)},
    "refined": {"epochs": 500, "lr_decay_epochs": (350, 450)},
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    epochs: int = 400
    initial_lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (250, 350)
    lr_decay_factor: float = 10.0
    weight_decay: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    loss_kind: str = "tsap"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    quantization_step: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        dec = self.lr_decay_epochs
        if any(b <= a for a, b in zip(dec, dec[1:])):
            raise ValueError("lr decay epochs must be strictly increasing")
        if dec and self.epochs > 0 and dec[-1] >= self.epochs:
            raise ValueError("lr decay epochs must be < epochs")
        if self.loss_kind not in ("tsap", "triplet"):
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @classmethod
    def protocol(cls, name: str, **overrides) -> "TrainConfig":
        return cls(**{**PROTOCOLS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainingBatch:
    clouds: list[VoxelizedCloud]
    relations: BatchRelations
    indices: np.ndarray


# ---- sampling ----------------------------------------------------------------

def location_clusters(dataset: Dataset, split: str = "train") -> dict[int, np.ndarray]:
    idx = dataset.split_indices(split)
    out: dict[int, list[int]] = {}
    for i in idx:
        out.setdefault(int(dataset.location_index[i]), []).append(int(i))
    return {loc: np.array(members) for loc, members in sorted(out.items())}


def group_size_for(dataset: Dataset, k: int, split: str = "train") -> int:
    """Positives per element the sampler can guarantee: min(k, largest cluster - 1)."""
    clusters = location_clusters(dataset, split)
    biggest = max((len(c) for c in clusters.values()), default=0)
    return min(k, biggest - 1)


def _make_batch(dataset: Dataset, chosen: Sequence[int], clusters: dict[int, np.ndarray], k: int,
                rng: np.random.Generator, aug: AugmentConfig | None, step: float) -> TrainingBatch:
    members = []
    for loc in chosen:
        members.extend(rng.choice(clusters[loc], size=k + 1, replace=False).tolist())
    members = np.array(members, dtype=np.int64)
    clouds = []
    for i in members:
        c = dataset.clouds[i]
        if aug is not None:
            c = augment(c, aug, rng)
        clouds.append(quantize(c, step))
    locs = np.array([dataset.clouds[i].location for i in members])
    return TrainingBatch(clouds, BatchRelations.from_locations(locs), members)


def _eligible(dataset: Dataset, k: int, split: str) -> dict[int, np.ndarray]:
    clusters = {loc: m for loc, m in location_clusters(dataset, split).items() if len(m) >= k + 1}
    if not clusters:
        raise InsufficientData(f"no location has the {k + 1} clouds needed for {k} positives each")
    return clusters


def sample_batch(dataset: Dataset, m: int, k: int, rng: np.random.Generator,
                 aug: AugmentConfig | None = None, step: float = 0.01, split: str = "train") -> TrainingBatch:
    """m/(k+1) random location clusters, k+1 clouds from each, so every element has k positives."""
    clusters = _eligible(dataset, k, split)
    n_clusters = m // (k + 1)
    if n_clusters < 1 or n_clusters > len(clusters):
        raise InsufficientData(f"cannot form a batch of {m} from {len(clusters)} clusters of size {k + 1}")
    keys = np.array(list(clusters))
    chosen = rng.choice(keys, size=n_clusters, replace=False)
    return _make_batch(dataset, chosen, clusters, k, rng, aug, step)


def epoch_batches(dataset: Dataset, m: int, k: int, rng: np.random.Generator,
                  aug: AugmentConfig | None = None, step: float = 0.01,
                  split: str = "train") -> Iterator[TrainingBatch]:
    """One pass over shuffled clusters; the remainder that does not fill a batch is dropped."""
    clusters = _eligible(dataset, k, split)
    per_batch = m // (k + 1)
    if per_batch < 1 or per_batch > len(clusters):
        raise InsufficientData(f"cannot form a batch of {m} from {len(clusters)} clusters of size {k + 1}")
    order = rng.permutation(np.array(list(clusters)))
    for b in range(len(order) // per_batch):
        yield _make_batch(dataset, order[b * per_batch:(b + 1) * per_batch], clusters, k, rng, aug, step)


# ---- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                weight_decay: float = 0.0) -> np.ndarray:
    """One Adam step with L2 weight decay folded into the gradient; returns the new value."""
    b1, b2 = betas
    g = grad + weight_decay * param
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state = {p.name: AdamState(np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            p.value = adam_update(p.value, p.grad, self.state[p.name], lr, self.betas, self.eps,
                                  self.weight_decay)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.initial_lr / cfg.lr_decay_factor ** drops


def make_loss_fn(cfg: TrainConfig, alloc_hook=None) -> Callable:
    if cfg.loss_kind == "triplet":
        return lambda d, rel: triplet_loss_batch_hard(d, rel, cfg.loss.margin)
    return lambda d, rel: tsap_loss(d, rel, cfg.loss, alloc_hook)


# ---- the step ----------------------------------------------------------------

def batch_descriptors(model: Model, clouds: Sequence[VoxelizedCloud], mode: str = "train") -> np.ndarray:
    """Descriptors with no tape (stage 1); batch-norm running statistics are left alone."""
    return np.stack([forward(model, c, mode, tape=None, update_stats=False).value for c in clouds])


def multistage_gradients(model: Model, batch: TrainingBatch, loss_fn: Callable) -> tuple[float, np.ndarray]:
    """Accumulate the exact full-batch parameter gradient into ``Parameter.grad``.

    Stage 1 computes every descriptor without recording; stage 2 evaluates the
    loss and its gradient w.r.t. the descriptor matrix; stage 3 re-runs each
    element with a tape and back-propagates its row of that gradient.  Only one
    tape is alive at any time.
    """
    desc = batch_descriptors(model, batch.clouds)
    loss, grad = loss_fn(desc, batch.relations)
    model.zero_grad()
    for i, cloud in enumerate(batch.clouds):
        tape = Tape()
        d = forward(model, cloud, "train", tape=tape, update_stats=True)
        tape.backward(d, grad[i])
    return loss, desc


def multistage_step(model: Model, batch: TrainingBatch, loss_fn: Callable, optimizer: Adam,
                    lr: float) -> float:
    loss, _ = multistage_gradients(model, batch, loss_fn)
    optimizer.step(lr)
    p = model.gem.p
    p.value = np.maximum(p.value, 1.0)
    return loss


# ---- evaluation helpers --------------------------------------------------------

def descriptor_db(model: Model, dataset: Dataset, indices: Sequence[int], step: float = 0.01) -> DescriptorDB:
    clouds = [dataset.clouds[i] for i in indices]
    desc = np.stack([model.describe(quantize(c, step)) for c in clouds]) if clouds else np.zeros((0, 0))
    return DescriptorDB(tuple(c.cloud_id for c in clouds), desc,
                        np.array([c.location for c in clouds]).reshape(-1, 2),
                        tuple(c.traversal_id for c in clouds))


def evaluate_model(model: Model, dataset: Dataset, split: str = "test", step: float = 0.01) -> dict:
    return evaluate(descriptor_db(model, dataset, dataset.split_indices(split), step))


# ---- the loop ----------------------------------------------------------------

def train(model: Model, dataset: Dataset, cfg: TrainConfig, log_path: str | Path | None = None,
          eval_every: int = 0, checkpoint_dir: str | Path | None = None, checkpoint_every: int = 0,
          callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Run ``cfg.epochs`` epochs of multistaged training; returns the per-step log records."""
    k = group_size_for(dataset, cfg.loss.k)
    if k < 1:
        raise InsufficientData("every location needs at least two clouds")
    loss_fn = make_loss_fn(cfg)
    opt = Adam(model.parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay)
    log: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            rng = np.random.default_rng([cfg.seed, epoch])
            for step, batch in enumerate(epoch_batches(dataset, cfg.batch_size, k, rng, cfg.augment,
                                                       cfg.quantization_step)):
                t0 = time.perf_counter()
                loss = multistage_step(model, batch, loss_fn, opt, lr)
                rec = {"epoch": epoch, "step": step, "loss": float(loss), "lr": lr, "loss_kind": cfg.loss_kind,
                       "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                log.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if callback:
                    callback(rec)
            if eval_every and (epoch + 1) % eval_every == 0:
                report = evaluate_model(model, dataset, "test", cfg.quantization_step)
                rec = {"epoch": epoch, "eval_ar_at_1": report["recall_at"]["1"], "loss_kind": cfg.loss_kind}
                log.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if callback:
                    callback(rec)
            if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt")
    finally:
        if fh:
            fh.close()
    return log


def scale_schedule(decay: tuple[int, ...], full_epochs: int, epochs: int) -> tuple[int, ...]:
    """Move the decay epochs proportionally when a run is shortened or lengthened."""
    if epochs == full_epochs:
        return tuple(decay)
    scaled = {max(1, round(e * epochs / full_epochs)) for e in decay}
    return tuple(sorted(e for e in scaled if e < epochs))


# A toy run takes ~180 optimizer steps in total, so it starts from a larger step size.
TOY_LR = 5e-3


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: batch 64, 60 epochs, lr 5e-3, decays scaled from the baseline schedule."""
    b = PROTOCOLS["baseline"]
    base = dict(batch_size=64, epochs=60, initial_lr=TOY_LR, lr_decay_epochs=scale_schedule(b["lr_decay_epochs"], b["epochs"], 60))
    return replace(TrainConfig(), **{**base, **overrides})
