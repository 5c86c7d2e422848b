"""Joint training of decomposer and merger, for both operating modes."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, TrainingDivergedError
from .imaging import DatasetSplit
from .losses import LossConfig, decomposition_loss, default_lambda, final_loss
from .nets import DESK_NETWORK, PAPER_NETWORK, NetworkConfig, init_params

log = logging.getLogger(__name__)

MODES = ("decomposition", "demorphing")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "decomposition"
    learning_rate: float = 0.002
    batch_size: int = 8
    epochs: int = 400
    lr_gamma: float = 0.998
    seed: int = 0
    lam: float | None = None
    checkpoint_every: int = 0
    grad_clip: float | None = 5.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    net: NetworkConfig = field(default_factory=lambda: DESK_NETWORK)

    def validate(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if not 0 < self.lr_gamma <= 1:
            problems.append("lr_gamma must be in (0, 1]")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.checkpoint_every < 0:
            problems.append("checkpoint_every must be >= 0")
        if self.lam is not None and not 0 < self.lam <= 1:
            problems.append("lam must be in (0, 1]")
        expected_heads = 1 if self.mode == "decomposition" else 2
        if self.mode in MODES and self.net.heads != expected_heads:
            problems.append(f"{self.mode} mode needs heads={expected_heads}, got {self.net.heads}")
        try:
            self.net.validate()
        except ConfigError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def loss_config(self):
        return LossConfig(k=self.net.k, lam=self.lam)

    @property
    def lambda_(self):
        return default_lambda(self.net.k) if self.lam is None else self.lam

    def lr_at(self, epoch):
        return self.learning_rate * self.lr_gamma ** epoch

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        net = NetworkConfig.from_dict(d.pop("net", DESK_NETWORK.to_dict()))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(net=net, **d)


def paper_recipe(mode="decomposition"):
    """The full-scale schedule: 224px, 64 base channels, batch 32, lr 0.002, 800 epochs."""
    heads = 1 if mode == "decomposition" else 2
    return TrainConfig(mode=mode, learning_rate=0.002, batch_size=32, epochs=800,
                       lr_gamma=0.998, grad_clip=None, net=replace(PAPER_NETWORK, heads=heads))


def desk_recipe(mode="decomposition", epochs=400, seed=0):
    heads = 1 if mode == "decomposition" else 2
    return TrainConfig(mode=mode, learning_rate=0.002, batch_size=8, epochs=epochs,
                       lr_gamma=0.998, seed=seed, grad_clip=5.0,
                       net=replace(DESK_NETWORK, heads=heads))


@dataclass
class TrainReport:
    losses: list
    learning_rates: list
    checkpoint: Path | None
    wall_clock: float
    seed: int
    checkpoints: list = field(default_factory=list)
    decomposer: object = field(default=None, repr=False)
    merger: object = field(default=None, repr=False)


def to_batch(images):
    return torch.as_tensor(np.stack([np.asarray(im, dtype=np.float32) for im in images]))


def decomposition_step_loss(dec, mer, batch, loss_cfg):
    components = dec(batch)
    recon = mer(components, head=0)
    return decomposition_loss(batch, recon, components, loss_cfg)


def demorph_step_loss(dec, mer, batch, loss_cfg):
    morph, b1, b2 = batch
    components = dec(morph)
    o1, o2 = mer(components, head=0), mer(components, head=1)
    return final_loss(morph, o1, o2, b1, b2, components, loss_cfg)


def make_optimizer(cfg, params):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=tuple(cfg.betas), eps=cfg.eps)


def _optimizer_arrays(optimizer):
    out = {}
    for i, state in enumerate(optimizer.state_dict()["state"].values()):
        for key, value in state.items():
            out[f"optim.{i}.{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return out


def _restore_optimizer(optimizer, extra):
    template = optimizer.state_dict()
    params = template["param_groups"][0]["params"]
    state = {}
    for i, pid in enumerate(params):
        keys = [k for k in extra if k.startswith(f"optim.{i}.")]
        if keys:
            state[pid] = {k.split(".", 2)[2]: torch.from_numpy(extra[k]) for k in keys}
    template["state"] = state
    optimizer.load_state_dict(template)


def _train(cfg, data, step_loss, run_dir=None, resume=None):
    """Shared loop.  ``data`` is a tuple of aligned float32 tensors."""
    cfg = cfg.validate()
    n = data[0].shape[0]
    if n == 0:
        raise DataError("training set is empty")
    start = time.perf_counter()
    dec, mer = init_params(cfg.net, cfg.seed)
    params = list(dec.parameters()) + list(mer.parameters())
    optimizer = make_optimizer(cfg, params)
    first_epoch = 0
    losses, lrs = [], []
    if resume is not None:
        dec, mer, snapshot, extra = load_checkpoint(resume, expect=cfg.net.to_dict())
        params = list(dec.parameters()) + list(mer.parameters())
        optimizer = make_optimizer(cfg, params)
        _restore_optimizer(optimizer, extra)
        first_epoch = int(extra["train.epoch"][()])
        losses = extra["train.losses"].tolist()
        lrs = extra["train.lrs"].tolist()
    loss_cfg = cfg.loss_config
    order_rng = np.random.default_rng([cfg.seed, 0x0DE])
    # replay the permutations already consumed so a resumed run sees the same data order
    for _ in range(first_epoch):
        order_rng.permutation(n)

    run_dir = Path(run_dir) if run_dir is not None else None
    saved = []

    def checkpoint(name, epoch):
        extra = _optimizer_arrays(optimizer)
        extra["train.epoch"] = np.array(epoch, dtype=np.int64)
        extra["train.losses"] = np.array(losses, dtype=np.float64)
        extra["train.lrs"] = np.array(lrs, dtype=np.float64)
        path = save_checkpoint(run_dir / "checkpoints" / name, dec, mer, cfg.to_dict(), extra)
        saved.append(path)
        return path

    dec.train()
    mer.train()
    for epoch in range(first_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = torch.from_numpy(order_rng.permutation(n))
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch = tuple(t[idx] for t in data)
            loss = step_loss(dec, mer, batch if len(batch) > 1 else batch[0], loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss.item()} at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        lrs.append(lr)
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d loss %.5f lr %.3g", epoch, losses[-1], lr)
        if run_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(f"epoch_{epoch + 1:04d}", epoch + 1)

    final = None
    if run_dir is not None:
        final = checkpoint("final", cfg.epochs)
        write_loss_csv(run_dir / "loss.csv", losses, lrs)
    dec.eval()
    mer.eval()
    return TrainReport(losses, lrs, final, time.perf_counter() - start, cfg.seed,
                       saved[:-1] if final else saved, dec, mer)


def write_loss_csv(path, losses, lrs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        for epoch, (loss, lr) in enumerate(zip(losses, lrs)):
            writer.writerow([epoch, repr(float(loss)), repr(float(lr))])


def train_decomposition(cfg, images, run_dir=None, resume=None):
    """Fit decomposer and merger to reconstruct ``images`` through k components."""
    if cfg.mode != "decomposition":
        raise ConfigError(f"train_decomposition needs mode 'decomposition', got {cfg.mode!r}")
    images = list(images)
    if not images:
        raise DataError("training set is empty")
    return _train(cfg, (to_batch(images),), decomposition_step_loss, run_dir, resume)


def train_demorph(cfg, dataset, run_dir=None, resume=None):
    """Fit the two-head demorpher on the training morphs of ``dataset``."""
    if cfg.mode != "demorphing":
        raise ConfigError(f"train_demorph needs mode 'demorphing', got {cfg.mode!r}")
    samples = dataset.train if isinstance(dataset, DatasetSplit) else list(dataset)
    if not samples:
        raise DataError("training set is empty")
    data = (to_batch([s.morph for s in samples]),
            to_batch([s.bonafide1 for s in samples]),
            to_batch([s.bonafide2 for s in samples]))
    return _train(cfg, data, demorph_step_loss, run_dir, resume)


def snapshot(module):
    """Frozen copy of a module for evaluation while training continues."""
    clone = copy.deepcopy(module)
    clone.eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


@torch.no_grad()
def run_decomposition(dec, mer, images):
    """Eval-mode components and reconstructions for a list of numpy images."""
    dec.eval()
    mer.eval()
    batch = to_batch(images)
    components = dec(batch)
    recon = mer(components, head=0)
    comps = [[c[i].double().numpy() for c in components] for i in range(len(images))]
    return comps, [r.double().numpy() for r in recon]


@torch.no_grad()
def run_demorph(dec, mer, images):
    """Eval-mode ``(O1, O2, components)`` per image, as numpy arrays."""
    dec.eval()
    mer.eval()
    batch = to_batch(images)
    components = dec(batch)
    o1, o2 = mer(components, head=0), mer(components, head=1)
    return [(o1[i].double().numpy(), o2[i].double().numpy(),
             [c[i].double().numpy() for c in components]) for i in range(len(images))]

