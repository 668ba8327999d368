"""SSIM-loss training of the hypernetwork and of the plain-network ablation."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .exceptions import DivergenceError, ParameterError
from .network import ReconNetwork, rss_t
from .numerics import STREAM_BATCHING, STREAM_WEIGHT_INIT, RngStream
from .ssim import ssim_torch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    ``lr``, ``betas`` and ``eps`` parameterize Adam; ``iters`` counts
    mini-batch updates.
    """

    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 6
    iters: int = 500
    seed: int = 0
    loss: str = "neg-ssim"
    features: int = 8
    domains: tuple = ("k", "i")
    kernel: int = 3
    hidden: tuple = (64, 64, 64)
    dtype: str = "float32"
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if self.iters < 1:
            raise ParameterError("iters must be >= 1")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ParameterError("moment decays must lie in [0, 1)")
        if self.loss != "neg-ssim":
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError("dtype must be float32 or float64")
        self.betas = tuple(float(b) for b in self.betas)
        self.domains = tuple(self.domains)
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_json(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["domains"] = list(self.domains)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ParameterError(f"unknown training options: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TrainResult:
    network: ReconNetwork
    losses: list = field(default_factory=list)


@dataclass
class _Sample:
    chans: np.ndarray
    m_norm: np.ndarray
    target: np.ndarray
    scale: float
    peak: float


def prepare_samples(net: ReconNetwork, records) -> list:
    """Network inputs, normalized motion and targets for each record.

    The conditioning motion is expressed relative to the DC-owning shot, the
    frame of the reference image.
    """
    out = []
    for rec in records:
        chans, scale = net.prepare(rec.y)
        target = np.abs(rec.x_ref)
        peak = float(target.max()) or 1.0
        out.append(_Sample(chans, net.motion_input(rec.m_ref), target, scale, peak))
    return out


def batch_loss(net: ReconNetwork, theta: torch.Tensor, samples) -> torch.Tensor:
    """Mean ``-ssim`` over ``samples`` with images scaled by the reference peak."""
    dt = net.torch_dtype
    chans = torch.as_tensor(np.stack([s.chans for s in samples]), dtype=dt)
    m = torch.as_tensor(np.stack([s.m_norm for s in samples]), dtype=dt)
    gain = torch.as_tensor([s.scale / s.peak for s in samples], dtype=dt)[:, None, None]
    target = torch.as_tensor(np.stack([s.target / s.peak for s in samples]), dtype=dt)
    img = rss_t(net.kspace_t(chans, m, theta)) * gain
    return -ssim_torch(img, target).mean()


def _batches(n, batch_size, iters, seed):
    """Deterministic epoch-wise shuffled mini-batches."""
    gen = RngStream(seed, STREAM_BATCHING).generator()
    order = np.empty(0, dtype=np.intp)
    for _ in range(iters):
        while order.size < batch_size:
            order = np.concatenate([order, gen.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


def train(records, pattern, coils: int, config: TrainConfig | None = None, mode: str = "hypernet", *, callback=None) -> TrainResult:
    """Minimize ``-ssim(f(y, m), |x_ref|)`` with Adam.

    In ``"hypernet"`` mode only the hypernetwork weights are optimized and
    the subnetwork weights are always produced by it. In ``"conv"`` mode the
    subnetwork weights are optimized directly and motion is ignored.

    Raises
    ------
    DivergenceError
        If a loss or gradient becomes non-finite.
    """
    config = config or TrainConfig()
    records = list(records)
    if not records:
        raise ParameterError("training corpus is empty")
    torch.set_num_threads(1)
    net = ReconNetwork.create(
        pattern,
        coils,
        mode,
        features=config.features,
        domains=config.domains,
        kernel=config.kernel,
        hidden=config.hidden,
        rng=RngStream(config.seed, STREAM_WEIGHT_INIT).generator(),
        dtype=config.dtype,
    )
    samples = prepare_samples(net, records)
    theta = torch.tensor(net.theta, dtype=net.torch_dtype, requires_grad=True)
    opt = torch.optim.Adam([theta], lr=config.lr, betas=config.betas, eps=config.eps)
    losses = []
    for it, idx in enumerate(_batches(len(samples), config.batch_size, config.iters, config.seed)):
        opt.zero_grad()
        loss = batch_loss(net, theta, [samples[i] for i in idx])
        value = float(loss.detach())
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite training loss at iteration {it} (batch {idx.tolist()})")
        loss.backward()
        if not torch.isfinite(theta.grad).all():
            raise DivergenceError(f"non-finite gradient at iteration {it} (loss {value:.6g})")
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(it, value)
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d loss %.5f", it, value)
    net.theta = theta.detach().double().numpy().copy()
    net.meta = {"train_config": config.to_json(), "n_records": len(records), "final_loss": losses[-1]}
    return TrainResult(net, losses)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
