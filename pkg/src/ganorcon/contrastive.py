"""Self-supervised backbone pretraining.

Two objectives are supported: InfoNCE against a queue of negatives from a
momentum encoder (``method="infonce-queue"``, MoCo v2 style) and the
negative-free predictor/stop-gradient cosine objective (``method="stop-gradient"``,
SimSiam style).
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ganorcon.backbone import BackboneSpec, StagedResNet, backbone_checkpoint, build_backbone
from ganorcon.data.augment import AugmentationPolicy, augment_pair
from ganorcon.data.io import load_pool
from ganorcon.errors import ConfigError, ContractViolation, DivergenceError, EmptyPoolError, NormalizationError

log = logging.getLogger(__name__)

METHODS = ("infonce-queue", "stop-gradient")
_ALIASES = {"moco": "infonce-queue", "simsiam": "stop-gradient"}

# per-method defaults; batch size depends on resolution
_METHOD_DEFAULTS = {
    "infonce-queue": {"lr": 0.03, "epochs": 800},
    "stop-gradient": {"lr": 0.05, "epochs": 400},
}
_BATCH_BY_RESOLUTION = {512: 32, 256: 128}


def canonical_method(method: str) -> str:
    method = _ALIASES.get(method, method)
    if method not in METHODS:
        raise ConfigError(f"unknown contrastive method {method!r}")
    return method


@dataclass
class ContrastiveConfig:
    method: str = "infonce-queue"
    resolution: int = 512
    temperature: float = 0.2
    epochs: int | None = None
    batch_size: int | None = None
    lr: float | None = None
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    momentum: float = 0.999
    queue_size: int = 65536
    embed_dim: int = 128
    # stop-gradient projector / predictor widths
    proj_dim: int = 2048
    pred_hidden: int = 512
    architecture: str = "resnet50"
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = canonical_method(self.method)
        d = _METHOD_DEFAULTS[self.method]
        if self.lr is None:
            self.lr = d["lr"]
        if self.epochs is None:
            self.epochs = d["epochs"]
        if self.batch_size is None:
            self.batch_size = _BATCH_BY_RESOLUTION.get(self.resolution, 32)
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum coefficient must lie in [0, 1)")

    def policy(self, seed: int = 0) -> AugmentationPolicy:
        return AugmentationPolicy.contrastive(seed=seed, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in self.augmentation.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit(x: torch.Tensor, name: str) -> None:
    tol = 1e-6 if x.dtype == torch.float64 else 1e-5
    if x.numel() == 0:
        return
    norms = x.detach().norm(dim=-1)
    if not torch.all((norms - 1).abs() <= tol):
        raise ContractViolation(f"{name} must be L2-normalized (norms in [{norms.min():.6g}, {norms.max():.6g}])")


class NegativeQueue:
    """Fixed-capacity FIFO ring buffer of normalized embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ConfigError("queue capacity must be positive")
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    @torch.no_grad()
    def enqueue(self, batch: torch.Tensor) -> "NegativeQueue":
        batch = batch.detach()
        n = batch.shape[0]
        if n > self.capacity:
            raise ConfigError(f"batch of {n} does not fit a queue of capacity {self.capacity}")
        _check_unit(batch, "queued embeddings")
        idx = (self.cursor + torch.arange(n)) % self.capacity
        self.buffer[idx] = batch.to(self.buffer.dtype)
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)
        return self

    def entries(self) -> torch.Tensor:
        """Stored embeddings, oldest first."""
        if self.size < self.capacity:
            return self.buffer[:self.size]
        return torch.cat([self.buffer[self.cursor:], self.buffer[:self.cursor]])


def info_nce_loss(anchor: torch.Tensor, positive: torch.Tensor, negatives, tau: float = 0.2) -> torch.Tensor:
    """-log softmax of the positive similarity among {positive} + negatives.

    ``anchor``/``positive`` are ``(D,)`` or ``(N, D)``; the result is averaged
    over the batch. ``negatives`` is a queue or a ``(K, D)`` tensor.
    """
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    neg = negatives.entries() if isinstance(negatives, NegativeQueue) else negatives
    if neg is None:
        neg = anchor.new_zeros(0, anchor.shape[-1])
    _check_unit(anchor, "anchor")
    _check_unit(positive, "positive")
    _check_unit(neg, "negatives")
    a = anchor if anchor.dim() == 2 else anchor[None]
    p = positive if positive.dim() == 2 else positive[None]
    l_pos = (a * p).sum(-1, keepdim=True) / tau
    l_neg = a @ neg.to(a.dtype).T / tau
    logits = torch.cat([l_pos, l_neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - l_pos[:, 0]).mean()


def _normalize(x: torch.Tensor, name: str) -> torch.Tensor:
    n = x.norm(dim=-1, keepdim=True)
    if torch.any(n == 0):
        raise NormalizationError(f"{name} has zero norm")
    return x / n


def negative_cosine(h: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-<h/|h|, t/|t|> with ``target`` detached; averaged over a batch."""
    t = target.detach()
    return -(_normalize(h, "prediction") * _normalize(t, "target")).sum(-1).mean()


def simsiam_loss(online_embed: torch.Tensor, predictor, target_embed: torch.Tensor) -> torch.Tensor:
    return negative_cosine(predictor(online_embed), target_embed)


def symmetric_simsiam_loss(z1, z2, predictor) -> torch.Tensor:
    return 0.5 * (simsiam_loss(z1, predictor, z2) + simsiam_loss(z2, predictor, z1))


@dataclass
class MomentumPair:
    online: nn.Module
    momentum_encoder: nn.Module
    m: float = 0.999

    def __post_init__(self):
        a = [p.shape for p in self.online.parameters()]
        b = [p.shape for p in self.momentum_encoder.parameters()]
        if a != b:
            raise ConfigError("online and momentum encoders differ in shape")


@torch.no_grad()
def momentum_update(pair: MomentumPair) -> MomentumPair:
    """momentum <- m * momentum + (1 - m) * online, in place."""
    if not 0.0 <= pair.m < 1.0:
        raise ConfigError("momentum coefficient must lie in [0, 1)")
    for q, k in zip(pair.online.parameters(), pair.momentum_encoder.parameters()):
        k.lerp_(q, 1.0 - pair.m)
    return pair


def mlp_head(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


class InfoNCEModel(nn.Module):
    def __init__(self, backbone: StagedResNet, cfg: ContrastiveConfig):
        super().__init__()
        d = backbone.out_channels
        self.encoder_q = nn.Sequential(backbone, mlp_head(d, d, cfg.embed_dim))
        self.encoder_k = copy.deepcopy(self.encoder_q)
        self.encoder_k.requires_grad_(False)
        self.pair = MomentumPair(self.encoder_q, self.encoder_k, cfg.momentum)
        self.tau = cfg.temperature
        self.queue = NegativeQueue(cfg.queue_size, cfg.embed_dim)
        # start the queue full of random unit vectors, as the reference recipe does
        self.queue.enqueue(F.normalize(torch.randn(cfg.queue_size, cfg.embed_dim), dim=1))

    def loss(self, x1, x2):
        q = F.normalize(self.encoder_q(x1), dim=1)
        with torch.no_grad():
            momentum_update(self.pair)
            k = F.normalize(self.encoder_k(x2), dim=1)
        loss = info_nce_loss(q, k, self.queue, self.tau)
        self.queue.enqueue(k)
        return loss

    @property
    def backbone(self) -> StagedResNet:
        return self.encoder_q[0]


class StopGradientModel(nn.Module):
    def __init__(self, backbone: StagedResNet, cfg: ContrastiveConfig):
        super().__init__()
        d, p = backbone.out_channels, cfg.proj_dim
        self.encoder = nn.Sequential(
            backbone,
            nn.Linear(d, p, bias=False), nn.BatchNorm1d(p), nn.ReLU(inplace=True),
            nn.Linear(p, p, bias=False), nn.BatchNorm1d(p), nn.ReLU(inplace=True),
            nn.Linear(p, p, bias=False), nn.BatchNorm1d(p, affine=False),
        )
        self.predictor = nn.Sequential(
            nn.Linear(p, cfg.pred_hidden, bias=False), nn.BatchNorm1d(cfg.pred_hidden),
            nn.ReLU(inplace=True), nn.Linear(cfg.pred_hidden, p),
        )

    def loss(self, x1, x2):
        # both views share one forward pass so batch-norm sees >= 2 samples
        z = self.encoder(torch.cat([x1, x2]))
        z1, z2 = z.chunk(2)
        return symmetric_simsiam_loss(z1, z2, self.predictor)

    @property
    def backbone(self) -> StagedResNet:
        return self.encoder[0]


def _seed_streams(seed: int):
    """Independent streams for init, data order and augmentation from one master seed."""
    ss = np.random.SeedSequence(seed)
    init, order, aug = ss.spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(order),
            int(aug.generate_state(1)[0]))


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()


def pretrain(pool, cfg: ContrastiveConfig, seed: int = 0, loss_log=None, max_steps: int | None = None):
    """Pretrain a backbone on an unlabeled pool; returns ``(checkpoint, history)``.

    ``pool`` is a directory or a list of H x W x 3 images. ``loss_log`` is an
    optional path receiving one JSON line per step.
    """
    if isinstance(pool, (str, Path)):
        pool, _ = load_pool(pool, cfg.resolution)
    if len(pool) == 0:
        raise EmptyPoolError("contrastive pretraining needs a nonempty pool")
    init_seed, order_rng, aug_seed = _seed_streams(seed)
    torch.manual_seed(init_seed)
    spec = BackboneSpec(cfg.architecture)
    backbone = build_backbone(spec)
    model = InfoNCEModel(backbone, cfg) if cfg.method == "infonce-queue" else StopGradientModel(backbone, cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)
    batch = max(1, min(cfg.batch_size, len(pool)))
    steps_per_epoch = math.ceil(len(pool) / batch)
    total = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / max(1, total))))
    policy = cfg.policy(aug_seed)
    history = []
    sink = open(loss_log, "w") if loss_log else None
    last_good = backbone_checkpoint(model.backbone, spec, method=cfg.method, step=0)
    model.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(pool))
            for start in range(0, len(pool), batch):
                if step >= total:
                    break
                idx = order[start:start + batch]
                rng = np.random.default_rng([aug_seed, step])
                v1, v2 = [], []
                for i in idx:
                    v1.append(augment_pair(pool[i], None, policy, rng)[0])
                    v2.append(augment_pair(pool[i], None, policy, rng)[0])
                loss = model.loss(_to_batch(v1), _to_batch(v2))
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_good, step=step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                rec = {"step": step, "epoch": epoch, "loss": float(loss.detach()), "lr": opt.param_groups[0]["lr"]}
                history.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                last_good = backbone_checkpoint(model.backbone, spec, method=cfg.method, step=step + 1)
                step += 1
    finally:
        if sink:
            sink.close()
    return last_good, history
