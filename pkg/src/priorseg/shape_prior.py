"""Adversarially learned shape prior over 64x64 soft mask grids.

A small convolutional generator and critic are trained with the Wasserstein
objective plus a gradient penalty on interpolates between real and generated
masks.  After training the generator is discarded; the frozen critic scores
mask plausibility, and its negated mean score serves as a differentiable
regularizer on predicted soft masks.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint

GRID = 64


@dataclass(frozen=True)
class GeneratorSpec:
    """Latent vector to 64x64 mask through five transposed-conv stages."""

    latent_dim: int = 128
    base_width: int = 64

    @property
    def stage_widths(self) -> tuple[int, ...]:
        w = self.base_width
        return (8 * w, 4 * w, 2 * w, w, 1)


@dataclass(frozen=True)
class DiscriminatorSpec:
    """64x64 grid to scalar score through five strided convs."""

    base_width: int = 64
    negative_slope: float = 0.2

    @property
    def stage_widths(self) -> tuple[int, ...]:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w, 1)


@dataclass(frozen=True)
class GanTrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 5000
    gp_weight: float = 10.0
    critic_steps: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")


class MaskGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        widths = spec.stage_widths
        layers: list[nn.Module] = []
        in_ch = spec.latent_dim
        for i, out_ch in enumerate(widths):
            first = i == 0
            last = i == len(widths) - 1
            layers.append(
                nn.ConvTranspose2d(
                    in_ch, out_ch,
                    kernel_size=4,
                    stride=1 if first else 2,
                    padding=0 if first else 1,
                    bias=last,
                )
            )
            if last:
                layers.append(nn.Sigmoid())
            else:
                layers.append(nn.BatchNorm2d(out_ch))
                layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        self.net = nn.Sequential(*layers)
        self.spec = spec

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 2:
            z = z[:, :, None, None]
        return self.net(z)  # [B,1,64,64] in [0,1]


class MaskCritic(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        widths = spec.stage_widths
        layers: list[nn.Module] = []
        in_ch = 1
        for i, out_ch in enumerate(widths):
            last = i == len(widths) - 1
            if last:
                # 4x4 spatial input at this point; a valid conv leaves [B,1,1,1].
                layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=1, padding=0))
            else:
                layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1))
                layers.append(nn.LeakyReLU(spec.negative_slope, inplace=True))
            in_ch = out_ch
        self.net = nn.Sequential(*layers)
        self.spec = spec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _as_grid_batch(x)
        return self.net(x).flatten(1).squeeze(1)  # [B]


def _as_grid_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != GRID or x.shape[3] != GRID:
        raise ValueError(f"expected [B,1,{GRID},{GRID}] or [B,{GRID},{GRID}] grids, got {tuple(x.shape)}")
    return x


def build_generator(spec: GeneratorSpec, seed: int) -> MaskGenerator:
    torch.manual_seed(seed)
    return MaskGenerator(spec)


def build_critic(spec: DiscriminatorSpec, seed: int) -> MaskCritic:
    torch.manual_seed(seed)
    return MaskCritic(spec)


def gradient_penalty(
    critic: nn.Module,
    real: torch.Tensor,
    fake: torch.Tensor,
    rng: torch.Generator,
) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Sampled on per-example convex combinations eps*real + (1-eps)*fake with
    eps uniform in [0, 1].
    """
    real = _as_grid_batch(real)
    fake = _as_grid_batch(fake)
    if real.shape != fake.shape:
        raise ValueError(f"real/fake batch shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    mixed, _ = _interpolate(real, fake, rng)
    mixed.requires_grad_(True)
    scores = critic(mixed)
    if not scores.requires_grad:
        # Output is independent of the input, so the input-gradient is zero
        # everywhere and the penalty is exactly (0 - 1)^2.
        return torch.ones((), dtype=mixed.dtype, device=mixed.device)
    grads = torch.autograd.grad(
        outputs=scores.sum(), inputs=mixed, create_graph=True, retain_graph=True
    )[0]
    norms = grads.flatten(1).norm(2, dim=1)  # [B]
    return ((norms - 1.0) ** 2).mean()


def _interpolate(
    real: torch.Tensor, fake: torch.Tensor, rng: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype, device=real.device)
    return eps * real + (1.0 - eps) * fake.detach(), eps


def critic_loss(
    critic: nn.Module,
    real: torch.Tensor,
    fake: torch.Tensor,
    rng: torch.Generator,
    gp_weight: float = 10.0,
) -> torch.Tensor:
    loss, _, _ = _critic_terms(critic, real, fake, rng, gp_weight)
    return loss


def _critic_terms(
    critic: nn.Module,
    real: torch.Tensor,
    fake: torch.Tensor,
    rng: torch.Generator,
    gp_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    real = _as_grid_batch(real)
    fake = _as_grid_batch(fake).detach()
    score_fake = critic(fake).mean()
    score_real = critic(real).mean()
    distance = score_fake - score_real
    penalty = gradient_penalty(critic, real, fake, rng)
    loss = distance + gp_weight * penalty
    if not torch.isfinite(loss):
        raise ValueError(
            "non-finite critic loss: "
            f"fake-mean={score_fake.detach().item()!r} real-mean={score_real.detach().item()!r} "
            f"penalty={penalty.detach().item()!r}"
        )
    return loss, distance, penalty


def generator_loss(critic: nn.Module, fake: torch.Tensor) -> torch.Tensor:
    """Negated mean critic score of generated grids."""
    loss = -critic(_as_grid_batch(fake)).mean()
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite generator loss: {loss.detach().item()!r}")
    return loss


class ShapePriorHandle:
    """Frozen critic plus training metadata; scores mask plausibility."""

    def __init__(self, critic: MaskCritic, meta: dict[str, Any], history: list[dict[str, float]] | None = None):
        critic.eval()
        critic.requires_grad_(False)
        self.critic = critic
        self.meta = meta
        self.history = history or []

    def score(self, grids: torch.Tensor | np.ndarray) -> torch.Tensor:
        """Per-grid plausibility scores (higher means more mask-like)."""
        if isinstance(grids, np.ndarray):
            grids = torch.from_numpy(np.ascontiguousarray(grids)).float()
        return self.critic(grids)

    def save(self, path: str | Path) -> Path:
        arrays = checkpoint.module_arrays(self.critic, prefix="critic.")
        return checkpoint.save_npz(path, arrays, dict(self.meta, kind="shape_prior"))


def shape_prior_loss(handle: ShapePriorHandle, predicted: torch.Tensor) -> torch.Tensor:
    """Negated mean critic score of predicted soft masks; gradients reach the
    prediction but never the critic parameters."""
    return -handle.score(predicted).mean()


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last finite state."""

    def __init__(self, message: str, handle: ShapePriorHandle | None = None):
        super().__init__(message)
        self.handle = handle


def _masks_to_tensor(masks: Sequence[np.ndarray] | np.ndarray) -> torch.Tensor:
    if isinstance(masks, np.ndarray):
        stack = masks.astype(np.float32)
    else:
        stack = np.stack([np.asarray(m, dtype=np.float32) for m in masks])
    tensor = torch.from_numpy(np.ascontiguousarray(stack))
    return _as_grid_batch(tensor)


def train_shape_prior(
    masks: Sequence[np.ndarray] | np.ndarray,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    cfg: GanTrainConfig,
) -> ShapePriorHandle:
    """Alternate critic and generator RMSprop updates over the mask pool.

    ``cfg.critic_steps`` critic updates precede each generator update.  One
    epoch is one shuffled pass over the masks; trailing partial batches are
    dropped.  Per-epoch mean losses are recorded on the returned handle's
    ``history``.  With ``epochs == 0`` the untrained critic is returned.
    """
    data = _masks_to_tensor(masks)
    count = data.shape[0]
    if count < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} masks, got {count}")

    generator = build_generator(gen_spec, cfg.seed)
    critic = build_critic(disc_spec, cfg.seed + 1)
    opt_d = torch.optim.RMSprop(critic.parameters(), lr=cfg.learning_rate)
    opt_g = torch.optim.RMSprop(generator.parameters(), lr=cfg.learning_rate)

    data_rng = np.random.default_rng(cfg.seed)
    noise_rng = torch.Generator().manual_seed(cfg.seed)

    meta = {
        "generator_spec": asdict(gen_spec),
        "discriminator_spec": asdict(disc_spec),
        "train_config": asdict(cfg),
        "trained_on": count,
    }

    history: list[dict[str, float]] = []
    last_good: dict[str, torch.Tensor] | None = None
    step = 0
    generator.train()
    critic.train()
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(count)
        sums = {"critic_loss": 0.0, "generator_loss": 0.0, "gp_term": 0.0}
        batches = 0
        gen_updates = 0
        try:
            for start in range(0, count - cfg.batch_size + 1, cfg.batch_size):
                real = data[order[start:start + cfg.batch_size]]
                z = torch.randn(cfg.batch_size, gen_spec.latent_dim, 1, 1, generator=noise_rng)
                with torch.no_grad():
                    fake = generator(z)
                loss_d, _, penalty = _critic_terms(critic, real, fake, noise_rng, cfg.gp_weight)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                sums["critic_loss"] += float(loss_d.detach())
                sums["gp_term"] += float(penalty.detach())
                batches += 1
                step += 1

                if step % cfg.critic_steps == 0:
                    z = torch.randn(cfg.batch_size, gen_spec.latent_dim, 1, 1, generator=noise_rng)
                    loss_g = generator_loss(critic, generator(z))
                    opt_g.zero_grad()
                    loss_g.backward()
                    opt_g.step()
                    sums["generator_loss"] += float(loss_g.detach())
                    gen_updates += 1
        except ValueError as err:
            handle = None
            if last_good is not None:
                restored = build_critic(disc_spec, cfg.seed + 1)
                restored.load_state_dict(last_good)
                handle = ShapePriorHandle(restored, dict(meta, epochs_completed=epoch), history)
            raise TrainingDiverged(f"shape-prior training diverged in epoch {epoch}: {err}", handle) from err

        history.append(
            {
                "epoch": float(epoch),
                "critic_loss": sums["critic_loss"] / max(batches, 1),
                "generator_loss": sums["generator_loss"] / max(gen_updates, 1),
                "gp_term": sums["gp_term"] / max(batches, 1),
            }
        )
        last_good = copy.deepcopy(critic.state_dict())

    return ShapePriorHandle(critic, dict(meta, epochs_completed=cfg.epochs), history)


def save_history_csv(history: Sequence[dict[str, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "critic_loss", "generator_loss", "gp_term"])
        for row in history:
            writer.writerow(
                [int(row["epoch"]), repr(row["critic_loss"]), repr(row["generator_loss"]), repr(row["gp_term"])]
            )
    return path


def load_shape_prior(path: str | Path) -> ShapePriorHandle:
    arrays, meta = checkpoint.load_npz(path)
    checkpoint.expect_kind(meta, "shape_prior", path)
    spec = DiscriminatorSpec(**meta["discriminator_spec"])
    critic = MaskCritic(spec)
    checkpoint.load_module_arrays(critic, arrays, prefix="critic.")
    return ShapePriorHandle(critic, meta)
