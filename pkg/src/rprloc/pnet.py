"""Projection network, bounded offset head and two-stage training.

The network maps a patch to a 3D latent vector p; the predicted offset
between a query and a support patch is r * tanh(p_s - p_q), so every
component is strictly inside (-r, r).  Training minimizes the squared
error between predicted and ground-truth physical offsets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, GeometryError, TrainingDivergedError
from .pairsampler import StageConfig, sample_pair
from .volgrid import Patch, Volume

CHECKPOINT_VERSION = 1

DEFAULT_WIDTHS = (16, 32, 64, 128, 128)
DEFAULT_FC_HIDDEN = 64

# Desk-scale defaults; paper-scale presets live in presets.py.
DESK_PATCH_SHAPE = (16, 32, 32)
DESK_FINE_RADIUS = 20.0


class ProjectionNet(nn.Module):
    """Conv trunk + fully connected head projecting a patch to R^3.

    Each block applies two 3x3x3 conv/norm/ReLU layers followed by a
    stride-2 downsampling conv; GroupNorm keeps normalization stable at
    the small batch sizes used for training.
    """

    def __init__(
        self,
        widths: tuple[int, ...] = DEFAULT_WIDTHS,
        fc_hidden: int = DEFAULT_FC_HIDDEN,
        out_dim: int = 3,
    ):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 1
        for w in widths:
            layers += [
                nn.Conv3d(in_ch, w, 3, padding=1),
                nn.GroupNorm(_groups(w), w),
                nn.ReLU(inplace=True),
                nn.Conv3d(w, w, 3, padding=1),
                nn.GroupNorm(_groups(w), w),
                nn.ReLU(inplace=True),
                nn.MaxPool3d(2, ceil_mode=True),
            ]
            in_ch = w
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Sequential(
            nn.Linear(in_ch, fc_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(fc_hidden, out_dim),
        )
        self.widths = tuple(widths)
        self.fc_hidden = fc_hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.pool(self.trunk(x)).flatten(1)
        return self.head(feat)


def _groups(channels: int) -> int:
    return min(8, channels)


@dataclass
class TrainConfig:
    stage: str  # "coarse" | "fine"
    r: float  # mm
    patch_shape: tuple[int, int, int] = DESK_PATCH_SHAPE
    epochs: int = 30
    batch_size: int = 6
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    pairs_per_epoch: int = 960
    seed: int = 0
    window: tuple[float, float] = (0.0, 1.0)
    out_of_range: str = "reject"
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    fc_hidden: int = DEFAULT_FC_HIDDEN
    deterministic: bool = False

    def __post_init__(self):
        if self.stage not in ("coarse", "fine"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        for name in ("epochs", "batch_size", "pairs_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.r > 0:
            raise ConfigError("stage radius must be positive")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ProjectionModel:
    """A trained (or freshly initialized) projection model for one stage."""

    def __init__(
        self,
        net: ProjectionNet,
        r: float,
        patch_shape: tuple[int, int, int],
        window: tuple[float, float] = (0.0, 1.0),
        stage: str = "coarse",
        provenance: dict | None = None,
    ):
        if not r > 0:
            raise ConfigError("stage radius must be positive")
        self.net = net
        self.r = float(r)
        self.patch_shape = tuple(int(s) for s in patch_shape)
        self.window = (float(window[0]), float(window[1]))
        self.stage = stage
        self.provenance = provenance or {}
        self.net.eval()

    def _check_shape(self, patch: Patch) -> None:
        if tuple(patch.shape) != self.patch_shape:
            raise GeometryError(
                f"patch shape {patch.shape} does not match model "
                f"patch shape {self.patch_shape}"
            )

    def _to_tensor(self, patches: list[Patch]) -> torch.Tensor:
        lo, hi = self.window
        stack = np.stack([p.data for p in patches]).astype(np.float32)
        stack = (np.clip(stack, lo, hi) - lo) / (hi - lo)
        return torch.from_numpy(stack).unsqueeze(1)

    def project_batch(self, patches: list[Patch]) -> np.ndarray:
        """Latent vectors for a list of patches, shape (N, 3)."""
        for p in patches:
            self._check_shape(p)
        self.net.eval()
        with torch.no_grad():
            out = self.net(self._to_tensor(patches))
        return out.numpy().astype(np.float64)

    def project(self, patch: Patch) -> np.ndarray:
        return self.project_batch([patch])[0]

    def predict_offset(self, query: Patch, support: Patch) -> np.ndarray:
        """Bounded offset r * tanh(p_s - p_q), mm along (z, y, x)."""
        latents = self.project_batch([query, support])
        return self.offset_from_latents(latents[0], latents[1])

    def offset_from_latents(self, p_q: np.ndarray, p_s: np.ndarray) -> np.ndarray:
        # tanh rounds to exactly 1.0 for large arguments; clamp to keep the
        # strict |offset| < r contract.
        bound = np.nextafter(self.r, 0.0)
        return np.clip(self.r * np.tanh(np.asarray(p_s) - np.asarray(p_q)), -bound, bound)


def offset_loss(predicted, target) -> float:
    """Squared error between two offsets: ||d - d'||^2 in mm^2."""
    d = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(t))):
        raise GeometryError("offsets must be finite")
    return float(((d - t) ** 2).sum())


def batch_offset_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample squared error, reduced by mean over the batch."""
    return ((pred - target) ** 2).sum(dim=1).mean()


def train_stage(
    cfg: TrainConfig,
    volumes: list[Volume],
    log_path: str | Path | None = None,
    progress: bool = False,
) -> tuple[ProjectionModel, list[dict]]:
    """Train one stage model from scratch on the given volumes.

    Pairs are sampled on the fly each epoch.  The learning rate starts at
    ``cfg.learning_rate`` and, with the default cosine schedule, decays to
    zero over the epochs.  Returns the model and a
    per-epoch log [{epoch, mean_loss, wall_time}].  Raises
    :class:`TrainingDivergedError` on a non-finite loss.
    """
    if not volumes:
        raise ConfigError("no training volumes")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    net = ProjectionNet(widths=cfg.widths, fc_hidden=cfg.fc_hidden)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=cfg.epochs
        )
    stage_cfg = StageConfig(
        stage=cfg.stage,
        r=cfg.r,
        patch_shape=cfg.patch_shape,
        out_of_range=cfg.out_of_range,
    )
    lo, hi = cfg.window
    steps = max(cfg.pairs_per_epoch // cfg.batch_size, 1)

    log: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps):
            samples = [
                sample_pair(volumes[rng.integers(len(volumes))], stage_cfg, rng)
                for _ in range(cfg.batch_size)
            ]
            patches = np.stack(
                [s.query.data for s in samples] + [s.support.data for s in samples]
            ).astype(np.float32)
            patches = (np.clip(patches, lo, hi) - lo) / (hi - lo)
            x = torch.from_numpy(patches).unsqueeze(1)
            target = torch.from_numpy(
                np.stack([s.gt_offset for s in samples]).astype(np.float32)
            )

            latents = net(x)
            p_q, p_s = latents[: cfg.batch_size], latents[cfg.batch_size :]
            pred = cfg.r * torch.tanh(p_s - p_q)
            loss = batch_offset_loss(pred, target)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; lower the learning "
                    f"rate or check the input data"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        if scheduler is not None:
            scheduler.step()
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)),
            "wall_time": time.perf_counter() - t0,
        }
        log.append(entry)
        if progress:
            print(
                f"[{cfg.stage}] epoch {epoch + 1}/{cfg.epochs} "
                f"mean_loss={entry['mean_loss']:.2f}"
            )

    if log_path is not None:
        write_loss_log(log, log_path)
    model = ProjectionModel(
        net,
        r=cfg.r,
        patch_shape=cfg.patch_shape,
        window=cfg.window,
        stage=cfg.stage,
        provenance={"config_hash": cfg.config_hash(), "epochs": cfg.epochs},
    )
    return model, log


def write_loss_log(log: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "mean_loss", "wall_time"])
        writer.writeheader()
        writer.writerows(log)


def save_checkpoint(model: ProjectionModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "stage": model.stage,
            "r": model.r,
            "patch_shape": model.patch_shape,
            "window": model.window,
            "widths": model.net.widths,
            "fc_hidden": model.net.fc_hidden,
            "provenance": model.provenance,
            "state_dict": model.net.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> ProjectionModel:
    path = Path(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"{path}: unsupported checkpoint version {blob.get('format_version')}"
        )
    net = ProjectionNet(widths=tuple(blob["widths"]), fc_hidden=blob["fc_hidden"])
    net.load_state_dict(blob["state_dict"])
    return ProjectionModel(
        net,
        r=blob["r"],
        patch_shape=tuple(blob["patch_shape"]),
        window=tuple(blob["window"]),
        stage=blob["stage"],
        provenance=blob["provenance"],
    )
