"""Template-matching baselines: exhaustive stride-2 sliding-window search
with gray-scale similarities (MSE, cosine, NCC) and autoencoder
feature-space similarities (MSE, cosine).

Every stride-aligned window fully inside the volume is scored; feature
similarities run one full encoder forward per window (batched for
throughput, no shared convolutional computation).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, TrainingDivergedError, UndefinedSimilarityError
from .locator import EXTREME_POINT_NAMES, SupportAnnotation
from .pnet import ProjectionNet, DEFAULT_WIDTHS
from .volgrid import BBox3D, Patch, Volume, crop_patch

GS_KINDS = ("gs_mse", "gs_cosine", "gs_ncc")
FM_KINDS = ("fm_mse", "fm_cosine")
LOWER_IS_BETTER = {"gs_mse": True, "gs_cosine": False, "gs_ncc": False,
                   "fm_mse": True, "fm_cosine": False}

AE_CHECKPOINT_VERSION = 1


@dataclass
class MatchResult:
    best_center: np.ndarray  # voxel coordinates of the best window center
    best_score: float
    lower_is_better: bool
    wall_time: float
    windows: int


def _patch_data(p) -> np.ndarray:
    return np.asarray(p.data if isinstance(p, Patch) else p, dtype=np.float64)


def similarity(a, b, kind: str) -> float:
    """Gray-scale similarity between two equally shaped patches."""
    x, y = _patch_data(a), _patch_data(b)
    if x.shape != y.shape:
        raise ConfigError(f"patch shapes differ: {x.shape} vs {y.shape}")
    x, y = x.ravel(), y.ravel()
    if kind == "gs_mse":
        return float(((x - y) ** 2).mean())
    if kind == "gs_cosine":
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 or ny == 0.0:
            raise UndefinedSimilarityError("cosine undefined for zero-norm patch")
        return float(x @ y / (nx * ny))
    if kind == "gs_ncc":
        sx, sy = x.std(), y.std()
        if sx == 0.0 or sy == 0.0:
            raise UndefinedSimilarityError("NCC undefined for zero-variance patch")
        return float((((x - x.mean()) / sx) * ((y - y.mean()) / sy)).mean())
    raise ConfigError(f"unknown similarity kind {kind!r}")


def window_grid_count(vol_shape, patch_shape, stride: int) -> int:
    """Closed-form count of stride-aligned windows fully inside the grid."""
    return int(
        np.prod(
            [(v - p) // stride + 1 for v, p in zip(vol_shape, patch_shape)]
        )
    )


def sliding_window_search(
    test_vol: Volume,
    support_patch: Patch,
    kind: str,
    stride: int = 2,
    encoder: "AutoEncoder | None" = None,
    fm_batch: int = 64,
) -> MatchResult:
    """Exhaustive stride-aligned search for the window most similar to the
    support patch.  Ties break toward the lowest (z, y, x) center."""
    shape = np.array(test_vol.shape)
    pshape = np.array(support_patch.shape)
    if np.any(pshape > shape):
        raise ConfigError(
            f"support patch {tuple(pshape)} larger than volume {tuple(shape)}"
        )
    if kind in FM_KINDS:
        if encoder is None:
            raise ConfigError(f"{kind} requires a trained autoencoder")
        return _fm_search(test_vol, support_patch, kind, stride, encoder, fm_batch)
    if kind not in GS_KINDS:
        raise ConfigError(f"unknown similarity kind {kind!r}")

    t0 = time.perf_counter()
    template = support_patch.data.astype(np.float64).ravel()
    t_norm = np.linalg.norm(template)
    t_std, t_mean = template.std(), template.mean()
    if kind == "gs_cosine" and t_norm == 0.0:
        raise UndefinedSimilarityError("cosine undefined for zero-norm template")
    if kind == "gs_ncc":
        if t_std == 0.0:
            raise UndefinedSimilarityError(
                "NCC undefined for zero-variance template"
            )
        template_z = (template - t_mean) / t_std

    data = test_vol.data.astype(np.float64)
    lower = LOWER_IS_BETTER[kind]
    best_score = np.inf if lower else -np.inf
    best_start = None
    windows = 0
    for z in range(0, shape[0] - pshape[0] + 1, stride):
        for y in range(0, shape[1] - pshape[1] + 1, stride):
            for x in range(0, shape[2] - pshape[2] + 1, stride):
                w = data[z : z + pshape[0], y : y + pshape[1], x : x + pshape[2]].ravel()
                windows += 1
                if kind == "gs_mse":
                    score = ((w - template) ** 2).mean()
                elif kind == "gs_cosine":
                    w_norm = np.linalg.norm(w)
                    if w_norm == 0.0:
                        continue
                    score = w @ template / (w_norm * t_norm)
                else:  # gs_ncc
                    w_std = w.std()
                    if w_std == 0.0:
                        continue
                    score = (((w - w.mean()) / w_std) * template_z).mean()
                if (score < best_score) if lower else (score > best_score):
                    best_score = score
                    best_start = (z, y, x)
    if best_start is None:
        raise UndefinedSimilarityError(f"no valid window for {kind}")
    center = np.array(best_start, dtype=np.float64) + pshape // 2
    return MatchResult(
        best_center=center,
        best_score=float(best_score),
        lower_is_better=lower,
        wall_time=time.perf_counter() - t0,
        windows=windows,
    )


def _window_starts(shape, pshape, stride):
    for z in range(0, shape[0] - pshape[0] + 1, stride):
        for y in range(0, shape[1] - pshape[1] + 1, stride):
            for x in range(0, shape[2] - pshape[2] + 1, stride):
                yield (z, y, x)


def _fm_search(test_vol, support_patch, kind, stride, encoder, fm_batch):
    t0 = time.perf_counter()
    shape = np.array(test_vol.shape)
    pshape = np.array(support_patch.shape)
    template_latent = encoder.encode_array(support_patch.data)
    t_norm = np.linalg.norm(template_latent)
    if kind == "fm_cosine" and t_norm == 0.0:
        raise UndefinedSimilarityError("cosine undefined for zero-norm latent")

    data = test_vol.data
    lower = LOWER_IS_BETTER[kind]
    best_score = np.inf if lower else -np.inf
    best_start = None
    windows = 0
    starts = list(_window_starts(shape, pshape, stride))
    for i in range(0, len(starts), fm_batch):
        chunk = starts[i : i + fm_batch]
        batch = np.stack(
            [
                data[z : z + pshape[0], y : y + pshape[1], x : x + pshape[2]]
                for z, y, x in chunk
            ]
        )
        latents = encoder.encode_batch(batch)
        for start, latent in zip(chunk, latents):
            windows += 1
            if kind == "fm_mse":
                score = float(((latent - template_latent) ** 2).mean())
            else:
                norm = np.linalg.norm(latent)
                if norm == 0.0:
                    continue
                score = float(latent @ template_latent / (norm * t_norm))
            if (score < best_score) if lower else (score > best_score):
                best_score = score
                best_start = start
    if best_start is None:
        raise UndefinedSimilarityError(f"no valid window for {kind}")
    center = np.array(best_start, dtype=np.float64) + pshape // 2
    return MatchResult(
        best_center=center,
        best_score=float(best_score),
        lower_is_better=lower,
        wall_time=time.perf_counter() - t0,
        windows=windows,
    )


class AutoEncoder(nn.Module):
    """Patch autoencoder whose encoder mirrors the projection trunk; the
    latent is the global-average-pooled top feature map."""

    def __init__(
        self,
        patch_shape: tuple[int, int, int],
        widths: tuple[int, ...] = DEFAULT_WIDTHS,
        window: tuple[float, float] = (0.0, 1.0),
    ):
        super().__init__()
        trunk_net = ProjectionNet(widths=widths)
        self.encoder = trunk_net.trunk
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.latent_dim = widths[-1]
        self.patch_shape = tuple(patch_shape)
        self.widths = tuple(widths)
        self.window = (float(window[0]), float(window[1]))

        # Decoder: expand the latent, then upsample back to the patch shape.
        dec_widths = list(widths[::-1]) + [16]
        layers: list[nn.Module] = []
        for cin, cout in zip(dec_widths[:-1], dec_widths[1:]):
            layers += [
                nn.ConvTranspose3d(cin, cout, 2, stride=2),
                nn.GroupNorm(min(8, cout), cout),
                nn.ReLU(inplace=True),
            ]
        layers.append(nn.Conv3d(dec_widths[-1], 1, 3, padding=1))
        self.decoder = nn.Sequential(*layers)
        self.latent_fc = nn.Linear(self.latent_dim, self.latent_dim)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.encoder(x)).flatten(1)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        h = self.latent_fc(latent).reshape(-1, self.latent_dim, 1, 1, 1)
        out = self.decoder(h)
        return F.interpolate(
            out, size=self.patch_shape, mode="trilinear", align_corners=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def _normalize(self, arrays: np.ndarray) -> torch.Tensor:
        lo, hi = self.window
        data = (np.clip(arrays.astype(np.float32), lo, hi) - lo) / (hi - lo)
        return torch.from_numpy(data).unsqueeze(1)

    def encode_array(self, patch_data: np.ndarray) -> np.ndarray:
        return self.encode_batch(patch_data[None])[0]

    def encode_batch(self, patch_stack: np.ndarray) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            latents = self.encode(self._normalize(patch_stack))
        return latents.numpy().astype(np.float64)


@dataclass
class AutoEncoderConfig:
    patch_shape: tuple[int, int, int] = (16, 32, 32)
    epochs: int = 20
    batch_size: int = 6
    learning_rate: float = 1e-3
    patches_per_epoch: int = 96
    seed: int = 0
    window: tuple[float, float] = (0.0, 1.0)
    widths: tuple[int, ...] = DEFAULT_WIDTHS


def train_autoencoder(
    cfg: AutoEncoderConfig, volumes: list[Volume], progress: bool = False
) -> tuple[AutoEncoder, list[dict]]:
    """Train the patch autoencoder on randomly cropped patches."""
    if not volumes:
        raise ConfigError("no training volumes")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = AutoEncoder(cfg.patch_shape, widths=cfg.widths, window=cfg.window)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    steps = max(cfg.patches_per_epoch // cfg.batch_size, 1)

    log = []
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(steps):
            batch = []
            for _ in range(cfg.batch_size):
                vol = volumes[rng.integers(len(volumes))]
                center = rng.uniform(
                    np.zeros(3), np.array(vol.shape, dtype=np.float64) - 1
                )
                batch.append(crop_patch(vol, center, cfg.patch_shape).data)
            x = model._normalize(np.stack(batch))
            recon = model(x)
            loss = F.mse_loss(recon, x)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"autoencoder loss non-finite at epoch {epoch}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        log.append({"epoch": epoch, "mean_loss": float(np.mean(losses))})
        if progress:
            print(
                f"[autoencoder] epoch {epoch + 1}/{cfg.epochs} "
                f"mean_loss={log[-1]['mean_loss']:.5f}"
            )
    model.eval()
    return model, log


def feature_similarity(encoder: AutoEncoder, a, b, kind: str) -> float:
    """Similarity on encoder latents, same conventions as the gray-scale
    variants.  Independent of the decoder parameters."""
    if kind not in FM_KINDS:
        raise ConfigError(f"unknown feature similarity kind {kind!r}")
    la = encoder.encode_array(_patch_data(a).astype(np.float32))
    lb = encoder.encode_array(_patch_data(b).astype(np.float32))
    if kind == "fm_mse":
        return float(((la - lb) ** 2).mean())
    na, nb = np.linalg.norm(la), np.linalg.norm(lb)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine undefined for zero-norm latent")
    return float(la @ lb / (na * nb))


def baseline_detect_organ(
    test_vol: Volume,
    support_volume: Volume,
    support_mask: np.ndarray,
    kind: str,
    stride: int = 2,
    encoder: AutoEncoder | None = None,
    patch_shape: tuple[int, int, int] = (16, 32, 32),
) -> tuple[BBox3D, float, int]:
    """Locate the six extreme points by sliding-window matching, exactly as
    the regression pipeline does, and assemble the box.

    Returns (box, total wall time, total windows evaluated)."""
    support = SupportAnnotation.from_organ_mask(
        support_volume, support_mask, "extreme"
    )
    finals = {}
    total_time = 0.0
    total_windows = 0
    for name in EXTREME_POINT_NAMES:
        patch = crop_patch(support_volume, support.landmarks[name], patch_shape)
        result = sliding_window_search(
            test_vol, patch, kind, stride=stride, encoder=encoder
        )
        finals[name] = result.best_center * test_vol.spacing
        total_time += result.wall_time
        total_windows += result.windows
    lo = np.array([finals["z_min"][0], finals["y_min"][1], finals["x_min"][2]])
    hi = np.array([finals["z_max"][0], finals["y_max"][1], finals["x_max"][2]])
    box = BBox3D(min_corner=np.minimum(lo, hi), max_corner=np.maximum(lo, hi))
    return box, total_time, total_windows


def save_autoencoder(model: AutoEncoder, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": AE_CHECKPOINT_VERSION,
            "patch_shape": model.patch_shape,
            "widths": model.widths,
            "window": model.window,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_autoencoder(path: str | Path) -> AutoEncoder:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format_version") != AE_CHECKPOINT_VERSION:
        raise ConfigError(
            f"{path}: unsupported autoencoder checkpoint version "
            f"{blob.get('format_version')}"
        )
    model = AutoEncoder(
        tuple(blob["patch_shape"]),
        widths=tuple(blob["widths"]),
        window=tuple(blob["window"]),
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
