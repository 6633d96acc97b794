"""Gradient-alignment training.

The classifier is fitted to soft pseudo labels with a Bernoulli KL loss.
Every ``pl_update_frequency`` epochs the network is frozen and the latent
pseudo-label parameters take one step along the negative gradient of the
same loss with respect to the labels, weighted element-wise by a Gaussian
bump centred at 0.5 so that uncertain labels move the most.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import DatasetManifest, load_image
from .errors import BackendError, ConfigError, InputError, NumericError, TrainingDivergedError
from .metrics import map_score

log = logging.getLogger(__name__)

EPS = 1e-4
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CSV_FIELDS = ("epoch", "train_map", "pl_map", "val_map", "loss")


# --- objective --------------------------------------------------------------

def _check_open_unit(name: str, x: np.ndarray) -> None:
    if not np.all((x > 0) & (x < 1)):
        raise NumericError(f"{name} must lie strictly inside (0, 1)")


def kl_loss(y_p, y_u) -> float:
    """Mean per-element Bernoulli KL(y_u || y_p)."""
    y_p = np.asarray(y_p, dtype=np.float64)
    y_u = np.asarray(y_u, dtype=np.float64)
    if y_p.shape != y_u.shape:
        raise InputError(f"shape mismatch: y_p {y_p.shape} vs y_u {y_u.shape}")
    _check_open_unit("y_p", y_p)
    _check_open_unit("y_u", y_u)
    kl = y_u * np.log(y_u / y_p) + (1 - y_u) * np.log((1 - y_u) / (1 - y_p))
    return float(kl.mean())


def pseudo_label_gradient(y_p, y_u) -> np.ndarray:
    """d kl_loss / d y_u with y_p held fixed."""
    y_p = np.asarray(y_p, dtype=np.float64)
    y_u = np.asarray(y_u, dtype=np.float64)
    if y_p.shape != y_u.shape:
        raise InputError(f"shape mismatch: y_p {y_p.shape} vs y_u {y_u.shape}")
    _check_open_unit("y_p", y_p)
    _check_open_unit("y_u", y_u)
    return (np.log(y_u / y_p) - np.log((1 - y_u) / (1 - y_p))) / y_u.size


def gaussian_weight(y_u, sigma: float = 1.0, normalized: bool = False) -> np.ndarray:
    """exp(-(y - 0.5)^2 / (2 sigma^2)), optionally divided by sigma * sqrt(2 pi)."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    y = np.asarray(y_u, dtype=np.float64)
    w = np.exp(-((y - 0.5) ** 2) / (2.0 * sigma ** 2))
    if normalized:
        w = w / (sigma * math.sqrt(2.0 * math.pi))
    return w


def _categorical_gradient(y_p: np.ndarray, y_u: np.ndarray) -> np.ndarray:
    yu = torch.tensor(y_u, dtype=torch.float64, requires_grad=True)
    q = yu / yu.sum(dim=1, keepdim=True)
    p = torch.tensor(y_p, dtype=torch.float64)
    p = p / p.sum(dim=1, keepdim=True)
    loss = (q * (q.log() - p.log())).sum(dim=1).mean()
    loss.backward()
    return yu.grad.numpy()


@dataclass(eq=False)
class LatentPseudoLabels:
    """Trainable latents and the pseudo labels derived from them.

    ``mapping='clamp'`` keeps the labels equal to the latents clipped into
    [EPS, 1 - EPS]; ``mapping='sigmoid'`` stores logits instead.
    """

    latent: np.ndarray
    mapping: str = "clamp"

    def __post_init__(self):
        if self.mapping not in ("clamp", "sigmoid"):
            raise ConfigError(f"latent mapping must be 'clamp' or 'sigmoid', got {self.mapping!r}")
        self.latent = np.array(self.latent, dtype=np.float64)
        if self.latent.ndim != 2:
            raise InputError(f"latent matrix must be 2-D, got shape {self.latent.shape}")

    @classmethod
    def from_initial(cls, scores, mapping: str = "clamp") -> "LatentPseudoLabels":
        y = np.clip(np.asarray(scores, dtype=np.float64), EPS, 1 - EPS)
        if mapping == "sigmoid":
            return cls(np.log(y) - np.log1p(-y), mapping)
        return cls(y, mapping)

    @property
    def shape(self):
        return self.latent.shape

    def labels(self, rows=None) -> np.ndarray:
        z = self.latent if rows is None else self.latent[rows]
        if self.mapping == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-z))
        else:
            y = z
        return np.clip(y, EPS, 1 - EPS)

    def copy(self) -> "LatentPseudoLabels":
        return LatentPseudoLabels(self.latent.copy(), self.mapping)

    def step(self, y_p, sigma: float = 1.0, rows=None, *, normalized: bool = False,
             loss: str = "bernoulli") -> None:
        """In-place latent update on ``rows`` (all rows when None)."""
        y_u = self.labels(rows)
        y_p = np.asarray(y_p, dtype=np.float64)
        if y_p.shape != y_u.shape:
            raise InputError(f"shape mismatch: predictions {y_p.shape} vs pseudo labels {y_u.shape}")
        y_p = np.clip(y_p, EPS, 1 - EPS)
        if loss == "categorical":
            grad = _categorical_gradient(y_p, y_u)
        else:
            grad = pseudo_label_gradient(y_p, y_u)
        delta = gaussian_weight(y_u, sigma, normalized) * grad
        if rows is None:
            self.latent -= delta
        else:
            self.latent[rows] -= delta


def update_pseudo_labels(latents: LatentPseudoLabels, y_p, sigma: float = 1.0, *,
                         normalized: bool = False) -> LatentPseudoLabels:
    """One descent step on the latents with predictions frozen; returns a new object."""
    out = latents.copy()
    out.step(y_p, sigma, normalized=normalized)
    return out


def kl_loss_from_logits(logits: torch.Tensor, y_u: torch.Tensor, loss: str = "bernoulli") -> torch.Tensor:
    """Network-side loss; equals :func:`kl_loss` at ``sigmoid(logits)``."""
    if loss == "categorical":
        q = y_u / y_u.sum(dim=1, keepdim=True)
        return (q * (q.log() - torch.log_softmax(logits, dim=1))).sum(dim=1).mean()
    logsig = nn.functional.logsigmoid
    kl = y_u * (y_u.log() - logsig(logits)) + (1 - y_u) * (torch.log1p(-y_u) - logsig(-logits))
    return kl.mean()


def predict_probs(logits: torch.Tensor, loss: str = "bernoulli") -> torch.Tensor:
    return torch.softmax(logits, dim=1) if loss == "categorical" else torch.sigmoid(logits)


# --- models -----------------------------------------------------------------

class SmallCNN(nn.Module):
    """Few-layer CNN for desk-scale runs; works at any input size."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(2 * width, n_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


@dataclass
class TrainConfig:
    epochs: int = 20
    pl_update_frequency: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-5
    seed: int = 0
    backbone: str = "resnet101"
    pretrained: str | None = "imagenet"  # 'imagenet', a local state_dict path, or None
    allow_download: bool = False
    image_size: int | None = None  # None: 224 for resnet101, native size for small
    sigma: float = 1.0
    psi_normalized: bool = False
    latent_mapping: str = "clamp"
    optimizer: str = "adam"
    loss: str = "bernoulli"
    pl_batch_size: int | None = None  # None: same as batch_size; 0: whole train set at once
    device: str = "cpu"
    preload: bool = True
    checkpoints: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.pl_update_frequency < 1:
            raise ConfigError("train.pl_update_frequency must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if not self.sigma > 0:
            raise ConfigError("train.sigma must be > 0")
        if self.backbone not in ("small", "resnet101"):
            raise ConfigError(f"unknown backbone {self.backbone!r}; use 'small' or 'resnet101'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("bernoulli", "categorical"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.latent_mapping not in ("clamp", "sigmoid"):
            raise ConfigError(f"unknown latent mapping {self.latent_mapping!r}")


def build_backbone(config: TrainConfig, n_classes: int) -> nn.Module:
    if config.backbone == "small":
        return SmallCNN(n_classes)
    import torchvision

    weights = None
    if config.pretrained == "imagenet":
        if not config.allow_download:
            raise BackendError("ImageNet weights for resnet101 are fetched only with "
                               "train.allow_download=true, or point train.pretrained at a local file")
        weights = torchvision.models.ResNet101_Weights.IMAGENET1K_V1
    model = torchvision.models.resnet101(weights=weights)
    if config.pretrained not in (None, "imagenet"):
        path = Path(config.pretrained)
        if not path.exists():
            raise BackendError(f"backbone weights not found: {path}")
        state = torch.load(path, map_location="cpu")
        model.load_state_dict(state)
    model.fc = nn.Linear(model.fc.in_features, n_classes)
    return model


# --- data -------------------------------------------------------------------

class ImageSet(torch.utils.data.Dataset):
    """Images of a manifest as normalized float tensors, with their row index."""

    def __init__(self, paths: Sequence[str], size: int | None, mean, std, preload: bool = True):
        self.paths = list(paths)
        self.size = size
        self.mean = torch.tensor(mean).view(3, 1, 1)
        self.std = torch.tensor(std).view(3, 1, 1)
        self._cache = [self._load(i) for i in range(len(self.paths))] if preload else None

    def _load(self, i: int) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(load_image(self.paths[i]))).permute(2, 0, 1).float() / 255
        if self.size is not None and tuple(t.shape[1:]) != (self.size, self.size):
            t = nn.functional.interpolate(t[None], size=(self.size, self.size), mode="bilinear",
                                          align_corners=False, antialias=True)[0]
        return (t - self.mean) / self.std

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        x = self._cache[i] if self._cache is not None else self._load(i)
        return x, i


def _image_set(manifest: DatasetManifest, config: TrainConfig) -> ImageSet:
    if config.backbone == "small":
        return ImageSet([s.image_path for s in manifest.samples], config.image_size,
                        (0.5, 0.5, 0.5), (0.5, 0.5, 0.5), config.preload)
    return ImageSet([s.image_path for s in manifest.samples], config.image_size or 224,
                    IMAGENET_MEAN, IMAGENET_STD, config.preload)


# --- training loop ----------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_map: float
    pl_map: float
    val_map: float
    loss: float
    pl_updated: bool = False


@dataclass
class TrainResult:
    model: nn.Module
    latents: LatentPseudoLabels
    log: list[EpochMetrics]
    initial_pl_map: float
    pl_updates: int
    checkpoints: list[Path] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_csv(self.log)

    def summary(self) -> dict:
        last = self.log[-1]
        vals = [m.val_map for m in self.log if not math.isnan(m.val_map)]
        return {
            "epochs": len(self.log), "pl_updates": self.pl_updates,
            "initial_pl_map": self.initial_pl_map,
            "final": {k: _json_float(getattr(last, k)) for k in ("train_map", "pl_map", "val_map", "loss")},
            "best_val_map": max(vals) if vals else None,
        }


def _json_float(x: float) -> float | None:
    return None if math.isnan(x) else float(x)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def metrics_csv(rows: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for m in rows:
        w.writerow([m.epoch, _fmt(m.train_map), _fmt(m.pl_map), _fmt(m.val_map), _fmt(m.loss)])
    return buf.getvalue()


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        return [EpochMetrics(int(r["epoch"]),
                             *(float(r[k]) if r[k] else math.nan
                               for k in ("train_map", "pl_map", "val_map", "loss")))
                for r in csv.DictReader(fh)]


class Evaluator:
    """Holds ground truth; the only part of training that ever sees it."""

    def __init__(self, train_targets: np.ndarray, val_targets: np.ndarray | None = None):
        self.train_targets = train_targets
        self.val_targets = val_targets

    def train_map(self, scores) -> float:
        return map_score(scores, self.train_targets)

    def val_map(self, scores) -> float:
        return math.nan if self.val_targets is None else map_score(scores, self.val_targets)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed & 0xFFFFFFFF)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _predict(model: nn.Module, data: ImageSet, config: TrainConfig) -> np.ndarray:
    model.eval()
    loader = torch.utils.data.DataLoader(data, batch_size=max(config.batch_size, 32), shuffle=False)
    out = []
    with torch.no_grad():
        for x, _ in loader:
            out.append(predict_probs(model(x.to(config.device)), config.loss).double().cpu().numpy())
    return np.concatenate(out)


def _initial_matrix(manifest: DatasetManifest, initial_pseudo) -> np.ndarray:
    """Accepts an (N, C) array, an id -> vector mapping, or a VectorCache."""
    ids = manifest.image_ids
    if hasattr(initial_pseudo, "matrix"):
        return np.asarray(initial_pseudo.matrix(ids), dtype=np.float64)
    if isinstance(initial_pseudo, dict):
        missing = [i for i in ids if i not in initial_pseudo]
        if missing:
            raise InputError(f"initial pseudo labels missing for {len(missing)} samples, e.g. {missing[:3]}")
        return np.stack([np.asarray(initial_pseudo[i], dtype=np.float64) for i in ids])
    m = np.asarray(initial_pseudo, dtype=np.float64)
    if m.shape != (len(manifest), len(manifest.vocabulary)):
        raise InputError(f"initial pseudo labels have shape {m.shape}, expected "
                         f"{(len(manifest), len(manifest.vocabulary))}")
    return m


def _check_initial(m: np.ndarray, ids: list[str]) -> np.ndarray:
    bad = np.flatnonzero(~np.isfinite(m).all(axis=1))
    if bad.size:
        raise NumericError(f"initial pseudo labels are non-finite for {bad.size} samples, "
                           f"e.g. {[ids[i] for i in bad[:3]]}")
    return m


def _dump_divergence(run_dir, model, latents, epoch, config) -> Path | None:
    if run_dir is None:
        return None
    path = Path(run_dir) / "divergence_dump.pt"
    torch.save({"model": model.state_dict(), "latent": torch.from_numpy(latents.latent),
                "epoch": epoch, "config": asdict(config)}, path)
    return path


def train(manifest: DatasetManifest, initial_pseudo, config: TrainConfig,
          val_manifest: DatasetManifest | None = None, run_dir=None) -> TrainResult:
    """Alternate classifier updates and latent pseudo-label updates.

    Every epoch fits the network on the current pseudo labels. After every
    ``pl_update_frequency``-th epoch the network is frozen, predictions are
    recomputed for the whole train set and the latents take one step per
    block of ``pl_batch_size`` samples.
    """
    if len(manifest) == 0:
        raise InputError("cannot train on an empty manifest")
    _seed_everything(config.seed)
    initial = _check_initial(_initial_matrix(manifest, initial_pseudo), manifest.image_ids)
    latents = LatentPseudoLabels.from_initial(initial, config.latent_mapping)
    evaluator = Evaluator(manifest.targets(),
                          val_manifest.targets() if val_manifest is not None else None)
    model = build_backbone(config, len(manifest.vocabulary)).to(config.device)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    train_set = _image_set(manifest, config)
    val_set = _image_set(val_manifest, config) if val_manifest is not None else None
    gen = torch.Generator().manual_seed(config.seed)
    loader = torch.utils.data.DataLoader(train_set, batch_size=config.batch_size, shuffle=True, generator=gen)
    pl_block = config.batch_size if config.pl_batch_size is None else config.pl_batch_size
    pl_block = pl_block or len(manifest)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None and config.checkpoints else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    initial_pl_map = evaluator.train_map(latents.labels())
    log.info("initial pseudo-label mAP %.4f", initial_pl_map)
    history, checkpoints, n_updates = [], [], 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        total, count = 0.0, 0
        for x, rows in loader:
            y_u = torch.from_numpy(latents.labels(rows.numpy())).to(config.device, torch.float32)
            loss = kl_loss_from_logits(model(x.to(config.device)), y_u, config.loss)
            if not torch.isfinite(loss):
                dump = _dump_divergence(run_dir, model, latents, epoch, config)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", dump)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            count += len(rows)

        y_p = _predict(model, train_set, config)
        updated = epoch % config.pl_update_frequency == 0
        if updated:
            for start in range(0, len(manifest), pl_block):
                rows = np.arange(start, min(start + pl_block, len(manifest)))
                latents.step(y_p[rows], config.sigma, rows, normalized=config.psi_normalized,
                             loss=config.loss)
            n_updates += 1
        val_map = evaluator.val_map(_predict(model, val_set, config)) if val_set is not None else math.nan
        m = EpochMetrics(epoch, evaluator.train_map(y_p), evaluator.train_map(latents.labels()),
                         val_map, total / count, updated)
        history.append(m)
        log.info("epoch %d: loss %.5f train mAP %.4f pl mAP %.4f val mAP %.4f%s", epoch, m.loss,
                 m.train_map, m.pl_map, m.val_map, " (pl updated)" if updated else "")
        if ckpt_dir is not None and (updated or epoch == config.epochs):
            path = ckpt_dir / ("final.pt" if epoch == config.epochs else f"epoch_{epoch:03d}.pt")
            torch.save({"model": model.state_dict(), "latent": torch.from_numpy(latents.latent.copy()),
                        "mapping": latents.mapping, "config": asdict(config), "seed": config.seed,
                        "epoch": epoch}, path)
            checkpoints.append(path)

    return TrainResult(model, latents, history, initial_pl_map, n_updates, checkpoints)


def write_run_outputs(result: TrainResult, run_dir) -> dict[str, Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "metrics.csv"
    csv_path.write_text(result.metrics_csv())
    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(result.summary(), indent=2))
    return {"metrics": csv_path, "summary": summary_path}
