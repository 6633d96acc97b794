"""Image/text embedding backends.

Downstream code only needs ``embed_images``, ``embed_texts`` and the
backend's temperature, so the synthetic backend and a real pretrained
vision-language model are interchangeable.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ClassVocabulary, class_palette
from .errors import BackendError, ConfigError, InputError

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a [class]"
PLACEHOLDER = "[class]"

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    visual_arch: str
    embedding_dim: int
    temperature: float
    preprocessing: dict = field(default_factory=dict)
    weights: str = ""

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @property
    def preprocessing_hash(self) -> str:
        blob = json.dumps(self.preprocessing, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def backend_id(self) -> str:
        """Identity string stamped into every cache built with this backend."""
        key = json.dumps({
            "name": self.name, "arch": self.visual_arch, "dim": self.embedding_dim,
            "tau": repr(float(self.temperature)), "weights": self.weights,
            "preproc": self.preprocessing_hash,
        }, sort_keys=True).encode()
        return (f"{self.name}:{self.visual_arch}:{self.embedding_dim}:"
                f"{hashlib.sha256(key).hexdigest()[:16]}")


@dataclass(frozen=True)
class TextEmbeddingTable:
    vocabulary: ClassVocabulary
    embeddings: np.ndarray
    prompt_template: str = DEFAULT_TEMPLATE
    prompts: tuple[str, ...] = ()

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.vocabulary):
            raise InputError(f"text table has {self.embeddings.shape[0]} rows for "
                             f"{len(self.vocabulary)} classes")

    def normalized(self) -> np.ndarray:
        emb = self.embeddings.astype(np.float64)
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def render_prompts(vocab: ClassVocabulary, template: str) -> list[str]:
    if template.count(PLACEHOLDER) != 1:
        raise ConfigError(f"prompt template must contain {PLACEHOLDER!r} exactly once: {template!r}")
    return [template.replace(PLACEHOLDER, name) for name in vocab.names]


def _check_images(images: Sequence[np.ndarray]) -> None:
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[2] != 3:
            raise InputError(f"image {i}: expected (H, W, 3) array, got shape {img.shape}")
        if img.shape[0] == 0 or img.shape[1] == 0:
            raise InputError(f"image {i}: zero-size image {img.shape}")


class EncoderBackend:
    """Common surface; subclasses fill in the two embedding calls."""

    descriptor: BackendDescriptor

    @property
    def temperature(self) -> float:
        return self.descriptor.temperature

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def embed_texts(self, vocab: ClassVocabulary, template: str = DEFAULT_TEMPLATE) -> TextEmbeddingTable:
        raise NotImplementedError


class SyntheticBackend(EncoderBackend):
    """Weight-free stand-in for a vision-language encoder.

    Each class owns one orthonormal direction (the columns of a seeded
    random rotation). An image embeds as the pixel-fraction-weighted sum of
    the directions of the palette colours it contains, plus Gaussian noise
    with per-coordinate standard deviation ``noise``. The noise is seeded
    from the backend seed and the image bytes, so results never depend on
    batch composition.
    """

    def __init__(self, n_classes: int, dim: int = 32, noise: float = 0.0, seed: int = 0,
                 temperature: float = 0.5):
        if n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {n_classes}")
        if dim < n_classes:
            raise ConfigError(f"dim ({dim}) must be >= n_classes ({n_classes})")
        if noise < 0:
            raise ConfigError(f"noise must be >= 0, got {noise}")
        self.n_classes = n_classes
        self.dim = dim
        self.noise = float(noise)
        self.seed = int(seed)
        q, r = np.linalg.qr(np.random.default_rng(self.seed).standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        self.directions = np.ascontiguousarray(q[:, :n_classes].T)  # (C, dim)
        self.palette = class_palette(n_classes).astype(np.float64)
        self.descriptor = BackendDescriptor(
            name="synthetic", visual_arch="palette-mixture", embedding_dim=dim,
            temperature=float(temperature),
            preprocessing={"palette": "hsv", "n_classes": n_classes, "noise": self.noise,
                           "seed": self.seed},
        )

    def class_weights(self, image: np.ndarray) -> np.ndarray:
        """Fraction of pixels nearest to each class colour."""
        px = image.reshape(-1, 3).astype(np.float64)
        d2 = ((px[:, None, :] - self.palette[None, :, :]) ** 2).sum(-1)
        counts = np.bincount(d2.argmin(1), minlength=self.n_classes)
        return counts / px.shape[0]

    def _noise(self, image: np.ndarray) -> np.ndarray:
        digest = hashlib.blake2b(np.ascontiguousarray(image).tobytes(), digest_size=8,
                                 key=str(image.shape).encode()).digest()
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, int.from_bytes(digest, "little")])
        return rng.standard_normal(self.dim) * self.noise

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        _check_images(images)
        out = np.empty((len(images), self.dim), dtype=np.float32)
        for i, img in enumerate(images):
            vec = self.class_weights(img) @ self.directions
            if self.noise > 0:
                vec = vec + self._noise(img)
            out[i] = vec
        return out

    def embed_texts(self, vocab: ClassVocabulary, template: str = DEFAULT_TEMPLATE) -> TextEmbeddingTable:
        prompts = render_prompts(vocab, template)
        if len(vocab) != self.n_classes:
            raise ConfigError(f"synthetic backend built for {self.n_classes} classes, "
                              f"vocabulary has {len(vocab)}")
        return TextEmbeddingTable(vocab, self.directions.astype(np.float32), template, tuple(prompts))


class OpenClipBackend(EncoderBackend):
    """Pretrained CLIP through ``open_clip`` (ResNet-50 visual tower by default).

    ``weights`` is a local checkpoint path, a pretrained tag such as
    ``"openai"`` (fetched only when ``allow_download`` is set) or
    ``"random"`` for an untrained model, which is only useful in tests.
    Images of any size, including tiny snippets, are resized so the short
    side equals the input resolution, center-cropped and normalized.
    """

    def __init__(self, arch: str = "RN50", weights: str | None = None, *,
                 allow_download: bool = False, temperature: float | None = None,
                 device: str = "cpu", batch_size: int = 64):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise BackendError("the real encoder needs open_clip: pip install open_clip_torch") from exc
        if weights is None:
            raise BackendError(
                "no encoder weights configured: set backend.weights to a local checkpoint "
                "path, or to 'openai' together with backend.allow_download=true")
        self._torch = torch
        self.device = device
        self.batch_size = batch_size
        weights_id = weights
        if weights == "random":
            pretrained = None
        elif Path(weights).exists():
            pretrained = str(weights)
            st = Path(weights).stat()
            weights_id = f"{Path(weights).name}:{st.st_size}"
        elif allow_download:
            pretrained = weights
        else:
            raise BackendError(
                f"weights {weights!r} is neither a local file nor allowed to download; "
                "pass backend.allow_download=true to fetch it into the model cache")
        try:
            model, _, _ = open_clip.create_model_and_transforms(arch, pretrained=pretrained, device=device)
        except Exception as exc:  # open_clip raises several unrelated types here
            raise BackendError(f"could not load {arch} weights {weights!r}: {exc}") from exc
        model.eval()
        self.model = model
        self.tokenizer = open_clip.get_tokenizer(arch)
        size = model.visual.image_size
        self.image_size = int(size[0] if isinstance(size, (tuple, list)) else size)
        with torch.no_grad():
            dim = int(model.encode_text(self.tokenizer(["x"]).to(device)).shape[-1])
            learned = float(1.0 / model.logit_scale.exp().item())
        tau = float(temperature) if temperature is not None else learned
        self.descriptor = BackendDescriptor(
            name="open_clip", visual_arch=arch, embedding_dim=dim, temperature=tau,
            weights=weights_id,
            preprocessing={"resize": "short-side", "size": self.image_size, "interp": "bicubic",
                           "antialias": True, "crop": "center", "mean": CLIP_MEAN, "std": CLIP_STD},
        )

    def preprocess(self, images: Sequence[np.ndarray]):
        torch = self._torch
        F = torch.nn.functional
        s = self.image_size
        mean = torch.tensor(CLIP_MEAN).view(3, 1, 1)
        std = torch.tensor(CLIP_STD).view(3, 1, 1)
        batch = []
        for img in images:
            t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float().div(255.0)
            h, w = t.shape[1:]
            scale = s / min(h, w)
            nh, nw = max(s, round(h * scale)), max(s, round(w * scale))
            t = F.interpolate(t[None], size=(nh, nw), mode="bicubic", align_corners=False,
                              antialias=nh < h or nw < w)[0].clamp(0, 1)
            top, left = (nh - s) // 2, (nw - s) // 2
            t = t[:, top:top + s, left:left + s]
            batch.append((t - mean) / std)
        return torch.stack(batch)

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        _check_images(images)
        torch = self._torch
        out = []
        with torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                x = self.preprocess(images[start:start + self.batch_size]).to(self.device)
                out.append(self.model.encode_image(x).float().cpu().numpy())
        if not out:
            return np.zeros((0, self.descriptor.embedding_dim), dtype=np.float32)
        return np.concatenate(out).astype(np.float32)

    def embed_texts(self, vocab: ClassVocabulary, template: str = DEFAULT_TEMPLATE) -> TextEmbeddingTable:
        prompts = render_prompts(vocab, template)
        torch = self._torch
        with torch.no_grad():
            emb = self.model.encode_text(self.tokenizer(prompts).to(self.device)).float().cpu().numpy()
        return TextEmbeddingTable(vocab, emb.astype(np.float32), template, tuple(prompts))


def synthetic_backend(n_classes: int, dim: int, noise: float, seed: int, **kwargs) -> SyntheticBackend:
    return SyntheticBackend(n_classes, dim=dim, noise=noise, seed=seed, **kwargs)


def embed_texts(backend: EncoderBackend, vocab: ClassVocabulary,
                template: str = DEFAULT_TEMPLATE) -> TextEmbeddingTable:
    return backend.embed_texts(vocab, template)
