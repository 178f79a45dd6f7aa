"""Batch feature-embedding extraction with pretrained classification backbones.

Emits the embedding-set directory format consumed by the sketchlab toolkit:
``meta.json`` / ``embeddings.f32`` (little-endian float32, row-major) /
``labels.u32``, plus a ``preprocess.json`` sidecar recording the image
preprocessing actually applied.

The embedding is the backbone's penultimate activation: the post-global-pool
features for resnet50 (2048) and mobilenet_v3_small (576), and the second
fully-connected activation for vgg16 (4096), whose torchvision architecture
has no global pool. Inference runs in eval mode on CPU, so repeated
extraction of the same inputs is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models, transforms

FORMAT_VERSION = 1

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

# expected embedding width per backbone; drift means the wrong layer got wired
BACKBONE_DIMS = {
    "resnet50": 2048,
    "vgg16": 4096,
    "mobilenet_v3_small": 576,
}

# canonical ImageNet preprocessing (matches the torchvision weight recipes)
IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]
RESIZE = 256
CROP = 224


class WeightsUnavailableError(RuntimeError):
    """Pretrained weights could not be loaded (no cache and no network)."""


@dataclass
class ExtractorConfig:
    backbone: str
    images: list[Path]
    labels: list[int]
    label_names: list[str]
    out: Path
    batch_size: int = 16
    weights: str = "imagenet"     # "imagenet" or "none" (seeded random init)
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONE_DIMS:
            raise ValueError(
                f"backbone must be one of {sorted(BACKBONE_DIMS)}, got {self.backbone!r}"
            )
        if self.weights not in ("imagenet", "none"):
            raise ValueError(f"weights must be 'imagenet' or 'none', got {self.weights!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images for {len(self.labels)} labels")
        if not self.images:
            raise ValueError("no input images")


def list_inputs(source: Path) -> tuple[list[Path], list[int], list[str]]:
    """Discover images and labels from a directory or a CSV manifest.

    A directory with class subdirectories maps each subdirectory to a class
    (sorted by name); a flat directory becomes one ``unlabeled`` class. A CSV
    needs the header ``path,label``.
    """
    source = Path(source)
    if source.is_dir():
        subdirs = sorted(p for p in source.iterdir() if p.is_dir())
        if subdirs:
            names = [p.name for p in subdirs]
            images, labels = [], []
            for idx, sub in enumerate(subdirs):
                for img in sorted(sub.iterdir()):
                    if img.suffix.lower() in IMAGE_EXTENSIONS:
                        images.append(img)
                        labels.append(idx)
            return images, labels, names
        images = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        return images, [0] * len(images), ["unlabeled"]
    if source.suffix == ".csv":
        import csv

        with open(source, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["path", "label"]:
                raise ValueError(f"expected CSV header 'path,label', got {header!r}")
            rows = [(Path(r[0]), r[1]) for r in reader]
        names = sorted({lab for _, lab in rows})
        index = {n: i for i, n in enumerate(names)}
        return [p for p, _ in rows], [index[lab] for _, lab in rows], names
    raise ValueError(f"{source} is neither an image directory nor a .csv manifest")


def _build_backbone(name: str, weights: str, seed: int) -> torch.nn.Module:
    want = None
    if weights == "imagenet":
        enum = {
            "resnet50": models.ResNet50_Weights.DEFAULT,
            "vgg16": models.VGG16_Weights.DEFAULT,
            "mobilenet_v3_small": models.MobileNet_V3_Small_Weights.DEFAULT,
        }[name]
        want = enum
    else:
        torch.manual_seed(seed)

    try:
        if name == "resnet50":
            net = models.resnet50(weights=want)
            net.fc = torch.nn.Identity()
        elif name == "vgg16":
            net = models.vgg16(weights=want)
            # keep everything up to and including the second FC + ReLU
            net.classifier = torch.nn.Sequential(*list(net.classifier.children())[:-2])
        else:
            net = models.mobilenet_v3_small(weights=want)
            net.classifier = torch.nn.Identity()
    except Exception as exc:  # weight download failure surfaces here
        raise WeightsUnavailableError(
            f"failed to load {name} imagenet weights ({exc}); "
            f"pass weights='none' for an offline run"
        ) from exc
    net.eval()
    return net


def _preprocess() -> transforms.Compose:
    return transforms.Compose([
        transforms.Resize(RESIZE),
        transforms.CenterCrop(CROP),
        transforms.ToTensor(),
        transforms.Normalize(mean=IMAGENET_MEAN, std=IMAGENET_STD),
    ])


def _load_image(path: Path, pipeline) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            return pipeline(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc


def extract(config: ExtractorConfig) -> Path:
    """Run batch inference and write the embedding-set directory.

    Returns the output directory. Row order matches the input image list.
    """
    torch.set_num_threads(1)  # fixed reduction order keeps runs byte-identical
    net = _build_backbone(config.backbone, config.weights, config.seed)
    pipeline = _preprocess()

    chunks: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(config.images), config.batch_size):
            batch_paths = config.images[start:start + config.batch_size]
            batch = torch.stack([_load_image(p, pipeline) for p in batch_paths])
            feats = net(batch)
            chunks.append(feats.reshape(feats.shape[0], -1).numpy().astype("<f4"))
    embeddings = np.concatenate(chunks, axis=0)

    expected = BACKBONE_DIMS[config.backbone]
    if embeddings.shape[1] != expected:
        raise RuntimeError(
            f"{config.backbone} emitted width {embeddings.shape[1]}, expected {expected}"
        )

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "n": int(embeddings.shape[0]),
        "d": int(embeddings.shape[1]),
        "label_names": list(config.label_names),
    }
    (out / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    (out / "embeddings.f32").write_bytes(embeddings.tobytes())
    labels = np.asarray(config.labels, dtype="<u4")
    (out / "labels.u32").write_bytes(labels.tobytes())
    (out / "preprocess.json").write_text(json.dumps({
        "backbone": config.backbone,
        "weights": config.weights,
        "resize": RESIZE,
        "center_crop": CROP,
        "normalize_mean": IMAGENET_MEAN,
        "normalize_std": IMAGENET_STD,
        "embedding_layer": "penultimate (pre-classifier)",
    }, indent=2), encoding="utf-8")
    return out
