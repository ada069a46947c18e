"""Run a frozen pretrained backbone over an image-folder tree and write FEDF.

The input root holds one subdirectory per class; subdirectory names map to
labels 0..C-1 in sorted order. The backbone only ever runs in inference mode;
a weight checksum taken before and after the export proves nothing trained.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torchvision import models, transforms

FEDF_MAGIC = b"FEDF"
FEDF_VERSION = 1

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp", ".tiff"}

IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]


@dataclass(frozen=True)
class BackboneSpec:
    builder: callable
    embed_dim: int
    input_size: int
    kind: str  # cnn | vit


BACKBONES = {
    "resnet18": BackboneSpec(models.resnet18, 512, 224, "cnn"),
    "resnet50": BackboneSpec(models.resnet50, 2048, 224, "cnn"),
    "resnet101": BackboneSpec(models.resnet101, 2048, 224, "cnn"),
    "vit_b_16": BackboneSpec(models.vit_b_16, 768, 224, "vit"),
}


@dataclass
class ExportJob:
    input_root: str
    backbone: str = "resnet18"
    output_path: str = "features.fedf"
    manifest_path: str | None = None
    weights: str | None = None  # path to a state_dict; None = seeded random init
    feature: str = "cls"        # vit only: cls token or pooled patch mean
    batch_size: int = 16
    image_size: int | None = None  # defaults to the backbone's native input
    device: str = "cpu"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; have {sorted(BACKBONES)}")
        if self.feature not in ("cls", "pool"):
            raise ValueError("feature must be 'cls' or 'pool'")


class _Embedder(torch.nn.Module):
    """Backbone without its classification head, inference only."""

    def __init__(self, job: ExportJob):
        super().__init__()
        spec = BACKBONES[job.backbone]
        torch.manual_seed(job.seed)
        model = spec.builder(weights=None)
        if job.weights:
            state = torch.load(job.weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        self.spec = spec
        self.feature = job.feature
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.inference_mode()
    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        m = self.model
        if self.spec.kind == "cnn":
            x = m.conv1(batch)
            x = m.bn1(x)
            x = m.relu(x)
            x = m.maxpool(x)
            x = m.layer1(x)
            x = m.layer2(x)
            x = m.layer3(x)
            x = m.layer4(x)
            x = m.avgpool(x)
            return torch.flatten(x, 1)
        tokens = m._process_input(batch)
        cls = m.class_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1)
        tokens = m.encoder(tokens)
        if self.feature == "cls":
            return tokens[:, 0]
        return tokens[:, 1:].mean(dim=1)


def weight_checksum(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.cpu().numpy().tobytes())
    return digest.hexdigest()


def list_images(input_root: str):
    """(relative_path, label_name, label_id) per image, sorted-name order."""
    classes = sorted(
        d for d in os.listdir(input_root)
        if os.path.isdir(os.path.join(input_root, d))
    )
    if not classes:
        raise ValueError(f"no class subdirectories under {input_root}")
    entries = []
    for label_id, name in enumerate(classes):
        class_dir = os.path.join(input_root, name)
        files = sorted(
            f for f in os.listdir(class_dir)
            if os.path.splitext(f)[1].lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise ValueError(f"class directory {name!r} holds no images")
        entries.extend((os.path.join(name, f), name, label_id) for f in files)
    return classes, entries


def _preprocess(job: ExportJob) -> transforms.Compose:
    size = job.image_size or BACKBONES[job.backbone].input_size
    # resize the short side, center-crop to the native input, normalize;
    # no training-time augmentation of any kind
    return transforms.Compose([
        transforms.Resize(int(size * 256 / 224)),
        transforms.CenterCrop(size),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


def _write_fedf(path, dim, num_classes, domain_id, labels, vectors):
    domain = domain_id.encode("utf-8")
    record_dtype = np.dtype([("label", "<u4"), ("vector", "<f4", (dim,))])
    records = np.empty(len(labels), dtype=record_dtype)
    records["label"] = np.asarray(labels, dtype=np.uint32)
    records["vector"] = np.asarray(vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", FEDF_MAGIC, FEDF_VERSION, dim, num_classes))
        f.write(struct.pack("<H", len(domain)))
        f.write(domain)
        f.write(struct.pack("<Q", len(labels)))
        f.write(records.tobytes())


def export(job: ExportJob) -> dict:
    """Embed every readable image and write the FEDF file plus a manifest.

    Returns the manifest document: record index -> relative path and label,
    plus the list of skipped (unreadable) files and the backbone checksum.
    """
    if job.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    embedder = _Embedder(job)
    device = torch.device(job.device)
    embedder.to(device)
    checksum_before = weight_checksum(embedder)

    classes, entries = list_images(job.input_root)
    preprocess = _preprocess(job)

    tensors, kept, skipped = [], [], []
    for rel_path, label_name, label_id in entries:
        full = os.path.join(job.input_root, rel_path)
        try:
            with Image.open(full) as img:
                tensors.append(preprocess(img.convert("RGB")))
        except (OSError, ValueError) as exc:
            skipped.append({"path": rel_path, "reason": str(exc)})
            continue
        kept.append((rel_path, label_name, label_id))

    if not kept:
        raise ValueError("no readable images found")
    chunks = []
    for start in range(0, len(tensors), job.batch_size):
        batch = torch.stack(tensors[start:start + job.batch_size]).to(device)
        chunks.append(embedder(batch).cpu().numpy())
    vectors = np.concatenate(chunks, axis=0)

    checksum_after = weight_checksum(embedder)
    if checksum_after != checksum_before:
        raise RuntimeError("backbone weights changed during export")

    dim = vectors.shape[1]
    labels = [label_id for _, _, label_id in kept]
    _write_fedf(
        job.output_path, dim, len(classes),
        os.path.basename(os.path.normpath(job.input_root)), labels, vectors,
    )
    manifest = {
        "backbone": job.backbone,
        "feature": job.feature,
        "dim": dim,
        "classes": classes,
        "weight_checksum": checksum_after,
        "records": [
            {"index": i, "path": rel, "label_name": name, "label_id": label_id}
            for i, (rel, name, label_id) in enumerate(kept)
        ],
        "skipped": skipped,
    }
    if job.manifest_path:
        with open(job.manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
