"""Batch encoding through a pretrained CLIP-family checkpoint.

The checkpoint does all the modeling; this layer only batches, normalizes,
and keeps row order. Outputs are float32 unit rows, normalized in float64
so downstream norm checks pass at tight tolerances. Inference runs on CPU
in eval mode under no_grad, which makes reruns of the same checkpoint and
batch size byte-reproducible.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import CLIPModel, CLIPProcessor


class EncoderError(RuntimeError):
    pass


def _unit_f32(features: torch.Tensor) -> np.ndarray:
    arr = features.detach().to(torch.float64).cpu().numpy()
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise EncoderError("checkpoint produced a zero feature vector")
    return (arr / norms).astype(np.float32)


def _features(output) -> torch.Tensor:
    # transformers >= 5 returns the pooling output object, older versions
    # the projected tensor itself
    if isinstance(output, torch.Tensor):
        return output
    return output.pooler_output


class CheckpointEncoder:
    """One loaded checkpoint, text and image towers."""

    def __init__(self, model_id: str):
        try:
            self.processor = CLIPProcessor.from_pretrained(model_id)
            self.model = CLIPModel.from_pretrained(model_id)
        except Exception as exc:
            raise EncoderError(f"cannot load checkpoint {model_id!r}: {exc}") from exc
        self.model.eval()
        self.model_id = model_id

    @property
    def dim(self) -> int:
        return int(self.model.config.projection_dim)

    @torch.no_grad()
    def encode_texts(self, texts: list[str], batch_size: int = 32) -> np.ndarray:
        if not texts:
            raise EncoderError("no texts to encode")
        chunks = []
        for start in range(0, len(texts), batch_size):
            batch = self.processor(
                text=texts[start : start + batch_size],
                return_tensors="pt",
                padding=True,
                truncation=True,
            )
            out = self.model.get_text_features(
                input_ids=batch["input_ids"], attention_mask=batch["attention_mask"]
            )
            chunks.append(_unit_f32(_features(out)))
        return np.vstack(chunks)

    @torch.no_grad()
    def encode_images(
        self, paths: list, batch_size: int = 32
    ) -> tuple[np.ndarray, list[int]]:
        """Unit rows for every readable image, plus the skipped row indices.

        Unreadable files are logged and dropped; surviving rows keep input
        order, so the caller must drop the same rows from any parallel data.
        """
        if not paths:
            raise EncoderError("no images to encode")
        images, skipped = [], []
        for row, path in enumerate(paths):
            try:
                with Image.open(path) as img:
                    images.append(img.convert("RGB"))
            except Exception as exc:
                skipped.append(row)
                print(f"skipping row {row}: {Path(path)}: {exc}", file=sys.stderr)
        if not images:
            raise EncoderError("every image row failed to load")
        chunks = []
        for start in range(0, len(images), batch_size):
            batch = self.processor(
                images=images[start : start + batch_size], return_tensors="pt"
            )
            out = self.model.get_image_features(pixel_values=batch["pixel_values"])
            chunks.append(_unit_f32(_features(out)))
        return np.vstack(chunks), skipped
