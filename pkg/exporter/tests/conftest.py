"""Shared fixtures: a tiny randomly initialized CLIP checkpoint saved to
disk (no network, loads through the normal from_pretrained path) and a small
on-disk image corpus."""
from __future__ import annotations

import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")

import json

import numpy as np
import pytest


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    import torch
    from transformers import (
        CLIPConfig,
        CLIPImageProcessor,
        CLIPModel,
        CLIPTextConfig,
        CLIPTokenizer,
        CLIPVisionConfig,
    )

    d = tmp_path_factory.mktemp("tiny_clip")
    chars = "abcdefghijklmnopqrstuvwxyz0123456789.,!?'-"
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for c in chars:
        vocab.setdefault(c, len(vocab))
        vocab.setdefault(c + "</w>", len(vocab))
    CLIPTokenizer(vocab=vocab, merges=[], model_max_length=77).save_pretrained(d)

    config = CLIPConfig(
        text_config=CLIPTextConfig(
            vocab_size=len(vocab), hidden_size=32, intermediate_size=64,
            num_hidden_layers=2, num_attention_heads=4,
            max_position_embeddings=77, bos_token_id=0, eos_token_id=1,
        ),
        vision_config=CLIPVisionConfig(
            image_size=32, patch_size=16, hidden_size=32, intermediate_size=64,
            num_hidden_layers=2, num_attention_heads=4,
        ),
        projection_dim=16,
    )
    torch.manual_seed(0)
    CLIPModel(config).save_pretrained(d)
    CLIPImageProcessor(
        size={"shortest_edge": 32}, crop_size={"height": 32, "width": 32}
    ).save_pretrained(d)
    return d


HIERARCHY = [
    {"label": "pets", "classes": ["dog", "cat"]},
    {"label": "vehicles", "classes": ["car", "bike", "tram"]},
]


@pytest.fixture()
def hierarchy_file(tmp_path):
    path = tmp_path / "hierarchy.json"
    path.write_text(json.dumps(HIERARCHY), encoding="utf-8")
    return path


def write_images(directory, specs):
    """specs: (name, class or None) pairs; class None writes a corrupt file.

    Returns the index.csv path. Images are deterministic per name.
    """
    from PIL import Image

    directory.mkdir(parents=True, exist_ok=True)
    lines = ["file,class"]
    for name, cls in specs:
        target = directory / name
        if cls is None:
            target.write_bytes(b"not an image")
            lines.append(f"{name},dog")  # class value is irrelevant, row is skipped
            continue
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        arr = rng.integers(0, 255, (36, 36, 3), dtype=np.uint8)
        Image.fromarray(arr).save(target)
        lines.append(f"{name},{cls}")
    index = directory / "index.csv"
    index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index
