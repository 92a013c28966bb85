import numpy as np
import pytest
import torch

from reftrack.core import BoundingBox, Trajectory
from reftrack.model import MatchingModel, ModelConfig
from reftrack.synthdata import SceneConfig, generate_scene, grammar_vocabulary

TINY_IMAGE = (64, 96)
TINY_SHAPES = ((4, 8), (2, 4), (2, 2), (2, 2))


@pytest.fixture(scope="session")
def vocab():
    return grammar_vocabulary()


@pytest.fixture(scope="session")
def scene(vocab):
    """One deterministic synthetic scene shared across tests."""
    return generate_scene(SceneConfig(seed=11), vocab)


def tiny_model_config(vocab_size, **overrides):
    base = dict(
        vocab_size=vocab_size,
        channels=8,
        segment_length=2,
        n_ref_points=3,
        max_text_len=25,
        image_size=TINY_IMAGE,
        sample_shapes=TINY_SHAPES,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_tiny_model(vocab_size, seed=0, **overrides):
    torch.manual_seed(seed)
    return MatchingModel(tiny_model_config(vocab_size, **overrides))


def tiny_inputs(vocab, seed=0, batch=1, n_expr=2, p=2, image=TINY_IMAGE, n_tokens=3):
    """Random but valid model inputs at tiny scale."""
    rng = np.random.default_rng(seed)
    h, w = image
    frames = torch.from_numpy(rng.random((batch, p, 3, h, w), dtype=np.float32))
    boxes = []
    for _ in range(batch * p):
        bw = rng.uniform(8, w / 2)
        bh = rng.uniform(8, h / 2)
        boxes.append(
            [rng.uniform(0, w - bw), rng.uniform(0, h - bh), bw, bh]
        )
    boxes = torch.tensor(boxes, dtype=torch.float32).reshape(batch, p, 4)
    present = torch.ones(batch, p, dtype=torch.bool)
    tokens = torch.from_numpy(
        rng.integers(2, len(vocab), size=(batch, n_expr, 25))
    ).long()
    tokens[..., n_tokens:] = vocab.pad_id
    pads = tokens == vocab.pad_id
    return frames, boxes, present, tokens, pads


def straight_trajectory(target_id=1, n_frames=8, start=(10.0, 20.0), vel=(2.0, 0.0), size=(30.0, 20.0)):
    x0, y0 = start
    vx, vy = vel
    w, h = size
    return Trajectory(
        target_id=target_id,
        boxes={
            t: BoundingBox(x0 + vx * t, y0 + vy * t, w, h) for t in range(n_frames)
        },
    )
