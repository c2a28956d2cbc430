import numpy as np
import pytest

from roverseg import storage


def synth_samples(n, h=32, w=32, seed=0, split="train"):
    """Random in-range samples; labels carry all three classes by construction."""
    rng = np.random.default_rng(seed)
    out = []
    presets = ("hf", "hr", "lf", "lr")
    for i in range(n):
        labels = rng.integers(0, 3, size=(h, w)).astype(np.uint8)
        out.append(
            storage.SegSample(
                sample_id=f"synth_{i:03d}",
                rgb=rng.random((3, h, w)),
                depth=rng.random((1, h, w)),
                labels=labels,
                preset=presets[i % 4],
                split=split,
            )
        )
    return out


@pytest.fixture
def tiny_samples():
    return synth_samples(6)
