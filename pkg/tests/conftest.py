import numpy as np
import pytest

from drf.model import EncoderConfig, ModelConfig
from drf.pose_io import PoseSequence
from drf.skeleton_map import RenderConfig
from drf.synth import GaitParams, generate


def random_sequence(rng: np.random.Generator, n_frames: int = 30, label: str = "negative", conf_low: float = 0.0) -> PoseSequence:
    """Plausible-looking random poses: a jittered standing skeleton with random
    placement, scale and confidences. Hips always stay valid."""
    base = generate(GaitParams(num_frames=n_frames, noise=0.0, seed=int(rng.integers(1 << 30)))).keypoints
    kp = base.copy()
    kp[:, :, :2] *= rng.uniform(0.6, 1.6)
    kp[:, :, :2] += rng.uniform(-200, 200, size=2)
    kp[:, :, :2] += rng.normal(0.0, 6.0, size=kp[:, :, :2].shape)
    kp[:, :, 2] = rng.uniform(conf_low, 1.0, size=kp.shape[:2])
    kp[:, 11:13, 2] = rng.uniform(0.5, 1.0, size=(n_frames, 2))
    return PoseSequence(kp, f"rand{int(rng.integers(1 << 20))}", label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_render():
    return RenderConfig(width=32, height=32, sigma=1.0)


@pytest.fixture
def toy_model_cfg():
    # 16x16 canvas -> 2x2 final map, two strips
    return ModelConfig(encoder=EncoderConfig((2, 3, 3), channels=4, strips=2), embed_dim=3)


@pytest.fixture
def toy_render():
    return RenderConfig(width=16, height=16, sigma=1.0)
