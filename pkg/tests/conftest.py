import os

import pytest

from app.data.data import layout_data
from app.schemas import LayoutRule, NetworkConfig, SceneSpec

CLASS_SET = ["sky", "building", "road", "sidewalk", "person", "car"]


def pytest_collection_modifyitems(config, items):
    if os.getenv("CAPTIONDA_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set CAPTIONDA_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def class_set():
    return list(CLASS_SET)


@pytest.fixture
def scene_spec():
    return SceneSpec(class_set=CLASS_SET, background="sky", layout_rules=[LayoutRule(**r) for r in layout_data])


@pytest.fixture
def tiny_network():
    return NetworkConfig(num_classes=len(CLASS_SET), widths=(8, 16), decoder_width=8, embed_dim=16,
                         pool_heads=2, pool_max_tokens=64)


@pytest.fixture
def cache_uri(tmp_path):
    return f"sqlite+aiosqlite:///{tmp_path / 'cache.db'}"


TINY_NETWORK = {"num_classes": len(CLASS_SET), "widths": [8, 16], "decoder_width": 8, "embed_dim": 16,
                "pool_heads": 2, "pool_max_tokens": 64}


@pytest.fixture
def preset_data():
    """Plain-data tiny preset; keyword overrides replace top-level keys."""

    def make(**overrides):
        rules = [{key: list(value) if isinstance(value, tuple) else value for key, value in rule.items()}
                 for rule in layout_data]
        data = {
            "name": "tiny",
            "scene": {"class_set": list(CLASS_SET), "background": "sky", "layout_rules": rules},
            "shift": {"hue_shift": 25.0, "brightness_scale": 0.6, "noise_sigma": 0.03},
            "n_source": 3,
            "n_target": 3,
            "network": dict(TINY_NETWORK),
            "embedding": {"dim": 16},
            "train": {"total_steps": 2, "warmup_steps": 0, "eval_interval": 1, "checkpoint_interval": 10},
            "captions": {"workers": 2},
        }
        data.update(overrides)
        return data

    return make


@pytest.fixture
def run_settings_data():
    return {
        "network": dict(TINY_NETWORK),
        "embedding": {"dim": 16},
        "train": {"total_steps": 2, "warmup_steps": 0, "eval_interval": 1, "checkpoint_interval": 10},
    }
