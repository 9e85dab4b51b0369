import numpy as np
import pytest

from tenvoo.config import load_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_overrides(out_dir, **extra):
    """A config small enough for end-to-end tests on one core."""
    over = {
        "model": {"widths": [4, 8, 8], "time_dim": 8, "groups": 2, "blocks_per_level": 1},
        "diffusion": {"T": 6},
        "data": {"grid": [32, 32, 32], "n_per_tag": 4, "tags": ["pretrain", "shiftA"]},
        "training": {"pretrain_steps": 3, "finetune_steps": 2},
        "sampling": {"n": 2, "seed": 5},
        "ablation": {"ranks": [1, 2, 4, 6], "finetune_steps": 1, "n_samples": 2},
        "out_dir": str(out_dir),
    }
    for k, v in extra.items():
        over.setdefault(k, {}).update(v) if isinstance(v, dict) else over.__setitem__(k, v)
    return over


@pytest.fixture
def tiny_cfg(tmp_path, monkeypatch):
    monkeypatch.delenv("TENVOO_OUT", raising=False)
    return load_config(overrides=tiny_overrides(tmp_path / "run"))
