import json

import pytest

TINY = {
    "model": {"d": 16, "heads": 2, "layers": 1, "ffn_width": 32, "max_sequence_length": 128},
    "task": {"noise_ratio": 0.5, "seed": 3},
    "pretrain": {"steps": 20, "batch_size": 8},
    "finetune": {"steps": 6, "batch_size": 4, "adapter_dim": 4, "lowrank_r": 8, "lowrank_alpha": 8},
    "pretrain_count": 40,
    "pretrain_noise_ratios": [0.0, 0.5],
    "pretrain_copy_steps": 10,
    "pretrain_copy_count": 20,
    "pretrain_copy_length": 32,
    "cmrr_values": [1, 10],
    "noise_ratios": [0.5],
    "seeds": [0, 1],
    "train_count": 8,
    "eval_count": 6,
    "trace_count": 4,
}


@pytest.fixture
def tiny_config(tmp_path):
    """Write a seconds-scale experiment config and return its path."""

    def make(**overrides):
        cfg = {**TINY, "output_dir": str(tmp_path / "run"), **overrides}
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return path

    return make
