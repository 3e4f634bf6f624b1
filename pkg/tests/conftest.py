from pathlib import Path

import pytest
import yaml

from agemorph import cli


TINY_RUN_CONFIG = {
    "data": {"source": "synth", "synth_n": 60, "synth_seed": 1,
             "train_fraction": 0.9, "split_seed": 0},
    "model": {"gen_base_channels": 4, "gen_down_blocks": 0, "gen_res_blocks": 0,
              "disc_base_channels": 4, "disc_layers": 1},
    "train": {"batch_size": 4, "epochs": 100, "max_steps": 20, "seed": 5,
              "resolution": [8, 8], "checkpoint_interval": 0, "log_interval": 0},
}


def write_tiny_config(directory: Path, run_dir: Path, **train_overrides) -> Path:
    cfg = {k: dict(v) for k, v in TINY_RUN_CONFIG.items()}
    cfg["train"]["run_dir"] = str(run_dir)
    cfg["train"].update(train_overrides)
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One 20-step training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("tiny_run")
    run_dir = root / "run"
    cfg_path = write_tiny_config(root, run_dir)
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    return {"root": root, "config": cfg_path, "run_dir": run_dir,
            "ckpt": run_dir / "checkpoints" / "last.pt"}
