import json

import pytest

SMALL_CONFIG = {
    "name": "small",
    "dataset": {"kind": "teacher_student", "n_samples": 64, "seed": 1, "dims": [8, 8, 4],
                "shift_rank": 2},
    "network": {"layer_dims": [8, 8, 4], "activation": "tanh", "init_seed": 0},
    "schemes": ["vanilla", "lora_ga"],
    "train": {"optimizer": "adamw", "lr": 0.01, "steps": 20, "batch_size": 16},
    "ga_init": {"rank": 1, "alpha": 4.0, "gamma": 4.0, "sampled_batch_size": 16},
    "seeds": [0, 1],
    "stability": {"grid": [[16, 16, 2], [32, 32, 2], [8, 8, 8]], "samples": 200},
    "jobs": 1,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
