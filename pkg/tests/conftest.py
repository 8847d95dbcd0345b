import copy

import pytest
import yaml

TINY_CONFIG = {
    "seed": 3,
    "data": {"synthetic": {"size": [64, 64], "n_per_domain": 10, "train_fraction": 0.8, "distractors": 2}},
    "agm": {
        "model": {"encoder_channels": [4, 8, 8], "input_size": [32, 32]},
        "optim": {"iterations": 3, "batch_size": 4},
    },
    "segmenter": {
        "model": {
            "image_size": [64, 64],
            "encoder_widths": [4, 4, 8, 8],
            "tap_channels": [16, 8, 8],
            "prompt_frequencies": 2,
            "ipef": {"fused_channels": [16, 8, 8]},
        },
        "optim": {"iterations": 3, "batch_size": 2},
    },
    "eval": {"overlays": 1},
}


def _merge(base, override):
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


@pytest.fixture
def tiny_config(tmp_path):
    """Write a seconds-scale config rooted in ``tmp_path``; returns (path, dict)."""

    def make(**changes):
        doc = copy.deepcopy(TINY_CONFIG)
        doc["data"]["root"] = str(tmp_path / "data")
        doc["eval"]["output_dir"] = str(tmp_path / "runs")
        _merge(doc, changes)
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(doc))
        return path, doc

    return make


ACCEPTANCE_LINES = []  # (criterion number, line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
