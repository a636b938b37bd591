import numpy as np
import pytest

from idr.model import ModelConfig, build_unet


def identity_model(channels: int = 1, levels: int = 3, base: int = 4):
    """Pass-through U-Net for non-negative inputs (leaky ReLU is exact there).

    The first encoder conv copies each input channel, the finest decoder
    conv copies the skip connection and the 1x1 head copies it out; every
    other weight is zero.
    """
    cfg = ModelConfig(levels=levels, base_channels=base, in_channels=channels)
    model = build_unet(cfg)
    for t in model.params.values():
        t.data[...] = 0.0
    for c in range(channels):
        model.params["enc0.0.weight"].data[c, c, 1, 1] = 1.0
        if levels > 1:
            up = cfg.widths()[1]
            model.params["dec0.0.weight"].data[c, up + c, 1, 1] = 1.0
        model.params["out.weight"].data[c, c, 0, 0] = 1.0
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
