import csv
import io

import pytest

from idr.dataset import NoisyImages, synthetic_corpus
from idr.metrics import PSNR_SENTINEL
from idr.noise import GaussianSpec
from idr.pilot import (
    CellRunner,
    PilotConfig,
    long_format_csv,
    make_split,
    run_finding1,
    run_finding2,
)
from idr.scheduler import IdrConfig

SPEC = GaussianSpec((5, 20))


@pytest.fixture(scope="module")
def clean():
    return synthetic_corpus(6, 24, 0)


@pytest.fixture(scope="module")
def cfg():
    train = IdrConfig(mode="baseline", epochs=1, iters_per_epoch=2, batch_size=2, patch_size=16)
    return PilotConfig(train=train, seeds=(0, 1), levels=2)


def test_split_is_deterministic_and_typed(clean, cfg):
    a, b = make_split(clean, SPEC, cfg), make_split(clean, SPEC, cfg)
    assert a.key == b.key and a.levels == [5.0, 20.0]
    assert len(a.train) == 4 and len(a.test) == 2
    assert isinstance(a.test_sets[0].noisy, NoisyImages)
    with pytest.raises(TypeError):
        make_split(NoisyImages(list(clean)), SPEC, cfg)


def test_zero_noise_gives_sentinel_everywhere(clean, cfg):
    rep = run_finding1(clean, GaussianSpec((0, 0)), cfg)
    for cond in rep.psnr:
        assert rep.median(cond) == [PSNR_SENTINEL] * 2
    assert "inf" in rep.to_csv()


def test_finding1_and_finding2_share_cells(clean, cfg):
    runner = CellRunner()
    rep1 = run_finding1(clean, SPEC, cfg, runner=runner)
    assert len(runner.results) == 4  # two trained conditions x two seeds
    rows = list(csv.reader(io.StringIO(rep1.to_csv())))
    assert rows[0] == ["level", "noisy_input", "noisier_noisy", "noisy_clean"]
    assert [r[0] for r in rows[1:]] == ["5", "20"]
    assert rep1.median("noisy_input")[0] > rep1.median("noisy_input")[1]

    rep2 = run_finding2(clean, SPEC, "gaussian_noise", [1.0], cfg, runner=runner)
    assert len(runner.results) == 6  # sigma 0 reused from the noisy-clean cells
    nc = rep1.psnr["noisy_clean"]
    assert rep2.reference == {s: pytest.approx(sum(nc[s]) / 2) for s in cfg.seeds}
    diffs = [rep2.psnr[1.0][s] - rep2.reference[s] for s in cfg.seeds]
    assert rep2.drop(1.0) == pytest.approx(sum(diffs) / 2)  # median of two
    rows2 = list(csv.reader(io.StringIO(rep2.to_csv())))
    assert rows2[0] == ["bias", "sigma", "psnr", "drop"]
    assert rows2[1][:2] == ["gaussian_noise", "1"]


def test_repeat_runs_are_identical(clean, cfg):
    a = run_finding1(clean, SPEC, cfg, conditions=("noisier_noisy",))
    b = run_finding1(clean, SPEC, cfg, conditions=("noisier_noisy",))
    assert a.to_csv() == b.to_csv()


def test_long_format(clean, cfg):
    rep = run_finding1(clean, GaussianSpec((0, 0)), cfg, conditions=("noisy_input",))
    lines = long_format_csv(rep.rows()).splitlines()
    assert lines[0] == "level,condition,psnr,seed"
    assert lines[1] == "0,noisy_input,inf,0"
    assert len(lines) == 1 + 2 * 2


def test_finding2_validation(clean, cfg):
    with pytest.raises(ValueError, match="ascending"):
        run_finding2(clean, SPEC, "gaussian_noise", [3, 1], cfg)
    with pytest.raises(ValueError):
        run_finding2(clean, SPEC, "gaussian_noise", [-1], cfg)
    with pytest.raises(ValueError):
        run_finding2(clean, SPEC, "jpeg", [1], cfg)
    with pytest.raises(ValueError):
        run_finding1(clean, SPEC, cfg, conditions=("oracle",))
