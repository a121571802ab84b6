import os
import sys
from dataclasses import replace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lora_ranging.config import RunConfig  # noqa: E402
from lora_ranging.dataset import sample_geometry  # noqa: E402
from lora_ranging.pipeline import fit_variants, prepare  # noqa: E402
from lora_ranging.synth import OutlierModel, SynthConfig, generate_campaign  # noqa: E402


@pytest.fixture(scope="session")
def geometry():
    return sample_geometry()


def small_campaign(n=600, sigma=4.0, seed=0, outliers=False, **kw):
    cfg = SynthConfig(n_packets_per_device=n, shadowing_sigma_db=sigma, seed=seed,
                      outlier=OutlierModel(rate=0.005 if outliers else 0.0), **kw)
    return generate_campaign(cfg)[0], cfg


@pytest.fixture(scope="session")
def noiseless_campaign():
    cfg = SynthConfig(n_packets_per_device=400).noiseless()
    return generate_campaign(cfg)[0], cfg


@pytest.fixture(scope="session")
def default_run():
    """The default CLI campaign pushed through preprocessing and all three fits."""
    cfg = RunConfig.load()
    synth = cfg.synth_config(sample_geometry())
    records, truth = generate_campaign(synth)
    prepared = prepare(records, cfg)
    models = fit_variants(prepared.train, synth.geometry, cfg, test=prepared.test)
    return {"cfg": cfg, "synth": synth, "records": records, "truth": truth,
            "prepared": prepared, "models": models}


@pytest.fixture(scope="session")
def default_eval(default_run):
    from lora_ranging.pipeline import evaluate_variants
    report, estimates = evaluate_variants(default_run["prepared"].test, default_run["synth"].geometry,
                                          default_run["models"], default_run["cfg"])
    return report, estimates


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture()
def verdict(request):
    """Record one acceptance line; call as ``verdict("3", ok, "detail")``."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(criterion, ok, detail):
        lines.append(f"criterion {criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
