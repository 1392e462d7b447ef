import pytest
from hypothesis import settings

from vlwb import pipeline

# example generation is seeded, so every run exercises the same cases
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

SMALL = {
    "data": {"classes": ["circle", "square", "triangle", "ring"], "per_class": 10},
    "model": {"patch_dim": 8, "hidden": 16, "token_dim": 8, "text_hidden": 16, "embed_dim": 8},
    "train": {"epochs": 3, "batch": 8},
}


def small_overrides(out_dir, **extra):
    """A run that exercises every stage in a few seconds."""
    cfg = {k: dict(v) for k, v in SMALL.items()}
    cfg["out_dir"] = str(out_dir)
    for key, value in extra.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    return cfg


@pytest.fixture
def small_cfg(tmp_path):
    return pipeline.resolve_config(overrides=small_overrides(tmp_path / "run"))


def _defaults_except_location(cfg):
    return {k: v for k, v in cfg.items() if k not in ("out_dir", "parallelism")}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The seed-42 default pipeline (about three minutes), shared by every test that needs it.

    Setting VLWB_ACCEPTANCE_RUN to a finished default run directory reuses it,
    provided its recorded configuration is the default one.
    """
    import os
    from pathlib import Path

    import tomli

    reuse = os.environ.get("VLWB_ACCEPTANCE_RUN")
    if reuse:
        cfg = pipeline.resolve_config(overrides={"out_dir": reuse})
        recorded = tomli.loads((Path(reuse) / "eval" / "config.toml").read_text())
        if _defaults_except_location(recorded) != _defaults_except_location(cfg):
            raise RuntimeError(f"{reuse} was not produced with the default configuration")
        if not (Path(reuse) / "qd" / "qd.json").exists():
            pipeline.qd_classify(cfg)
        return cfg
    cfg = pipeline.resolve_config(overrides={"out_dir": str(tmp_path_factory.mktemp("default-run"))})
    pipeline.run_all(cfg)
    pipeline.qd_classify(cfg)
    return cfg


_CRITERIA = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


def pytest_collection_modifyitems(items):
    for item in items:
        if "default_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
