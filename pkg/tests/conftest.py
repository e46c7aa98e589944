import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T


TINY_PROFILE = {"sample_rate": 8000, "n_fft": 256, "hop": 64, "mel_bins": 16, "denoiser_width": 8,
                "embed_width": 4, "vae_width": 4, "embed_dim": 8}


def tiny_config(corpus_dir, output_dir, **overrides):
    """A run configuration small enough to train and sample in seconds."""
    cfg = {
        "output_dir": str(output_dir),
        "seed": 0,
        "data": {"train_manifest": str(corpus_dir / "manifest.csv"), "clip_seconds": 1.0},
        "profiles": {"small": dict(TINY_PROFILE), "large": dict(TINY_PROFILE)},
        "schedule": {"n": 50},
        "sampler": {"steps": 5},
        "training": {"clap_epochs": 2, "vae_epochs": 2, "pretrain_epochs": 2, "finetune_epochs": 2,
                     "clap_batch_size": 8, "vae_batch_size": 8, "ldm_batch_size": 8},
        "generate": {"count": 2, "classes": ["dog_bark", "rain"]},
        "filter": {"candidates_per_round": 3, "max_resample_rounds": 2, "reference_k": 2},
        "vocoder": {"iters": 2},
        "evaluate": {"dim": 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from foleygen.synthetic import write_corpus

    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, per_class=3, seconds=1.0, sample_rate=8000, seed=0)
    return root


_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.failed:
        entry["ok"] = False
        entry["seen"] = True
    elif report.when == "call":
        entry["seen"] = True


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "SKIP" if not entry["seen"] else "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")
