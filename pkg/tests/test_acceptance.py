"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import math
import time

import numpy as np
import pytest
import torch
import yaml
from scipy.io import wavfile

from foleygen.dataio import CLASS_NAMES
from foleygen.fadmetric import GaussianStats, fit_gaussian, frechet_distance, report_from_scores
from foleygen.latentdiff import (
    DenoiserConfig,
    DenoiserModel,
    SamplerConfig,
    build_schedule,
    denoise_loss,
    q_sample,
    q_step,
    sample_latents,
)
from foleygen.orchestrator.checkpoint import load_checkpoint, restore, save_checkpoint
from foleygen.orchestrator.cli import main
from foleygen.orchestrator.config import load_config
from foleygen.orchestrator.pipeline import Workspace, evaluate_run, generate_all, make_backend, embed_outputs, embed_reference
from foleygen.selector import Candidate, FilterPolicy, Target, apply_threshold_filter, select_reference
from foleygen.specops import LOG_FLOOR, SMALL_MEL
from foleygen.synthetic import write_corpus
from foleygen.torchutil import state_checksum
from foleygen.vaecodec import VaeConfig, VaeModel, vae_encode

from conftest import tiny_config


def write_yaml(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


# 1 ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "FAD aggregation reproduces the 4.765 average")
def test_fad_aggregation():
    start = time.perf_counter()
    scores = [3.53, 5.04, 5.655, 2.8, 1.92, 8.88, 5.53]
    report = report_from_scores(dict(zip(CLASS_NAMES, scores)))
    assert abs(report.average - 4.765) <= 1e-9
    assert time.perf_counter() - start < 1.0


# 2 ---------------------------------------------------------------------------


def _stats(mu, cov):
    return GaussianStats(np.asarray(mu, float), np.asarray(cov, float), 2)


@pytest.mark.criterion(2, "Frechet distance oracle suite")
def test_frechet_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 8))
    g = fit_gaussian(x)
    assert frechet_distance(g, g) == pytest.approx(0.0, abs=1e-9)
    for _ in range(50):
        m1, m2 = rng.normal(size=1), rng.normal(size=1)
        v1, v2 = rng.uniform(0.01, 4, 1), rng.uniform(0.01, 4, 1)
        expect = float((m1 - m2)[0] ** 2 + v1[0] + v2[0] - 2 * math.sqrt(v1[0] * v2[0]))
        assert abs(frechet_distance(_stats(m1, [v1]), _stats(m2, [v2])) - expect) <= 1e-9
        m1, m2 = rng.normal(size=2), rng.normal(size=2)
        v1, v2 = rng.uniform(0.01, 4, 2), rng.uniform(0.01, 4, 2)
        expect = float(np.sum((m1 - m2) ** 2) + np.sum((np.sqrt(v1) - np.sqrt(v2)) ** 2))
        assert abs(frechet_distance(_stats(m1, np.diag(v1)), _stats(m2, np.diag(v2))) - expect) <= 1e-9
    for _ in range(100):
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        ga, gb = _stats(rng.normal(size=8), a @ a.T), _stats(rng.normal(size=8), b @ b.T)
        d = frechet_distance(ga, gb)
        assert abs(d - frechet_distance(gb, ga)) <= 1e-8 * max(1.0, d)
        v = rng.normal(size=8) * 3
        moved = frechet_distance(_stats(ga.mean + v, ga.covariance), _stats(gb.mean + v, gb.covariance))
        assert abs(moved - d) <= 1e-8 * max(1.0, d)
    assert time.perf_counter() - start < 10.0


# 3 ---------------------------------------------------------------------------


@pytest.mark.criterion(3, "diffusion math suite")
def test_diffusion_math():
    start = time.perf_counter()
    s = build_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0) and s.alpha_bars[0] < 1 and s.alpha_bars[-1] > 0

    rng = np.random.default_rng(3)
    z0 = np.array([1.0, -2.0, 0.5])
    for n in (10, 250, 1000):
        z = np.tile(z0, (10_000, 1))
        for k in range(1, n + 1):
            z = q_step(z, k, rng.standard_normal(z.shape), s)
        closed = np.stack([q_sample(z0, n, e, s) for e in rng.standard_normal((10_000, 3))])
        np.testing.assert_allclose(z.var(axis=0), closed.var(axis=0), rtol=0.05)
        np.testing.assert_allclose(z.var(axis=0), 1 - s.alpha_bar(n), rtol=0.05)

    gen = torch.Generator().manual_seed(3)
    z0 = torch.randn(10_000, 1, 2, 2, generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    n = torch.randint(1, 1001, (10_000,), generator=gen)
    cond = torch.zeros(10_000, 4)
    assert float(denoise_loss(lambda z, k, c: eps, z0, n, eps, cond, s)) == 0.0
    zero = float(denoise_loss(lambda z, k, c: torch.zeros_like(z), z0, n, eps, cond, s))
    assert abs(zero - 1.0) <= 0.05

    model = DenoiserModel(DenoiserConfig(2, 4, 4, 4, 8, (1, 2)))
    calls = []

    def counting(z, k, c):
        calls.append(int(k[0]))
        return torch.zeros_like(z)

    sample_latents(model, np.zeros(4), SamplerConfig(200, 0.0), s, seed=0, count=1, eps_model=counting)
    assert len(calls) == 200 and calls[0] == 1000 and calls[-1] == 5
    assert time.perf_counter() - start < 120.0


# 4 ---------------------------------------------------------------------------


@pytest.mark.criterion(4, "finite-difference gradient check of the noise-prediction loss")
def test_gradient_check():
    start = time.perf_counter()
    s = build_schedule()
    cfg = DenoiserConfig(latent_channels=2, latent_frames=4, latent_bins=4, cond_dim=4, width=8, channel_mults=(1, 2))
    model = DenoiserModel(cfg, seed=4, schedule=s).double()
    gen = torch.Generator().manual_seed(4)
    z0 = torch.randn(4, *cfg.latent_shape, generator=gen, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    n = torch.tensor([1, 100, 500, 1000])
    cond = torch.randn(4, 4, generator=gen, dtype=torch.float64)
    model.zero_grad()
    denoise_loss(model, z0, n, eps, cond, s).backward()
    named = [(k, p) for k, p in model.named_parameters()]
    rng = np.random.default_rng(4)
    good = 0
    trials = 200
    h = 1e-6
    for _ in range(trials):
        _, p = named[rng.integers(len(named))]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(denoise_loss(model, z0, n, eps, cond, s))
            p[idx] = orig - h
            down = float(denoise_loss(model, z0, n, eps, cond, s))
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(p.grad[idx])
        good += abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric), 1e-10)
    assert good / trials >= 0.95
    assert time.perf_counter() - start < 120.0


# 5 ---------------------------------------------------------------------------


def _cands(scores, names):
    return [Candidate(f"c{i}", i, np.zeros(1), scores=dict(zip(names, row))) for i, row in enumerate(scores)]


def _kept(cands, policy, targets, fallback=False):
    return {c.candidate_id for c in apply_threshold_filter(cands, policy, "k", targets, fallback).accepted}


@pytest.mark.criterion(5, "filter algebra suite")
def test_filter_algebra():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    for _ in range(200):
        n_t = int(rng.integers(1, 4))
        names = [f"t{j}" for j in range(n_t)]
        targets = [Target(nm, np.zeros(1)) for nm in names]
        cands = _cands(rng.uniform(-1, 1, (int(rng.integers(1, 30)), n_t)), names)
        lo, hi = sorted(rng.uniform(-1, 1, 2))
        everything = {c.candidate_id for c in cands}
        # Monotonicity and subset.
        k_lo = _kept(cands, FilterPolicy({"k": lo}), targets)
        k_hi = _kept(cands, FilterPolicy({"k": hi}), targets)
        assert k_hi <= k_lo <= everything
        # Conjunctive acceptance is the intersection of per-target acceptances.
        conj = _kept(cands, FilterPolicy({"k": hi}, "conjunctive", tuple(targets)), targets)
        per = [_kept(cands, FilterPolicy({"k": hi}), [t]) for t in targets]
        assert conj == set.intersection(*per)
        # Never empty with the fallback, even above every score.
        out = apply_threshold_filter(cands, FilterPolicy({"k": 1.0}), "k", targets, fallback=True)
        assert len(out.accepted) >= 1
        if out.fallback:
            best = max(c.scores[names[0]] for c in cands)
            assert out.accepted[0].scores[names[0]] == best
        # Planted outlier never enters the motor reference.
        dim = int(rng.integers(4, 16))
        base = rng.normal(size=dim)
        base /= np.linalg.norm(base)
        size = int(rng.integers(3, 20))
        embs = [base + 0.2 * rng.normal(size=dim) for _ in range(size)]
        embs = [e / np.linalg.norm(e) for e in embs]
        at = int(rng.integers(0, size + 1))
        embs.insert(at, -base)
        ref = select_reference(embs, int(rng.integers(1, size + 1)))
        assert at not in ref.indices
    assert time.perf_counter() - start < 30.0


# 6 ---------------------------------------------------------------------------

E2E_CONFIG = {
    "output_dir": "out",
    "seed": 0,
    "data": {"train_manifest": "train/manifest.csv", "pretrain_manifest": "pretrain/manifest.csv",
             "reference_manifest": "reference/manifest.csv"},
    "training": {"clap_epochs": 8, "vae_epochs": 10, "pretrain_epochs": 15, "finetune_epochs": 50},
    "generate": {"count": 8},
    "filter": {"candidates_per_round": 12, "max_resample_rounds": 2},
}


@pytest.mark.slow
@pytest.mark.criterion(6, "desk-scale end-to-end pipeline on a synthetic corpus")
def test_end_to_end(tmp_path):
    start = time.perf_counter()
    write_corpus(tmp_path / "train", 40, 4.0, 22050, seed=1)
    write_corpus(tmp_path / "pretrain", 6, 10.0, 22050, seed=2, captions=True)
    write_corpus(tmp_path / "reference", 20, 4.0, 22050, seed=3)
    cfg_path = write_yaml(tmp_path / "run.yaml", E2E_CONFIG)
    assert main(["pipeline", "--config", str(cfg_path)]) == 0
    cfg = load_config(cfg_path)
    out = tmp_path / "out"
    filtered = evaluate_run(cfg, out, write=False)

    backend = make_backend(cfg)
    generated = embed_outputs(out, backend, CLASS_NAMES)
    reference = embed_reference(cfg, tmp_path / "reference" / "manifest.csv", backend, cfg.labels)
    ref_stats = {c: fit_gaussian(reference[c]) for c in CLASS_NAMES}
    matched_wins = 0
    for i, c in enumerate(CLASS_NAMES):
        shuffled = CLASS_NAMES[(i + 1) % len(CLASS_NAMES)]
        gen = fit_gaussian(generated[c])
        matched = frechet_distance(gen, ref_stats[c])
        control = frechet_distance(gen, ref_stats[shuffled])
        print(f"{c}: matched {matched:.4f} vs shuffled ({shuffled}) {control:.4f}")
        matched_wins += matched < control

    generate_all(cfg, out_dir=tmp_path / "unfiltered", filtered=False)
    unfiltered = evaluate_run(cfg, tmp_path / "unfiltered", write=False)
    filter_wins = 0
    for c in CLASS_NAMES:
        print(f"{c}: filtered {filtered.per_class[c]:.4f} vs unfiltered {unfiltered.per_class[c]:.4f}")
        filter_wins += filtered.per_class[c] <= unfiltered.per_class[c]
    elapsed = time.perf_counter() - start
    print(f"matched wins {matched_wins}/7, filter wins {filter_wins}/7, {elapsed:.0f} s")
    assert matched_wins >= 6
    assert filter_wins >= 5
    assert elapsed < 30 * 60


# 7 ---------------------------------------------------------------------------


@pytest.mark.criterion(7, "determinism and persistence")
def test_determinism(tiny_corpus, tmp_path):
    start = time.perf_counter()
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg_path = write_yaml(tmp_path / f"{run}.yaml", tiny_config(tiny_corpus, out, seed=11))
        assert main(["pipeline", "--config", str(cfg_path)]) == 0
        outs.append(out)
    a, b = outs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "run.log")
    assert any(p.suffix == ".wav" for p in files) and any(p.suffix == ".ckpt" for p in files)
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "run.log")
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    ws = Workspace(load_config(tmp_path / "a.yaml"))
    for profile in ws.profiles_in_use():
        clap, vae = ws.load_stage(profile, "clap"), ws.load_stage(profile, "vae")
        frozen = {"clap": state_checksum(clap), "vae": state_checksum(vae)}
        for stage in ("ldm_pretrain", "ldm_finetune"):
            path = ws.checkpoint_path(profile, stage)
            ckpt = load_checkpoint(path)
            assert ckpt.extra["frozen_checksums"] == frozen
            model = restore(ws.fresh_model(profile, stage), ckpt)
            copy = tmp_path / "copy.ckpt"
            save_checkpoint(stage, model, ckpt.config, copy, ckpt.extra)
            assert copy.read_bytes() == path.read_bytes()
    assert time.perf_counter() - start < 5 * 60


# 8 ---------------------------------------------------------------------------


@pytest.mark.criterion(8, "shape contracts")
def test_shape_contracts(tmp_path):
    start = time.perf_counter()
    mel = np.full((352, 64), LOG_FLOOR)
    assert SMALL_MEL.frames == 352 and SMALL_MEL.mel_bins == 64
    for c, shape in ((4, (88, 16, 4)), (8, (44, 8, 4))):
        mean, logvar = vae_encode(VaeModel(VaeConfig(352, 64, c, width=4)), mel)
        assert mean.shape == shape and logvar.shape == shape

    write_corpus(tmp_path / "train", 1, 4.0, 22050, seed=8)
    cfg = {
        "output_dir": "out",
        "data": {"train_manifest": "train/manifest.csv"},
        "training": {"clap_epochs": 0, "vae_epochs": 0, "pretrain_epochs": 0, "finetune_epochs": 0},
        "sampler": {"steps": 2},
        "generate": {"count": 1, "classes": ["keyboard", "rain"]},
        "filter": {"candidates_per_round": 1, "max_resample_rounds": 1, "reference_k": 1},
        "vocoder": {"iters": 1},
    }
    cfg_path = write_yaml(tmp_path / "run.yaml", cfg)
    for verb in ("train-clap", "train-vae", "pretrain-ldm", "finetune-ldm", "generate"):
        assert main([verb, "--config", str(cfg_path)]) == 0
    for name in ("keyboard", "rain"):
        rate, data = wavfile.read(tmp_path / "out" / name / f"{name}_0.wav")
        assert rate == 22050 and data.shape == (88200,)
    assert time.perf_counter() - start < 60.0
