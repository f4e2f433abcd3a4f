"""Acceptance suite: one test per criterion, each reporting PASS/FAIL in the summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the criterion lines
appear in the "acceptance criteria" section at the end of the output.
"""
import csv
import logging
import math
import time
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import oracles
from ecoperceiver import cli, config, metrics, pipeline, trainer
from ecoperceiver.encoding import EncodingConfig, build_input, fourier_encode
from ecoperceiver.model import (EcoPerceiver, ModelConfig, log_parameter_count, mse_loss, parameter_count,
                                windowed_cross_attention)
from ecoperceiver.pipeline import RawRelease
from ecoperceiver.tensor import Tensor, default_dtype, finite_difference_grad, relative_error
from helpers import jitter_parameters, random_batch, tiny_config

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"
DESK = ROOT / "configs" / "desk.conf"
IGBP_SITE_COUNTS = {"WET": (42, 5), "DNF": (0, 1), "WSA": (8, 2), "EBF": (10, 3), "ENF": (80, 5), "DBF": (42, 5),
          "CRO": (44, 5), "MF": (10, 3), "GRA": (59, 5), "OSH": (25, 5), "CVM": (1, 1), "CSH": (5, 2),
          "SAV": (11, 3), "SNO": (0, 1), "WAT": (1, 1)}


def _rows(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# 1 ---------------------------------------------------------------------------------
def test_c01_fourier_periodicity(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        x, K = rng.uniform(-1.0, 1.0), int(rng.integers(1, 17))
        a, b = fourier_encode(x, K), fourier_encode(x + 2.0, K)
        assert a.dtype == np.float32
        worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    criterion(1, "Fourier periodicity", worst < 1e-6 and elapsed < 1.0,
              f"max |f(x)-f(x+2)| = {worst:.2e} over 1000 draws in {elapsed:.2f}s")


# 2 ---------------------------------------------------------------------------------
def test_c02_encoding_width(criterion):
    H_i = EncodingConfig(K=12, l_emb=16).H_i
    criterion(2, "Encoding width", H_i == 40, f"H_i = {H_i}")


# 3 ---------------------------------------------------------------------------------
def test_c03_wca_oracle(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    with default_dtype(np.float64):
        for trial in range(60):
            width = int(rng.choice([4, 8, 16]))
            heads = int(rng.choice([h for h in (1, 2, 4) if width % h == 0]))
            cfg = tiny_config(T=int(rng.integers(1, 5)), H_l=width, H_a=width, n_heads=heads)
            model = EcoPerceiver(cfg, seed=trial)
            jitter_parameters(model, rng, 0.2)
            batch = random_batch(cfg, int(rng.integers(1, 3)), rng, p_present=float(rng.uniform(0.2, 1.0)))
            inputs, mask = build_input(batch, model.params, cfg.encoding())
            latent = rng.normal(size=(len(batch.target), cfg.T, cfg.H_l))
            got = windowed_cross_attention(Tensor(latent), inputs, mask, model.params, cfg).data
            p = {k: v.data for k, v in model.params.items()}
            want = oracles.full_cross_attention(latent, inputs.data, mask, p, cfg.n_heads)
            worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - t0
    criterion(3, "WCA oracle equivalence", worst < 1e-5 and elapsed < 10.0,
              f"60 instances (V_t=4), max abs diff {worst:.2e} in {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------------
def test_c04_causality(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    cfg = tiny_config(T=6, M=2, use_causal_mask=True)
    model = EcoPerceiver(cfg, seed=3)
    jitter_parameters(model, rng, 0.2)
    batch = random_batch(cfg, 2, rng, p_present=1.0)
    base = model(batch, return_latent=True).data
    worst, pairs, moved = 0.0, 0, True
    for tp in range(cfg.T):
        b = random_batch(cfg, 2, rng, p_present=1.0)
        b.mask = batch.mask.copy()
        b.values, b.bands = batch.values.copy(), batch.bands.copy()
        b.values[:, tp] += rng.normal(size=b.values[:, tp].shape)
        b.bands[:, tp] += rng.normal(size=b.bands[:, tp].shape)
        out = model(b, return_latent=True).data
        for t in range(tp):
            worst = max(worst, float(np.max(np.abs(out[:, t] - base[:, t]))))
            pairs += 1
        moved &= bool(np.max(np.abs(out[:, tp] - base[:, tp])) > 1e-6)
    elapsed = time.perf_counter() - t0
    criterion(4, "Causality", worst < 1e-6 and moved and elapsed < 10.0,
              f"{pairs} (t, t') pairs at T=6, max change {worst:.1e}; perturbed token moves: {moved}")


# 5 ---------------------------------------------------------------------------------
def test_c05_masked_invariance(criterion):
    rng = np.random.default_rng(4)
    cfg = tiny_config(T=4)
    model = EcoPerceiver(cfg, seed=5)
    jitter_parameters(model, rng, 0.2)
    n_tab = cfg.encoding().n_tabular
    changed = 0
    for _ in range(100):
        batch = random_batch(cfg, 3, rng, p_present=0.5)
        base = model(batch).data
        noisy = random_batch(cfg, 3, rng)
        noisy.mask, noisy.target = batch.mask, batch.target
        noisy.values = np.where(batch.mask[..., :n_tab], batch.values, noisy.values * 100)
        noisy.bands = np.where(batch.mask[..., n_tab:, None], batch.bands, noisy.bands * 100)
        changed += int(not np.array_equal(model(noisy).data, base))
    criterion(5, "Masked-observation invariance", changed == 0, f"{changed}/100 trials changed the output")


# 6 ---------------------------------------------------------------------------------
def test_c06_gradient_check(criterion):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    with default_dtype(np.float64):
        cfg = tiny_config(T=3, N=2, M=1)
        model = EcoPerceiver(cfg, seed=7)
        jitter_parameters(model, rng, 0.2)
        batch = random_batch(cfg, 2, rng)

        def loss():
            return mse_loss(model(batch), batch.target)

        model.zero_grad()
        loss().backward()
        worst, worst_name, n = 0.0, "", 0
        for name, p in model.params.items():
            num = finite_difference_grad(lambda: loss().item(), p, h=1e-6)
            err = float(relative_error(p.grad, num).max())
            n += p.data.size
            if err > worst:
                worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    criterion(6, "End-to-end gradient check", worst < 1e-4 and elapsed < 120.0,
              f"{len(model.params)} tensors / {n} scalars, max rel err {worst:.1e} ({worst_name}) in {elapsed:.1f}s")


# 7 ---------------------------------------------------------------------------------
def test_c07_split_formula(criterion):
    table_ok = all(pipeline.n_test_sites(a + b) == b for a, b in IGBP_SITE_COUNTS.values())
    sweep_ok = all(pipeline.n_test_sites(n) == min(5, math.ceil(0.2 * n)) for n in range(1, 201))
    sites = {f"{label}-{i}": label for label, (a, b) in IGBP_SITE_COUNTS.items() for i in range(a + b)}
    plan = pipeline.stratified_split(sites, seed=0)
    plan_ok = all(len(plan.groups[label]["test"]) == b for label, (_, b) in IGBP_SITE_COUNTS.items())
    criterion(7, "Split formula", table_ok and sweep_ok and plan_ok,
              f"site table rows match: {table_ok and plan_ok}; sweep n=1..200 holds: {sweep_ok}")


# 8 ---------------------------------------------------------------------------------
def test_c08_nse_anchors(criterion):
    obs = np.random.default_rng(8).normal(size=50)
    perfect = metrics.nse(obs, obs)
    mean = metrics.nse(np.full_like(obs, obs.mean()), obs)
    fixture = metrics.nse([0, 0, 2], [0, 1, 2])
    ok = perfect == 1.0 and abs(mean) <= 1e-12 and fixture == 0.5
    criterion(8, "NSE anchors", ok, f"perfect {perfect}, mean-predictor {mean:.1e}, fixture {fixture}")


# 9 ---------------------------------------------------------------------------------
def test_c09_paired_t_test(criterion):
    d = np.array([0.1] * 5 + [0.3] * 5)
    res = metrics.paired_t_test(d, np.zeros(10))
    criterion(9, "Paired t-test", res.df == 9 and abs(res.t - 6.0) <= 0.01,
              f"df = {res.df}, t = {res.t:.4f}, p = {res.p:.2e}")


# 10 --------------------------------------------------------------------------------
def _yearly_release(rid, first_year, last_year, value, released):
    idx = pd.date_range(f"{first_year}-01-01", f"{last_year}-12-31 23:00", freq="60min", name=pipeline.TIME_COLUMN)
    table = pd.DataFrame({"TA_F": np.full(len(idx), value), "TA_F_QC": np.zeros(len(idx))}, index=idx)
    return RawRelease(rid, date.fromisoformat(released), table)


def test_c10_pipeline_goldens(criterion, tmp_path):
    a = _yearly_release("warm_winter", 2001, 2020, 1.0, "2022-01-01")
    b = _yearly_release("recent", 2019, 2022, 2.0, "2023-06-01")
    fused = pipeline.fuse_releases([a, b])
    fusion_ok = (fused.index[0] == pd.Timestamp("2001-01-01") and fused.index[-1] == pd.Timestamp("2022-12-31 23:00")
                 and (fused.loc[:"2018-12-31 23:00", "TA_F"] == 1.0).all()
                 and (fused.loc["2019-01-01":, "TA_F"] == 2.0).all())

    idx = pd.date_range("2020-01-01", periods=8, freq="60min", name=pipeline.TIME_COLUMN)
    flags = np.array([0, 1, 2, 3, 3, 2, 1, 0], float)
    table = pd.DataFrame({"TA_F": np.arange(8.0), "TA_F_QC": flags}, index=idx)
    kept, _ = pipeline.apply_qc_leniency(table, 1)
    qc_ok = kept["TA_F"].notna().tolist() == (flags <= 1).tolist()

    rel = pipeline.read_release_csv(DATA / "downsample_input.csv")
    out = pipeline.write_table_csv(pipeline.downsample_hourly(rel.table), tmp_path / "hourly.csv")
    golden_ok = out.read_bytes() == (DATA / "downsample_golden.csv").read_bytes()
    criterion(10, "Pipeline goldens", fusion_ok and qc_ok and golden_ok,
              f"overlap from newer release: {fusion_ok}; max_qc=1 keeps flags 0/1 only: {qc_ok}; "
              f"downsampling byte-exact: {golden_ok}")


# 11 / 12 / 13 share one processed default corpus ---------------------------------------
@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    assert cli.main(["synth", "--out", str(root / "raw")]) == 0
    assert cli.main(["pipeline", "--in", str(root / "raw"), "--out", str(root / "proc")]) == 0
    return root


def _held_out(summary_rows):
    eco = {r["igbp"]: float(r["ecoperceiver_nse"]) for r in summary_rows}
    lin = {r["igbp"]: float(r["linear_nse"]) for r in summary_rows}
    return eco, lin


@pytest.mark.slow
def test_c11_synthetic_learning(criterion, default_corpus):
    root = default_corpus
    t0 = time.perf_counter()
    assert cli.main(["train", "--data", str(root / "proc"), "--out", str(root / "runs"),
                     "--config", str(DESK)]) == 0
    assert cli.main(["eval", "--data", str(root / "proc"), "--runs", str(root / "runs"), "--out",
                     str(root / "eval"), "--config", str(DESK)]) == 0
    elapsed = time.perf_counter() - t0
    desk = config.read_config_file(DESK)
    eco, lin = _held_out(_rows(root / "eval" / "summary.csv"))
    eco_mean, lin_mean = float(np.mean(list(eco.values()))), float(np.mean(list(lin.values())))
    ok = eco_mean >= lin_mean + 0.05 and eco_mean >= 0.5 and desk["total_epochs"] <= 50 and elapsed < 1800
    per_class = ", ".join(f"{k} {eco[k]:.3f}/{lin[k]:.3f}" for k in sorted(eco))
    criterion(11, "Synthetic learning", ok,
              f"held-out NSE {eco_mean:.3f} vs linear {lin_mean:.3f} ({per_class}); "
              f"{desk['total_epochs']} epochs, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_c12_context_window_trend(criterion, default_corpus):
    values = config.resolve({}, config.read_config_file(DESK), ["pipeline", "data", "model", "train", "run"])
    values.update(total_epochs=10, windows_per_epoch=2048)
    sites, manifest, plan = cli.load_processed_corpus(default_corpus / "proc")
    scores = {}
    for T in (4, 16):
        model_cfg = config.model_config({**values, "context_window": T})
        wtr, wva, wte = cli._window_sets(sites, manifest, plan, values, T)
        mean, std = trainer.target_scaling(wtr)
        for seed in range(4):
            res = trainer.train(model_cfg, wtr, wva, config.train_config(values, seed), mean, std)
            pred = trainer.predict(res.model, wte, mean, std)
            scores[T, seed] = metrics.evaluate({seed: lambda w, p=pred: p}, wte).mean_nse()
    wins = sum(scores[16, s] >= scores[4, s] for s in range(4))
    detail = "; ".join(f"seed {s}: T16 {scores[16, s]:.3f} vs T4 {scores[4, s]:.3f}" for s in range(4))
    criterion(12, "Context-window trend", wins >= 3, f"T=16 >= T=4 in {wins}/4 seeds ({detail})")


def test_c13_reproducibility(criterion, default_corpus):
    root = default_corpus
    short = ["--config", str(DESK), "--seeds", "0", "--total-epochs", "2", "--windows-per-epoch", "512",
             "--threads", "1"]
    for name in ("rep_a", "rep_b"):
        assert cli.main(["train", "--data", str(root / "proc"), "--out", str(root / name), *short]) == 0
    a_log, b_log = _rows(root / "rep_a" / "seed_0" / "train_log.csv"), _rows(root / "rep_b" / "seed_0" / "train_log.csv")
    diff = max(abs(float(x[k]) - float(y[k])) for x, y in zip(a_log, b_log) for k in ("train_loss", "val_loss"))
    same_ckpt = ((root / "rep_a" / "seed_0" / "checkpoint.epck").read_bytes()
                 == (root / "rep_b" / "seed_0" / "checkpoint.epck").read_bytes())
    same_manifest = (root / "rep_a" / cli.HASH_MANIFEST).read_bytes() == (root / "rep_b" / cli.HASH_MANIFEST).read_bytes()
    criterion(13, "Reproducibility", diff <= 1e-7 and same_ckpt and same_manifest,
              f"loss trace divergence {diff:.1e}; checkpoints bitwise identical: {same_ckpt}; "
              f"output hashes identical: {same_manifest}")


# 14 --------------------------------------------------------------------------------
def test_c14_parameter_count(criterion, caplog):
    base = ModelConfig()
    with caplog.at_level(logging.INFO, logger="ecoperceiver.model"):
        n = log_parameter_count(base)
    logged = str(n) in caplog.text
    t_invariant = len({parameter_count(base.replace(T=T)) for T in (1, 4, 8, 16, 32, 64)}) == 1
    counts = [parameter_count(base.replace(H_l=h)) for h in (8, 16, 32, 64, 128, 256, 512)]
    monotone = all(b > a for a, b in zip(counts, counts[1:]))
    criterion(14, "Parameter count", logged and t_invariant and monotone,
              f"default config {n} parameters (logged: {logged}); T-invariant: {t_invariant}; "
              f"strictly increasing in H_l: {monotone}")
