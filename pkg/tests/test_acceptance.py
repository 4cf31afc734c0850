"""End-to-end acceptance criteria; each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are also repeated
in the terminal summary.
"""
import time

import numpy as np
from click.testing import CliRunner

from conftest import ACCEPTANCE_LINES
from fatq import analysis, error_model as em, gradcheck, spectral
from fatq.cli import main
from fatq.gradcheck import random_symmetric_mask
from fatq.numerics import make_rng, sample_laplace
from fatq.quantizers import LOGARITHMIC, UNIFORM, QuantConfig, clip, quantize
from fatq.trainer import TinyCNN, Checkpoint, save_checkpoint, load_checkpoint, transform_overhead
from fatq.trainer.checkpoint import to_bytes


def report(capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


def brute_force(x, cfg):
    levels = cfg.scaled_levels
    xc = clip(x, cfg)
    dist = np.abs(xc[:, None] - levels[None, :])
    best = dist.min(axis=1, keepdims=True)
    cand = np.where(dist == best, np.abs(levels)[None, :], -np.inf)
    return levels[np.argmax(cand, axis=1)]


def test_1_quantizer_oracle(capsys):
    rng = make_rng(101)
    mismatches, seconds, configs = 0, 0.0, 0
    for m in (2, 3, 4, 5):
        for scheme in (UNIFORM, LOGARITHMIC):
            for signed in (True, False):
                alpha = float(rng.uniform(0.1, 5.0))
                cfg = QuantConfig(m, scheme, signed, alpha)
                # inputs straddle the clip range and include exact levels and midpoints
                x = rng.uniform(-1.5 * alpha, 1.5 * alpha, size=10**5)
                lv = cfg.scaled_levels
                x[: lv.size] = lv
                x[lv.size : 2 * lv.size - 1] = (lv[1:] + lv[:-1]) / 2
                start = time.perf_counter()
                q = quantize(x, cfg)
                seconds += time.perf_counter() - start
                mismatches += int(np.count_nonzero(q != brute_force(x, cfg)))
                configs += 1
    ok = mismatches == 0 and seconds < 10
    report(capsys, 1, ok, f"{mismatches} mismatches over {configs} configs x 1e5 inputs, quantizer time {seconds:.2f}s")
    assert ok


def test_2_ste_degeneracy(capsys):
    worst_t, worst_j = 0.0, 0.0
    for n in (2, 4, 8, 16, 144):
        w = make_rng(n).normal(size=(3, n))
        ones = np.ones_like(w)
        worst_t = max(worst_t, float(np.max(np.abs(spectral.transform(w, ones) - w))))
        for i in range(3):
            worst_j = max(worst_j, float(np.max(np.abs(spectral.grad_wt_wrt_w(ones, i) - np.eye(n)))))
    ok = worst_t <= 1e-10 and worst_j <= 1e-10
    report(capsys, 2, ok, f"max |T(W)-W| = {worst_t:.2e}, max |J - I| = {worst_j:.2e}")
    assert ok


def test_3_gradient_correctness(capsys):
    start = time.perf_counter()
    results = gradcheck.run_suite(make_rng(0), instances=50, end_to_end=50)
    seconds = time.perf_counter() - start
    jac = [r for r in results if r.module.startswith("jacobian")]
    e2e = [r for r in results if r.module.startswith("end_to_end")]
    n_jac = len({r.instance for r in jac})
    n_e2e = len({r.instance for r in e2e if r.module.startswith("end_to_end[fat]")})
    worst_jac = max(r.rel_err for r in jac)
    worst_e2e = max(r.rel_err for r in e2e)
    failed = [r for r in results if not r.passed]
    ok = not failed and n_jac >= 50 and n_e2e >= 50 and worst_jac <= 1e-5 and worst_e2e <= 1e-4 and seconds < 60
    report(capsys, 3, ok, f"{n_jac} Jacobian instances (worst {worst_jac:.1e}), {n_e2e} end-to-end instances "
           f"(worst {worst_e2e:.1e}), {len(failed)} failures, {seconds:.1f}s")
    assert ok


def test_4_parseval_non_expansion(capsys):
    rng = make_rng(4)
    violations = 0
    for _ in range(1000):
        c, n = int(rng.integers(1, 5)), int(rng.integers(1, 80))
        w = rng.normal(size=(c, n)) * rng.uniform(0.01, 10)
        m = random_symmetric_mask(rng, c, n) if rng.random() < 0.5 else rng.uniform(0, 1, size=(c, n))
        if np.linalg.norm(spectral.transform(w, m)) > np.linalg.norm(w) * (1 + 1e-12):
            violations += 1
    report(capsys, 4, violations == 0, f"{violations} violations over 1000 pairs")
    assert violations == 0


def _truncated_laplace(rng, b, a, n):
    out = np.empty(0)
    while out.size < n:
        x = sample_laplace(rng, b, n)
        out = np.concatenate([out, x[np.abs(x) <= a]])
    return out[:n]


def test_5_error_model(capsys):
    start = time.perf_counter()
    clip_err = max(
        abs(em.clip_noise(f * a, a, b) - em.clip_noise_quadrature(f * a, a, b))
        for a in np.linspace(0.1, 10.0, 20)
        for b in np.linspace(0.1, 5.0, 20)
        for f in np.linspace(0.05, 1.0, 20)
    )
    uni_err = 0.0
    for m in range(2, 7):
        alpha = 1.3
        x = make_rng(m).uniform(-alpha, alpha, size=10**7)
        step = 2 * alpha / 2**m
        q = -alpha + (np.minimum(np.floor((x + alpha) / step), 2**m - 1) + 0.5) * step
        mc = np.mean((x - q) ** 2)
        uni_err = max(uni_err, abs(mc - em.quant_noise_uniform(alpha, m)) / mc)
    b, a, alpha, m = 1.0, 3.0, 1.5, 3
    x = _truncated_laplace(make_rng(1), b, a, 10**7)
    mc = np.mean((x - quantize(x, QuantConfig(m, UNIFORM, True, alpha))) ** 2)
    lap_err = abs(em.total_error_value(alpha, a, b, m) - mc) / mc
    monotone = True
    for scheme in (UNIFORM, LOGARITHMIC):
        for m in (2, 3, 4):
            totals = [r["total"] for r in em.error_vs_amplitude_curve(1.0, m, scheme, np.linspace(0.5, 10, 200))]
            monotone &= all(hi >= lo for lo, hi in zip(totals, totals[1:]))
    seconds = time.perf_counter() - start
    ok = clip_err <= 1e-8 and uni_err <= 0.02 and lap_err <= 0.15 and monotone and seconds < 120
    report(capsys, 5, ok, f"(a) {clip_err:.1e} (b) {uni_err:.2%} (c) {lap_err:.2%} (d) monotone={monotone}, "
           f"{seconds:.1f}s")
    assert ok


def test_6_optimal_alpha_solver(capsys):
    rng = make_rng(6)
    worst_res, worst_grid = 0.0, 0.0
    for _ in range(50):
        a, b = rng.uniform(0.5, 10), rng.uniform(0.2, 3)
        m = int(rng.integers(2, 7))
        scheme = (UNIFORM, LOGARITHMIC)[int(rng.integers(0, 2))]
        star = em.optimal_alpha(a, b, m, scheme)
        worst_res = max(worst_res, abs(em.total_error_derivative(star.alpha, a, b, m, scheme)))
        worst_grid = max(worst_grid, abs(star.alpha - em.grid_optimal_alpha(a, b, m, scheme)))
    ok = worst_res <= 1e-8 and worst_grid <= 1e-3
    report(capsys, 6, ok, f"max residual {worst_res:.1e}, max grid gap {worst_grid:.1e} over 50 tuples")
    assert ok


def test_7_transform_overhead(capsys):
    ratio = transform_overhead(256, 3, 3, 224, 224)[2]
    ok = abs(ratio - 0.0054) <= 2e-4
    report(capsys, 7, ok, f"ratio {ratio:.6f}")
    assert ok


def _final_test_acc(log):
    return [row for row in log if row[1] == "test"][-1][3]


def test_8_toy_qat(toy, capsys):
    fp = [_final_test_acc(toy.fp(s)[1]) for s in toy.seeds]
    fat4 = [_final_test_acc(toy.qat(s, "fat", 4)[1]) for s in toy.seeds]
    fat3 = [_final_test_acc(toy.qat(s, "fat", 3)[1]) for s in toy.seeds]
    ste3 = [_final_test_acc(toy.qat(s, "ste", 3)[1]) for s in toy.seeds]
    within = all(f - q <= 0.02 for f, q in zip(fp, fat4))
    beats = np.mean(fat3) >= np.mean(ste3)
    ok = within and beats and toy.seconds < 600
    report(capsys, 8, ok, f"FP {np.round(fp, 4).tolist()} FAT4 {np.round(fat4, 4).tolist()} "
           f"mean FAT3 {np.mean(fat3):.4f} vs STE3 {np.mean(ste3):.4f}, training {toy.seconds:.0f}s")
    assert ok


def test_9_qualitative(toy, capsys, tmp_path):
    data = toy.data
    mask_ok, abl_ok, shift_ok = True, True, True
    parts = []
    for s in toy.seeds:
        fp_model = toy.fp(s)[0].model
        fat_model = toy.qat(s, "fat", 4)[0].model
        conv = analysis.mask_export(fat_model)[1][-1]
        mask_ok &= conv["high_mean"] < conv["low_mean"]
        _, rows = analysis.band_ablation(fat_model, data.x_test, data.y_test, bands=32)
        low, high = np.mean([r["drop"] for r in rows[:8]]), np.mean([r["drop"] for r in rows[-8:]])
        abl_ok &= low > high
        props = [r["proportion"] for r in analysis.shift_report(fp_model, fat_model)]
        shift_ok &= min(props) > 0
        parts.append(f"seed {s}: mask {conv['low_mean']:.3f}>{conv['high_mean']:.3f}, "
                     f"drop {low:.3f}>{high:.3f}, min shift {min(props):.3f}")
    res = CliRunner().invoke(main, ["tightening", "--out", str(tmp_path)])
    summary = (tmp_path / "tightening_summary.csv").read_text().splitlines()
    rates = dict(zip(summary[0].split(","), summary[1].split(",")))
    tightening_ok = res.exit_code == 0 and (tmp_path / "tightening.csv").exists() and "max_rate" in rates
    ok = mask_ok and abl_ok and shift_ok and tightening_ok
    report(capsys, 9, ok, "; ".join(parts) + f"; tightening max_rate {rates.get('max_rate')} "
           f"mse_rate {rates.get('mse_rate')}")
    assert ok


def test_10_determinism(capsys, tmp_path):
    runner = CliRunner()
    model = TinyCNN.create(make_rng(0))
    save_checkpoint(tmp_path / "init.ckpt", Checkpoint(model))
    commands = [
        ["train", "--epochs", "1", "--seed", "3"],
        ["error-curves", "--a-points", "10"],
        ["tightening", "--trials", "10"],
        ["mse-compare"],
        ["gradcheck", "--instances", "7", "--end-to-end", "2"],
        ["band-ablation", "--checkpoint", str(tmp_path / "init.ckpt"), "--bands", "4"],
    ]
    same = True
    for cmd in commands:
        outs = []
        for rep in range(2):
            d = tmp_path / f"{cmd[0]}{rep}"
            res = runner.invoke(main, cmd + ["--out", str(d)])
            assert res.exit_code == 0, res.output
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        same &= outs[0] == outs[1]
    save_checkpoint(tmp_path / "a.ckpt", load_checkpoint(tmp_path / "train0" / "model.ckpt"))
    round_trip = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "train0" / "model.ckpt").read_bytes()
    round_trip &= to_bytes(load_checkpoint(tmp_path / "a.ckpt")) == (tmp_path / "a.ckpt").read_bytes()
    ok = same and round_trip
    report(capsys, 10, ok, f"{len(commands)} commands byte-identical={same}, checkpoint round trip={round_trip}")
    assert ok
