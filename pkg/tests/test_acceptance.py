"""End-to-end acceptance checks for the package's headline claims.

Each test prints exactly one ACCEPTANCE line (PASS or FAIL, with the
measured numbers) before asserting, so

    pytest tests/test_acceptance.py -v -s

reads as a checklist.  The training grid behind the two ordering checks is
desk scale (10k shape images, 20 epochs, 3 seeds, slim channel widths) and
is shared through a session fixture; the whole module runs single-threaded
on one core in roughly twenty minutes.  One line is a documented expected
FAIL (see test_n15_improves_ai_domain_of_fft_model).
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import freqvae.autodiff as ad
import freqvae.data as fd
import freqvae.evaluation as ev
import freqvae.losses as losses
import freqvae.models as fm
import freqvae.spectral as spectral
import freqvae.training as tr
from freqvae.data import DatasetSpec
from freqvae.errors import FormatError
from freqvae.models import UpsamplingMode
from testutil import (brute_force_dft2d, check_grad_at, check_op_grad,
                      snap_grid, write_idx, write_mnist_standin)

TCONV, N15 = UpsamplingMode.TRANSPOSED_CONV, UpsamplingMode.N15

GRID_WIDTHS = (4, 8, 16, 32)
GRID_LATENT = 16
GRID_SEEDS = (0, 1, 2)


def verdict(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name}: {detail}"


def test_dft_matches_brute_force_oracle():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for size in (8, 16):
        for _ in range(50):
            img = rng.uniform(0.0, 1.0, (size, size))
            got = spectral.dft2d(img)
            want = brute_force_dft2d(img)
            worst = max(worst, float(np.abs(got.real - want.real).max()),
                        float(np.abs(got.imag - want.imag).max()))
    dt = time.time() - t0
    verdict("dft-oracle", worst < 1e-5 and dt < 10.0,
            f"max abs err {worst:.2e} over 100 images, {dt:.1f}s")


def test_gradient_suite_ops_and_losses():
    """Central finite differences against every backward rule, then against
    each full loss on toy images."""
    t0 = time.time()
    op_checks = [
        (ad.add, [(3, 4), (3, 4)], {}),
        (ad.sub, [(3, 4), (3, 4)], {}),
        (ad.mul, [(3, 4), (3, 4)], {}),
        (ad.neg, [(3, 4)], {}),
        (lambda x: ad.scale(x, 1.7), [(3, 4)], {}),
        (lambda x: ad.add_scalar(x, 0.3), [(3, 4)], {}),
        (ad.exp, [(3, 4)], {}),
        (ad.log, [(3, 4)], {"low": 0.2, "high": 2.0}),
        (lambda x: ad.clamp(x, -0.5, 0.5), [(3, 4)],
         {"avoid_kink": 0.05, "kinks": (-0.5, 0.5)}),
        (ad.relu, [(4, 5)], {"avoid_kink": 0.05}),
        (ad.leaky_relu, [(4, 5)], {"avoid_kink": 0.05}),
        (ad.sigmoid, [(4, 5)], {}),
        (ad.tanh, [(4, 5)], {}),
        (lambda x: ad.reshape(x, (4, 3)), [(3, 4)], {}),
        (ad.matmul, [(3, 4), (4, 2)], {}),
        (ad.matmul, [(4, 4), (3, 4, 5)], {}),
        (ad.dense, [(3, 4), (4, 2), (2,)], {}),
        (lambda a, b: ad.div_by_col(a, b, eps=0.01), [(3, 4), (3, 1)],
         {"low": 0.5, "high": 2.0}),
        (ad.sum_all, [(3, 4)], {}),
        (ad.mean_all, [(3, 4)], {}),
        (lambda x, k, b: ad.conv2d(x, k, b, 2, 1),
         [(2, 2, 5, 5), (3, 2, 3, 3), (3,)], {}),
        (lambda x, k, b: ad.transposed_conv2d(x, k, b, 2, 1),
         [(2, 3, 3, 3), (3, 2, 4, 4), (2,)], {}),
        (ad.upsample_nearest2x, [(2, 2, 3, 3)], {}),
    ]
    worst = 0.0
    failed = None
    try:
        for i, (op, shapes, kw) in enumerate(op_checks):
            failed = f"op {i}"
            worst = max(worst, check_op_grad(op, shapes, seed=i, **kw))

        x = np.random.default_rng(2).integers(0, 2, (2, 1, 8, 8)).astype(np.float32)
        xhat = snap_grid(
            np.random.default_rng(3).uniform(0.25, 0.75, (2, 1, 8, 8)))
        mu = snap_grid(np.random.default_rng(4).uniform(-1, 1, (2, 3)))
        lv = snap_grid(np.random.default_rng(5).uniform(-1, 1, (2, 3)))
        cfg_fft = losses.LossConfig(kind="fft", alpha=0.5, beta=1.0)
        cfg_ai = losses.LossConfig(kind="ai", ai_weight=100.0)
        loss_checks = [
            ("bce", losses.bce_recon, [x, xhat], 1),
            ("kl", losses.kl_diag_gaussian, [mu, lv], 0),
            ("kl", losses.kl_diag_gaussian, [mu, lv], 1),
            ("fft", losses.fft_loss, [x, xhat], 1),
            ("ai", losses.ai_loss, [x, xhat], 1),
            ("combined",
             lambda a, b: losses.combined_loss(a, b, cfg_fft), [x, xhat], 1),
            ("total-fft",
             lambda a, b, m, l: losses.total_objective(a, b, m, l, cfg_fft),
             [x, xhat, mu, lv], 1),
            ("total-fft",
             lambda a, b, m, l: losses.total_objective(a, b, m, l, cfg_fft),
             [x, xhat, mu, lv], 2),
            ("total-ai",
             lambda a, b, m, l: losses.total_objective(a, b, m, l, cfg_ai),
             [x, xhat, mu, lv], 3),
        ]
        # objective values are O(100) in float32, so the difference quotient
        # inherits ~value*2^-24/eps of rounding noise; a coarser step keeps
        # that term small and these losses are smooth enough that the extra
        # curvature error stays negligible
        for name, op, arrays, wrt in loss_checks:
            failed = f"loss {name} wrt {wrt}"
            worst = max(worst, check_grad_at(op, arrays, wrt, eps=2.0 ** -8))
        ok, note = True, f"worst rel err {worst:.2e}"
    except AssertionError as exc:
        ok, note = False, f"{failed}: {exc}"
    dt = time.time() - t0
    verdict("gradient-suite", ok and dt < 120.0, f"{note}, {dt:.1f}s")


def test_parseval_links_spatial_and_fft_domains():
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(0, 1, (1, 1, 16, 16)).astype(np.float32)
        xhat = rng.uniform(0, 1, (1, 1, 16, 16)).astype(np.float32)
        f2 = float(ev.rmse_fft2d(x, xhat)[0]) ** 2
        s2 = 16 * 16 * float(ev.rmse_spatial(x, xhat)[0]) ** 2
        worst = max(worst, abs(f2 - s2) / max(f2, s2))
    verdict("parseval-tie", worst < 1e-4,
            f"max rel gap {worst:.2e} over 100 pairs")


# Loss-term scales differ by objective: binary cross-entropy is summed per
# image (hundreds of nats) while the spectral blend averages per element
# (order one), so a shared alpha or prior weight would pin every arm to the
# cross-entropy regime.  Each objective therefore carries its own calibrated
# constants; the trainer settings below them are shared by all arms.
GRID_LOSS = {
    "vanilla_bce": losses.LossConfig(kind="vanilla_bce"),
    "fft": losses.LossConfig(kind="fft", alpha=0.001, beta=0.1),
    "ai": losses.LossConfig(kind="ai", beta=0.5, ai_weight=1.0e4),
}


def _grid_config(kind, mode, seed):
    return tr.TrainConfig(
        dataset=DatasetSpec(name="shape"),
        loss=GRID_LOSS[kind],
        mode=mode, epochs=20, batch_size=32, seed=seed,
        latent_dim=GRID_LATENT, widths=GRID_WIDTHS, train_count=10000)


@pytest.fixture(scope="session")
def shape_grid():
    """Seed-averaged test RMSE per loss/up-sampling arm, desk scale."""
    test = fd.load_dataset(DatasetSpec(name="shape", split="test"), count=512)
    means = {}
    timings = {}
    for kind, mode in (("vanilla_bce", TCONV), ("fft", TCONV), ("ai", TCONV),
                       ("fft", N15)):
        t0 = time.time()
        per_domain = {d: [] for d in ev.DOMAINS}
        for seed in GRID_SEEDS:
            ckpt, _ = tr.train(_grid_config(kind, mode, seed))
            report = ev.evaluate(tr.restore_params(ckpt), test, ckpt.config)
            for d in ev.DOMAINS:
                per_domain[d].append(report.domain(d)[0])
        means[kind, mode] = {d: float(np.mean(v)) for d, v in per_domain.items()}
        timings[kind, mode] = time.time() - t0
    return means, timings


def test_fft_loss_improves_every_domain_on_shapes(shape_grid):
    means, timings = shape_grid
    fft = means["fft", TCONV]
    van = means["vanilla_bce", TCONV]
    aim = means["ai", TCONV]
    core = timings["fft", TCONV] + timings["vanilla_bce", TCONV] + timings["ai", TCONV]
    all_domains = all(fft[d] < van[d] for d in ev.DOMAINS)
    ai_order = fft["ai"] < aim["ai"] < van["ai"]
    verdict("shape-ordering", all_domains and ai_order and core < 900.0,
            f"ai-domain fft {fft['ai']:.4f} < ai {aim['ai']:.4f} < "
            f"vanilla {van['ai']:.4f}; fft<vanilla in all domains: "
            f"{all_domains}; 9 runs {core:.0f}s")


def test_n15_improves_ai_domain_of_fft_model(shape_grid):
    """Soft directional claim: nearest-neighbor-plus-conv up-sampling lowers
    the fft model's ai-domain error versus transposed conv on seed-averaged
    means.

    Known to read FAIL at this calibration, and kept as the honest record
    of the claim.  Measured 3-seed means land the other way (n15 0.945 vs
    tconv 0.900; the sign repeats at prior weights 0.05 and 0.02 and in the
    uncalibrated alpha=0.5 regime, n15 1.565 vs tconv 1.513): training
    turns the transposed-conv arm's high-band capacity into real edge
    power, while nearest-neighbor + 5x5 conv low-passes the top octave,
    which the log-space radial metric's upper bins punish."""
    means, _ = shape_grid
    n15 = means["fft", N15]["ai"]
    tconv = means["fft", TCONV]["ai"]
    verdict("n15-ai-ordering", n15 < tconv,
            f"fft+n15 {n15:.4f} < fft+tconv {tconv:.4f}")


def test_transposed_conv_decodes_noisier_high_frequencies():
    """Decoded white noise at initialization: transposed conv should carry
    more power in the top quartile of radial bins than n15."""
    t0 = time.time()
    wins = 0
    for seed in range(20):
        z = np.random.default_rng([77, seed]).standard_normal((16, 32))
        z = z.astype(np.float32)
        power = {}
        for mode in (TCONV, N15):
            params = fm.build_vae(32, 1, 32, mode, seed=seed)
            with ad.no_grad():
                imgs = fm.decode(params, ad.tensor(z)).data
            curve = spectral.average_ai_curve(imgs[:, 0].astype(np.float64))
            power[mode] = float(curve.bins[12:].mean())
        wins += power[TCONV] > power[N15]
    p = sum(math.comb(20, i) for i in range(wins, 21)) / 2.0 ** 20
    dt = time.time() - t0
    verdict("tconv-noise", p < 0.05 and dt < 60.0,
            f"tconv louder in {wins}/20 seeds, sign test p {p:.2e}, {dt:.1f}s")


@pytest.fixture(scope="session")
def digit_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("digits")
    write_mnist_standin(root, 4000, 512, seed=5)
    return root


def test_mnist_curves_show_blur_and_fft_narrowing(digit_root):
    """Reconstruction spectra on held-out digits: the plain model loses
    high-frequency power (its curve sits below the data curve in the top
    quartile of bins); the fft model closes that gap."""
    t0 = time.time()
    test = fd.load_dataset(DatasetSpec(name="mnist", split="test",
                                       root=str(digit_root)))
    gaps = {}
    below = {}
    for kind in ("vanilla_bce", "fft"):
        loss = (losses.LossConfig(kind="fft", alpha=0.001, beta=0.1)
                if kind == "fft" else losses.LossConfig(kind=kind))
        cfg = tr.TrainConfig(
            dataset=DatasetSpec(name="mnist", root=str(digit_root)),
            loss=loss, mode=TCONV, epochs=12, batch_size=64, seed=0,
            latent_dim=GRID_LATENT, widths=GRID_WIDTHS)
        ckpt, _ = tr.train(cfg)
        curve = ev.spectrum_curves(tr.restore_params(ckpt), test)
        real = np.log(curve.real.bins[12:] + 1e-20)
        recon = np.log(curve.recon.bins[12:] + 1e-20)
        below[kind] = bool(np.all(recon < real))
        gaps[kind] = float(np.abs(real - recon).mean())
    dt = time.time() - t0
    ok = below["vanilla_bce"] and gaps["fft"] < gaps["vanilla_bce"]
    verdict("mnist-spectrum", ok and dt < 1200.0,
            f"vanilla below data in top bins: {below['vanilla_bce']}; "
            f"log-power gap fft {gaps['fft']:.3f} < vanilla "
            f"{gaps['vanilla_bce']:.3f}; {dt:.0f}s")


def test_training_is_bit_identical_across_processes(tmp_path):
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        env[var] = "1"
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "freqvae", "train",
               "--train-count", "512", "--epochs", "3", "--batch-size", "64",
               "--widths", "4,8,16,32", "--latent-dim", "16",
               "--seed", "11", "--out", str(out)]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)

    same_ckpt = (outs[0] / "checkpoint.fvae").read_bytes() == \
        (outs[1] / "checkpoint.fvae").read_bytes()

    def stable_rows(path):
        # wall_seconds is the one legitimately run-dependent column
        return [row.rsplit(",", 1)[0]
                for row in (path / "metrics.csv").read_text().splitlines()]

    same_csv = stable_rows(outs[0]) == stable_rows(outs[1])
    verdict("train-determinism", same_ckpt and same_csv,
            f"checkpoint identical: {same_ckpt}, metrics identical "
            f"(minus wall clock): {same_csv}")


def test_idx_ingestion_at_reference_counts(tmp_path):
    rng = np.random.default_rng(31)
    root = tmp_path / "idx"
    root.mkdir()
    for prefix, count in (("train", 60000), ("t10k", 10000)):
        images = rng.integers(0, 256, (count, 28, 28), dtype=np.uint8)
        write_idx(root / f"{prefix}-images-idx3-ubyte", images)
        write_idx(root / f"{prefix}-labels-idx1-ubyte",
                  (np.arange(count) % 10).astype(np.uint8))

    raw = (root / "train-images-idx3-ubyte").read_bytes()
    magic_ok = raw[:4] == b"\x00\x00\x08\x03"
    label_raw = (root / "train-labels-idx1-ubyte").read_bytes()
    magic_ok = magic_ok and label_raw[:4] == b"\x00\x00\x08\x01"

    train = fd.load_mnist(DatasetSpec(name="mnist", split="train", root=str(root)))
    test = fd.load_mnist(DatasetSpec(name="mnist", split="test", root=str(root)))
    counts_ok = len(train) == 60000 and len(test) == 10000
    shape_ok = train.data.shape[1:] == (1, 32, 32)

    bad = tmp_path / "bad"
    bad.mkdir()
    corrupt = bytearray(raw)
    corrupt[2] = 0x07
    (bad / "train-images-idx3-ubyte").write_bytes(corrupt)
    (bad / "train-labels-idx1-ubyte").write_bytes(label_raw)
    with pytest.raises(FormatError):
        fd.load_mnist(DatasetSpec(name="mnist", split="train", root=str(bad)))
    (bad / "train-images-idx3-ubyte").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(FormatError):
        fd.load_mnist(DatasetSpec(name="mnist", split="train", root=str(bad)))

    verdict("idx-ingestion", magic_ok and counts_ok and shape_ok,
            f"magics ok: {magic_ok}, counts 60000/10000: {counts_ok}, "
            "corrupted headers rejected: True")
