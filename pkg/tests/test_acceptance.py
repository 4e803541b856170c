"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk training criteria (6, 7) share one cached training run; see desk.py.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import torch

from aiocodec import rangecoder as rc
from aiocodec import tensor as T
from aiocodec.checkpoint import load_checkpoint
from aiocodec.cli import exit_code_for
from aiocodec.data import synthetic_image
from aiocodec.degrade import (CLEAN_PROBABILITY, DegradationSpec, add_gaussian_noise, apply_degradation,
                              sample_degradation)
from aiocodec.metrics import RDPoint, bd_metrics, psnr
from aiocodec.model import AIOCodec, compress, decompress
from aiocodec.network import AttentionConfig, ChannelGroupAttention, SpatialDecoupledAttention
from aiocodec.train import rd_loss

from desk import desk_run, held_out_pairs
from test_container import reseal
from test_network import cga_oracle

FIXTURES = Path(__file__).resolve().parent / "fixtures"


# --- 1 ----------------------------------------------------------------------

def test_coder_integrity(acceptance):
    rng = np.random.default_rng(1)
    n_streams, n_sym, pool = 1000, 100_000, 256
    started = time.time()
    failures, worst = [], 0.0
    for s in range(n_streams):
        mu = rng.normal(0, 8, pool)
        sigma = np.exp(rng.uniform(np.log(0.2), np.log(60), pool))
        q = float(rng.choice([0.5, 1.0, 2.0]))
        ts = rc.build_cdfs(mu, sigma, q)
        ts.index = rng.integers(0, pool, n_sym).astype(np.int64)
        k = np.round(rng.normal(mu[ts.index], sigma[ts.index]) / q).astype(np.int64)
        esc = rng.random(n_sym) < 1e-3
        k[esc] += rng.integers(-3000, 3000, int(esc.sum()))
        data = rc.encode_symbols(k, ts)
        ok = np.array_equal(rc.decode_symbols(data, ts, n_sym), k)
        bits, ideal = 8 * len(data), rc.analytic_bits(k, ts)
        lo, hi = ideal * 0.99, ideal * 1.01 + 64
        worst = max(worst, bits / ideal - 1)
        if not ok or not lo <= bits <= hi:
            failures.append(s)
    elapsed = time.time() - started
    passed = not failures and elapsed < 60
    acceptance(1, "range coder integrity", passed,
               f"{n_streams} streams x {n_sym} symbols, {len(failures)} failures, "
               f"worst overhead {100 * worst:.3f}%, {elapsed:.1f}s")
    assert not failures
    assert elapsed < 60


# --- 2 ----------------------------------------------------------------------

def test_codec_integrity(acceptance):
    torch.manual_seed(11)
    model = AIOCodec("tiny").eval()
    rng = np.random.default_rng(2)
    started = time.time()
    bad = []
    for i in range(20):
        img = rng.random((3, 64, 64)).astype(np.float32)
        res = compress(model, img, int(rng.integers(0, 4)), 99)
        out = decompress(model, res.data, 99)
        if not (np.array_equal(out, res.x_hat) and res.bpp == 8 * len(res.data) / (64 * 64)):
            bad.append(i)
    elapsed = time.time() - started
    passed = not bad and elapsed < 120
    acceptance(2, "codec integrity", passed, f"20 images, {len(bad)} mismatches, {elapsed:.1f}s")
    assert not bad
    assert elapsed < 120


# --- 3 ----------------------------------------------------------------------

def test_gradient_check(acceptance):
    started = time.time()
    T.set_default_precision(64)
    try:
        torch.manual_seed(7)
        model = AIOCodec("tiny").double()
        with torch.no_grad():
            # move every weight off its init so no branch is trivially zero
            for p in model.parameters():
                p.add_(0.02 * torch.randn_like(p))
        x = torch.from_numpy(synthetic_image(32, 3)).double()[None]
        with torch.no_grad():
            y = model.encoder(x)
            z = model.hyper_encoder(y)
        g = torch.Generator().manual_seed(1)
        z_noise = torch.rand(z.shape, generator=g, dtype=torch.float64) - 0.5
        y_noise = torch.rand(y.shape, generator=g, dtype=torch.float64) - 0.5

        def loss():
            o = model(x, 3, noise=z_noise, y_noise=y_noise)
            return rd_loss(o["x_hat"], x, o["bits_y"], o["bits_z"], 0.054)

        params = dict(model.named_parameters())
        grads = T.backward(T.Tape(params.items()), loss())
        rng = np.random.default_rng(0)
        picks = [(name, int(i)) for name, p in params.items()
                 for i in rng.choice(p.numel(), size=min(2, p.numel()), replace=False)]
        h, errs = 1e-5, []
        with torch.no_grad():
            for name, i in picks:
                flat = params[name].view(-1)
                v = flat[i].item()
                flat[i] = v + h
                up = float(loss())
                flat[i] = v - h
                down = float(loss())
                flat[i] = v
                numeric, analytic = (up - down) / (2 * h), float(grads[name].view(-1)[i])
                errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    finally:
        T.set_default_precision(32)
    errs = np.array(errs)
    frac = float((errs < 1e-3).mean())
    elapsed = time.time() - started
    passed = len(picks) >= 200 and frac >= 0.95 and elapsed < 300
    acceptance(3, "64-bit gradient check", passed,
               f"{len(picks)} parameters, {100 * frac:.1f}% below 1e-3, median {np.median(errs):.1e}, "
               f"{elapsed:.0f}s")
    assert len(picks) >= 200
    assert frac >= 0.95
    assert elapsed < 300


# --- 4 ----------------------------------------------------------------------

def test_attention_oracles(acceptance):
    torch.manual_seed(4)
    cga = ChannelGroupAttention(AttentionConfig(n_groups=2, group_channels=2)).double()
    x = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    expected, _ = cga_oracle(cga, x[0].numpy())
    cga_err = float(np.abs(cga(x)[0].detach().numpy() - expected).max())

    sda = SpatialDecoupledAttention(AttentionConfig(n_groups=2, group_channels=4))
    with torch.no_grad():
        sda.attn_in.weight.zero_()
        sda.attn_in.bias.fill_(1.0)
        for conv in (sda.attn_v, sda.attn_h):
            conv.weight.zero_()
            kh, kw = conv.weight.shape[2:]
            conv.weight[:, :, kh // 2, kw // 2] = 1.0
            conv.bias.zero_()
        xs = torch.randn(2, 8, 9, 7)
        sda_exact = torch.equal(sda(xs), sda.proj(sda.value(xs)))

    wide = ChannelGroupAttention(AttentionConfig(n_groups=4, group_channels=8))
    with torch.no_grad():
        maps, _ = wide.attention_maps(10 * torch.randn(2, 32, 12, 12))
    row_err = float((maps.sum(-1) - 1).abs().max())
    passed = cga_err < 1e-6 and sda_exact and row_err < 1e-5 and maps.shape[1] == 4
    acceptance(4, "attention oracles", passed,
               f"C-GA max err {cga_err:.1e}, S-DA(A=1) exact={sda_exact}, softmax row err {row_err:.1e}")
    assert cga_err < 1e-6
    assert sda_exact
    assert maps.shape[1] == 4 and row_err < 1e-5


# --- 5 ----------------------------------------------------------------------

def test_attention_complexity(acceptance):
    cfg = AttentionConfig(n_groups=4, group_channels=8)
    ratios = {}
    for name, mod in (("C-GA", ChannelGroupAttention(cfg)), ("S-DA", SpatialDecoupledAttention(cfg))):
        macs = []
        for side in (32, 64):
            with T.count_macs() as counter, torch.no_grad():
                mod(torch.randn(1, 32, side, side))
            macs.append(counter.total)
        ratios[name] = macs[1] / macs[0]
    passed = all(abs(r - 4.0) <= 0.01 for r in ratios.values())
    acceptance(5, "linear attention cost", passed, ", ".join(f"{k} {v:.4f}" for k, v in ratios.items()))
    assert passed


# --- 6, 7 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    return desk_run()


def _mean_psnr(model, h, images, clean, quality):
    vals = []
    for img, ref in zip(images, clean):
        rec = decompress(model, compress(model, img, quality, h).data, h)
        vals.append(psnr(rec, ref))
    return float(np.mean(vals))


def test_desk_training(acceptance, desk):
    model, h, rows, cfg, seconds, cached = desk
    model.eval()
    loss = np.array([float(r["loss"]) for r in rows])
    ends, start = [], 0
    for _, n in cfg.patch_schedule:
        start += n
        ends.append(start)
    stage_ma = [float(loss[e - 500:e].mean()) for e in ends]
    monotone = all(b <= a for a, b in zip(stage_ma, stage_ma[1:]))

    clean, noisy = held_out_pairs(25.0)
    baseline = float(np.mean([psnr(n, c) for n, c in zip(noisy, clean)]))
    restored = _mean_psnr(model, h, noisy, clean, 3)
    gain = restored - baseline
    passed = gain >= 1.0 and monotone and cfg.total_iters <= 20_000 and seconds < 7200
    acceptance(6, "desk training", passed,
               f"{cfg.total_iters} iters in {seconds / 60:.1f} min{' (cached)' if cached else ''}, "
               f"noisy {baseline:.2f} dB -> {restored:.2f} dB (+{gain:.2f}), "
               f"stage loss MA {', '.join(f'{v:.2f}' for v in stage_ma)}")
    assert cfg.total_iters <= 20_000
    assert seconds < 7200
    assert monotone, stage_ma
    assert gain >= 1.0


def test_mode_consistency(acceptance, desk):
    model, h = desk[0].eval(), desk[1]
    clean, noisy = held_out_pairs(25.0)
    per_q = []
    for q in range(4):
        per_q.append((q, _mean_psnr(model, h, clean, clean, q), _mean_psnr(model, h, noisy, clean, q)))
    passed = all(c >= n for _, c, n in per_q)
    acceptance(7, "mode consistency", passed,
               "; ".join(f"q{q} clean {c:.2f} / noisy {n:.2f} dB" for q, c, n in per_q))
    assert passed, per_q


# --- 8 ----------------------------------------------------------------------

def test_bd_metrics(acceptance):
    rates = np.array([0.1, 0.25, 0.5, 1.0])
    base = [RDPoint(r, 28 + 4 * np.log2(r / 0.1) - 0.3 * np.log2(r / 0.1) ** 2) for r in rates]
    same = bd_metrics(base, base)
    offset = bd_metrics(base, [RDPoint(p.bpp, p.psnr_db + 1.0) for p in base])

    other = [RDPoint(r, 27.5 + 4.6 * np.log2(r / 0.1) - 0.4 * np.log2(r / 0.1) ** 2) for r in rates * 1.1]

    def fit(curve):
        return np.polynomial.Polynomial.fit(np.log2([p.bpp for p in curve]), [p.psnr_db for p in curve], 3)

    lo, hi = np.log2(0.11), np.log2(1.0)
    grid = np.linspace(lo, hi, 200_001)
    dense = float(np.trapezoid(fit(other)(grid) - fit(base)(grid), grid) / (hi - lo))
    oracle_err = abs(bd_metrics(base, other) - dense)
    passed = abs(same) < 1e-12 and abs(offset - 1.0) <= 1e-6 and oracle_err < 1e-4
    acceptance(8, "BD metrics", passed,
               f"identical {same:.1e}, +1 dB -> {offset:.9f}, trapezoid gap {oracle_err:.1e}")
    assert abs(same) < 1e-12
    assert abs(offset - 1.0) <= 1e-6
    assert oracle_err < 1e-4


# --- 9 ----------------------------------------------------------------------

def test_degradation_statistics(acceptance):
    gray = np.full((3, 578, 577), 0.5)
    _, noise = add_gaussian_noise(gray, 25, seed=5, return_noise=True)
    sigma = float(noise.std() * 255)
    sigma_ok = noise.size >= 10**6 and abs(sigma - 25) <= 0.25

    policy = {"gaussian_noise": 1, "rain": 1, "snow": 1, "haze": 1}
    rng = np.random.default_rng(9)
    kinds = [sample_degradation(policy, rng).kind for _ in range(100_000)]
    clean_freq = kinds.count("clean") / len(kinds)
    freq_ok = abs(clean_freq - CLEAN_PROBABILITY) <= 0.01 and CLEAN_PROBABILITY == 0.2

    img = synthetic_image(48, 2)
    same = []
    specs = [DegradationSpec("gaussian_noise", {"sigma": 50.0}, 3)]
    for kind in ("rain", "snow", "haze"):
        draw = np.random.default_rng(3)
        spec = sample_degradation({kind: 1}, draw)
        while spec.kind == "clean":
            spec = sample_degradation({kind: 1}, draw)
        specs.append(spec)
    for spec in specs:
        a, b = apply_degradation(img, spec), apply_degradation(img, spec)
        same.append(all(np.array_equal(u, v) for u, v in zip(a, b)))
    draws = [[sample_degradation(policy, np.random.default_rng(4)) for _ in range(50)] for _ in range(2)]
    reproducible = all(same) and draws[0] == draws[1]
    passed = sigma_ok and freq_ok and reproducible
    acceptance(9, "degradation statistics", passed,
               f"sigma {sigma:.3f} over {noise.size} samples, clean {clean_freq:.4f}, "
               f"reproducible={reproducible}")
    assert sigma_ok
    assert freq_ok
    assert reproducible


# --- 10 ---------------------------------------------------------------------

def _mutate(data: bytes, rng) -> bytes:
    buf = bytearray(data)
    op = rng.integers(5)
    if op == 0:
        for _ in range(int(rng.integers(1, 4))):
            i = int(rng.integers(len(buf)))
            buf[i] ^= 1 << int(rng.integers(8))
    elif op == 1:
        i = int(rng.integers(len(buf)))
        buf[i] = (buf[i] + int(rng.integers(1, 256))) % 256
    elif op == 2:
        buf = buf[:int(rng.integers(len(buf)))]
    elif op == 3:
        i = int(rng.integers(len(buf) + 1))
        buf[i:i] = rng.bytes(int(rng.integers(1, 9)))
    else:
        buf += rng.bytes(int(rng.integers(1, 9)))
    return bytes(buf)


def test_golden_and_fuzz(acceptance):
    fx = np.load(FIXTURES / "coder_golden.npz")
    ts = rc.TableSet(fx["cdf"], fx["offset"], fx["s_min"], fx["n_in"], fx["index"])
    payload = (FIXTURES / "coder_golden.bin").read_bytes()
    golden = (rc.encode_symbols(fx["symbols"], ts) == payload
              and np.array_equal(rc.decode_symbols(payload, ts, len(fx["symbols"])), fx["symbols"]))

    model, h, _ = load_checkpoint(FIXTURES / "codec_tiny.ckpt")
    model.eval()
    streams = {}
    for name, q in (("64x64_q3", 3), ("50x70_q0", 0)):
        data = (FIXTURES / f"codec_{name}.aio").read_bytes()
        streams[name] = data
        expected = np.load(FIXTURES / f"codec_{name}.npy")
        src = np.load(FIXTURES / f"codec_{name}_input.npy")
        golden &= np.array_equal(decompress(model, data, h), expected)
        golden &= compress(model, src, q, h).data == data

    rng = np.random.default_rng(10)
    originals = list(streams.values())
    n_mut, codes, escaped = 10_000, {}, []
    for i in range(n_mut):
        bad = _mutate(originals[i % 2], rng)
        if bad == originals[i % 2]:
            continue
        try:
            decompress(model, bad, h)
            escaped.append(i)
        except Exception as exc:  # noqa: BLE001 - classifying every outcome is the point
            code = exit_code_for(exc)
            codes[code] = codes.get(code, 0) + 1
    rejected_ok = not escaped and set(codes) <= {3, 4}

    # valid checksum, mutated body: must decode or fail with a documented code
    crashes = 0
    for i in range(1000):
        bad = reseal(_mutate(originals[i % 2][:-4], rng))
        try:
            decompress(model, bad, h)
        except Exception as exc:  # noqa: BLE001
            if exit_code_for(exc) not in (3, 4):
                crashes += 1
    passed = golden and rejected_ok and crashes == 0
    acceptance(10, "golden fixtures and fuzzing", passed,
               f"golden={golden}, {n_mut} mutations -> exit codes {dict(sorted(codes.items()))}, "
               f"{len(escaped)} accepted, {crashes} crashes in 1000 resealed")
    assert golden
    assert not escaped
    assert set(codes) <= {3, 4}
    assert crashes == 0
