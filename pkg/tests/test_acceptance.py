"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete. The two desk-scale training runs are module-scoped
fixtures, so the full suite trains once.
"""

import time

import numpy as np
import pytest

from csiforge import chansim as cs
from csiforge import diffcore as dc
from csiforge import evalcli as ev
from csiforge import quantizer as qz
from csiforge import trainer as tr
from csiforge.autonet import Decoder, Encoder, NetConfig, desk_net_config
from csiforge.fusion import sensor_grid_from_uplink

TRAINED_RATES = (48, 72, 96, 120, 144)
UNTRAINED_RATES = (56, 64, 76, 80, 88, 104, 112, 128, 136)
STAGE1_EPOCHS = 100
STAGE2_EPOCHS = 40


def _report(name, ok, detail=""):
    print(f"\n[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name} failed: {detail}"


def _normalized_sensor(sample):
    grid = sensor_grid_from_uplink(sample.uplink)
    return grid / np.linalg.norm(grid)


@pytest.fixture(scope="module")
def desk_data():
    cfg = cs.desk_config()
    train = cs.generate_dataset(cfg, 2000, seed=2026)
    holdout = cs.generate_dataset(cfg, 300, seed=9090)
    return cfg, train, holdout


@pytest.fixture(scope="module")
def stage1(desk_data):
    _, train, _ = desk_data
    t0 = time.time()
    cfg = tr.TrainConfig(rates=TRAINED_RATES, epochs=STAGE1_EPOCHS,
                         batch_size=32, seed=0)
    ckpt = tr.train_stage1(train, desk_net_config(), cfg)
    return ckpt, time.time() - t0


@pytest.fixture(scope="module")
def stage2(desk_data, stage1):
    _, train, _ = desk_data
    ckpt1, _ = stage1
    cfg = tr.TrainConfig(rates=TRAINED_RATES, epochs=STAGE2_EPOCHS,
                         batch_size=32, seed=1)
    ckpt2 = tr.train_stage2(train, ckpt1, cfg)
    return ckpt2


@pytest.fixture(scope="module")
def holdout_eval(desk_data, stage1):
    """Held-out losses of the stage-1 codec at trained and untrained rates."""
    _, _, holdout = desk_data
    ckpt1, _ = stage1
    codec = tr.codec_from_checkpoint(ckpt1)
    channels = [np.asarray(s.downlink, dtype=np.complex128) for s in holdout]
    losses = tr.evaluate_losses(codec, channels,
                                rates=TRAINED_RATES + UNTRAINED_RATES)
    return codec, channels, losses


# ---------------------------------------------------------------------------
# criterion 1: worked-example exactness (< 1 s)

def test_worked_example_exactness():
    t0 = time.time()
    boundaries = np.array([-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0])
    z = -1.5  # strictly between b^(2) and b^(3)
    vec3 = qz.quantize_levels(z, boundaries, 3)
    vec2 = qz.quantize_levels(z, boundaries, 2)
    vec1 = qz.quantize_levels(z, boundaries, 1)
    ok = (np.array_equal(vec3, [1, 1, -1, -1, -1, -1, -1])
          and np.array_equal(vec2, [1, 1, 0, -1, -1, -1, -1])
          and np.array_equal(vec1, [0, 0, 0, -1, -1, -1, -1])
          and qz.pack_bits(vec3, 3, 1).tolist() == [0, 1, 0]
          and qz.pack_bits(vec2, 2, 2).tolist() == [0, 1]
          and qz.pack_bits(vec1, 1, 4).tolist() == [0])
    elapsed = time.time() - t0
    _report("worked-example exactness", ok and elapsed < 1.0,
            f"(vectors + bit codes bit-exact, {elapsed:.3f}s)")


# ---------------------------------------------------------------------------
# criterion 2: codec round trip over 10^4 random triples (< 10 s)

def test_codec_round_trip_random_triples():
    t0 = time.time()
    rng = np.random.default_rng(7)
    n = 10_000
    boundaries = np.sort(rng.normal(scale=2.0, size=(n, 7)), axis=1)
    z = rng.normal(scale=3.0, size=n)
    bits = rng.integers(1, 4, size=n)
    alloc = qz.BitAllocation(bits=bits, b_max=3)
    levels = qz.quantize_batch(z[None, :], boundaries, alloc)[0]
    class_sets = {b: qz.class_set(b, 3) for b in (1, 2, 3)}
    failures = 0
    for i in range(n):
        b_i = int(bits[i])
        alpha = 1 << (3 - b_i)
        code = qz.pack_bits(levels[i], b_i, alpha)
        back = qz.unpack_bits(code, 3)
        if not np.array_equal(back, levels[i]):
            failures += 1
        if int(qz.level_sum(levels[i])) not in class_sets[b_i]:
            failures += 1
    elapsed = time.time() - t0
    _report("codec round trip (1e4 triples)", failures == 0 and elapsed < 10.0,
            f"({failures} failures, {elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# criterion 3: disjoint class sets (< 1 s)

def test_class_set_disjointness():
    t0 = time.time()
    ok = True
    for b_max in (2, 3, 4):
        sets = [qz.class_set(b, b_max) for b in range(1, b_max + 1)]
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                ok = ok and not (sets[i] & sets[j])
    elapsed = time.time() - t0
    _report("class-set disjointness (b_max 2,3,4)", ok and elapsed < 1.0,
            f"({elapsed:.3f}s)")


# ---------------------------------------------------------------------------
# criterion 4: quantizer parameter count

def test_quantizer_parameter_count():
    count = qz.TrainableQuantizer(48, 3).param_count()
    _report("quantizer parameter count", count == 336, f"(N=48, B_max=3 -> {count})")


# ---------------------------------------------------------------------------
# criterion 5: gradient fidelity (< 2 min)

def test_gradient_fidelity():
    t0 = time.time()
    # isolated tanh surrogate branch against a central finite difference
    delta, h = 0.2, 1e-5
    fd = (np.tanh(delta + h) - np.tanh(delta - h)) / (2 * h)
    ours = 1.0 - np.tanh(delta) ** 2
    tanh_ok = abs(ours - fd) / abs(fd) <= 1e-4

    # >= 20 random network parameters through encoder+decoder (no quantizer)
    cfg = NetConfig(n_tx=4, n_rb=4, stage_dims=(8, 12), bottleneck_dim=4,
                    heads=(2, 2))
    rng = np.random.default_rng(17)
    enc = Encoder(cfg, np.random.default_rng(100))
    dec = Decoder(cfg, np.random.default_rng(101))
    x = dc.Tensor(rng.normal(size=(2, cfg.n_tx, cfg.n_sc, 2)))
    target = rng.normal(size=(2, cfg.n_tx, cfg.n_sc, 2))

    def loss_fn():
        diff = dec(enc(x)) - dc.Tensor(target)
        return dc.tmean(diff * diff)

    graph = dc.Graph(lambda: loss_fn())
    loss = dc.forward_eval(graph, ())
    grads = dc.backward_grad(graph, loss)
    params = {**{f"enc.{k}": v for k, v in enc.parameters().items()},
              **{f"dec.{k}": v for k, v in dec.parameters().items()}}
    names = sorted(params)
    picks = rng.choice(len(names), size=24, replace=False)
    worst = 0.0
    eps = 1e-5
    for pick in picks:
        t = params[names[pick]]
        direction = rng.normal(size=t.data.shape)
        direction /= np.linalg.norm(direction)
        keep = t.data.copy()
        t.data = keep + eps * direction
        hi = float(dc.forward_eval(dc.Graph(lambda: loss_fn()), ()).data)
        t.data = keep - eps * direction
        lo = float(dc.forward_eval(dc.Graph(lambda: loss_fn()), ()).data)
        t.data = keep
        fd_val = (hi - lo) / (2 * eps)
        got = float((grads[t] * direction).sum())
        denom = max(abs(fd_val), abs(got))
        if denom < 1e-7:
            continue  # gradient is structurally zero; FD reads only noise
        worst = max(worst, abs(fd_val - got) / denom)
    elapsed = time.time() - t0
    _report("gradient fidelity",
            tanh_ok and worst <= 1e-3 and elapsed < 120.0,
            f"(tanh branch ok, worst of 24 params rel err {worst:.2e}, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 6: desk-scale stage-1 trend (< 30 min)

def test_stage1_trend(desk_data, stage1, holdout_eval):
    _, train, _ = desk_data
    ckpt1, train_seconds = stage1
    _, channels, losses = holdout_eval

    # constant-predictor oracle, computed from the data alone
    normalized = [h / np.linalg.norm(h) for h in
                  (np.asarray(s.downlink, dtype=np.complex128) for s in train)]
    h_bar = np.mean(normalized, axis=0)
    oracle = float(np.mean([tr.reconstruction_loss(h, h_bar) for h in channels]))

    trained = [losses[r] for r in TRAINED_RATES]
    monotone = all(trained[i + 1] <= trained[i] + 1e-12
                   for i in range(len(trained) - 1))
    below_oracle = all(l <= 0.7 * oracle for l in trained)
    hist = ckpt1.config["history"]
    improved = hist[-1]["val_weighted"] < hist[0]["val_weighted"]

    interp_ok = True
    for rate in UNTRAINED_RATES:
        lower = max(r for r in TRAINED_RATES if r < rate)
        upper = min(r for r in TRAINED_RATES if r > rate)
        if not (losses[upper] - 0.05 <= losses[rate] <= losses[lower] + 0.05):
            interp_ok = False

    detail = (f"(train {train_seconds/60:.1f} min, oracle {oracle:.3f}, "
              f"losses {[round(l, 3) for l in trained]})")
    _report("stage-1 desk-scale trend",
            monotone and below_oracle and interp_ok and train_seconds < 1800,
            detail)


# ---------------------------------------------------------------------------
# criterion 7: desk-scale stage-2 trend

def test_stage2_trend(desk_data, stage1, stage2, holdout_eval):
    _, train, holdout = desk_data
    ckpt1, _ = stage1
    ckpt2 = stage2
    codec1, channels, base_losses = holdout_eval

    frozen_ok = all(ckpt1.group_bytes(g) == ckpt2.group_bytes(g)
                    for g in ("encoder", "quantizer", "decoder"))

    # step-0 equivalence: a fresh fusion attachment is an exact identity
    codec0 = tr.codec_from_checkpoint(ckpt1)
    codec0.attach_fusion(
        tr.uplink_sensor_config(8, 192, stage_dims=codec0.net_cfg.stage_dims,
                                embed_dim=codec0.net_cfg.bottleneck_dim,
                                heads=codec0.net_cfg.heads),
        heads=2, seed=123)
    probe = channels[:32]
    probe_sensors = [_normalized_sensor(s) for s in holdout[:32]]
    base_probe = tr.evaluate_losses(codec1, probe, rates=TRAINED_RATES)
    fused_probe = tr.evaluate_losses(codec0, probe, rates=TRAINED_RATES,
                                     sensors=probe_sensors)
    step0_ok = all(abs(base_probe[r] - fused_probe[r]) <= 1e-6
                   for r in TRAINED_RATES)

    codec2 = tr.codec_from_checkpoint(ckpt2)
    sensors = [_normalized_sensor(s) for s in holdout]
    fused_losses = tr.evaluate_losses(codec2, channels, rates=TRAINED_RATES,
                                      sensors=sensors)
    never_worse = all(fused_losses[r] <= base_losses[r] for r in TRAINED_RATES)
    gain_low = base_losses[48] - fused_losses[48]
    gain_high = base_losses[144] - fused_losses[144]
    low_rate_gain_larger = gain_low > gain_high

    detail = (f"(improvement at 48: {gain_low:.4f}, at 144: {gain_high:.4f}, "
              f"frozen={frozen_ok}, step0={step0_ok})")
    _report("stage-2 desk-scale trend",
            frozen_ok and step0_ok and never_worse and low_rate_gain_larger,
            detail)


def test_refinement_stays_near_discrete_levels(desk_data, stage2):
    """Fusion-module invariant: the learned correction never overwhelms the
    discrete representation (mean |z_r - z(s)| below the active level step)."""
    _, _, holdout = desk_data
    codec = tr.codec_from_checkpoint(stage2)
    channels = [np.asarray(s.downlink, dtype=np.complex128) for s in holdout[:64]]
    sensors = np.stack([_normalized_sensor(s) for s in holdout[:64]])
    x = dc.Tensor(tr.prepare_inputs(channels))
    z = codec.encoder(x)
    z_d = codec.sensor_encoder(dc.Tensor(sensors))
    ok = True
    details = []
    for rate in TRAINED_RATES:
        alloc = codec.allocation(rate)
        z_s = codec.quantizer.quantized_features(z, alloc)
        z_r = codec.refine_net(z_s, z_d)
        mean_dev = np.abs(z_r.data - z_s.data).mean(axis=0)   # per feature
        step = 2.0 * alloc.alphas.astype(np.float64)
        ok = ok and bool(np.all(mean_dev < step))
        details.append(f"{rate}:{mean_dev.max():.2f}<{step.min():.0f}")
    _report("refinement stays near discrete levels", ok, "(" + " ".join(details) + ")")


# ---------------------------------------------------------------------------
# criterion 8: beamforming sanity (< 5 min)

def test_beamforming_sanity(desk_data, holdout_eval):
    t0 = time.time()
    cfg, _, holdout = desk_data
    codec, channels, _ = holdout_eval
    report = ev.rate_sweep(codec, holdout[:150], [144], [None], ["csi_only"],
                           seed=3)
    ideal_g, _ = report.cdfs[("ideal", 0, None)]
    rec_g, _ = report.cdfs[("csi_only", 144, None)]
    dominance = np.all(ideal_g >= rec_g - 1e-12)
    mean_norm_gain = report.row("csi_only", 144, None).mean_norm_gain
    random_mean = 1.0 / cfg.n_tx
    elapsed = time.time() - t0
    _report("beamforming sanity",
            dominance and mean_norm_gain >= 3.0 * random_mean and elapsed < 300,
            f"(mean normalized gain {mean_norm_gain:.3f} vs random {random_mean:.3f}, "
            f"{elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 9: determinism

def test_determinism(tmp_path):
    # gen-data twice with one seed
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    for out in (a, b):
        rc = ev.cli_dispatch(["gen-data", "--profile", "desk", "--samples",
                              "40", "--out", str(out), "--seed", "7"])
        assert rc == 0
    gen_ok = a.read_bytes() == b.read_bytes()

    # one training epoch twice with one seed
    cfg = cs.desk_config()
    samples = cs.generate_dataset(cfg, 128, seed=5)
    tcfg = tr.TrainConfig(rates=TRAINED_RATES, epochs=1, batch_size=32, seed=11)
    ck_a = tr.train_stage1(samples, desk_net_config(), tcfg)
    ck_b = tr.train_stage1(samples, desk_net_config(), tcfg)
    train_ok = all(ck_a.group_bytes(g) == ck_b.group_bytes(g)
                   for g in ck_a.groups)
    hist_ok = ck_a.config["history"] == ck_b.config["history"]

    _report("determinism", gen_ok and train_ok and hist_ok,
            "(gen-data bytes and one-epoch checkpoint bytes identical)")
