import math

import numpy as np
import pytest

from csiforge import chansim as cs


CFG = cs.desk_config()


def single_path_rays(delay=0.0, az=0.0, el=0.0, gain=1.0 + 0j, pol_phase=0.0):
    return cs.RaySet(gains=[gain], delays_s=[delay], dep_az=[az], dep_el=[el],
                     arr_az=[0.0], arr_el=[0.0], pol_phases=[pol_phase],
                     los_flag=True)


def brute_force_channel(rays, cfg, carrier_hz):
    """Direct per-(antenna, subcarrier) summation oracle."""
    steer = cs.steering_matrix(cfg, rays)
    f = cfg.subcarrier_offsets_hz()
    h = np.zeros((cfg.n_tx, cfg.n_sc), dtype=np.complex128)
    for l in range(rays.n_paths):
        a = rays.gains[l] * np.exp(-2j * math.pi * carrier_hz * rays.delays_s[l])
        for t in range(cfg.n_tx):
            for n in range(cfg.n_sc):
                h[t, n] += a * steer[l, t] * np.exp(
                    -2j * math.pi * f[n] * rays.delays_s[l])
    return h


def test_config_invariants():
    with pytest.raises(cs.ChanSimError):
        cs.SimConfig(n_tx=8, n_rb=16, n_sc=100, scs_hz=60e3, f_dl_hz=28e9,
                     f_ul_hz=27e9, fft_size=256, sample_rate_hz=15.36e6,
                     array_rows=2, array_cols=2, dual_polarized=True)
    with pytest.raises(cs.ChanSimError):
        cs.SimConfig(n_tx=9, n_rb=16, n_sc=192, scs_hz=60e3, f_dl_hz=28e9,
                     f_ul_hz=27e9, fft_size=256, sample_rate_hz=15.36e6,
                     array_rows=2, array_cols=2, dual_polarized=True)
    with pytest.raises(cs.ChanSimError):
        cs.SimConfig(n_tx=8, n_rb=16, n_sc=192, scs_hz=60e3, f_dl_hz=28e9,
                     f_ul_hz=28e9, fft_size=256, sample_rate_hz=15.36e6,
                     array_rows=2, array_cols=2, dual_polarized=True)


def test_paper_config_table_values():
    cfg = cs.paper_config()
    assert cfg.n_tx == 32 and cfg.n_sc == 576 and cfg.fft_size == 1024
    assert cfg.sample_rate_hz == 61_440_000.0


def test_sample_rayset_forced_los():
    rays = cs.sample_rayset(CFG, seed=7, los_probability=1.0)
    assert rays.los_flag
    assert rays.delays_s[0] == rays.delays_s.min()


def test_sample_rayset_never_los_at_zero_probability():
    hits = sum(cs.sample_rayset(CFG, seed=s, los_probability=0.0).los_flag
               for s in range(1000))
    assert hits == 0


def test_sample_rayset_deterministic():
    a = cs.sample_rayset(CFG, seed=123, los_probability=0.5)
    b = cs.sample_rayset(CFG, seed=123, los_probability=0.5)
    assert np.array_equal(a.gains, b.gains)
    assert np.array_equal(a.delays_s, b.delays_s)
    assert a.los_flag == b.los_flag


def test_rayset_validation():
    with pytest.raises(cs.ChanSimError):
        cs.RaySet(gains=[], delays_s=[], dep_az=[], dep_el=[], arr_az=[],
                  arr_el=[], pol_phases=[], los_flag=False)
    with pytest.raises(cs.ChanSimError):
        single_path_rays(delay=-1e-9)


def test_single_path_boresight_crest():
    h = cs.rays_to_channel(single_path_rays(), CFG, CFG.f_dl_hz)
    # every column identical; first-polarization entries unit magnitude,
    # second polarization attenuated by the cross-polar factor
    assert np.allclose(h, h[:, :1])
    assert np.allclose(np.abs(h[:4, 0]), 1.0)
    assert np.allclose(np.abs(h[4:, 0]), 10 ** (-cs.XPOL_ATTEN_DB / 20.0))


def test_single_path_delay_phase_ramp():
    tau = 80e-9
    h = cs.rays_to_channel(single_path_rays(delay=tau), CFG, CFG.f_dl_hz)
    mags = np.abs(h[0])
    assert np.allclose(mags, mags[0])
    dphi = np.angle(h[0, 1:] / h[0, :-1])
    assert np.allclose(dphi, -2 * math.pi * CFG.scs_hz * tau, atol=1e-9)


def test_two_path_matches_brute_force_oracle():
    tau2 = 1.0 / (2 * CFG.scs_hz * CFG.n_sc)
    rays = cs.RaySet(gains=[1.0, 1.0], delays_s=[0.0, tau2],
                     dep_az=[0.1, -0.4], dep_el=[0.0, 0.05],
                     arr_az=[0.0, 1.0], arr_el=[0.0, 0.0],
                     pol_phases=[0.3, 1.2], los_flag=True)
    ours = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    oracle = brute_force_channel(rays, CFG, CFG.f_dl_hz)
    assert np.max(np.abs(ours - oracle)) <= 1e-9
    assert np.max(np.abs(np.sum(np.abs(ours) ** 2, axis=0)
                         - np.sum(np.abs(oracle) ** 2, axis=0))) <= 1e-9


def test_random_raysets_match_brute_force():
    for s in range(16):
        rays = cs.sample_rayset(CFG, seed=1000 + s, los_probability=0.5)
        ours = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
        oracle = brute_force_channel(rays, CFG, CFG.f_dl_hz)
        assert np.max(np.abs(ours - oracle)) <= 1e-9


def test_linearity_in_gains():
    rays = cs.sample_rayset(CFG, seed=2, los_probability=0.5)
    h1 = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    # power-of-two scaling introduces no rounding, so equality is exact
    scaled = cs.RaySet(rays.gains * 2.0, rays.delays_s, rays.dep_az,
                       rays.dep_el, rays.arr_az, rays.arr_el,
                       rays.pol_phases, rays.los_flag)
    h2 = cs.rays_to_channel(scaled, CFG, CFG.f_dl_hz)
    assert np.array_equal(h2, 2.0 * h1)
    # arbitrary scales are linear to rounding precision
    scaled = cs.RaySet(rays.gains * 2.5, rays.delays_s, rays.dep_az,
                       rays.dep_el, rays.arr_az, rays.arr_el,
                       rays.pol_phases, rays.los_flag)
    h3 = cs.rays_to_channel(scaled, CFG, CFG.f_dl_hz)
    assert np.allclose(h3, 2.5 * h1, rtol=1e-14, atol=0)


def test_delay_beyond_window_rejected():
    rays = single_path_rays(delay=CFG.fft_window_s * 2)
    with pytest.raises(cs.ChanSimError):
        cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)


def test_degenerate_reciprocity():
    # same carrier and same phase draws -> identical pair
    rays = cs.sample_rayset(CFG, seed=11, los_probability=0.5)
    dl = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    ul = cs.rays_to_channel(cs.uplink_rayset(rays, seed=0, redraw_phases=False),
                            CFG, CFG.f_dl_hz)
    assert np.array_equal(dl, ul)


def test_passband_phase_slope_closed_form():
    # single unit path, zero initial phase: the synthesized phase must equal
    # the closed-form passband phase -2*pi*(carrier + f_n)*tau at both
    # carriers; the folded carrier phases differ exactly by the carrier ratio
    tau = 55e-9
    rays = single_path_rays(delay=tau)
    f = CFG.subcarrier_offsets_hz()
    for carrier in (CFG.f_dl_hz, CFG.f_ul_hz):
        h = cs.rays_to_channel(rays, CFG, carrier)
        expected = -2 * math.pi * (carrier + f) * tau
        diff = np.angle(h[0] * np.exp(-1j * expected))
        assert np.max(np.abs(diff)) <= 1e-6
    phase_ul = -2 * math.pi * CFG.f_ul_hz * tau
    phase_dl = -2 * math.pi * CFG.f_dl_hz * tau
    assert abs(phase_ul / phase_dl - CFG.f_ul_hz / CFG.f_dl_hz) <= 1e-12


def test_paired_uplink_keeps_geometry():
    rays = cs.sample_rayset(CFG, seed=3, los_probability=0.5)
    ul_rays = cs.uplink_rayset(rays, seed=99)
    assert np.array_equal(ul_rays.delays_s, rays.delays_s)
    assert np.array_equal(ul_rays.dep_az, rays.dep_az)
    assert np.array_equal(ul_rays.dep_el, rays.dep_el)
    assert np.allclose(np.abs(ul_rays.gains), np.abs(rays.gains))
    h = cs.make_paired_uplink(rays, CFG, seed=99)
    assert h.shape == (CFG.n_tx, CFG.n_sc)


def test_corrupt_estimate_perfect_sentinel():
    rays = cs.sample_rayset(CFG, seed=4, los_probability=0.5)
    h = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    assert np.array_equal(cs.corrupt_estimate(h, None, 0), h)
    assert np.array_equal(cs.corrupt_estimate(h, math.inf, 0), h)


def test_corrupt_estimate_monte_carlo_ratio():
    rays = cs.sample_rayset(CFG, seed=5, los_probability=0.5)
    h = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    hp = float(np.sum(np.abs(h) ** 2))
    ratios = np.empty(10_000)
    for k in range(ratios.size):
        noisy = cs.corrupt_estimate(h, 0.0, seed=k)
        ratios[k] = np.sum(np.abs(noisy - h) ** 2) / hp
    assert abs(ratios.mean() - 1.0) <= 0.02


def test_corrupt_estimate_deterministic_and_errors():
    rays = cs.sample_rayset(CFG, seed=6, los_probability=0.5)
    h = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    a = cs.corrupt_estimate(h, 5.0, seed=42)
    b = cs.corrupt_estimate(h, 5.0, seed=42)
    assert np.array_equal(a, b)
    with pytest.raises(cs.ChanSimError):
        cs.corrupt_estimate(np.zeros((2, 2)), 0.0, seed=0)


def test_corrupt_estimate_high_snr_cosine():
    rays = cs.sample_rayset(CFG, seed=8, los_probability=0.5)
    h = cs.rays_to_channel(rays, CFG, CFG.f_dl_hz)
    noisy = cs.corrupt_estimate(h, 60.0, seed=1)
    num = np.abs(np.sum(np.conj(h) * noisy, axis=0))
    den = np.linalg.norm(h, axis=0) * np.linalg.norm(noisy, axis=0)
    assert np.all(num / den >= 0.999)


def test_dataset_roundtrip(tmp_path):
    samples = cs.generate_dataset(CFG, 10, seed=77)
    path = tmp_path / "d.bin"
    cs.write_dataset(path, CFG, samples)
    cfg2, back = cs.read_dataset(path)
    assert cfg2 == CFG
    assert len(back) == 10
    for a, b in zip(samples, back):
        assert a.downlink.tobytes() == b.downlink.tobytes()
        assert a.uplink.tobytes() == b.uplink.tobytes()
        assert np.array_equal(a.rays.gains, b.rays.gains)
        assert np.array_equal(a.rays.delays_s, b.rays.delays_s)
        assert a.rays.los_flag == b.rays.los_flag
    # second write is byte-identical
    path2 = tmp_path / "d2.bin"
    cs.write_dataset(path2, cfg2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_empty(tmp_path):
    path = tmp_path / "e.bin"
    cs.write_dataset(path, CFG, [])
    cfg2, back = cs.read_dataset(path)
    assert back == [] and cfg2 == CFG


def test_dataset_truncation_detected(tmp_path):
    samples = cs.generate_dataset(CFG, 10, seed=1)
    path = tmp_path / "t.bin"
    cs.write_dataset(path, CFG, samples)
    raw = bytearray(path.read_bytes())
    # header count lives right after magic+version+config
    off = 8 + 4 + cs._CFG_STRUCT.size
    raw[off:off + 8] = (11).to_bytes(8, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(cs.ChanSimError, match="truncated"):
        cs.read_dataset(path)


def test_dataset_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 64)
    with pytest.raises(cs.ChanSimError, match="magic"):
        cs.read_dataset(path)
    cs.write_dataset(path, CFG, [])
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(cs.ChanSimError, match="version"):
        cs.read_dataset(path)


def test_generate_dataset_deterministic():
    a = cs.generate_dataset(CFG, 5, seed=9)
    b = cs.generate_dataset(CFG, 5, seed=9)
    for x, y in zip(a, b):
        assert x.downlink.tobytes() == y.downlink.tobytes()
        assert x.uplink.tobytes() == y.uplink.tobytes()
