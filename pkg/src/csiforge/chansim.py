"""Paired downlink/uplink MIMO-OFDM channel synthesis from sampled rays.

A parametric multipath sampler stands in for ray tracing: clusters with
exponentially decaying power over delay, sector-limited departure angles,
and an optional boosted line-of-sight path. Channels are evaluated on
baseband subcarrier offsets with the carrier folded into per-path phases,
so paired links at different carriers share geometry but not phase.
"""

from dataclasses import dataclass, replace
import math
import struct

import numpy as np

DATASET_MAGIC = b"CSIFORGE"
DATASET_VERSION = 1

MOD_DOWNLINK = 1
MOD_UPLINK = 2
MOD_SENSOR = 4

# sampler constants (ray-tracer surrogate)
DELAY_MEAN_S = 100e-9
POWER_DECAY_DB_PER_100NS = 3.0
LOS_BOOST_DB = 6.0
SECTOR_HALF_ANGLE = math.pi / 3.0     # 120 degree sector
ELEVATION_STD = math.radians(10.0)
XPOL_ATTEN_DB = 8.0

_CFG_STRUCT = struct.Struct("<IIIdddIdIIB")


class ChanSimError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_tx: int
    n_rb: int
    n_sc: int
    scs_hz: float
    f_dl_hz: float
    f_ul_hz: float
    fft_size: int
    sample_rate_hz: float
    array_rows: int
    array_cols: int
    dual_polarized: bool

    def __post_init__(self):
        if self.n_sc != 12 * self.n_rb:
            raise ChanSimError(f"n_sc={self.n_sc} != 12*n_rb={12 * self.n_rb}")
        ports = self.array_rows * self.array_cols * (2 if self.dual_polarized else 1)
        if self.n_tx != ports:
            raise ChanSimError(f"n_tx={self.n_tx} != array ports {ports}")
        if self.n_tx % 2 != 0:
            raise ChanSimError("n_tx must be even (antenna patching)")
        if self.f_dl_hz == self.f_ul_hz:
            raise ChanSimError("FDD requires f_dl_hz != f_ul_hz")

    @property
    def fft_window_s(self):
        return self.fft_size / self.sample_rate_hz

    def subcarrier_offsets_hz(self):
        return (np.arange(self.n_sc) - (self.n_sc - 1) / 2.0) * self.scs_hz


def desk_config():
    """Small profile sized so the full pipeline runs in minutes."""
    return SimConfig(n_tx=8, n_rb=16, n_sc=192, scs_hz=60e3,
                     f_dl_hz=28e9, f_ul_hz=27e9, fft_size=256,
                     sample_rate_hz=256 * 60e3, array_rows=2, array_cols=2,
                     dual_polarized=True)


def paper_config():
    """5G NR CDL simulation parameters (28/27 GHz, 48 RBs, 4x4 dual-pol UPA)."""
    return SimConfig(n_tx=32, n_rb=48, n_sc=576, scs_hz=60e3,
                     f_dl_hz=28e9, f_ul_hz=27e9, fft_size=1024,
                     sample_rate_hz=61_440_000.0, array_rows=4, array_cols=4,
                     dual_polarized=True)


@dataclass
class RaySet:
    """Multipath parameters shared by a downlink/uplink pair."""

    gains: np.ndarray        # (L,) complex linear gains
    delays_s: np.ndarray     # (L,) nonnegative, < FFT window
    dep_az: np.ndarray       # departure azimuth (rad)
    dep_el: np.ndarray       # departure elevation (rad)
    arr_az: np.ndarray       # arrival azimuth (rad)
    arr_el: np.ndarray       # arrival elevation (rad)
    pol_phases: np.ndarray   # (L,) per-path cross-polarization phase
    los_flag: bool

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.complex128)
        for name in ("delays_s", "dep_az", "dep_el", "arr_az", "arr_el", "pol_phases"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.gains.shape[0] == 0:
            raise ChanSimError("RaySet needs at least one path")
        if np.any(self.delays_s < 0):
            raise ChanSimError("negative path delay")
        if self.los_flag and self.delays_s[0] != self.delays_s.min():
            raise ChanSimError("LOS path must have the minimum delay")

    @property
    def n_paths(self):
        return self.gains.shape[0]


def sample_rayset(cfg, seed, los_probability):
    """Draw 1..6 clusters with delay-decaying power; deterministic per seed."""
    if not 0.0 <= los_probability <= 1.0:
        raise ChanSimError("los_probability must be in [0, 1]")
    rng = np.random.default_rng(seed)
    los = bool(rng.random() < los_probability)
    n_paths = int(rng.integers(1, 7))

    window = cfg.fft_window_s
    delays = np.empty(n_paths)
    for i in range(n_paths):
        d = rng.exponential(DELAY_MEAN_S)
        while d >= window:
            d = rng.exponential(DELAY_MEAN_S)
        delays[i] = d
    delays.sort()

    dep_az = rng.uniform(-SECTOR_HALF_ANGLE, SECTOR_HALF_ANGLE, n_paths)
    dep_el = rng.normal(0.0, ELEVATION_STD, n_paths)
    arr_az = rng.uniform(-math.pi, math.pi, n_paths)
    arr_el = rng.normal(0.0, ELEVATION_STD, n_paths)
    pol_phases = rng.uniform(0.0, 2.0 * math.pi, n_paths)

    mean_power = 10.0 ** (-POWER_DECAY_DB_PER_100NS * (delays / 100e-9) / 10.0)
    if los:
        mean_power[0] *= 10.0 ** (LOS_BOOST_DB / 10.0)

    gains = np.empty(n_paths, dtype=np.complex128)
    scatter = (rng.normal(size=n_paths) + 1j * rng.normal(size=n_paths)) / math.sqrt(2.0)
    phases = rng.uniform(0.0, 2.0 * math.pi, n_paths)
    for i in range(n_paths):
        if los and i == 0:
            gains[i] = math.sqrt(mean_power[i]) * np.exp(1j * phases[i])
        else:
            gains[i] = scatter[i] * math.sqrt(mean_power[i])
    gains /= np.linalg.norm(gains)

    return RaySet(gains, delays, dep_az, dep_el, arr_az, arr_el, pol_phases, los)


def steering_matrix(cfg, rays):
    """Planar-array response per path, (L, n_tx), polarization ports stacked."""
    u = np.sin(rays.dep_az) * np.cos(rays.dep_el)   # (L,)
    v = np.sin(rays.dep_el)
    col = math.pi * np.arange(cfg.array_cols)
    row = math.pi * np.arange(cfg.array_rows)
    phase = row[None, :, None] * v[:, None, None] + col[None, None, :] * u[:, None, None]
    base = np.exp(1j * phase).reshape(rays.n_paths, -1)   # (L, rows*cols)
    if not cfg.dual_polarized:
        return base
    xpol = 10.0 ** (-XPOL_ATTEN_DB / 20.0)
    second = base * (xpol * np.exp(1j * rays.pol_phases))[:, None]
    return np.concatenate([base, second], axis=1)


def rays_to_channel(rays, cfg, carrier_hz):
    """Spatial-frequency channel H[t, n] = sum_l a_l steer_l exp(-j2pi f_n tau_l)."""
    if np.any(rays.delays_s >= cfg.fft_window_s):
        raise ChanSimError("path delay exceeds the FFT window")
    f = cfg.subcarrier_offsets_hz()
    a_eff = rays.gains * np.exp(-2j * math.pi * carrier_hz * rays.delays_s)
    steer = steering_matrix(cfg, rays)                       # (L, n_tx)
    freq = np.exp(-2j * math.pi * np.outer(rays.delays_s, f))  # (L, n_sc)
    h = np.einsum("l,lt,ln->tn", a_eff, steer, freq)
    return h


def uplink_rayset(rays, seed, redraw_phases=True):
    """Same geometry; per-path initial phases independently re-drawn."""
    if not redraw_phases:
        return rays
    rng = np.random.default_rng(seed)
    gain_phases = rng.uniform(0.0, 2.0 * math.pi, rays.n_paths)
    pol_phases = rng.uniform(0.0, 2.0 * math.pi, rays.n_paths)
    gains = np.abs(rays.gains) * np.exp(1j * gain_phases)
    return replace(rays, gains=gains, pol_phases=pol_phases)


def make_paired_uplink(rays, cfg, seed=0, redraw_phases=True):
    """Uplink channel sharing the downlink's delays, angles and gain levels."""
    return rays_to_channel(uplink_rayset(rays, seed, redraw_phases), cfg, cfg.f_ul_hz)


def corrupt_estimate(h, snr_db, seed):
    """Additive circular Gaussian estimate: E||W||^2/||H||^2 = 10^(-snr/10)."""
    h = np.asarray(h)
    if snr_db is None or snr_db == math.inf:
        return h.copy()
    if not math.isfinite(snr_db):
        raise ChanSimError("snr_db must be finite (or the perfect-CSI sentinel)")
    power = float(np.sum(np.abs(h) ** 2))
    if power == 0.0:
        raise ChanSimError("cannot scale noise against a zero-norm channel")
    rng = np.random.default_rng(seed)
    w = (rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape)) / math.sqrt(2.0)
    scale = math.sqrt(power * 10.0 ** (-snr_db / 10.0) / h.size)
    return h + scale * w


# ---------------------------------------------------------------------------
# dataset persistence

@dataclass
class Sample:
    """One dataset record; grids are stored at 32-bit precision."""

    downlink: np.ndarray                 # complex64 (n_tx, n_sc)
    rays: RaySet
    uplink: np.ndarray | None = None     # complex64 (n_tx, n_sc)
    sensor: np.ndarray | None = None     # float32 (C, H, W)

    def __post_init__(self):
        self.downlink = np.ascontiguousarray(self.downlink, dtype=np.complex64)
        if self.uplink is not None:
            self.uplink = np.ascontiguousarray(self.uplink, dtype=np.complex64)
        if self.sensor is not None:
            self.sensor = np.ascontiguousarray(self.sensor, dtype=np.float32)

    @property
    def modality_mask(self):
        mask = MOD_DOWNLINK
        if self.uplink is not None:
            mask |= MOD_UPLINK
        if self.sensor is not None:
            mask |= MOD_SENSOR
        return mask


def _pack_config(cfg):
    return _CFG_STRUCT.pack(cfg.n_tx, cfg.n_rb, cfg.n_sc, cfg.scs_hz,
                            cfg.f_dl_hz, cfg.f_ul_hz, cfg.fft_size,
                            cfg.sample_rate_hz, cfg.array_rows, cfg.array_cols,
                            1 if cfg.dual_polarized else 0)


def _unpack_config(buf):
    vals = _CFG_STRUCT.unpack(buf)
    return SimConfig(n_tx=vals[0], n_rb=vals[1], n_sc=vals[2], scs_hz=vals[3],
                     f_dl_hz=vals[4], f_ul_hz=vals[5], fft_size=vals[6],
                     sample_rate_hz=vals[7], array_rows=vals[8],
                     array_cols=vals[9], dual_polarized=bool(vals[10]))


def _write_f64_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.size))
    fh.write(arr.tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ChanSimError("truncated dataset file")
    return buf


def _read_f64_array(fh):
    size, = struct.unpack("<I", _read_exact(fh, 4))
    return np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").copy()


def write_dataset(path, cfg, samples):
    mask_union = 0
    for s in samples:
        mask_union |= s.modality_mask
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(_pack_config(cfg))
        fh.write(struct.pack("<QB", len(samples), mask_union))
        for s in samples:
            fh.write(struct.pack("<B", s.modality_mask))
            fh.write(s.downlink.astype("<c8").tobytes())
            if s.uplink is not None:
                fh.write(s.uplink.astype("<c8").tobytes())
            if s.sensor is not None:
                c, hh, ww = s.sensor.shape
                fh.write(struct.pack("<III", c, hh, ww))
                fh.write(s.sensor.astype("<f4").tobytes())
            _write_f64_array(fh, s.rays.gains.real)
            _write_f64_array(fh, s.rays.gains.imag)
            for name in ("delays_s", "dep_az", "dep_el", "arr_az", "arr_el", "pol_phases"):
                _write_f64_array(fh, getattr(s.rays, name))
            fh.write(struct.pack("<B", 1 if s.rays.los_flag else 0))


def read_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise ChanSimError(f"bad dataset magic {magic!r}")
        version, = struct.unpack("<I", _read_exact(fh, 4))
        if version != DATASET_VERSION:
            raise ChanSimError(f"unsupported dataset version {version}")
        cfg = _unpack_config(_read_exact(fh, _CFG_STRUCT.size))
        count, _mask = struct.unpack("<QB", _read_exact(fh, 9))
        grid_bytes = cfg.n_tx * cfg.n_sc * 8
        samples = []
        for _ in range(count):
            mask, = struct.unpack("<B", _read_exact(fh, 1))
            downlink = np.frombuffer(_read_exact(fh, grid_bytes), dtype="<c8")
            downlink = downlink.reshape(cfg.n_tx, cfg.n_sc).copy()
            uplink = None
            if mask & MOD_UPLINK:
                uplink = np.frombuffer(_read_exact(fh, grid_bytes), dtype="<c8")
                uplink = uplink.reshape(cfg.n_tx, cfg.n_sc).copy()
            sensor = None
            if mask & MOD_SENSOR:
                c, hh, ww = struct.unpack("<III", _read_exact(fh, 12))
                sensor = np.frombuffer(_read_exact(fh, 4 * c * hh * ww), dtype="<f4")
                sensor = sensor.reshape(c, hh, ww).copy()
            g_re = _read_f64_array(fh)
            g_im = _read_f64_array(fh)
            arrays = [_read_f64_array(fh) for _ in range(6)]
            los_flag, = struct.unpack("<B", _read_exact(fh, 1))
            rays = RaySet(g_re + 1j * g_im, *arrays, bool(los_flag))
            samples.append(Sample(downlink, rays, uplink=uplink, sensor=sensor))
        if fh.read(1):
            raise ChanSimError("trailing bytes after declared record count")
    return cfg, samples


def _sample_seed(seed, index, stream):
    return int(np.random.SeedSequence((seed, index, stream)).generate_state(1)[0])


def generate_dataset(cfg, n_samples, seed, los_probability=0.5, with_uplink=True):
    """Synthesize paired samples; embarrassingly parallel in the sample index."""
    samples = []
    for i in range(n_samples):
        rays = sample_rayset(cfg, _sample_seed(seed, i, 0), los_probability)
        downlink = rays_to_channel(rays, cfg, cfg.f_dl_hz)
        uplink = None
        if with_uplink:
            uplink = make_paired_uplink(rays, cfg, seed=_sample_seed(seed, i, 1))
        samples.append(Sample(downlink, rays, uplink=uplink))
    return samples
