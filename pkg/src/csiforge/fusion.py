"""Sensor feature extraction and multi-modal channel feature refinement.

A windowed-attention hierarchy (same block design as the channel nets)
turns uplink CSI or image-like grids into a flat feature vector; a single
multi-modal transformer block over the concatenated token matrices then
produces an additive correction to the quantized channel feature. The
correction projection starts at zero, so refinement begins as the identity.
"""

from dataclasses import dataclass
import math
import struct

import numpy as np

from . import diffcore as dc
from .autonet import Mlp, ParamBank, Stage, PatchMerge

SENSOR_MAGIC = b"SGRD"
MODALITY_CODES = {"uplink_csi": 1, "image_grid": 2}
MODALITY_NAMES = {v: k for k, v in MODALITY_CODES.items()}


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class SensorNetConfig:
    modality: str
    in_channels: int
    grid_h: int
    grid_w: int
    patch_h: int
    patch_w: int
    stage_dims: tuple
    embed_dim: int            # N_e, must match the chosen fusion point
    heads: tuple
    window: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.modality not in MODALITY_CODES:
            raise FusionError(f"unknown modality {self.modality!r}")
        if len(self.heads) != len(self.stage_dims):
            raise FusionError("need one head count per stage")
        div = 1 << self.n_merges
        if self.token_h % div or self.token_w % div:
            raise FusionError(
                f"token grid {self.token_h}x{self.token_w} incompatible with "
                f"{self.n_merges} merges")

    @property
    def pad_h(self):
        return (-self.grid_h) % self.patch_h

    @property
    def pad_w(self):
        return (-self.grid_w) % self.patch_w

    @property
    def token_h(self):
        return (self.grid_h + self.pad_h) // self.patch_h

    @property
    def token_w(self):
        return (self.grid_w + self.pad_w) // self.patch_w

    @property
    def n_merges(self):
        return len(self.stage_dims) - 1

    @property
    def n_tokens(self):
        return (self.token_h >> self.n_merges) * (self.token_w >> self.n_merges)

    @property
    def feature_len(self):
        return self.n_tokens * self.embed_dim

    @property
    def patch_values(self):
        return self.in_channels * self.patch_h * self.patch_w


def uplink_sensor_config(n_tx, n_sc, stage_dims, embed_dim, heads):
    """Uplink grids are patched 2x2 over the antenna x subcarrier plane."""
    return SensorNetConfig(modality="uplink_csi", in_channels=2,
                           grid_h=n_tx, grid_w=n_sc, patch_h=2, patch_w=2,
                           stage_dims=tuple(stage_dims), embed_dim=embed_dim,
                           heads=tuple(heads))


def image_sensor_config(height, width, stage_dims, embed_dim, heads,
                        channels=3, patch_h=3, patch_w=4):
    return SensorNetConfig(modality="image_grid", in_channels=channels,
                           grid_h=height, grid_w=width, patch_h=patch_h,
                           patch_w=patch_w, stage_dims=tuple(stage_dims),
                           embed_dim=embed_dim, heads=tuple(heads))


def sensor_grid_from_uplink(h_ul):
    """Uplink channel matrix to a 2 x N_t x N_s real grid."""
    h_ul = np.asarray(h_ul)
    return np.stack([h_ul.real, h_ul.imag], axis=0).astype(np.float32)


class SensorEncoder:
    """Patch embedding plus merge hierarchy ending at N_e per token."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        bank = ParamBank(rng)
        self.bank = bank
        dims = cfg.stage_dims
        self.embed_w = bank.glorot("patch.w", (cfg.patch_values, dims[0]))
        self.embed_b = bank.zeros("patch.b", (dims[0],))
        self.stages = []
        self.merges = []
        for s, (dim, heads) in enumerate(zip(dims, cfg.heads)):
            self.stages.append(Stage(bank, f"s{s}", dim, heads, cfg.window,
                                     cfg.mlp_ratio))
            if s + 1 < len(dims):
                self.merges.append(PatchMerge(bank, f"m{s}", dim, dims[s + 1]))
        self.head_w = bank.glorot("head.w", (dims[-1], cfg.embed_dim))
        self.head_b = bank.zeros("head.b", (cfg.embed_dim,))

    def parameters(self):
        return self.bank.params

    def __call__(self, x):
        """(b, C, H, W) sensor grid -> (b, M) feature vector."""
        cfg = self.cfg
        if x.shape[1:] != (cfg.in_channels, cfg.grid_h, cfg.grid_w):
            raise FusionError(
                f"sensor grid {x.shape[1:]} != "
                f"({cfg.in_channels}, {cfg.grid_h}, {cfg.grid_w})")
        b = x.shape[0]
        x = dc.transpose(x, (0, 2, 3, 1))            # (b, H, W, C)
        if cfg.pad_h or cfg.pad_w:
            x = dc.pad(x, ((0, 0), (0, cfg.pad_h), (0, cfg.pad_w), (0, 0)))
        x = dc.reshape(x, (b, cfg.token_h, cfg.patch_h, cfg.token_w,
                           cfg.patch_w, cfg.in_channels))
        x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
        x = dc.reshape(x, (b, cfg.token_h, cfg.token_w, cfg.patch_values))
        x = dc.linear(x, self.embed_w, self.embed_b)
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        x = dc.linear(x, self.head_w, self.head_b)
        return dc.reshape(x, (b, cfg.feature_len))


def extract_sensor_features(grid, sensor_encoder):
    """Single-grid convenience wrapper: (C, H, W) -> length-M vector."""
    x = dc.Tensor(np.asarray(grid, dtype=np.float64)[None])
    return sensor_encoder(x).data[0]


@dataclass(frozen=True)
class RefineConfig:
    n_features: int       # N, length of the quantized channel feature
    sensor_len: int       # M, length of the sensor feature
    embed_dim: int        # N_p (bottleneck fusion) or N_L3 (deep fusion)
    heads: int
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.n_features % self.embed_dim:
            raise FusionError(
                f"N={self.n_features} not divisible by embed dim {self.embed_dim}")
        if self.sensor_len % self.embed_dim:
            raise FusionError(
                f"M={self.sensor_len} not divisible by embed dim {self.embed_dim}")
        if self.embed_dim % self.heads:
            raise FusionError("embed dim must split into heads")

    @property
    def csi_tokens(self):
        return self.n_features // self.embed_dim

    @property
    def sensor_tokens(self):
        return self.sensor_len // self.embed_dim

    @property
    def all_tokens(self):
        return self.csi_tokens + self.sensor_tokens


class RefineNet:
    """Early-concatenation multi-modal transformer with a residual output.

    The correction projection is zero-initialized, so a freshly built net
    returns the channel feature untouched.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        bank = ParamBank(rng)
        self.bank = bank
        e = cfg.embed_dim
        self.b_pos = bank.zeros("b_pos", (cfg.all_tokens, e))
        self.wq = bank.glorot("wq", (e, e))
        self.wk = bank.glorot("wk", (e, e))
        self.wv = bank.glorot("wv", (e, e))
        self.bq = bank.zeros("bq", (e,))
        self.bk = bank.zeros("bk", (e,))
        self.bv = bank.zeros("bv", (e,))
        self.w_out = bank.glorot("w_out", (e, e))
        self.b_out = bank.zeros("b_out", (e,))
        self.ln1_g = bank.ones("ln1_g", (e,))
        self.ln1_b = bank.zeros("ln1_b", (e,))
        self.ln2_g = bank.ones("ln2_g", (e,))
        self.ln2_b = bank.zeros("ln2_b", (e,))
        self.mlp = Mlp(bank, "mlp", e, cfg.mlp_ratio)
        # transposed W_r, maps all tokens onto the CSI tokens; zero start
        self.w_r = bank.zeros("w_r", (cfg.csi_tokens, cfg.all_tokens))

    def parameters(self):
        return self.bank.params

    def refine_tokens(self, zs_tokens, zd_tokens, return_probs=False):
        """(b, T_s, E) and (b, T_d, E) token matrices -> (b, T_s, E)."""
        cfg = self.cfg
        e = cfg.embed_dim
        b = zs_tokens.shape[0]
        z = dc.concat([zs_tokens, zd_tokens], axis=1) + self.b_pos
        nh = cfg.heads
        hd = e // nh
        t_all = cfg.all_tokens

        def split_heads(mat):
            mat = dc.reshape(mat, (b, t_all, nh, hd))
            return dc.transpose(mat, (0, 2, 1, 3))

        scale = 1.0 / math.sqrt(hd)
        q = split_heads(dc.linear(z, self.wq * scale, self.bq * scale))
        k = split_heads(dc.linear(z, self.wk, self.bk))
        v = split_heads(dc.linear(z, self.wv, self.bv))
        logits = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2)))
        probs = dc.softmax(logits, axis=-1)
        attn = dc.matmul(probs, v)
        attn = dc.reshape(dc.transpose(attn, (0, 2, 1, 3)), (b, t_all, e))
        msa = dc.linear(attn, self.w_out, self.b_out)

        z1 = dc.layernorm_affine(z + msa, self.ln1_g, self.ln1_b)
        z2 = dc.layernorm_affine(self.mlp(z1) + z1, self.ln2_g, self.ln2_b)

        out = zs_tokens + dc.matmul(self.w_r, z2)
        if return_probs:
            return out, probs
        return out

    def __call__(self, z_s, z_d, return_probs=False):
        """Flat (b, N) and (b, M) features -> refined (b, N) feature."""
        cfg = self.cfg
        if z_s.shape[-1] != cfg.n_features:
            raise FusionError(f"channel feature length {z_s.shape[-1]} != {cfg.n_features}")
        if z_d.shape[-1] != cfg.sensor_len:
            raise FusionError(f"sensor feature length {z_d.shape[-1]} != {cfg.sensor_len}")
        b = z_s.shape[0]
        zs_tokens = dc.reshape(z_s, (b, cfg.csi_tokens, cfg.embed_dim))
        zd_tokens = dc.reshape(z_d, (b, cfg.sensor_tokens, cfg.embed_dim))
        result = self.refine_tokens(zs_tokens, zd_tokens, return_probs)
        if return_probs:
            out, probs = result
            return dc.reshape(out, (b, cfg.n_features)), probs
        return dc.reshape(result, (b, cfg.n_features))


def refine_features(z_s, z_d, refine_net):
    """Single-sample convenience wrapper over RefineNet."""
    zs = dc.Tensor(np.asarray(z_s, dtype=np.float64)[None])
    zd = dc.Tensor(np.asarray(z_d, dtype=np.float64)[None])
    return refine_net(zs, zd).data[0]


# ---------------------------------------------------------------------------
# sensor grid files

def write_sensor_grid(path, modality, grid):
    grid = np.ascontiguousarray(grid, dtype=np.float32)
    if modality not in MODALITY_CODES:
        raise FusionError(f"unknown modality {modality!r}")
    with open(path, "wb") as fh:
        fh.write(SENSOR_MAGIC)
        fh.write(struct.pack("<BBB", MODALITY_CODES[modality], 0, grid.ndim))
        fh.write(struct.pack(f"<{grid.ndim}I", *grid.shape))
        fh.write(grid.astype("<f4").tobytes())


def read_sensor_grid(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SENSOR_MAGIC:
            raise FusionError(f"bad sensor grid magic {magic!r}")
        code, dtype_code, ndim = struct.unpack("<BBB", fh.read(3))
        if dtype_code != 0:
            raise FusionError(f"unsupported element type code {dtype_code}")
        if code not in MODALITY_NAMES:
            raise FusionError(f"unknown modality code {code}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        payload = fh.read()
    need = 4 * int(np.prod(shape))
    if len(payload) < need:
        raise FusionError("truncated sensor grid payload")
    grid = np.frombuffer(payload[:need], dtype="<f4").reshape(shape).copy()
    return MODALITY_NAMES[code], grid
