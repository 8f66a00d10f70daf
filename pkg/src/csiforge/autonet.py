"""Windowed-attention autoencoder: channel feature extractor and recovery net.

Channels enter as a two-channel real grid, get embedded in 2-antenna x 1-RB
patches and flow through stages of window / shifted-window attention with
2x2 patch merging in between; the decoder mirrors the hierarchy with patch
splitting. Grids that do not tile into windows are zero-padded and the pad
positions masked out of the attention.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import diffcore as dc


class AutonetError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    n_tx: int
    n_rb: int
    stage_dims: tuple          # embedding dim per stage, L0 first
    bottleneck_dim: int        # per-token dim of the feature head (N_p)
    heads: tuple               # attention heads per stage
    window: int = 4
    patch_antennas: int = 2
    patch_subcarriers: int = 12
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.n_tx % self.patch_antennas != 0:
            raise AutonetError("n_tx must divide into antenna patches")
        if (12 * self.n_rb) % self.patch_subcarriers != 0:
            raise AutonetError("subcarriers must divide into frequency patches")
        if len(self.heads) != len(self.stage_dims):
            raise AutonetError("need one head count per stage")
        for dim, h in zip(self.stage_dims, self.heads):
            if dim % h != 0:
                raise AutonetError(f"stage dim {dim} not divisible by heads {h}")
        div = 1 << self.n_merges
        if self.grid_h % div or self.grid_w % div:
            raise AutonetError(
                f"patch grid {self.grid_h}x{self.grid_w} not divisible by "
                f"{div} ({self.n_merges} merges)")

    @property
    def n_sc(self):
        return 12 * self.n_rb

    @property
    def grid_h(self):
        return self.n_tx // self.patch_antennas

    @property
    def grid_w(self):
        return (12 * self.n_rb) // self.patch_subcarriers

    @property
    def n_merges(self):
        return len(self.stage_dims) - 1

    @property
    def bottleneck_tokens(self):
        return (self.grid_h >> self.n_merges) * (self.grid_w >> self.n_merges)

    @property
    def n_features(self):
        return self.bottleneck_tokens * self.bottleneck_dim

    @property
    def patch_values(self):
        return self.patch_antennas * self.patch_subcarriers * 2


def paper_net_config():
    """Embedding dims [24, 32, 32, 32], N_p = 4: N = NtxNrb/128 * Np = 48."""
    return NetConfig(n_tx=32, n_rb=48, stage_dims=(24, 32, 32, 32),
                     bottleneck_dim=4, heads=(2, 4, 4, 4))


def desk_net_config():
    """Two-merge profile for the 8x192 desk channel; N derived = 48."""
    return NetConfig(n_tx=8, n_rb=16, stage_dims=(12, 16, 24),
                     bottleneck_dim=12, heads=(2, 2, 2))


def wmsa_flops(h, w, c, m):
    """Window-attention cost model: 4hwC^2 + 2M^2hwC (linear in h*w)."""
    return 4 * h * w * c * c + 2 * m * m * h * w * c


class ParamBank:
    """Named parameter registry with seeded initialization."""

    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def _add(self, name, data):
        if name in self.params:
            raise AutonetError(f"duplicate parameter {name}")
        t = dc.Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def glorot(self, name, shape):
        fan_in = int(np.prod(shape[:-1]))
        fan_out = int(shape[-1])
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self.rng.uniform(-a, a, size=shape))

    def zeros(self, name, shape):
        return self._add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._add(name, np.ones(shape))


def channel_to_array(h):
    """Complex grid to trailing real/imag axis."""
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-1).astype(np.float64)


def array_to_channel(a):
    a = np.asarray(a)
    return a[..., 0] + 1j * a[..., 1]


def _relative_index(m):
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return ((rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)).astype(np.intp)


def _pad_to_windows(x, m):
    """Pad (b, H, W, C) up to window multiples; also return the valid mask."""
    _, h, w, _ = x.shape
    ph = (-h) % m
    pw = (-w) % m
    valid = np.zeros((h + ph, w + pw), dtype=bool)
    valid[:h, :w] = True
    if ph or pw:
        x = dc.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return x, valid


def _partition(x, m):
    """(b, H, W, C) -> (b, nwin, M*M, C) in row-major window order."""
    b, h, w, c = x.shape
    x = dc.reshape(x, (b, h // m, m, w // m, m, c))
    x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
    return dc.reshape(x, (b, (h // m) * (w // m), m * m, c))


def _unpartition(x, m, h, w):
    b = x.shape[0]
    c = x.shape[-1]
    x = dc.reshape(x, (b, h // m, w // m, m, m, c))
    x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
    return dc.reshape(x, (b, h, w, c))


class WindowAttentionParams:
    """Projections plus the per-stage learned relative position bias."""

    def __init__(self, bank, prefix, dim, heads, window):
        self.dim = dim
        self.heads = heads
        self.window = window
        self.wq = bank.glorot(f"{prefix}.wq", (dim, dim))
        self.wk = bank.glorot(f"{prefix}.wk", (dim, dim))
        self.wv = bank.glorot(f"{prefix}.wv", (dim, dim))
        self.bq = bank.zeros(f"{prefix}.bq", (dim,))
        self.bk = bank.zeros(f"{prefix}.bk", (dim,))
        self.bv = bank.zeros(f"{prefix}.bv", (dim,))
        self.proj = bank.glorot(f"{prefix}.proj", (dim, dim))
        self.bproj = bank.zeros(f"{prefix}.bproj", (dim,))
        self.rel_bias = bank.zeros(f"{prefix}.rel_bias",
                                   ((2 * window - 1) ** 2, heads))
        self.rel_index = _relative_index(window)


def window_attention(x, params, shifted, valid_grid=None, return_probs=False):
    """Multi-head self-attention inside non-overlapping M x M windows.

    ``x`` is a (b, H, W, C) token grid. When ``shifted``, the grid is rolled
    by floor(M/2) before partitioning and rolled back afterwards. Padding
    positions (``valid_grid`` False) are masked out of every softmax row.
    """
    m = params.window
    b, h, w, c = x.shape
    if c != params.dim:
        raise AutonetError(f"window_attention: dim {c} != params dim {params.dim}")
    x, valid = _pad_to_windows(x, m)
    if valid_grid is not None:
        valid = valid & np.asarray(valid_grid, dtype=bool)
    hp, wp = x.shape[1], x.shape[2]
    shift = m // 2 if shifted else 0
    if shift:
        x = dc.roll(x, (-shift, -shift), (1, 2))
        valid = np.roll(valid, (-shift, -shift), (0, 1))

    tokens = _partition(x, m)                       # (b, nwin, T, C)
    nwin, t = tokens.shape[1], tokens.shape[2]
    key_valid = valid.reshape(hp // m, m, wp // m, m)
    key_valid = key_valid.transpose(0, 2, 1, 3).reshape(nwin, t)
    mask = key_valid[None, :, None, None, :]        # (1, nwin, 1, 1, T)

    nh = params.heads
    hd = c // nh

    def split_heads(mat):
        mat = dc.reshape(mat, (b, nwin, t, nh, hd))
        return dc.transpose(mat, (0, 1, 3, 2, 4))

    # query scale folded into the (small) weight matrix, not the logits
    scale = 1.0 / math.sqrt(hd)
    q = split_heads(dc.linear(tokens, params.wq * scale, params.bq * scale))
    k = split_heads(dc.linear(tokens, params.wk, params.bk))
    v = split_heads(dc.linear(tokens, params.wv, params.bv))

    logits = dc.matmul(q, dc.transpose(k, (0, 1, 2, 4, 3)))
    bias = dc.take(params.rel_bias, params.rel_index.reshape(-1))
    bias = dc.transpose(dc.reshape(bias, (t, t, nh)), (2, 0, 1))
    probs = dc.softmax(logits + bias, axis=-1, mask=mask)

    out = dc.matmul(probs, v)                       # (b, nwin, nh, T, hd)
    out = dc.reshape(dc.transpose(out, (0, 1, 3, 2, 4)), (b, nwin, t, c))
    out = dc.linear(out, params.proj, params.bproj)

    out = _unpartition(out, m, hp, wp)
    if shift:
        out = dc.roll(out, (shift, shift), (1, 2))
    if hp != h or wp != w:
        out = dc.crop(out, (slice(None), slice(0, h), slice(0, w), slice(None)))
    if return_probs:
        return out, probs
    return out


class Mlp:
    def __init__(self, bank, prefix, dim, ratio):
        hidden = dim * ratio
        self.w1 = bank.glorot(f"{prefix}.w1", (dim, hidden))
        self.b1 = bank.zeros(f"{prefix}.b1", (hidden,))
        self.w2 = bank.glorot(f"{prefix}.w2", (hidden, dim))
        self.b2 = bank.zeros(f"{prefix}.b2", (dim,))

    def __call__(self, x):
        h = dc.relu(dc.linear(x, self.w1, self.b1))
        return dc.linear(h, self.w2, self.b2)


class SwinBlock:
    """Layernorm-first residual block: (S)W-MSA followed by a 2-layer MLP."""

    def __init__(self, bank, prefix, dim, heads, window, shifted, ratio):
        self.shifted = shifted
        self.attn = WindowAttentionParams(bank, f"{prefix}.attn", dim, heads, window)
        self.ln1_g = bank.ones(f"{prefix}.ln1_g", (dim,))
        self.ln1_b = bank.zeros(f"{prefix}.ln1_b", (dim,))
        self.ln2_g = bank.ones(f"{prefix}.ln2_g", (dim,))
        self.ln2_b = bank.zeros(f"{prefix}.ln2_b", (dim,))
        self.mlp = Mlp(bank, f"{prefix}.mlp", dim, ratio)

    def __call__(self, x, valid_grid=None):
        normed = dc.layernorm_affine(x, self.ln1_g, self.ln1_b)
        x = x + window_attention(normed, self.attn, self.shifted, valid_grid)
        normed = dc.layernorm_affine(x, self.ln2_g, self.ln2_b)
        return x + self.mlp(normed)


class PatchMerge:
    """Concatenate neighbouring 2x2 tokens and project to the next stage dim."""

    def __init__(self, bank, prefix, dim_in, dim_out):
        self.w = bank.glorot(f"{prefix}.w", (4 * dim_in, dim_out))
        self.b = bank.zeros(f"{prefix}.b", (dim_out,))

    def __call__(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise AutonetError(f"patch_merge: odd grid {h}x{w}")
        x = dc.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
        x = dc.reshape(x, (b, h // 2, w // 2, 4 * c))
        return dc.linear(x, self.w, self.b)


class PatchSplit:
    """Inverse-shaped learned upsampling: one token becomes a 2x2 block."""

    def __init__(self, bank, prefix, dim_in, dim_out):
        self.w = bank.glorot(f"{prefix}.w", (dim_in, 4 * dim_out))
        self.b = bank.zeros(f"{prefix}.b", (4 * dim_out,))

    def __call__(self, x):
        b, h, w, _ = x.shape
        x = dc.linear(x, self.w, self.b)
        c = x.shape[-1] // 4
        x = dc.reshape(x, (b, h, w, 2, 2, c))
        x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
        return dc.reshape(x, (b, 2 * h, 2 * w, c))


class Stage:
    def __init__(self, bank, prefix, dim, heads, window, ratio):
        self.blocks = [
            SwinBlock(bank, f"{prefix}.b0", dim, heads, window, False, ratio),
            SwinBlock(bank, f"{prefix}.b1", dim, heads, window, True, ratio),
        ]

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class Encoder:
    """Patch embedding -> attention stages with merges -> feature head."""

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
        self.head_w = bank.glorot("head.w", (dims[-1], cfg.bottleneck_dim))
        self.head_b = bank.zeros("head.b", (cfg.bottleneck_dim,))

    def parameters(self):
        return self.bank.params

    def _embed(self, x):
        cfg = self.cfg
        b = x.shape[0]
        if x.shape[1:] != (cfg.n_tx, cfg.n_sc, 2):
            raise AutonetError(
                f"encoder: channel grid {x.shape[1:]} != ({cfg.n_tx}, {cfg.n_sc}, 2)")
        x = dc.reshape(x, (b, cfg.grid_h, cfg.patch_antennas, cfg.grid_w,
                           cfg.patch_subcarriers, 2))
        x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
        x = dc.reshape(x, (b, cfg.grid_h, cfg.grid_w, cfg.patch_values))
        return dc.linear(x, self.embed_w, self.embed_b)

    def __call__(self, x):
        """(b, n_tx, n_sc, 2) real grid -> (b, N) features."""
        x = self._embed(x)
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        x = dc.linear(x, self.head_w, self.head_b)
        b = x.shape[0]
        return dc.reshape(x, (b, self.cfg.n_features))


class Decoder:
    """Mirror of the encoder: feature head inverse, splits, de-embedding."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        bank = ParamBank(rng)
        self.bank = bank
        dims = cfg.stage_dims
        self.in_w = bank.glorot("head.w", (cfg.bottleneck_dim, dims[-1]))
        self.in_b = bank.zeros("head.b", (dims[-1],))
        self.stages = []
        self.splits = []
        for s in range(len(dims) - 1, -1, -1):
            self.stages.append(Stage(bank, f"s{s}", dims[s], cfg.heads[s],
                                     cfg.window, cfg.mlp_ratio))
            if s > 0:
                self.splits.append(PatchSplit(bank, f"u{s}", dims[s], dims[s - 1]))
        self.deembed_w = bank.glorot("patch.w", (dims[0], cfg.patch_values))
        self.deembed_b = bank.zeros("patch.b", (cfg.patch_values,))

    def parameters(self):
        return self.bank.params

    def __call__(self, z, token_hook=None):
        """(b, N) features -> (b, n_tx, n_sc, 2) real grid.

        ``token_hook``, when given, transforms the token grid right after
        the input projection (the deep multi-modal fusion point).
        """
        cfg = self.cfg
        if z.shape[-1] != cfg.n_features:
            raise AutonetError(
                f"decoder: feature length {z.shape[-1]} != {cfg.n_features}")
        b = z.shape[0]
        h = cfg.grid_h >> cfg.n_merges
        w = cfg.grid_w >> cfg.n_merges
        x = dc.reshape(z, (b, h, w, cfg.bottleneck_dim))
        x = dc.linear(x, self.in_w, self.in_b)
        if token_hook is not None:
            x = token_hook(x)
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if s < len(self.splits):
                x = self.splits[s](x)
        x = dc.linear(x, self.deembed_w, self.deembed_b)
        x = dc.reshape(x, (b, cfg.grid_h, cfg.grid_w, cfg.patch_antennas,
                           cfg.patch_subcarriers, 2))
        x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
        return dc.reshape(x, (b, cfg.n_tx, cfg.n_sc, 2))


def encode_features(h, encoder):
    """Single-channel convenience wrapper: complex grid -> length-N vector."""
    x = dc.Tensor(channel_to_array(h)[None])
    return encoder(x).data[0]


def decode_channel(z, decoder):
    """Single-feature convenience wrapper: length-N vector -> complex grid."""
    z = np.asarray(z, dtype=np.float64)
    out = decoder(dc.Tensor(z[None]))
    return array_to_channel(out.data[0])
