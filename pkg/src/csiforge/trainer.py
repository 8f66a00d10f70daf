"""Losses, two-stage training with parameter freezing, and checkpoints.

Stage 1 trains encoder + quantizer + decoder jointly on a rate-weighted
average of the normalized reconstruction loss across all target stream
lengths. Stage 2 freezes those groups and fits the sensor extractor plus
the refinement transformer through the frozen decoder.
"""

from dataclasses import dataclass, asdict
import csv
import hashlib
import json
import math
import struct

import numpy as np

from . import chansim
from . import diffcore as dc
from . import quantizer as qz
from .autonet import Encoder, Decoder, NetConfig, channel_to_array, array_to_channel
from .fusion import (RefineConfig, RefineNet, SensorEncoder, SensorNetConfig,
                     sensor_grid_from_uplink, uplink_sensor_config)

CHECKPOINT_MAGIC = b"CSFKPT"
CHECKPOINT_VERSION = 1


class TrainerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses

def reconstruction_loss(h, h_hat):
    """Squared Frobenius distance between the norm-scaled grids (Eq.-style).

    Scale invariant in both arguments; range [0, 4].
    """
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    nh = np.linalg.norm(h)
    nhat = np.linalg.norm(h_hat)
    if nh == 0.0 or nhat == 0.0:
        raise TrainerError("reconstruction_loss: zero-norm channel")
    return float(np.sum(np.abs(h / nh - h_hat / nhat) ** 2))


def per_sample_loss_t(target, h_hat):
    """Per-sample losses on (b, n_tx, n_sc, 2) grids; target is a plain array."""
    target = np.asarray(target, dtype=np.float64)
    norms = np.sqrt((target ** 2).sum(axis=(1, 2, 3), keepdims=True))
    if np.any(norms == 0.0):
        raise TrainerError("reconstruction_loss: zero-norm target")
    if np.any((h_hat.data ** 2).sum(axis=(1, 2, 3)) == 0.0):
        raise TrainerError("reconstruction_loss: zero-norm reconstruction")
    sq = dc.tsum(h_hat * h_hat, axis=(1, 2, 3), keepdims=True)
    unit = h_hat * (1.0 / dc.sqrt(sq))
    diff = unit - dc.Tensor(target / norms)
    return dc.tsum(diff * diff, axis=(1, 2, 3))


def reconstruction_loss_t(target, h_hat):
    """Batch-mean loss on (b, n_tx, n_sc, 2) grids."""
    return dc.tmean(per_sample_loss_t(target, h_hat))


def rate_weights(rates, gamma):
    if len(rates) == 0:
        raise TrainerError("rate_weights: empty rate list")
    w = np.array([float(gamma) ** b for b in rates])
    return w / w.sum()


def combine_rate_losses(losses, rates, gamma):
    """Convex combination sum_i gamma^{B_i} L_i / sum_i gamma^{B_i}."""
    if len(losses) != len(rates) or not losses:
        raise TrainerError("combine_rate_losses: rate/loss length mismatch")
    w = rate_weights(rates, gamma)
    total = losses[0] * w[0]
    for wi, li in zip(w[1:], losses[1:]):
        total = total + li * wi
    return total


def weighted_rate_loss(h, reconstructions, rates, gamma):
    """Rate-weighted reconstruction loss of several decoded channels."""
    losses = [reconstruction_loss(h, r) for r in reconstructions]
    return float(combine_rate_losses(losses, rates, gamma))


# ---------------------------------------------------------------------------
# optimizer

def optimizer_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive-moment update; state is (m, v, t)."""
    m, v, t = state
    t = t + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, (m, v, t)


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {name: (np.zeros_like(t.data), np.zeros_like(t.data), 0)
                      for name, t in self.params.items()}

    def step(self, grads):
        for name, t in self.params.items():
            g = grads.get(t)
            if g is None:
                g = np.zeros_like(t.data)
            if np.any(np.isnan(g)):
                raise TrainerError(f"NaN gradient in parameter group '{name}'")
            t.data, self.state[name] = optimizer_step(
                t.data, g, self.state[name], self.lr, self.beta1, self.beta2,
                self.eps)


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for t in grads:
            grads[t] = grads[t] * scale
    return grads


# ---------------------------------------------------------------------------
# codec assembly

@dataclass
class TrainConfig:
    rates: tuple = (48, 72, 96, 120, 144)
    gamma: float = 2.0 ** (1.0 / 96.0)
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    stage: str = "stage1"
    input_snr_db: float | None = None   # None: perfect-CSI inputs
    val_fraction: float = 0.15
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise TrainerError("gamma must exceed 1")
        if not self.rates:
            raise TrainerError("need at least one target rate")


class VariableRateCodec:
    """Encoder, trainable quantizer and decoder; optional fusion attachment."""

    def __init__(self, net_cfg, b_max=3, seed=0):
        self.net_cfg = net_cfg
        self.b_max = b_max
        streams = np.random.SeedSequence(seed).spawn(2)
        self.encoder = Encoder(net_cfg, np.random.default_rng(streams[0]))
        self.decoder = Decoder(net_cfg, np.random.default_rng(streams[1]))
        self.quantizer = qz.TrainableQuantizer(net_cfg.n_features, b_max)
        self.sensor_cfg = None
        self.sensor_encoder = None
        self.refine_net = None
        self.fusion_point = "bottleneck"

    @property
    def n_features(self):
        return self.net_cfg.n_features

    def allocation(self, rate):
        return qz.allocate_bits(int(rate), self.n_features, self.b_max)

    def attach_fusion(self, sensor_cfg, heads, seed, fusion_point="bottleneck"):
        if fusion_point not in ("bottleneck", "post_projection"):
            raise TrainerError(f"unknown fusion point {fusion_point!r}")
        embed = (self.net_cfg.bottleneck_dim if fusion_point == "bottleneck"
                 else self.net_cfg.stage_dims[-1])
        if sensor_cfg.embed_dim != embed:
            raise TrainerError(
                f"sensor embed dim {sensor_cfg.embed_dim} != fusion point dim {embed}")
        n = (self.n_features if fusion_point == "bottleneck"
             else self.net_cfg.bottleneck_tokens * embed)
        refine_cfg = RefineConfig(n_features=n, sensor_len=sensor_cfg.feature_len,
                                  embed_dim=embed, heads=heads)
        streams = np.random.SeedSequence(seed).spawn(2)
        self.sensor_cfg = sensor_cfg
        self.sensor_encoder = SensorEncoder(sensor_cfg, np.random.default_rng(streams[0]))
        self.refine_net = RefineNet(refine_cfg, np.random.default_rng(streams[1]))
        self.fusion_point = fusion_point

    def groups(self):
        out = {"encoder": self.encoder.parameters(),
               "quantizer": self.quantizer.parameters(),
               "decoder": self.decoder.parameters()}
        if self.sensor_encoder is not None:
            out["sensor"] = self.sensor_encoder.parameters()
            out["fusion"] = self.refine_net.parameters()
        return out

    def named_parameters(self, group_names=None):
        out = {}
        for gname, params in self.groups().items():
            if group_names is not None and gname not in group_names:
                continue
            for pname, t in params.items():
                out[f"{gname}.{pname}"] = t
        return out

    def set_frozen(self, group_names, frozen=True):
        for gname in group_names:
            for t in self.groups()[gname].values():
                t.requires_grad = not frozen

    def calibrate_boundaries(self, channels):
        """Warm-up: size boundary spacing to the initial feature spread."""
        x = dc.Tensor(prepare_inputs(channels))
        z = self.encoder(x)
        std = float(z.data.std())
        if std == 0.0:
            std = 1.0
        self.quantizer = qz.TrainableQuantizer.from_feature_std(
            self.n_features, self.b_max, std)

    # ---- forward paths ------------------------------------------------

    def _decode(self, z_feat, sensor_feat=None):
        if sensor_feat is None or self.fusion_point == "bottleneck":
            if sensor_feat is not None:
                z_feat = self.refine_net(z_feat, sensor_feat)
            return self.decoder(z_feat)

        def hook(xgrid):
            b, hh, ww, cc = xgrid.shape
            tokens = dc.reshape(xgrid, (b, hh * ww, cc))
            zd = dc.reshape(sensor_feat, (b, -1, cc))
            refined = self.refine_net.refine_tokens(tokens, zd)
            return dc.reshape(refined, (b, hh, ww, cc))

        return self.decoder(z_feat, token_hook=hook)

    def rate_reconstructions(self, x, rates, sensor=None):
        """Shared encoder pass, then quantize per rate and decode all rates
        as one stacked batch (one decoder pass instead of len(rates))."""
        z = self.encoder(x)
        b = x.shape[0]
        sensor_feat = None
        if sensor is not None:
            if self.sensor_encoder is None:
                raise TrainerError("codec has no fusion networks attached")
            sensor_feat = self.sensor_encoder(sensor)
        feats = [self.quantizer.quantized_features(z, self.allocation(r))
                 for r in rates]
        if len(rates) == 1:
            return {rates[0]: self._decode(feats[0], sensor_feat)}
        stacked = dc.concat(feats, axis=0)
        sensor_stacked = None
        if sensor_feat is not None:
            sensor_stacked = dc.concat([sensor_feat] * len(rates), axis=0)
        decoded = self._decode(stacked, sensor_stacked)
        out = {}
        for i, rate in enumerate(rates):
            out[rate] = dc.crop(decoded, (slice(i * b, (i + 1) * b),))
        return out

    # ---- wire-format paths --------------------------------------------

    def encode_to_bits(self, h, rate):
        """Channel matrix -> feedback bit sequence of the requested length."""
        x = dc.Tensor(prepare_inputs([h]))
        z = self.encoder(x).data[0]
        alloc = self.allocation(rate)
        boundaries = self.quantizer.boundaries().data
        return qz.encode_stream(z, boundaries, alloc), alloc

    def decode_from_bits(self, bits, sensor=None):
        """Feedback bits -> reconstructed channel matrix."""
        alloc = qz.allocate_bits(len(bits), self.n_features, self.b_max)
        levels = qz.decode_stream(np.asarray(bits), alloc)
        z_s = dc.Tensor(qz.level_sum(levels).astype(np.float64)[None])
        sensor_feat = None
        if sensor is not None:
            if self.sensor_encoder is None:
                raise TrainerError("codec has no fusion networks attached")
            sensor_feat = self.sensor_encoder(
                dc.Tensor(np.asarray(sensor, dtype=np.float64)[None]))
        out = self._decode(z_s, sensor_feat)
        return array_to_channel(out.data[0])

    def reconstruct(self, h, rate, sensor=None):
        bits, _ = self.encode_to_bits(h, rate)
        return self.decode_from_bits(bits, sensor=sensor)


def stacked_rate_loss(codec, x, target_data, rates, weights, sensor=None):
    """Weighted multi-rate loss with a single stacked decoder pass.

    Returns the scalar loss tensor plus the per-rate batch means (floats).
    """
    z = codec.encoder(x)
    b = x.shape[0]
    sensor_feat = None
    if sensor is not None:
        sensor_feat = codec.sensor_encoder(sensor)
    feats = [codec.quantizer.quantized_features(z, codec.allocation(r))
             for r in rates]
    stacked = dc.concat(feats, axis=0) if len(feats) > 1 else feats[0]
    sensor_stacked = None
    if sensor_feat is not None:
        sensor_stacked = (dc.concat([sensor_feat] * len(rates), axis=0)
                          if len(rates) > 1 else sensor_feat)
    decoded = codec._decode(stacked, sensor_stacked)
    target_tiled = np.concatenate([target_data] * len(rates), axis=0)
    per_sample = per_sample_loss_t(target_tiled, decoded)
    w_vec = np.repeat(np.asarray(weights) / b, b)
    total = dc.tsum(per_sample * w_vec)
    rate_means = {r: float(per_sample.data[i * b:(i + 1) * b].mean())
                  for i, r in enumerate(rates)}
    return total, rate_means


def prepare_inputs(channels):
    """Stack channels as unit-Frobenius-norm (b, n_tx, n_sc, 2) grids."""
    grids = []
    for h in channels:
        h = np.asarray(h, dtype=np.complex128)
        n = np.linalg.norm(h)
        if n == 0.0:
            raise TrainerError("zero-norm channel in batch")
        grids.append(channel_to_array(h / n))
    return np.stack(grids)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class CheckpointGroup:
    name: str
    frozen: bool
    tensors: dict  # name -> float32 ndarray

    def payload_bytes(self):
        return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes()
                        for v in self.tensors.values())

    def content_hash(self):
        return hashlib.sha256(self.payload_bytes()).digest()


@dataclass
class Checkpoint:
    groups: dict  # name -> CheckpointGroup
    config: dict
    version: int = CHECKPOINT_VERSION

    def group_bytes(self, name):
        return self.groups[name].payload_bytes()


def _write_string(fh, s):
    raw = s.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_string(fh):
    n, = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode()


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(ckpt.groups)))
        for group in ckpt.groups.values():
            _write_string(fh, group.name)
            fh.write(struct.pack("<BI", 1 if group.frozen else 0, len(group.tensors)))
            for tname, arr in group.tensors.items():
                arr = np.ascontiguousarray(arr, dtype="<f4")
                _write_string(fh, tname)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
            fh.write(group.content_hash())
        blob = json.dumps(ckpt.config, sort_keys=True).encode()
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != CHECKPOINT_MAGIC:
            raise TrainerError(f"bad checkpoint magic {magic!r}")
        version, n_groups = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise TrainerError(f"unsupported version {version}")
        groups = {}
        for _ in range(n_groups):
            name = _read_string(fh)
            frozen, n_tensors = struct.unpack("<BI", fh.read(5))
            tensors = {}
            for _ in range(n_tensors):
                tname = _read_string(fh)
                ndim, = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                count = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
                tensors[tname] = arr.copy()
            group = CheckpointGroup(name, bool(frozen), tensors)
            stored = fh.read(32)
            if stored != group.content_hash():
                raise TrainerError(f"checkpoint group '{name}' content hash mismatch")
            groups[name] = group
        blob_len, = struct.unpack("<Q", fh.read(8))
        config = json.loads(fh.read(blob_len).decode())
    return Checkpoint(groups=groups, config=config, version=version)


def checkpoint_from_codec(codec, frozen_groups=(), config_extra=None):
    groups = {}
    for gname, params in codec.groups().items():
        tensors = {pname: t.data.astype(np.float32)
                   for pname, t in params.items()}
        groups[gname] = CheckpointGroup(gname, gname in frozen_groups, tensors)
    config = {
        "net": asdict(codec.net_cfg),
        "b_max": codec.b_max,
        "fusion_point": codec.fusion_point,
        "sensor": asdict(codec.sensor_cfg) if codec.sensor_cfg else None,
        "refine_heads": codec.refine_net.cfg.heads if codec.refine_net else None,
    }
    if config_extra:
        config.update(config_extra)
    return Checkpoint(groups=groups, config=config)


def codec_from_checkpoint(ckpt):
    net_cfg_dict = dict(ckpt.config["net"])
    for key in ("stage_dims", "heads"):
        net_cfg_dict[key] = tuple(net_cfg_dict[key])
    net_cfg = NetConfig(**net_cfg_dict)
    codec = VariableRateCodec(net_cfg, b_max=ckpt.config["b_max"], seed=0)
    if ckpt.config.get("sensor"):
        sensor_dict = dict(ckpt.config["sensor"])
        for key in ("stage_dims", "heads"):
            sensor_dict[key] = tuple(sensor_dict[key])
        codec.attach_fusion(SensorNetConfig(**sensor_dict),
                            heads=ckpt.config["refine_heads"], seed=0,
                            fusion_point=ckpt.config.get("fusion_point", "bottleneck"))
    for gname, params in codec.groups().items():
        group = ckpt.groups.get(gname)
        if group is None:
            raise TrainerError(f"checkpoint missing parameter group '{gname}'")
        for pname, t in params.items():
            if pname not in group.tensors:
                raise TrainerError(f"checkpoint missing tensor {gname}.{pname}")
            arr = group.tensors[pname].astype(np.float64)
            if arr.shape != t.data.shape:
                raise TrainerError(f"shape mismatch for {gname}.{pname}")
            t.data = arr
        if group.frozen:
            codec.set_frozen([gname], True)
    return codec


# ---------------------------------------------------------------------------
# training loops

def _split_indices(n, val_fraction, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def _epoch_batches(indices, batch_size, rng):
    order = rng.permutation(len(indices))
    shuffled = indices[order]
    for start in range(0, len(shuffled), batch_size):
        yield shuffled[start:start + batch_size]


def _maybe_corrupt(channels, snr_db, seed):
    if snr_db is None:
        return channels
    return [chansim.corrupt_estimate(h, snr_db, seed=seed + i)
            for i, h in enumerate(channels)]


def _eval_prepared(codec, x_all, target_all, rates, sensor_all=None,
                   batch_size=64):
    """Mean loss per rate on pre-normalized (n, ...) input/target arrays."""
    sums = {rate: 0.0 for rate in rates}
    n = x_all.shape[0]
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        x = dc.Tensor(x_all[start:stop])
        sensor_t = None
        if sensor_all is not None:
            sensor_t = dc.Tensor(sensor_all[start:stop])
        recons = codec.rate_reconstructions(x, rates, sensor=sensor_t)
        for rate in rates:
            loss = reconstruction_loss_t(target_all[start:stop], recons[rate])
            sums[rate] += float(loss.data) * (stop - start)
    return {rate: sums[rate] / n for rate in rates}


def evaluate_losses(codec, channels, rates, sensors=None, batch_size=64,
                    input_snr_db=None, noise_seed=0):
    """Mean reconstruction loss per rate over a channel list (no gradients)."""
    inputs = _maybe_corrupt(channels, input_snr_db, noise_seed)
    x_all = prepare_inputs(inputs)
    target_all = prepare_inputs(channels)
    sensor_all = None
    if sensors is not None:
        sensor_all = np.stack([np.asarray(s, dtype=np.float64) for s in sensors])
    return _eval_prepared(codec, x_all, target_all, rates, sensor_all, batch_size)


def _history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "rate", "train_loss", "val_loss"])
        for row in history:
            for rate in sorted(row["train"]):
                writer.writerow([row["epoch"], rate,
                                 f"{row['train'][rate]:.6f}",
                                 f"{row['val'][rate]:.6f}"])


def _snapshot(params):
    return {name: t.data.copy() for name, t in params.items()}


def _restore(params, snap):
    for name, t in params.items():
        t.data = snap[name].copy()


def _run_training(codec, channels, sensors, cfg, trainable_groups, log_path):
    rng = np.random.default_rng(cfg.seed)
    n = len(channels)
    if n < 2:
        raise TrainerError("need at least two samples to split train/val")
    train_idx, val_idx = _split_indices(n, cfg.val_fraction, rng)
    params = codec.named_parameters(trainable_groups)
    optimizer = Adam(params, lr=cfg.learning_rate)
    weights = rate_weights(cfg.rates, cfg.gamma)

    target_all = prepare_inputs(channels)
    clean_inputs = cfg.input_snr_db is None
    x_all = target_all if clean_inputs else None
    sensor_all = None
    if sensors is not None:
        sensor_all = np.stack([np.asarray(s, dtype=np.float64) for s in sensors])
    val_x = target_all[val_idx] if clean_inputs else None

    history = []
    best = (math.inf, None, -1)
    for epoch in range(cfg.epochs):
        train_sums = {rate: 0.0 for rate in cfg.rates}
        seen = 0
        for batch_no, batch_idx in enumerate(_epoch_batches(train_idx, cfg.batch_size, rng)):
            target_data = target_all[batch_idx]
            if clean_inputs:
                x_data = target_data
            else:
                inputs = _maybe_corrupt([channels[i] for i in batch_idx],
                                        cfg.input_snr_db,
                                        seed=cfg.seed * 100003 + epoch * 1009 + batch_no)
                x_data = prepare_inputs(inputs)
            sensor_data = None if sensor_all is None else sensor_all[batch_idx]

            def step_fn():
                x = dc.Tensor(x_data)
                sensor_t = dc.Tensor(sensor_data) if sensor_data is not None else None
                return stacked_rate_loss(codec, x, target_data, cfg.rates,
                                         weights, sensor=sensor_t)

            graph = dc.Graph(lambda: step_fn())
            total, rate_means = dc.forward_eval(graph, ())
            grads = dc.backward_grad(graph, total)
            clip_global_norm(grads, cfg.clip_norm)
            optimizer.step(grads)
            for rate in cfg.rates:
                train_sums[rate] += rate_means[rate] * len(batch_idx)
            seen += len(batch_idx)

        if clean_inputs:
            val_losses = _eval_prepared(
                codec, val_x, target_all[val_idx], cfg.rates,
                None if sensor_all is None else sensor_all[val_idx],
                batch_size=max(cfg.batch_size, 64))
        else:
            val_losses = evaluate_losses(
                codec, [channels[i] for i in val_idx], cfg.rates,
                sensors=None if sensors is None else [sensors[i] for i in val_idx],
                batch_size=max(cfg.batch_size, 64),
                input_snr_db=cfg.input_snr_db, noise_seed=cfg.seed + 777)
        val_wa = float(np.dot(weights, [val_losses[r] for r in cfg.rates]))
        history.append({"epoch": epoch,
                        "train": {r: train_sums[r] / seen for r in cfg.rates},
                        "val": dict(val_losses), "val_weighted": val_wa})
        if val_wa < best[0]:
            best = (val_wa, _snapshot(params), epoch)

    if best[1] is not None:
        _restore(params, best[1])
    if log_path is not None:
        _history_csv(log_path, history)
    return history, best[2]


def train_stage1(samples, net_cfg, cfg, log_path=None):
    """Joint encoder/quantizer/decoder training on wireless-only channels."""
    channels = [np.asarray(s.downlink, dtype=np.complex128) for s in samples]
    codec = VariableRateCodec(net_cfg, b_max=3, seed=cfg.seed)
    for rate in cfg.rates:
        codec.allocation(rate)  # validates the range against N and b_max
    warm = channels[:min(len(channels), max(cfg.batch_size, 8))]
    codec.calibrate_boundaries(warm)
    history, best_epoch = _run_training(
        codec, channels, None, cfg,
        trainable_groups=("encoder", "quantizer", "decoder"), log_path=log_path)
    meta = {"stage": "stage1", "best_epoch": best_epoch,
            "history": _history_summary(history),
            "train": _train_config_dict(cfg)}
    return checkpoint_from_codec(codec, frozen_groups=(), config_extra=meta)


def train_stage2(samples, stage1_ckpt, cfg, sensor_cfg=None, refine_heads=2,
                 fusion_point="bottleneck", log_path=None):
    """Sensor-fusion fine-tuning; stage-1 parameter groups stay frozen."""
    if any(s.uplink is None and s.sensor is None for s in samples):
        raise TrainerError("stage 2 needs a sensor modality on every sample")
    codec = codec_from_checkpoint(stage1_ckpt)
    channels = [np.asarray(s.downlink, dtype=np.complex128) for s in samples]
    if sensor_cfg is None:
        n_tx, n_sc = channels[0].shape
        sensor_cfg = uplink_sensor_config(
            n_tx, n_sc, stage_dims=codec.net_cfg.stage_dims,
            embed_dim=codec.net_cfg.bottleneck_dim, heads=codec.net_cfg.heads)
    codec.attach_fusion(sensor_cfg, heads=refine_heads, seed=cfg.seed,
                        fusion_point=fusion_point)
    codec.set_frozen(("encoder", "quantizer", "decoder"), True)

    sensors = []
    for s in samples:
        if s.sensor is not None:
            sensors.append(np.asarray(s.sensor, dtype=np.float64))
        else:
            grid = sensor_grid_from_uplink(s.uplink)
            norm = np.linalg.norm(grid)
            sensors.append(grid / (norm if norm else 1.0))

    history, best_epoch = _run_training(
        codec, channels, sensors, cfg,
        trainable_groups=("sensor", "fusion"), log_path=log_path)
    meta = {"stage": "stage2", "best_epoch": best_epoch,
            "history": _history_summary(history),
            "train": _train_config_dict(cfg)}
    return checkpoint_from_codec(
        codec, frozen_groups=("encoder", "quantizer", "decoder"),
        config_extra=meta)


def _train_config_dict(cfg):
    d = asdict(cfg)
    d["rates"] = list(cfg.rates)
    return d


def _history_summary(history):
    return [{"epoch": row["epoch"],
             "val_weighted": row["val_weighted"],
             "val": {str(k): v for k, v in row["val"].items()},
             "train": {str(k): v for k, v in row["train"].items()}}
            for row in history]
