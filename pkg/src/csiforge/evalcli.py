"""Beamforming metrics, rate sweeps, and the command-line surface.

Subcommands: gen-data, train, finetune, encode, decode, eval, sweep.
Flags override a key=value config file; CSIFORGE_OUTDIR supplies the
default output directory for relative paths.
"""

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import chansim
from . import diffcore as dc
from . import quantizer as qz
from . import trainer as tr
from .autonet import array_to_channel, desk_net_config, paper_net_config
from .fusion import read_sensor_grid, sensor_grid_from_uplink

ENV_OUTDIR = "CSIFORGE_OUTDIR"


class EvalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics

def beamformer_from_channel(h_hat):
    """Per-subcarrier unit-norm beams from a reconstructed channel."""
    h_hat = np.asarray(h_hat)
    norms = np.linalg.norm(h_hat, axis=0, keepdims=True)
    if np.any(norms == 0.0):
        raise EvalError("beamformer: zero channel column")
    return h_hat / norms


def precoded_gains(h_true, p, normalized=False):
    """|h_n^H p_n|^2 per subcarrier; optionally scaled by ||h_n||^2."""
    h_true = np.asarray(h_true)
    p = np.asarray(p)
    gains = np.abs(np.sum(np.conj(h_true) * p, axis=0)) ** 2
    if normalized:
        gains = gains / np.sum(np.abs(h_true) ** 2, axis=0)
    return gains


def gain_cdf(h_true_set, p_set, normalized=False):
    """Empirical CDF of precoded gains over all (sample, subcarrier) pairs.

    Returns (sorted gains, cumulative probabilities).
    """
    chunks = [precoded_gains(h, p, normalized) for h, p in zip(h_true_set, p_set)]
    gains = np.sort(np.concatenate(chunks))
    probs = np.arange(1, gains.size + 1) / gains.size
    return gains, probs


def throughput(h_true, p, snr_db):
    """Sum-rate over subcarriers: sum log2(1 + gain * linear SNR)."""
    gains = precoded_gains(h_true, p)
    return float(np.sum(np.log2(1.0 + gains * 10.0 ** (snr_db / 10.0))))


@dataclass
class EvalRow:
    mode: str
    rate: int          # 0 marks rate-independent baseline rows
    snr_db: float | None
    mean_loss: float
    loss_db: float
    cosine_mean: float
    mean_gain: float
    mean_norm_gain: float
    throughput: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    cdfs: dict = field(default_factory=dict)  # (mode, rate, snr) -> (gains, probs)

    def row(self, mode, rate, snr_db):
        for r in self.rows:
            if r.mode == mode and r.rate == rate and _snr_eq(r.snr_db, snr_db):
                return r
        raise KeyError((mode, rate, snr_db))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mode", "rate", "snr_db", "mean_loss", "loss_db",
                             "cosine_mean", "mean_gain", "mean_norm_gain",
                             "throughput"])
            for r in self.rows:
                writer.writerow([
                    r.mode, r.rate,
                    "perfect" if r.snr_db is None else r.snr_db,
                    f"{r.mean_loss:.6f}", f"{r.loss_db:.3f}",
                    f"{r.cosine_mean:.6f}", f"{r.mean_gain:.6f}",
                    f"{r.mean_norm_gain:.6f}", f"{r.throughput:.4f}"])


def _snr_eq(a, b):
    return (a is None and b is None) or (a is not None and b is not None and a == b)


def _loss_db(loss):
    return 10.0 * math.log10(loss) if loss > 0 else -math.inf


def _column_stats(h_true, h_hat):
    """Per-sample loss plus column cosine similarity and beam gains."""
    p = beamformer_from_channel(h_hat)
    gains = precoded_gains(h_true, p)
    norm_gains = precoded_gains(h_true, p, normalized=True)
    num = np.abs(np.sum(np.conj(h_true) * h_hat, axis=0))
    den = np.linalg.norm(h_true, axis=0) * np.linalg.norm(h_hat, axis=0)
    cos = num / np.where(den == 0.0, 1.0, den)
    return gains, norm_gains, cos


def rate_sweep(codec, samples, rates, snrs, modes, seed=0, batch_size=64,
               throughput_snr_db=0.0, include_baselines=True):
    """Full encode -> pack -> unpack -> (refine) -> decode -> metrics grid."""
    channels = [np.asarray(s.downlink, dtype=np.complex128) for s in samples]
    report = EvalReport()

    sensors = None
    if "fused" in modes:
        if codec.refine_net is None:
            raise EvalError("mode 'fused' needs a checkpoint with fusion networks")
        sensors = []
        for s in samples:
            if s.sensor is not None:
                sensors.append(np.asarray(s.sensor, dtype=np.float64))
            elif s.uplink is not None:
                grid = sensor_grid_from_uplink(s.uplink)
                norm = np.linalg.norm(grid)
                sensors.append(grid / (norm if norm else 1.0))
            else:
                raise EvalError("mode 'fused' needs uplink or sensor data per sample")

    for mode in modes:
        if mode not in ("csi_only", "fused"):
            raise EvalError(f"unknown mode {mode!r}")
        use_sensors = sensors if mode == "fused" else None
        for snr in snrs:
            inputs = [chansim.corrupt_estimate(h, snr, seed=seed + 7919 * i)
                      for i, h in enumerate(channels)]
            stats = {rate: {"loss": [], "gain": [], "ngain": [], "cos": [],
                            "tput": []} for rate in rates}
            for start in range(0, len(channels), batch_size):
                chunk_in = inputs[start:start + batch_size]
                chunk_true = channels[start:start + batch_size]
                x = dc.Tensor(tr.prepare_inputs(chunk_in))
                sensor_t = None
                if use_sensors is not None:
                    sensor_t = dc.Tensor(np.stack(use_sensors[start:start + batch_size]))
                recons = codec.rate_reconstructions(x, rates, sensor=sensor_t)
                for rate in rates:
                    hats = recons[rate].data
                    for k, h_true in enumerate(chunk_true):
                        h_hat = array_to_channel(hats[k])
                        stats[rate]["loss"].append(
                            tr.reconstruction_loss(h_true, h_hat))
                        gains, ngains, cos = _column_stats(h_true, h_hat)
                        stats[rate]["gain"].append(gains)
                        stats[rate]["ngain"].append(ngains)
                        stats[rate]["cos"].append(cos)
                        t_snr = snr if snr is not None else throughput_snr_db
                        stats[rate]["tput"].append(
                            float(np.sum(np.log2(1.0 + gains * 10 ** (t_snr / 10)))))
            for rate in rates:
                st = stats[rate]
                gains = np.concatenate(st["gain"])
                ngains = np.concatenate(st["ngain"])
                mean_loss = float(np.mean(st["loss"]))
                report.rows.append(EvalRow(
                    mode=mode, rate=rate, snr_db=snr, mean_loss=mean_loss,
                    loss_db=_loss_db(mean_loss),
                    cosine_mean=float(np.mean(np.concatenate(st["cos"]))),
                    mean_gain=float(gains.mean()),
                    mean_norm_gain=float(ngains.mean()),
                    throughput=float(np.mean(st["tput"]))))
                sorted_g = np.sort(gains)
                report.cdfs[(mode, rate, snr)] = (
                    sorted_g, np.arange(1, sorted_g.size + 1) / sorted_g.size)

    if include_baselines:
        _append_baselines(report, channels, snrs, seed, throughput_snr_db)
    return report


def _append_baselines(report, channels, snrs, seed, throughput_snr_db):
    rng = np.random.default_rng(seed + 12345)
    rand_beams = []
    for h in channels:
        b = rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape)
        rand_beams.append(b / np.linalg.norm(b, axis=0, keepdims=True))
    for snr in snrs:
        t_snr = snr if snr is not None else throughput_snr_db
        for mode, beams in (("ideal", [beamformer_from_channel(h) for h in channels]),
                            ("random_beam", rand_beams)):
            gains = np.concatenate(
                [precoded_gains(h, p) for h, p in zip(channels, beams)])
            ngains = np.concatenate(
                [precoded_gains(h, p, normalized=True)
                 for h, p in zip(channels, beams)])
            loss = float(np.mean(
                [tr.reconstruction_loss(h, p) for h, p in zip(channels, beams)]))
            tput = float(np.mean(
                [np.sum(np.log2(1.0 + precoded_gains(h, p) * 10 ** (t_snr / 10)))
                 for h, p in zip(channels, beams)]))
            report.rows.append(EvalRow(
                mode=mode, rate=0, snr_db=snr, mean_loss=loss,
                loss_db=_loss_db(loss),
                cosine_mean=float(np.sqrt(ngains).mean()),
                mean_gain=float(gains.mean()),
                mean_norm_gain=float(ngains.mean()), throughput=tput))
            sorted_g = np.sort(gains)
            report.cdfs[(mode, 0, snr)] = (
                sorted_g, np.arange(1, sorted_g.size + 1) / sorted_g.size)


# ---------------------------------------------------------------------------
# CLI plumbing

def _resolve_out(path):
    if path is None:
        return None
    if os.path.isabs(path):
        return path
    base = os.environ.get(ENV_OUTDIR)
    return os.path.join(base, path) if base else path


def _load_config_file(path):
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise EvalError(f"bad config line: {line!r}")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _merge_config(args, parser_defaults):
    """Resolution order: explicit flag > config file > built-in default."""
    if getattr(args, "config", None):
        values = _load_config_file(args.config)
        for key, val in values.items():
            if not hasattr(args, key):
                continue
            if getattr(args, key) is None:
                setattr(args, key, val)
    for key, default in parser_defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, default)
    return args


def _parse_rates(text):
    text = str(text)
    if ":" in text:
        parts = [int(p) for p in text.split(":")]
        if len(parts) != 3:
            raise EvalError("rate range must be start:stop:step")
        start, stop, step = parts
        return list(range(start, stop + 1, step))
    return [int(p) for p in text.split(",") if p]


def _parse_snrs(text):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        out.append(None if part in ("perfect", "inf") else float(part))
    return out


def _sim_config(profile):
    if profile == "desk":
        return chansim.desk_config()
    if profile == "paper":
        return chansim.paper_config()
    raise EvalError(f"unknown profile {profile!r}")


def _net_config_for(cfg):
    if (cfg.n_tx, cfg.n_rb) == (8, 16):
        return desk_net_config()
    if (cfg.n_tx, cfg.n_rb) == (32, 48):
        return paper_net_config()
    raise EvalError(
        f"no built-in network profile for n_tx={cfg.n_tx}, n_rb={cfg.n_rb}; "
        "use the library API for custom geometries")


def _sim_config_dict(cfg):
    return {"n_tx": cfg.n_tx, "n_rb": cfg.n_rb, "n_sc": cfg.n_sc,
            "scs_hz": cfg.scs_hz, "f_dl_hz": cfg.f_dl_hz, "f_ul_hz": cfg.f_ul_hz,
            "fft_size": cfg.fft_size, "sample_rate_hz": cfg.sample_rate_hz,
            "array_rows": cfg.array_rows, "array_cols": cfg.array_cols,
            "dual_polarized": cfg.dual_polarized}


def _sim_config_from_dict(d):
    return chansim.SimConfig(**d)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args):
    args = _merge_config(args, {"profile": "desk", "samples": "100", "seed": "0",
                                "los_prob": "0.5"})
    cfg = _sim_config(args.profile)
    samples = chansim.generate_dataset(
        cfg, int(args.samples), seed=int(args.seed),
        los_probability=float(args.los_prob), with_uplink=not args.no_uplink)
    out = _resolve_out(args.out)
    chansim.write_dataset(out, cfg, samples)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _train_cfg_from_args(args, defaults):
    args = _merge_config(args, defaults)
    return tr.TrainConfig(
        rates=tuple(_parse_rates(args.rates)),
        gamma=float(args.gamma),
        learning_rate=float(args.lr),
        batch_size=int(args.batch_size),
        epochs=int(args.epochs),
        seed=int(args.seed),
        input_snr_db=None if args.input_snr is None else float(args.input_snr),
        val_fraction=float(args.val_fraction)), args


def _cmd_train(args):
    cfg, args = _train_cfg_from_args(args, {
        "rates": "48,72,96,120,144", "gamma": str(2 ** (1 / 96)), "lr": "1e-3",
        "batch_size": "32", "epochs": "100", "seed": "0", "val_fraction": "0.15",
    })
    sim_cfg, samples = chansim.read_dataset(args.data)
    net_cfg = _net_config_for(sim_cfg)
    log = _resolve_out(args.log) if args.log else None
    ckpt = tr.train_stage1(samples, net_cfg, cfg, log_path=log)
    ckpt.config["sim"] = _sim_config_dict(sim_cfg)
    out = _resolve_out(args.out)
    tr.save_checkpoint(out, ckpt)
    last = ckpt.config["history"][-1]["val_weighted"]
    print(f"stage-1 checkpoint -> {out} (final weighted val loss {last:.4f})")
    return 0


def _cmd_finetune(args):
    cfg, args = _train_cfg_from_args(args, {
        "rates": "48,72,96,120,144", "gamma": str(2 ** (1 / 96)), "lr": "1e-3",
        "batch_size": "32", "epochs": "40", "seed": "0", "val_fraction": "0.15",
        "fusion_point": "bottleneck", "refine_heads": "2",
    })
    stage1 = tr.load_checkpoint(args.checkpoint)
    sim_cfg, samples = chansim.read_dataset(args.data)
    log = _resolve_out(args.log) if args.log else None
    ckpt = tr.train_stage2(samples, stage1, cfg,
                           refine_heads=int(args.refine_heads),
                           fusion_point=args.fusion_point, log_path=log)
    ckpt.config["sim"] = _sim_config_dict(sim_cfg)
    out = _resolve_out(args.out)
    tr.save_checkpoint(out, ckpt)
    last = ckpt.config["history"][-1]["val_weighted"]
    print(f"stage-2 checkpoint -> {out} (final weighted val loss {last:.4f})")
    return 0


def _cmd_encode(args):
    args = _merge_config(args, {"index": "0", "rate": "48", "snr": None,
                                "seed": "0"})
    codec = tr.codec_from_checkpoint(tr.load_checkpoint(args.checkpoint))
    _, samples = chansim.read_dataset(args.data)
    idx = int(args.index)
    if not 0 <= idx < len(samples):
        raise EvalError(f"sample index {idx} out of range ({len(samples)} samples)")
    h = np.asarray(samples[idx].downlink, dtype=np.complex128)
    snr = None if args.snr in (None, "perfect") else float(args.snr)
    h_in = chansim.corrupt_estimate(h, snr, seed=int(args.seed))
    bits, _ = codec.encode_to_bits(h_in, int(args.rate))
    out = _resolve_out(args.out)
    qz.write_bitstream(out, bits, codec.n_features, codec.b_max)
    print(f"encoded sample {idx} at {args.rate} bits -> {out}")
    return 0


def _cmd_decode(args):
    ckpt = tr.load_checkpoint(args.checkpoint)
    codec = tr.codec_from_checkpoint(ckpt)
    bits, alloc = qz.read_bitstream(args.bits)
    sensor = None
    if args.sensor:
        _, sensor = read_sensor_grid(args.sensor)
        norm = np.linalg.norm(sensor)
        sensor = sensor / (norm if norm else 1.0)
    h_hat = codec.decode_from_bits(bits, sensor=sensor)
    if "sim" not in ckpt.config:
        raise EvalError("checkpoint lacks simulation profile; re-train via the CLI")
    sim_cfg = _sim_config_from_dict(ckpt.config["sim"])
    placeholder = chansim.RaySet(gains=[1.0 + 0j], delays_s=[0.0], dep_az=[0.0],
                                 dep_el=[0.0], arr_az=[0.0], arr_el=[0.0],
                                 pol_phases=[0.0], los_flag=False)
    out = _resolve_out(args.out)
    chansim.write_dataset(out, sim_cfg,
                          [chansim.Sample(h_hat, placeholder)])
    print(f"decoded {alloc.total}-bit stream -> {out}")
    return 0


def _run_report(args, rates):
    ckpt = tr.load_checkpoint(args.checkpoint)
    codec = tr.codec_from_checkpoint(ckpt)
    _, samples = chansim.read_dataset(args.data)
    if args.limit:
        samples = samples[:int(args.limit)]
    snrs = _parse_snrs(args.snrs)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    report = rate_sweep(codec, samples, rates, snrs, modes, seed=int(args.seed))
    out = _resolve_out(args.out)
    report.write_csv(out)
    print(f"report with {len(report.rows)} rows -> {out}")
    return 0


def _cmd_eval(args):
    args = _merge_config(args, {"rates": "48,72,96,120,144", "snrs": "perfect",
                                "modes": "csi_only", "seed": "0", "limit": None})
    return _run_report(args, _parse_rates(args.rates))


def _cmd_sweep(args):
    args = _merge_config(args, {"rates": "48:144:8", "snrs": "perfect",
                                "modes": "csi_only", "seed": "0", "limit": None})
    return _run_report(args, _parse_rates(args.rates))


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="csiforge",
        description="Variable-rate CSI feedback codec and simulation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", default=None)
        p.add_argument("--config", default=None,
                       help="key=value file; flags take precedence")

    p = sub.add_parser("gen-data", help="synthesize a channel dataset")
    p.add_argument("--profile", default=None, choices=("desk", "paper"))
    p.add_argument("--samples", default=None)
    p.add_argument("--los-prob", dest="los_prob", default=None)
    p.add_argument("--no-uplink", action="store_true")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_gen_data)

    for name, fn in (("train", _cmd_train), ("finetune", _cmd_finetune)):
        p = sub.add_parser(name)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--rates", default=None)
        p.add_argument("--gamma", default=None)
        p.add_argument("--lr", default=None)
        p.add_argument("--batch-size", dest="batch_size", default=None)
        p.add_argument("--epochs", default=None)
        p.add_argument("--val-fraction", dest="val_fraction", default=None)
        p.add_argument("--input-snr", dest="input_snr", default=None)
        p.add_argument("--log", default=None)
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--fusion-point", dest="fusion_point", default=None,
                           choices=("bottleneck", "post_projection"))
            p.add_argument("--refine-heads", dest="refine_heads", default=None)
        common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("encode", help="channel sample -> CSI bitstream file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", default=None)
    p.add_argument("--rate", default=None)
    p.add_argument("--snr", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("decode", help="CSI bitstream -> reconstructed channel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", required=True)
    p.add_argument("--sensor", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_decode)

    for name, fn in (("eval", _cmd_eval), ("sweep", _cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--rates", default=None)
        p.add_argument("--snrs", default=None)
        p.add_argument("--modes", default=None)
        p.add_argument("--limit", default=None)
        p.add_argument("--out", required=True)
        common(p)
        p.set_defaults(fn=fn)

    return parser


def cli_dispatch(argv):
    """Parse and run one subcommand; structured failures exit non-zero."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (EvalError, tr.TrainerError, chansim.ChanSimError,
            qz.QuantizerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
