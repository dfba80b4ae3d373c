"""Command-line entry point: mix / train / enhance / stream / eval / bench
/ params.

Run configuration is a flat INI-style file with sections; every key is
validated against the schema below before any work starts, and unknown
keys are rejected (exit code 2). Runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .metrics import evaluate
from .mixer import build_dataset, read_wav, speaker_pool, write_wav
from .model import PseModel, PseModelConfig
from .profile import EmbedderConfig, ProfileCache, ProfileStates, precompute_cache
from .streaming import open_session, stream_enhance
from .training import TrainConfig, train_loop


class ConfigError(Exception):
    pass


_SCHEMA = {
    "model": {
        "variant": str,
        "pooling": str,
        "size": str,  # base | large
        "n_enc_layers": int,
        "n_dec_layers": int,
        "causal": bool,
        "n_heads": int,
        "head_dim": int,
        "ffn_hidden": int,
        "dropout": float,
        "look_back": int,
        "embedder_layers": int,
        "embedder_ffn_hidden": int,
        "embedder_heads": int,
        "embedder_head_dim": int,
        "embedder_look_back": int,
        "n_mels": int,
        "seed": int,
    },
    "train": {
        "warmup_steps": int,
        "batch_size": int,
        "epochs": int,
        "max_steps": int,
        "seed": int,
        "loss_c": float,
        "lr_scale": float,
        "clip_norm": float,
        "freeze_embedder": bool,
        "val_fraction": float,
        "val_every": int,
        "val_max_examples": int,
    },
    "data": {
        "out_dir": str,
        "manifest": str,
        "n_examples": int,
        "n_speakers": int,
        "seed": int,
        "snr_min": float,
        "snr_max": float,
        "chunk_seconds": float,
        "ambient_frac": float,
        "babble_frac": float,
    },
    "eval": {
        "transcriber": str,
        "limit": int,
    },
}


def load_config(path):
    """Parse and fully validate a run configuration; unknown sections or
    keys raise ConfigError."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        cfg[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ = _SCHEMA[section][key]
            try:
                if typ is bool:
                    cfg[section][key] = parser.getboolean(section, key)
                else:
                    cfg[section][key] = typ(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    return cfg


def model_config_from(cfg):
    m = dict(cfg.get("model", {}))
    size = m.pop("size", None)
    if size is not None:
        if size not in ("base", "large"):
            raise ConfigError(f"model.size must be base or large, got {size!r}")
        layers = 3 if size == "base" else 6
        m.setdefault("n_enc_layers", layers)
        m.setdefault("n_dec_layers", layers)
    m.pop("seed", None)
    emb = EmbedderConfig(
        n_mels=m.pop("n_mels", 40),
        n_layers=m.pop("embedder_layers", 1),
        ffn_hidden=m.pop("embedder_ffn_hidden", 512),
        n_heads=m.pop("embedder_heads", 8),
        head_dim=m.pop("embedder_head_dim", 32),
        look_back=m.pop("embedder_look_back", 100),
    )
    # model width follows the head geometry; profile width follows the embedder
    if "n_heads" in m or "head_dim" in m:
        m["d_model"] = m.get("n_heads", 8) * m.get("head_dim", 32)
    m["d_embed"] = emb.d_embed
    try:
        return PseModelConfig(embedder=emb, **m)
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(cfg):
    try:
        return TrainConfig(**cfg.get("train", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _load_model(path):
    model, _ = PseModel.load_checkpoint(path)
    return model


def _build_cache(model, enrol_paths):
    return precompute_cache(model, [read_wav(p) for p in enrol_paths])


# ---------------------------------------------------------------------------
# commands


def cmd_mix(args):
    cfg = load_config(args.config)
    d = cfg.get("data", {})
    for req in ("out_dir", "n_examples", "n_speakers"):
        if req not in d:
            raise ConfigError(f"data.{req} is required for mix")
    amb = d.get("ambient_frac", 0.45)
    bab = d.get("babble_frac", 0.45)
    if amb + bab > 1.0:
        raise ConfigError("ambient_frac + babble_frac must be <= 1")
    speakers = speaker_pool(d["n_speakers"], d.get("seed", 0))
    manifest = build_dataset(
        speakers,
        d["n_examples"],
        d["out_dir"],
        seed=d.get("seed", 0),
        composition=(amb, bab, 1.0 - amb - bab),
        snr_range=(d.get("snr_min", -3.0), d.get("snr_max", 10.0)),
        chunk_s=d.get("chunk_seconds", 3.0),
    )
    print(f"wrote {d['n_examples']} examples, manifest: {manifest}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    manifest = cfg.get("data", {}).get("manifest")
    if manifest is None:
        raise ConfigError("data.manifest is required for train")
    mcfg = model_config_from(cfg)
    tcfg = train_config_from(cfg)
    if args.resume:
        model, extra = PseModel.load_checkpoint(args.resume, expect_cfg=mcfg)
    else:
        model = PseModel(mcfg, seed=cfg.get("model", {}).get("seed", 0))
    best, reports = train_loop(manifest, model, tcfg, args.out, resume_from=args.resume)
    print(f"best checkpoint: {best} (final train loss {reports[-1].loss:.4e})")
    return 0


def cmd_enhance(args):
    model = _load_model(args.checkpoint)
    cache = _build_cache(model, args.enrol)
    out = model.enhance(read_wav(args.input), cache)
    write_wav(args.output, out)
    print(f"enhanced {args.input} -> {args.output} ({len(out)} samples)")
    return 0


def cmd_stream(args):
    model = _load_model(args.checkpoint)
    cache = _build_cache(model, args.enrol)
    out, stats = stream_enhance(model, cache, read_wav(args.input))
    write_wav(args.output, out)
    print(
        f"streamed {args.input} -> {args.output}: {stats.frames} frames, "
        f"RTF {stats.rtf:.3f}, latency median {stats.median_latency * 1e3:.2f} ms "
        f"p95 {stats.p95_latency * 1e3:.2f} ms (p={stats.p})"
    )
    return 0


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else {}
    model = _load_model(args.checkpoint) if args.checkpoint else None
    if model is None and not args.enhanced_dir:
        raise ConfigError("eval needs --checkpoint or --enhanced-dir")
    report = evaluate(
        model,
        args.manifest,
        transcriber_cmd=cfg.get("eval", {}).get("transcriber"),
        enhanced_dir=args.enhanced_dir,
        limit=args.limit or cfg.get("eval", {}).get("limit"),
        model_id=args.checkpoint or args.enhanced_dir,
    )
    if args.report:
        report.write(args.report)
    for name, entry in report.summary().items():
        print(
            f"{name}: n={entry['count']} SDR {entry['sdr_mean']:.2f} +- {entry['sdr_std']:.2f} dB "
            f"(unprocessed {entry['sdr_unprocessed_mean']:.2f}, "
            f"improvement {entry['sdr_improvement']:+.2f})"
            + (f" WER {entry['wer_mean']:.3f}" if "wer_mean" in entry else "")
        )
    return 0


def cmd_bench(args):
    model = _load_model(args.checkpoint)
    rng = np.random.default_rng(0)
    audio = rng.uniform(-0.5, 0.5, int(args.seconds * dsp.SAMPLE_RATE)).astype(np.float32)
    if args.enrol:
        base = _build_cache(model, args.enrol)
        rows = base.states.rows
    else:
        rows = rng.standard_normal((max(args.p_sweep), model.cfg.d_embed)).astype(np.float32)
    print("p\tframes\tmedian_ms\tp95_ms\trtf")
    for p in args.p_sweep:
        sub = rows[:p] if rows.shape[0] >= p else np.tile(rows, (p, 1))[:p]
        cache = ProfileCache(
            variant=model.cfg.variant,
            pooling=model.cfg.pooling,
            states=ProfileStates("utterances", sub),
            h_f=sub.mean(axis=0),
        )
        if model.cfg.variant == "cross":
            cache.h_proj = model.profile_proj.apply_np(sub.astype(model.dtype))
            cache.layer_kv = [l.cross_mha.project_kv_np(cache.h_proj) for l in model.dec_layers]
        _, stats = stream_enhance(model, cache, audio)
        print(
            f"{p}\t{stats.frames}\t{stats.median_latency * 1e3:.3f}\t"
            f"{stats.p95_latency * 1e3:.3f}\t{stats.rtf:.3f}"
        )
    return 0


def cmd_params(args):
    if args.config:
        mcfg = model_config_from(load_config(args.config))
    else:
        layers = 3 if args.size == "base" else 6
        mcfg = PseModelConfig(n_enc_layers=layers, n_dec_layers=layers, variant=args.variant)
    model = PseModel(mcfg, seed=0)
    groups = {}
    for name, p in model.named_params():
        groups.setdefault(name.split(".")[0], 0)
        groups[name.split(".")[0]] += p.data.size
    for g, n in groups.items():
        print(f"{g:16s} {n:>12,d}")
    pse_total = model.count_params(include_embedder=False)
    emb_total = model.count_params(include_embedder=True) - pse_total
    print(f"{'pse network':16s} {pse_total:>12,d}")
    print(f"{'embedder':16s} {emb_total:>12,d}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mix", help="generate a synthetic mixture dataset")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("train", help="train a model on a mixture manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="offline enhancement of a WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--enrol", nargs="+", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("stream", help="streaming enhancement with latency stats")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--enrol", nargs="+", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("eval", help="SDR/WER report over a manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--enhanced-dir")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--limit", type=int)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="latency/RTF sweep over enrolment counts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--enrol", nargs="*")
    s.add_argument("--p-sweep", type=lambda v: [int(x) for x in v.split(",")], default=[1, 5])
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("params", help="parameter-count breakdown")
    s.add_argument("--config")
    s.add_argument("--variant", default="concat", choices=["concat", "cross"])
    s.add_argument("--size", default="base", choices=["base", "large"])
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
