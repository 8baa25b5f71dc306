"""Command-line interface: ``v2a-mapper <subcommand> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .diffusion import SamplerConfig, cosine_schedule, sample
from .embedding_io import (
    EMB_MAGIC,
    AggregatorStrategy,
    aggregate,
    l2_normalize,
    read_embedding_set,
    read_frames_any,
    read_paired_dataset,
    write_embedding_set,
)
from .errors import ContractError, V2AError
from .metrics import cosine_score, frechet_from_samples, gap_report, interpolate_path, write_report
from .models import MapperConfig, Variant, predict
from .oracle import OracleConfig, write_oracle_dataset
from .profiles import PROFILES, get_profile
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("v2a_mapper")

VARIANTS = [v.value for v in Variant]
AGGREGATORS = ["random", "middle", "average"]


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: X)`` unless the flag is required or its help already
    says where the default comes from (``None`` defaults)."""

    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def _fmt(x: float) -> str:
    return f"{x:#.6g}"


def _emit(args, payload: dict, text_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        for line in text_lines:
            print(line)


def _pick(value, default):
    return default if value is None else value


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(args) -> int:
    prof = get_profile(args.profile)
    if args.frames_min > args.frames_max:
        raise UsageError(f"--frames-min {args.frames_min} exceeds --frames-max {args.frames_max}")
    for flag in ("sigma_frames", "sigma_audio", "cluster_spread", "offset_scale"):
        if getattr(args, flag) < 0:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 0")
    cfg = OracleConfig(
        dim=_pick(args.dim, prof.dim),
        n_samples=_pick(args.n_samples, prof.n_samples),
        n_clusters=args.clusters,
        cluster_spread=args.cluster_spread,
        frames_min=args.frames_min,
        frames_max=args.frames_max,
        sigma_frames=args.sigma_frames,
        sigma_audio=args.sigma_audio,
        offset_scale=args.offset_scale,
        seed=args.seed,
    )
    manifest, samples, _ = write_oracle_dataset(cfg, args.out)
    visual = l2_normalize(np.stack([aggregate(s, "average") for s in samples]).astype(np.float64))
    audio = np.stack([s.audio for s in samples])
    gap = cosine_score(visual, audio, raw=True)
    (Path(args.out) / "oracle_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    payload = {
        "manifest": str(manifest),
        "n_samples": cfg.n_samples,
        "dim": cfg.dim,
        "clusters": cfg.n_clusters,
        "one_to_many": cfg.one_to_many,
        "initial_gap_mean_cosine": gap,
    }
    _emit(args, payload, [
        f"manifest: {manifest}",
        f"samples: {cfg.n_samples}  dim: {cfg.dim}  clusters: {cfg.n_clusters}",
        f"one-to-many: {str(cfg.one_to_many).lower()}",
        f"initial gap mean cosine: {_fmt(gap)}",
    ])
    return 0


def _mapper_config(args, prof, dim: int) -> MapperConfig:
    variant = Variant(args.variant)
    return MapperConfig(
        variant=variant,
        dim=dim,
        depth=_pick(args.depth, prof.depth[variant]),
        expansion=args.expansion,
        heads=_pick(args.heads, prof.heads),
        head_dim=_pick(args.head_dim, prof.head_dim),
        ff_expansion=args.ff_expansion,
        max_timesteps=_pick(args.timesteps, prof.timesteps),
    )


def cmd_train(args) -> int:
    prof = get_profile(args.profile)
    if not Path(args.data).exists():
        raise FileNotFoundError(f"dataset not found: {args.data}")
    samples = read_paired_dataset(args.data)
    data_dim = samples[0].dim
    if args.dim is not None and args.dim != data_dim:
        raise ContractError(f"--dim {args.dim} does not match dataset dim {data_dim}")
    if args.holdout:
        if args.holdout >= len(samples):
            raise ContractError(f"--holdout {args.holdout} leaves no training samples")
        samples = samples[: len(samples) - args.holdout]
    mapper = _mapper_config(args, prof, data_dim)
    cfg = TrainConfig(
        batch_size=_pick(args.batch_size, prof.batch_size),
        lr=_pick(args.lr, prof.lr),
        epochs=_pick(args.epochs, prof.epochs),
        weight_decay=args.weight_decay,
        drop_rate=args.drop_rate,
        seed=args.seed,
        aggregator=args.aggregator,
        redraw_random=args.redraw_random,
        normalize=not args.no_normalize,
        timesteps=mapper.max_timesteps,
    )
    resume = load_checkpoint(args.resume) if args.resume else None

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.6g", epoch, cfg.epochs, loss)

    ckpt = train(mapper, samples, cfg, resume=resume, progress=progress)
    save_checkpoint(ckpt, args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(ckpt.loss_history, start=1):
            w.writerow([i, repr(loss)])
    hist = ckpt.loss_history
    payload = {
        "checkpoint": str(args.out),
        "loss_csv": str(loss_csv),
        "variant": mapper.variant.value,
        "epochs": ckpt.epoch,
        "initial_loss": hist[0] if hist else None,
        "final_loss": hist[-1] if hist else None,
    }
    lines = [f"checkpoint: {args.out}", f"loss history: {loss_csv}"]
    if hist:
        lines.append(f"loss: {_fmt(hist[0])} -> {_fmt(hist[-1])} over {len(hist)} epochs")
    _emit(args, payload, lines)
    return 0


def _load_inputs(path, strategy: AggregatorStrategy) -> np.ndarray:
    """Visual vectors from an EMB1 set (one per row) or EMS1 sequences (aggregated)."""
    buf_head = Path(path).read_bytes()[:4]
    if buf_head == EMB_MAGIC:
        return read_embedding_set(path).rows.astype(np.float64)
    return np.stack([aggregate(s, strategy) for s in read_frames_any(path)]).astype(np.float64)


def _map_vectors(ckpt, visual: np.ndarray, args, num_samples: int) -> np.ndarray:
    mapper = ckpt.mapper
    if ckpt.train.normalize:
        visual = l2_normalize(visual)
    if not mapper.variant.is_diffusion:
        return predict(ckpt.params, mapper, visual.astype(np.float32)).astype(np.float64)
    prof = get_profile(args.profile)
    sampler = SamplerConfig(
        inference_steps=_pick(args.sampler_steps, prof.inference_steps),
        guidance_scale=_pick(args.guidance_scale, prof.guidance_scale),
        stochastic=args.stochastic,
        seed=args.seed,
        renormalize=not args.no_renormalize,
    )
    schedule = cosine_schedule(ckpt.train.timesteps, ckpt.train.schedule_s)
    return sample(ckpt.params, mapper, np.repeat(visual, num_samples, axis=0), schedule, sampler)


def cmd_map(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    variant = ckpt.mapper.variant
    if args.variant is not None and Variant(args.variant) != variant:
        raise ContractError(f"--variant {args.variant} but checkpoint holds {variant.value}")
    if not variant.is_diffusion and args.num_samples != 1:
        raise ContractError(f"--num-samples {args.num_samples} needs a diffusion checkpoint, got {variant.value}")
    visual = _load_inputs(args.input, AggregatorStrategy(args.aggregator, args.seed))
    if visual.shape[1] != ckpt.mapper.dim:
        raise ContractError(f"input dim {visual.shape[1]} does not match checkpoint dim {ckpt.mapper.dim}")
    out = _map_vectors(ckpt, visual, args, args.num_samples)
    write_embedding_set(out, args.out)
    payload = {"output": str(args.out), "rows": int(out.shape[0]), "dim": int(out.shape[1]), "variant": variant.value}
    _emit(args, payload, [f"wrote {out.shape[0]} x {out.shape[1]} embeddings to {args.out}"])
    return 0


def cmd_eval(args) -> int:
    a = read_embedding_set(args.set_a).rows
    b = read_embedding_set(args.set_b).rows
    if args.fd:
        value = frechet_from_samples(a, b)
        payload = {"metric": "fd", "value": value}
        line = f"fd: {value:.6f}"
    else:
        value = cosine_score(a, b, raw=args.raw_cosine)
        payload = {"metric": "cs", "raw": args.raw_cosine, "value": value}
        line = f"cs: {_fmt(value)}"
    if args.out:
        write_report(args.out, payload)
    _emit(args, payload, [line])
    return 0


def cmd_gap_report(args) -> int:
    strategy = AggregatorStrategy(args.aggregator, args.seed)
    x = _load_inputs(args.x, strategy)
    y = _load_inputs(args.y, strategy)
    report = gap_report(x, y, bins=args.bins)
    report.write_csv(args.hist_csv, args.coords_csv)
    if args.out:
        write_report(args.out, report.summary())
    width = max(report.counts.max(), 1)
    lines = [
        f"pairs: {report.cosines.size}  mean cosine: {_fmt(report.mean)}  std: {_fmt(report.std)}",
    ]
    for lo, hi, c in zip(report.bin_edges[:-1], report.bin_edges[1:], report.counts):
        lines.append(f"[{lo:+.2f}, {hi:+.2f}) {int(c):6d} {'#' * int(round(40 * c / width))}".rstrip())
    _emit(args, report.summary(), lines)
    return 0


def cmd_interpolate(args) -> int:
    a = read_embedding_set(args.a).rows[args.row_a].astype(np.float64)
    b = read_embedding_set(args.b).rows[args.row_b].astype(np.float64)
    if a.shape != b.shape:
        raise ContractError(f"endpoint dims differ: {a.shape[0]} vs {b.shape[0]}")
    if args.steps < 2:
        raise ContractError(f"--steps must be >= 2, got {args.steps}")
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if a.shape[0] != ckpt.mapper.dim:
            raise ContractError(f"endpoint dim {a.shape[0]} does not match checkpoint dim {ckpt.mapper.dim}")
        if args.map in ("a", "both"):
            a = _map_vectors(ckpt, a[None], args, 1)[0]
        if args.map in ("b", "both"):
            b = _map_vectors(ckpt, b[None], args, 1)[0]
    path = interpolate_path(a, b, args.steps, renormalize=args.renormalize)
    write_embedding_set(path, args.out)
    payload = {"output": str(args.out), "steps": args.steps, "renormalized": args.renormalize}
    _emit(args, payload, [f"wrote {args.steps} interpolants to {args.out}"])
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_sampler_flags(p, steps_flag: str = "--steps") -> None:
    p.add_argument(steps_flag, dest="sampler_steps", type=int, default=None, help="inference steps (desk: 50, paper: 200)")
    p.add_argument("--guidance-scale", type=float, default=None, help="classifier-free guidance scale (desk/paper: 0.9)")
    p.add_argument("--stochastic", action="store_true", help="ancestral sampling instead of deterministic DDIM")
    p.add_argument("--no-renormalize", action="store_true", help="keep sampled embeddings un-normalised")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="v2a-mapper", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads, 1 = deterministic (default: $XMAP_THREADS, else all cores)")
    common.add_argument("--json", action="store_true", help="print the report as JSON")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="hyperparameter profile")
    common.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], formatter_class=fmt, help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dim", type=int, default=None, help="embedding width (desk: 32, paper: 512)")
    p.add_argument("--n-samples", type=int, default=None, help="number of pairs (desk: 4096, paper: 5000)")
    p.add_argument("--clusters", type=int, default=8, help="number of semantic clusters")
    p.add_argument("--cluster-spread", type=float, default=0.1, help="per-coordinate spread of bases around centres")
    p.add_argument("--frames-min", type=int, default=4, help="fewest frames per sample")
    p.add_argument("--frames-max", type=int, default=12, help="most frames per sample")
    p.add_argument("--sigma-frames", type=float, default=0.02, help="per-coordinate frame jitter")
    p.add_argument("--sigma-audio", type=float, default=0.0, help="per-coordinate target noise (> 0 gives one-to-many)")
    p.add_argument("--offset-scale", type=float, default=0.5, help="norm of the ground-truth offset")
    p.set_defaults(parser=p, func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a mapper")
    p.add_argument("--variant", choices=VARIANTS, required=True, help="mapper architecture")
    p.add_argument("--data", required=True, help="paired-dataset manifest (JSON)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", default=None, help="loss history CSV (default: <out>.loss.csv)")
    p.add_argument("--resume", default=None, help="continue from this checkpoint (default: start fresh)")
    p.add_argument("--dim", type=int, default=None, help="expected embedding width (default: from data)")
    p.add_argument("--depth", type=int, default=None, help="MLP blocks D or transformer depth (desk: 1 MLP, 2 transformer; paper: 1 MLP, 8 reg-transformer, 12 diff-transformer)")
    p.add_argument("--expansion", type=int, default=4, help="MLP expansion rate E")
    p.add_argument("--heads", type=int, default=None, help="attention heads (desk: 4, paper: 12)")
    p.add_argument("--head-dim", type=int, default=None, help="attention head width (desk: 8, paper: 64)")
    p.add_argument("--ff-expansion", type=int, default=4, help="transformer feed-forward expansion")
    p.add_argument("--batch-size", type=int, default=None, help="batch size K (desk: 64, paper: 448)")
    p.add_argument("--lr", type=float, default=None, help="AdamW learning rate (desk: 1e-3, paper: 1.1e-4)")
    p.add_argument("--epochs", type=int, default=None, help="epochs (desk: 200, paper: 100)")
    p.add_argument("--weight-decay", type=float, default=0.01, help="decoupled weight decay")
    p.add_argument("--drop-rate", type=float, default=0.1, help="condition dropout for guidance (diffusion only)")
    p.add_argument("--timesteps", type=int, default=None, help="diffusion steps T (desk/paper: 1000)")
    p.add_argument("--aggregator", choices=AGGREGATORS, default="average", help="frame aggregation")
    p.add_argument("--redraw-random", action="store_true", help="re-draw the random frame every epoch")
    p.add_argument("--no-normalize", action="store_true", help="skip L2 normalisation of embeddings")
    p.add_argument("--holdout", type=int, default=0, help="exclude the last N samples from training")
    p.set_defaults(parser=p, func=cmd_train)

    p = sub.add_parser("map", parents=[common], formatter_class=fmt, help="translate visual embeddings")
    p.add_argument("--checkpoint", required=True, help="trained mapper checkpoint")
    p.add_argument("--input", required=True, help="EMB1 visual embeddings or EMS1 frame sequences")
    p.add_argument("--out", required=True, help="output EMB1 path")
    p.add_argument("--variant", choices=VARIANTS, default=None, help="assert the checkpoint variant (default: no check)")
    p.add_argument("--aggregator", choices=AGGREGATORS, default="average", help="frame aggregation for EMS1 input")
    p.add_argument("--num-samples", type=int, default=1, help="samples per input (diffusion only)")
    _add_sampler_flags(p)
    p.set_defaults(parser=p, func=cmd_map)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="Fréchet distance or cosine score")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--fd", action="store_true", help="Fréchet distance between the two sets")
    which.add_argument("--cs", action="store_true", help="paired cosine score (x100)")
    p.add_argument("set_a", help="EMB1 file")
    p.add_argument("set_b", help="EMB1 file")
    p.add_argument("--raw-cosine", action="store_true", help="report mean cosine without the x100 scale")
    p.add_argument("--out", default=None, help="also write the JSON report here (default: stdout only)")
    p.set_defaults(parser=p, func=cmd_eval)

    p = sub.add_parser("gap-report", parents=[common], formatter_class=fmt, help="paired-cosine histogram and 2-D projection")
    p.add_argument("x", help="EMB1 set or EMS1 frame sequences")
    p.add_argument("y", help="EMB1 set or EMS1 frame sequences")
    p.add_argument("--bins", type=int, default=20, help="histogram bins over [-1, 1]")
    p.add_argument("--aggregator", choices=AGGREGATORS, default="average", help="frame aggregation for EMS1 input")
    p.add_argument("--hist-csv", default=None, help="write histogram bins as CSV (default: not written)")
    p.add_argument("--coords-csv", default=None, help="write 2-D PCA coordinates as CSV (default: not written)")
    p.add_argument("--out", default=None, help="also write the JSON report here (default: stdout only)")
    p.set_defaults(parser=p, func=cmd_gap_report)

    p = sub.add_parser("interpolate", parents=[common], formatter_class=fmt, help="linear path between two embeddings")
    p.add_argument("a", help="EMB1 file holding the start embedding")
    p.add_argument("b", help="EMB1 file holding the end embedding")
    p.add_argument("--out", required=True, help="output EMB1 path")
    p.add_argument("--steps", type=int, default=5, help="points on the path, endpoints included")
    p.add_argument("--row-a", type=int, default=0, help="row of the start file")
    p.add_argument("--row-b", type=int, default=0, help="row of the end file")
    p.add_argument("--checkpoint", default=None, help="map visual endpoints to the audio space first (default: interpolate as given)")
    p.add_argument("--map", choices=["a", "b", "both"], default="both", help="which endpoints to map with --checkpoint")
    p.add_argument("--renormalize", action="store_true", help="project every interpolant to unit norm")
    _add_sampler_flags(p, "--sampler-steps")
    p.set_defaults(parser=p, func=cmd_interpolate)
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("XMAP_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=_threads(args)):
            return args.func(args)
    except UsageError as exc:
        args.parser.error(str(exc))
    except (V2AError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
