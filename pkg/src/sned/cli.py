"""Command-line surface: batch subcommands over one resolved JSON config.

Exit codes: 0 success, 1 validation error (config, flags, spec), 2 runtime
error. Every run echoes its fully resolved configuration to
``<reports>/run.json`` before doing work.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import diffusion as diff_mod
from . import evaluate as eval_mod
from . import figures
from . import model as model_mod
from . import searchspace as ss
from . import trainer as trainer_mod
from .config import ConfigError, RunConfig, load_config, write_run_json


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="sned", description=__doc__)
    parser.add_argument("--config", default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic corpus and its tiers")

    p = sub.add_parser("train", help="run superposition supernet training")
    p.add_argument("--role", choices=["base", "ssr"], default="base")

    p = sub.add_parser("sample", help="sample videos from a trained checkpoint")
    p.add_argument("--role", choices=["base", "ssr"], default="base")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--spec", default=None, help="subnet spec JSON file")
    p.add_argument("--preset", choices=sorted(model_mod.PRESET_FRACTIONS), default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--cascade", action="store_true",
                   help="base sample then recursive SSR to --resolution")
    p.add_argument("-n", type=int, default=4)
    p.add_argument("--no-ema", action="store_true", help="sample raw weights")

    p = sub.add_parser("extract", help="copy one subnet out as a standalone network")
    p.add_argument("--role", choices=["base", "ssr"], default="base")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("analyze", help="search-space size and cost histogram")
    p.add_argument("--samples", type=int, default=10000)

    p = sub.add_parser("bench", help="latency/FLOPs/params for chosen subnets")
    p.add_argument("--role", choices=["base", "ssr"], default="base")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--spec", action="append", default=[])
    p.add_argument("--preset", action="append", default=[],
                   choices=sorted(model_mod.PRESET_FRACTIONS))
    p.add_argument("--resolution", type=int, default=None)

    p = sub.add_parser("eval", help="val loss, proxy distances, and the report table")
    p.add_argument("--role", choices=["base", "ssr"], default="base")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--spec", action="append", default=[])
    p.add_argument("--preset", action="append", default=[],
                   choices=sorted(model_mod.PRESET_FRACTIONS))
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--no-ema", action="store_true")

    p = sub.add_parser("validate-spec", help="check a subnet spec file")
    p.add_argument("--spec", required=True)
    return parser


def _split_overrides(rest: list[str]) -> list[str]:
    overrides = []
    for token in rest:
        if token.startswith("--") and "=" in token and "." in token.split("=", 1)[0]:
            overrides.append(token[2:])
        else:
            raise UsageError(f"unrecognized argument: {token}")
    return overrides


# --------------------------------------------------------------------------
# helpers

def _dataset_paths(cfg: RunConfig, kind: str) -> dict[int, Path]:
    root = Path(cfg.paths.dataset)
    out = {}
    for res in _tier_resolutions(cfg):
        out[res] = root / f"{kind}_{res:03d}px.snv"
    return out


def _tier_resolutions(cfg: RunConfig) -> list[int]:
    tiers = set(cfg.search.resolutions)
    tiers.update(r // 2 for r in cfg.search.resolutions)
    tiers.add(cfg.data.max_resolution)
    return sorted(tiers)


def _load_dataset(cfg: RunConfig, kind: str) -> data_mod.VideoDataset:
    paths = _dataset_paths(cfg, kind)
    tiers: dict[int, torch.Tensor] = {}
    captions = vocab = None
    for res, path in paths.items():
        if not path.exists():
            raise ConfigError(f"missing dataset tier {path}; run `sned gen-data` first")
        ds = data_mod.read_snv(path)
        tiers[res] = ds.videos
        captions, vocab = ds.captions, ds.vocab
    master = tiers[max(tiers)]
    return data_mod.VideoDataset(videos=master, captions=captions, vocab=vocab,
                                 tiers=tiers)


def _default_checkpoint(cfg: RunConfig, role: str) -> Path:
    return Path(cfg.paths.checkpoints) / role / "final.snw"


def _load_net(cfg: RunConfig, role: str, checkpoint: str | None,
              use_ema: bool) -> model_mod.Supernet:
    path = Path(checkpoint) if checkpoint else _default_checkpoint(cfg, role)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    net = model_mod.load_supernet(path)
    if use_ema:
        ema_path = path.with_name(path.name.replace(".snw", ".ema.snw"))
        if ema_path.exists():
            net = model_mod.Supernet(
                config=net.config, arch=net.arch,
                params=trainer_mod.load_ema(ema_path, net).shadow)
    return net


def _resolve_spec(cfg: RunConfig, net: model_mod.Supernet, spec_path: str | None,
                  preset: str | None, resolution: int | None) -> ss.SubnetSpec:
    res = resolution if resolution is not None else min(cfg.search.resolutions)
    if spec_path:
        spec = ss.SubnetSpec.from_json(Path(spec_path).read_text())
    elif preset:
        spec = model_mod.preset_spec(net, cfg.search, preset, res)
    else:
        spec = model_mod.full_spec(net, res)
    shape = ss.space_shape(net.arch, cfg.search)
    bad = ss.validate(spec, cfg.search, shape)
    if bad:
        raise ConfigError("invalid subnet spec:\n  " + "\n  ".join(bad))
    return spec


def _schedule(cfg: RunConfig) -> diff_mod.NoiseSchedule:
    return diff_mod.linear_schedule(cfg.diffusion.T, cfg.diffusion.beta_start,
                                    cfg.diffusion.beta_end)


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg: RunConfig, args) -> None:
    root = Path(cfg.paths.dataset)
    root.mkdir(parents=True, exist_ok=True)
    tiers = _tier_resolutions(cfg)
    for kind, n, seed in (("train", cfg.data.n, cfg.data.seed),
                          ("val", cfg.data.n_val, cfg.data.seed + 1)):
        ds = data_mod.gen_synthetic(n, cfg.data.frames, cfg.data.max_resolution, seed)
        ds = data_mod.build_tiers(ds, tiers)
        for res, path in _dataset_paths(cfg, kind).items():
            data_mod.write_snv(ds, path, resolution=res)
        print(f"{kind}: {n} videos x {cfg.data.frames} frames, tiers "
              f"{tiers} -> {root}")


def cmd_train(cfg: RunConfig, args) -> None:
    role = args.role
    model_cfg = dataclasses.replace(cfg.model, role=role)
    dataset = _load_dataset(cfg, "train")
    net = model_mod.build_supernet(model_cfg, seed=cfg.train.seed)
    reports = Path(cfg.paths.reports)
    metrics_path = reports / f"metrics_{role}.jsonl"
    metrics_path.unlink(missing_ok=True)
    t0 = time.perf_counter()
    net, ema, metrics = trainer_mod.train(
        net, dataset, cfg.train, cfg.search, _schedule(cfg),
        checkpoint_dir=Path(cfg.paths.checkpoints) / role,
        metrics_path=metrics_path)
    wall = time.perf_counter() - t0
    figures.save_loss_curve(metrics, reports / f"loss_{role}.png")
    final = metrics[-1]["loss"] if metrics else float("nan")
    print(f"trained {role} supernet for {cfg.train.total_iterations} iterations "
          f"in {wall:.1f}s (final logged loss {final:.4f})")
    print(f"checkpoints under {Path(cfg.paths.checkpoints) / role}, "
          f"metrics at {metrics_path}")


def cmd_sample(cfg: RunConfig, args) -> None:
    reports = Path(cfg.paths.reports)
    schedule = _schedule(cfg)
    rng = np.random.default_rng([cfg.data.seed, 777])
    captions = data_mod.random_captions(args.n, cfg.data.seed)
    if args.cascade:
        base_net = _load_net(cfg, "base", None, not args.no_ema)
        ssr_net = _load_net(cfg, "ssr", None, not args.no_ema)
        base_res = min(cfg.search.resolutions)
        target = args.resolution if args.resolution else max(cfg.search.resolutions)
        base_spec = model_mod.full_spec(base_net, base_res)
        chain, res = [], base_res
        while res < target:
            res *= 2
            chain.append(model_mod.full_spec(ssr_net, res))
        videos = diff_mod.cascade_sample(base_net, ssr_net, base_spec, chain,
                                         captions, schedule,
                                         cfg.diffusion.ddim_steps, rng)
    else:
        net = _load_net(cfg, args.role, args.checkpoint, not args.no_ema)
        spec = _resolve_spec(cfg, net, args.spec, args.preset, args.resolution)
        cond = None
        if net.config.role == model_mod.ROLE_SSR:
            val = _load_dataset(cfg, "val")
            low = val.tier(spec.resolution // 2)[:args.n]
            cond = diff_mod.resize_bilinear_antialiased(
                low, spec.resolution, spec.resolution)
        videos = diff_mod.ddim_sample(net, spec, args.n, captions, schedule,
                                      cfg.diffusion.ddim_steps, rng=rng, cond=cond)
    out = data_mod.VideoDataset(videos=videos, captions=captions,
                                vocab=data_mod.CaptionVocab.default(),
                                tiers={videos.shape[-1]: videos})
    reports.mkdir(parents=True, exist_ok=True)
    data_mod.write_snv(out, reports / "samples.snv")
    figures.save_video_sheet(videos.numpy(), reports / "samples.png")
    print(f"wrote {args.n} samples at {videos.shape[-1]}px to "
          f"{reports / 'samples.snv'} (+ samples.png)")


def cmd_extract(cfg: RunConfig, args) -> None:
    net = _load_net(cfg, args.role, args.checkpoint, use_ema=False)
    spec = _resolve_spec(cfg, net, args.spec, None, None)
    sub = trainer_mod.extract_subnet(net, spec)
    out = Path(args.out) if args.out else Path(cfg.paths.reports) / "extracted.snw"
    out.parent.mkdir(parents=True, exist_ok=True)
    model_mod.save_supernet(sub, out)
    n_params = sum(p.numel() for p in sub.params.values())
    print(f"extracted subnet with {n_params} parameters -> {out}")


def cmd_analyze(cfg: RunConfig, args) -> None:
    reports = Path(cfg.paths.reports)
    reports.mkdir(parents=True, exist_ok=True)
    net = model_mod.build_supernet(cfg.model, seed=0)
    shape = ss.space_shape(net.arch, cfg.search)
    count = ss.enumerate_count(cfg.search, shape)
    hist = ss.cost_histogram(cfg.search, cfg.model, args.samples, seed=cfg.data.seed)
    doc = {"subnet_count": count, **hist}
    with open(reports / "hist.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    figures.save_cost_histogram(hist, reports / "hist.png")
    print(f"search space holds {count} subnets; cost histogram over "
          f"{args.samples} samples -> {reports / 'hist.json'} (+ hist.png)")


def _spec_list(cfg: RunConfig, net, args) -> list[tuple[str, ss.SubnetSpec]]:
    named = []
    for path in args.spec:
        named.append((Path(path).stem, _resolve_spec(cfg, net, path, None,
                                                     args.resolution)))
    for preset in args.preset or ([] if args.spec else ["S", "M", "L", "B"]):
        named.append((preset, _resolve_spec(cfg, net, None, preset, args.resolution)))
    return named


def cmd_bench(cfg: RunConfig, args) -> None:
    reports = Path(cfg.paths.reports)
    reports.mkdir(parents=True, exist_ok=True)
    if args.checkpoint or _default_checkpoint(cfg, args.role).exists():
        net = _load_net(cfg, args.role, args.checkpoint, use_ema=False)
    else:
        net = model_mod.build_supernet(
            dataclasses.replace(cfg.model, role=args.role), seed=cfg.train.seed)
    schedule = _schedule(cfg)
    results = {}
    for name, spec in _spec_list(cfg, net, args):
        results[name] = {"spec": json.loads(spec.to_json()),
                         **eval_mod.bench(net, spec, cfg.eval.reps, warm=1,
                                          schedule=schedule,
                                          ddim_steps=cfg.diffusion.ddim_steps)}
        fwd = results[name]["forward"]
        print(f"{name}: {fwd['params']} params, {fwd['flops']} FLOPs/video, "
              f"forward {fwd['median_ms']:.1f} ms")
    with open(reports / "bench.json", "w") as fh:
        json.dump(results, fh, indent=2)
        fh.write("\n")
    print(f"-> {reports / 'bench.json'}")


def cmd_eval(cfg: RunConfig, args) -> None:
    reports = Path(cfg.paths.reports)
    reports.mkdir(parents=True, exist_ok=True)
    net = _load_net(cfg, args.role, args.checkpoint, not args.no_ema)
    val = _load_dataset(cfg, "val")
    schedule = _schedule(cfg)
    extractor = eval_mod.FeatureExtractor.create(cfg.eval.feature_seed)
    n_eval = min(cfg.eval.n_eval, val.n)
    entries = []
    for name, spec in _spec_list(cfg, net, args):
        real = val.tier(spec.resolution)[:n_eval]
        real_feats = eval_mod.extract_features(real, extractor)
        rng = np.random.default_rng([cfg.data.seed, 555])
        captions = data_mod.random_captions(n_eval, cfg.data.seed + 5)
        cond = None
        if net.config.role == model_mod.ROLE_SSR:
            low = val.tier(spec.resolution // 2)[:n_eval]
            cond = diff_mod.resize_bilinear_antialiased(
                low, spec.resolution, spec.resolution)
        fakes = []
        for start in range(0, n_eval, cfg.train.batch_size):
            stop = min(start + cfg.train.batch_size, n_eval)
            fakes.append(diff_mod.ddim_sample(
                net, spec, stop - start, captions[start:stop], schedule,
                cfg.diffusion.ddim_steps, rng=rng,
                cond=cond[start:stop] if cond is not None else None))
        fake_feats = eval_mod.extract_features(torch.cat(fakes), extractor)
        stats = eval_mod.bench(net, spec, cfg.eval.reps, warm=1, schedule=schedule,
                               ddim_steps=cfg.diffusion.ddim_steps)
        entries.append({
            "model": name,
            "params": model_mod.param_count(net, spec),
            "proxy_fd": eval_mod.frechet_distance(real_feats.numpy(),
                                                  fake_feats.numpy()),
            "proxy_kd": eval_mod.kernel_distance(real_feats.numpy(),
                                                 fake_feats.numpy()),
            "val_loss": eval_mod.subnet_val_loss(
                net, spec, val, schedule, n_batches=4, seed=cfg.data.seed,
                batch_size=cfg.train.batch_size),
            "time_s": stats["ddim"]["median_ms"] / 1000.0,
        })
    csv_text, aligned = eval_mod.report_table(entries)
    (reports / "table.csv").write_text(csv_text)
    (reports / "table.txt").write_text(aligned)
    with open(reports / "table.json", "w") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")
    figures.save_report_chart(entries, reports / "report.png")
    print(aligned, end="")
    print(f"-> {reports / 'table.csv'} (+ table.json, table.txt, report.png)")


def cmd_validate_spec(cfg: RunConfig, args) -> int:
    net = model_mod.build_supernet(cfg.model, seed=0)
    spec = ss.SubnetSpec.from_json(Path(args.spec).read_text())
    shape = ss.space_shape(net.arch, cfg.search)
    bad = ss.validate(spec, cfg.search, shape)
    if bad:
        for item in bad:
            print(f"violation: {item}", file=sys.stderr)
        return 1
    print("spec is valid")
    return 0


# --------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = _split_overrides(rest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1

    try:
        cfg = load_config(args.config, overrides)
        write_run_json(cfg, cfg.paths.reports)
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1

    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "sample": cmd_sample,
        "extract": cmd_extract,
        "analyze": cmd_analyze,
        "bench": cmd_bench,
        "eval": cmd_eval,
        "validate-spec": cmd_validate_spec,
    }
    try:
        result = handlers[args.command](cfg, args)
        return int(result) if result is not None else 0
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
