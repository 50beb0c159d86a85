"""Command-line entry point: ``sketchret <subcommand> ...``.

Defaults for any flag may come from an INI file (``--config`` or the
``SKETCHRET_CONFIG`` environment variable) with one section per subcommand;
keys are flag names without the leading dashes. Command-line flags win.

Exit status: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import DatasetManifest, build_dataset, clean_sketch, parse_family_mix
from .deformer import DeformConfig, grad_check_deformer, max_relative_error
from .encoder import EncoderDims, encode, encode_batch, grad_check_encoder, init_params, load_checkpoint
from .errors import ConfigError, NumericError, SketchRetError
from .evaluation import DEFAULT_KS, build_report, format_table, rank_gallery, rank_queries, report_json
from .fitgap import KIND_NAMES, FitGapKind, FitGapMatrix, build_matrices, build_matrix
from .geometry import PointCloud, read_cloud
from .training import TripletConfig, load_pairs, train

log = logging.getLogger("sketchret")

CONFIG_ENV = "SKETCHRET_CONFIG"
SPLITS = ("train", "val", "test", "all")
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _k_list(text):
    try:
        ks = [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _add_deform_flags(p):
    d = DeformConfig()
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--step-size", type=float, default=d.step_size)
    p.add_argument("--lambda-smooth", type=float, default=d.lambda_smooth)
    p.add_argument("--lambda-magnitude", type=float, default=d.lambda_magnitude)
    p.add_argument("--deform-seed", type=int, default=d.seed)
    p.add_argument("--resolution", type=int, default=d.resolution)
    p.add_argument("--max-points", type=int, default=d.max_points)
    p.add_argument("--patience", type=int, default=d.patience)


def _deform_config(args) -> DeformConfig:
    return DeformConfig(
        iterations=args.iterations,
        step_size=args.step_size,
        lambda_smooth=args.lambda_smooth,
        lambda_magnitude=args.lambda_magnitude,
        seed=args.deform_seed,
        resolution=args.resolution,
        max_points=args.max_points,
        patience=args.patience,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sketchret", description="Sketch-to-shape retrieval with fitting-gap adaptive margins.")
    parser.add_argument("--config", help=f"INI file with per-subcommand defaults (env: {CONFIG_ENV})")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for gen-data and fitgap")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape/sketch dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--family-mix", default="chair")
    p.add_argument("--points", type=int, default=1024)

    p = sub.add_parser("fitgap", help="precompute fitting-gap matrices per split")
    p.add_argument("--data", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--kinds", type=_csv_list, default=["asym_cd"])
    p.add_argument("--splits", type=_csv_list, default=["train", "val", "test"])
    p.add_argument("--tau", type=float, default=0.01)
    _add_deform_flags(p)

    p = sub.add_parser("train", help="train an encoder")
    d = TripletConfig()
    p.add_argument("--data", required=True)
    p.add_argument("--cache-dir", help="directory holding fitgap caches")
    p.add_argument("--out", required=True, help="output directory for checkpoint, log and config")
    p.add_argument("--mode", choices=("fixed", "adaptive", "regression"), default=d.mode)
    p.add_argument("--margin", type=float, default=d.fixed_margin)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=d.augment)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--gap-kind", choices=KIND_NAMES, default=d.gap_kind)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--regression-scale", type=float, default=d.regression_scale)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)

    p = sub.add_parser("eval", help="evaluate checkpoints on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", required=True, help="PATH or LABEL=PATH; repeatable")
    p.add_argument("--cache-dir")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--queries", choices=("sketch", "clean"), default="sketch")
    p.add_argument("--k", type=_k_list, default=list(DEFAULT_KS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", help="rank a gallery for one sketch file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sketch", required=True)
    p.add_argument("--split", choices=SPLITS, default="test", help="gallery split")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference checks of encoder and deformer gradients")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    # test hook: corrupt the analytic encoder gradient
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config or os.environ.get(CONFIG_ENV)


def _apply_config_file(parser, path):
    """Install INI values as parser defaults so command-line flags still win."""
    cfg = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cfg.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for section in cfg.sections():
        target = parser if section == "global" else subparsers.choices.get(section)
        if target is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        actions = {a.dest: a for a in target._actions}
        values = {}
        for key, raw in cfg.items(section):
            dest = key.replace("-", "_")
            action = actions.get(dest)
            if action is None or dest in ("help", "config"):
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
                values[dest] = cfg.getboolean(section, key)
            elif action.type is not None:
                try:
                    values[dest] = action.type(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"{path}: bad value for {key}: {exc}") from exc
            else:
                values[dest] = raw
            if action.choices is not None and values[dest] not in action.choices:
                raise ConfigError(f"{path}: {key} must be one of {list(action.choices)}")
            if action.required:
                action.required = False
        target.set_defaults(**values)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _entries(manifest, split):
    return manifest.entries if split == "all" else manifest.split(split)


def cmd_gen_data(args):
    try:
        mix = parse_family_mix(args.family_mix)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.count < 10:
        raise ConfigError("--count must be at least 10")
    manifest = build_dataset(args.count, mix, args.seed, args.out, args.points, threads=args.threads)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} pairs to {manifest.root}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return manifest.root / "manifest.json"


def cache_file(cache_dir, split, kind) -> Path:
    return Path(cache_dir) / f"{split}_{kind}.txt"


def cmd_fitgap(args):
    config = _deform_config(args)
    for k in args.kinds:
        if k not in KIND_NAMES:
            raise ConfigError(f"unknown kind {k!r}; expected one of {KIND_NAMES}")
    for s in args.splits:
        if s not in SPLITS:
            raise ConfigError(f"unknown split {s!r}")
    kinds = [FitGapKind(k, args.tau) for k in args.kinds]
    manifest = DatasetManifest.read(args.data)
    for split in args.splits:
        entries = _entries(manifest, split)
        if not entries:
            continue
        ids = [e.id for e in entries]
        shapes = [manifest.shape(e) for e in entries]
        paths = {k.name: cache_file(args.cache_dir, split, k.name) for k in kinds}
        mats = build_matrices(shapes, kinds, config, ids, paths, threads=args.threads)
        for name, m in mats.items():
            print(f"{split} {name}: {len(m)}x{len(m)} -> {paths[name]}")
    return Path(args.cache_dir)


def _load_matrix(cache_dir, split, kind):
    if cache_dir is None:
        return None
    path = cache_file(cache_dir, split, kind)
    return FitGapMatrix.load(path) if path.exists() else None


def _cd_matrix(pairs):
    return build_matrix(pairs.shapes, "cd", ids=pairs.ids)


def cmd_train(args):
    config = TripletConfig(
        mode=args.mode,
        fixed_margin=args.margin,
        alpha=args.alpha,
        beta=args.beta,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        augment=args.augment,
        seed=args.seed,
        gap_kind=args.gap_kind,
        tau=args.tau,
        regression_scale=args.regression_scale,
        embed_dim=args.embed_dim,
    )
    matrix = None
    if config.mode != "fixed":
        matrix = _load_matrix(args.cache_dir, "train", config.gap_kind)
        if matrix is None:
            raise ConfigError(f"{config.mode} mode needs {cache_file(args.cache_dir or '<cache-dir>', 'train', config.gap_kind)}; run fitgap first")
    manifest = DatasetManifest.read(args.data)
    data = load_pairs(manifest, "train")
    val = load_pairs(manifest, "val")
    val_matrices = {}
    if len(val):
        val_matrices["cd"] = _load_matrix(args.cache_dir, "val", "cd") or _cd_matrix(val)
        gap = _load_matrix(args.cache_dir, "val", config.gap_kind)
        if gap is not None:
            val_matrices[config.gap_kind] = gap
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", config.to_text())

    def progress(row):
        log.info("epoch %d loss %.6f", row[0], row[1])

    train(data, config, matrix, val if len(val) else None, val_matrices, out / "model.ckpt", out / "log.csv", progress=progress)
    print(f"checkpoint {out / 'model.ckpt'}; log {out / 'log.csv'}")
    return out / "model.ckpt"


def cmd_eval(args):
    manifest = DatasetManifest.read(args.data)
    pairs = load_pairs(manifest, args.split)
    if not len(pairs):
        raise ConfigError(f"split {args.split!r} is empty")
    if args.queries == "clean":
        queries = [clean_sketch(e.spec, n_points=manifest.n_points) for e in _entries(manifest, args.split)]
    else:
        queries = pairs.sketches
    matrices = {}
    for kind in KIND_NAMES:
        m = _load_matrix(args.cache_dir, args.split, kind)
        if m is not None:
            matrices[kind] = m
    if "cd" not in matrices:
        matrices["cd"] = _cd_matrix(pairs)
    reports = []
    for spec in args.checkpoint:
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).parent.name or Path(spec).stem, spec
        params = load_checkpoint(path)
        rankings = rank_queries(encode_batch(params, queries), pairs.ids, encode_batch(params, pairs.shapes), pairs.ids)
        reports.append(build_report(label, rankings, pairs.ids, matrices, args.k))
    table = format_table(reports, args.k)
    out = Path(args.out)
    _write(out / "report.txt", table)
    _write(out / "report.json", report_json(reports))
    sys.stdout.write(table)
    return out


def cmd_retrieve(args):
    if args.top < 1:
        raise ConfigError("--top must be positive")
    manifest = DatasetManifest.read(args.data)
    entries = _entries(manifest, args.split)
    params = load_checkpoint(args.checkpoint)
    query = read_cloud(args.sketch, "sketch")
    gallery = encode_batch(params, [manifest.shape(e) for e in entries])
    ranked = rank_gallery(encode(params, query), gallery, [e.id for e in entries])
    lines = [f"{rank} {sid} {dist!r}" for rank, (sid, dist) in enumerate(ranked[: args.top], start=1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return [sid for sid, _ in ranked[: args.top]]


def _encoder_instance(rng, dims):
    # tiny nets occasionally start with every ReLU dead; those draws are redone
    while True:
        params = init_params(int(rng.integers(2**31)), dims)
        cloud = rng.uniform(-0.5, 0.5, size=(8, 3))
        upstream = rng.normal(size=dims.embed_dim)
        try:
            return grad_check_encoder(params, cloud, upstream)
        except NumericError:
            continue


def run_gradchecks(trials, seed, inject_fault=False):
    """Worst relative errors of encoder and deformer gradient checks over ``trials`` instances."""
    rng = np.random.default_rng(seed)
    dims = EncoderDims((5, 6, 7), (6,), 8)
    enc_worst = 0.0
    def_worst = 0.0
    for t in range(trials):
        analytic, numeric = _encoder_instance(rng, dims)
        if inject_fault:
            analytic = analytic * 1.01
        enc_worst = max(enc_worst, max_relative_error(analytic, numeric))
        src = PointCloud(rng.uniform(-0.45, 0.45, size=(16, 3)))
        tgt = PointCloud(rng.uniform(-0.45, 0.45, size=(16, 3)))
        def_worst = max(def_worst, grad_check_deformer(src, tgt, DeformConfig(seed=int(rng.integers(2**31)))))
    return enc_worst, def_worst


def cmd_gradcheck(args):
    if args.trials < 1:
        raise ConfigError("--trials must be positive")
    enc, dfm = run_gradchecks(args.trials, args.seed, args.inject_fault)
    lines = [
        f"encoder  max_rel_error={enc!r} {'PASS' if enc < GRAD_TOLERANCE else 'FAIL'}",
        f"deformer max_rel_error={dfm!r} {'PASS' if dfm < GRAD_TOLERANCE else 'FAIL'}",
    ]
    text = f"trials={args.trials} seed={args.seed} tolerance={GRAD_TOLERANCE!r}\n" + "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return enc < GRAD_TOLERANCE and dfm < GRAD_TOLERANCE


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fitgap": cmd_fitgap,
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        cfg = _config_path(argv)
        if cfg:
            _apply_config_file(parser, cfg)
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"sketchret: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sketchret: config error: {exc}", file=sys.stderr)
        return 1
    except (SketchRetError, ArithmeticError, OSError, ValueError, KeyError) as exc:
        print(f"sketchret: error: {exc}", file=sys.stderr)
        return 2
    if args.command == "gradcheck" and not result:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
