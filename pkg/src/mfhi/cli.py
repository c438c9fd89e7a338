"""``mfhi`` command line: gen, train, eval, sweep, dump-attention.

Exit codes: 0 success, 2 usage, 3 invalid input or configuration,
4 numeric failure (non-finite values, degenerate norms), 5 I/O failure.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .attention import dump_attention
from .autodiff import DegenerateInputError, GradCheckError, NonFiniteError
from .config import config_hash, plain_values, read_config, resolve
from .dataset import ConfigurationError, SyntheticConfig, generate_synthetic, load_dataset
from .recognition import DEFAULT_TOP, check_compatible, evaluate_checkpoint, write_report
from .tensor_io import TensorFormatError
from .trainer import TrainConfig, TrainingAbort, fit, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

GRID_KEYS = {"D": ("top_d", int), "r": ("r", float), "d": ("d", float)}
SWEEP_COLUMNS = ("I2A Top-1", "I2A Top-5", "I2A Top-10", "A2I R@1", "A2I R@5", "A2I R@10")

log = logging.getLogger("mfhi")


class UsageError(Exception):
    """Bad flag value detected after argument parsing."""


# ---------------------------------------------------------------------------
# Argument helpers


def int_list(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def top_list(text: str) -> list:
    values = int_list(text)
    if any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("ranks must be >= 1")
    return values


def parse_grid(tokens: Sequence[str]) -> list:
    """``["r=8,64", "D=2,6"]`` -> list of override dicts, Cartesian product in token order."""
    axes = []
    seen = set()
    for tok in tokens:
        key, sep, values = tok.partition("=")
        key = key.strip()
        if not sep or key not in GRID_KEYS:
            raise UsageError(f"grid entry {tok!r} must look like KEY=v1,v2 with KEY in {sorted(GRID_KEYS)}")
        if key in seen:
            raise UsageError(f"grid key {key} given twice")
        seen.add(key)
        name, kind = GRID_KEYS[key]
        try:
            parsed = [kind(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"grid entry {tok!r}: values must be {kind.__name__}") from None
        if not parsed:
            raise UsageError(f"grid entry {tok!r} has no values")
        axes.append([(name, v) for v in parsed])
    return [dict(combo) for combo in itertools.product(*axes)]


def _load_file(path) -> dict:
    return read_config(path) if path else {}


def _checkpoint_path(path) -> Path:
    """Accept a checkpoint directory or a training output directory holding one."""
    p = Path(path)
    if not (p / "checkpoint.json").exists() and (p / "checkpoint" / "checkpoint.json").exists():
        return p / "checkpoint"
    return p


def _default_out(ckpt_path: Path, name: str) -> Path:
    return ckpt_path.parent / name


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    cfg = resolve(SyntheticConfig, "gen", _load_file(args.config), {"seed": args.seed})
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not args.force:
            print(f"error: {out} exists and is not empty; pass --force to overwrite", file=sys.stderr)
            return EXIT_IO
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    manifest = generate_synthetic(cfg, out)
    counts = {s: sum(1 for r in manifest.images if r.split == s) for s in ("train", "gallery", "probe")}
    c, h, w = manifest.feature_shape
    print(
        f"wrote {out}: K={cfg.num_train_identities} seen, L={cfg.num_test_identities} unseen, "
        f"Q={cfg.num_attributes}, feature {c}x{h}x{w}, images train={counts['train']} "
        f"gallery={counts['gallery']} probe={counts['probe']}, config {config_hash(asdict(cfg))}"
    )
    return EXIT_OK


def train_config(args, file_values: dict, **extra) -> TrainConfig:
    overrides = {"mode": getattr(args, "mode", None), "episodes": args.episodes, "seed": getattr(args, "seed", None)}
    overrides.update(extra)
    return resolve(TrainConfig, "train", file_values, overrides)


def cmd_train(args) -> int:
    cfg = train_config(args, _load_file(args.config))
    ds = load_dataset(args.data)
    ckpt = fit(ds, cfg, args.out, resume_from=_checkpoint_path(args.resume) if args.resume else None)
    print(f"trained {cfg.episodes} episodes ({cfg.mode}), config {ckpt.config_hash}; checkpoint in {Path(args.out) / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    path = _checkpoint_path(args.checkpoint)
    ckpt = load_checkpoint(path)
    ds = load_dataset(args.data)
    section = plain_values("eval", _load_file(args.config).get("eval", {}))
    top = args.top or (top_list(section["top"]) if "top" in section else list(DEFAULT_TOP))
    report = evaluate_checkpoint(args.protocol, ckpt, ds, top=top)
    files = write_report(report, args.out or _default_out(path, "reports"))
    sys.stdout.write(report.to_text())
    print("wrote " + ", ".join(str(f) for f in files))
    return EXIT_OK


def sweep_rows(ds, base: TrainConfig, points: list, seeds: Sequence[int], out: Path) -> list:
    """Train and evaluate every (grid point, seed); one row dict per run."""
    configs = [(pt, seed, replace(base, seed=seed, mode="i2a", **pt)) for pt in points for seed in seeds]
    rows = []
    for pt, seed, cfg in configs:
        run_dir = out / f"D{cfg.top_d}_r{cfg.r:g}_d{cfg.d:g}_seed{seed}"
        ckpt = fit(ds, cfg, run_dir)
        i2a = evaluate_checkpoint("i2a", ckpt, ds, top=DEFAULT_TOP)
        a2i = evaluate_checkpoint("a2i", ckpt, ds, top=DEFAULT_TOP)
        values = [i2a.top_p[p] for p in DEFAULT_TOP] + [a2i.cmc[p] for p in DEFAULT_TOP]
        rows.append({"D": cfg.top_d, "r": cfg.r, "d": cfg.d, "seed": seed,
                     "config_hash": ckpt.config_hash, **dict(zip(SWEEP_COLUMNS, values))})
        log.info("sweep point D=%d r=%g d=%g seed=%d done", cfg.top_d, cfg.r, cfg.d, seed)
    return rows


def format_sweep(rows: list) -> tuple:
    """(tab-separated exact values, aligned text table in percent)."""
    keys = ("D", "r", "d", "seed") + SWEEP_COLUMNS
    tsv = ["\t".join(keys)]
    for row in rows:
        cells = [str(row["D"]), repr(row["r"]), repr(row["d"]), str(row["seed"])]
        cells += ["" if row[c] is None else repr(float(row[c])) for c in SWEEP_COLUMNS]
        tsv.append("\t".join(cells))
    text_rows = [list(keys)]
    for row in rows:
        cells = [str(row["D"]), f"{row['r']:g}", f"{row['d']:g}", str(row["seed"])]
        cells += ["n/a" if row[c] is None else f"{100 * row[c]:.2f}" for c in SWEEP_COLUMNS]
        text_rows.append(cells)
    widths = [max(len(r[i]) for r in text_rows) for i in range(len(keys))]
    lines = [" | ".join(c.rjust(w) for c, w in zip(r, widths)) for r in text_rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(tsv) + "\n", "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    file_values = _load_file(args.config)
    section = plain_values("sweep", file_values.get("sweep", {}))
    grid_tokens = args.grid if args.grid is not None else section.get("grid", "").split()
    seeds = args.seeds or (int_list(section["seeds"]) if "seeds" in section else [0])
    points = parse_grid(grid_tokens) if grid_tokens else [{}]
    base = train_config(args, file_values)
    # validate every grid point before training anything
    for pt in points:
        replace(base, **pt)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep_rows(ds, base, points, seeds, out)
    tsv, text = format_sweep(rows)
    (out / "sweep.tsv").write_text(tsv)
    (out / "sweep.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    path = _checkpoint_path(args.checkpoint)
    ckpt = load_checkpoint(path)
    ds = load_dataset(args.data)
    check_compatible(ckpt, ds)
    if not ckpt.model.spec.attention:
        raise ConfigurationError("checkpoint was trained without the attention flow; nothing to dump")
    out = Path(args.out) if args.out else _default_out(path, "attention")
    row_of = {int(i): k for k, i in enumerate(ds.image_ids)}
    missing = [i for i in args.images if i not in row_of]
    for image_id in args.images:
        if image_id in missing:
            continue
        res = ckpt.model.embed(ds.features[row_of[image_id]][None])
        dump_attention(out, image_id, res.scores.data[0], res.selected[0], res.attention.data[0])
    done = len(args.images) - len(missing)
    print(f"wrote attention dumps for {done} image(s) to {out}")
    if missing:
        print(f"error: unknown image ids skipped: {', '.join(map(str, missing))}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


class _HelpFormatter(argparse.HelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=88, max_help_position=32)


def _fallback(text: str, value) -> str:
    """Help text for a flag whose default comes from the config file or built-in settings."""
    return f"{text} (default: config file, else {value})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfhi",
        description="Attribute-driven zero-shot identification on planted synthetic feature maps.",
        epilog="exit codes: 0 ok, 2 usage, 3 invalid input, 4 numeric failure, 5 I/O failure",
        formatter_class=_HelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    gen_defaults, train_defaults = SyntheticConfig(), TrainConfig()

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_HelpFormatter)
        p.set_defaults(func=func)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="INI config file with per-command sections (default: none)")
        return p

    p = add("gen", cmd_gen, "generate a planted synthetic dataset")
    p.add_argument("--out", metavar="DIR", required=True, help="output dataset directory (required)")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory (default: off)")
    p.add_argument("--seed", type=int, default=None,
                   help=_fallback("generator seed; overrides MFHI_SEED", gen_defaults.seed))

    p = add("train", cmd_train, "episodic training; writes a checkpoint and a log")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory (required)")
    p.add_argument("--out", metavar="DIR", required=True, help="run directory (required)")
    p.add_argument("--mode", choices=("i2a", "i2i"), default=None,
                   help=_fallback("prototype MLP (i2a) or fc prototypes (i2i)", train_defaults.mode))
    p.add_argument("--episodes", type=int, default=None,
                   help=_fallback("number of training episodes", train_defaults.episodes))
    p.add_argument("--seed", type=int, default=None,
                   help=_fallback("training seed; overrides MFHI_SEED", train_defaults.seed))
    p.add_argument("--resume", metavar="PATH", default=None, help="continue from this checkpoint (default: none)")

    p = add("eval", cmd_eval, "evaluate a checkpoint under one protocol")
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint or run directory (required)")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory (required)")
    p.add_argument("--protocol", choices=("i2a", "a2i", "i2i"), required=True, help="recognition protocol (required)")
    p.add_argument("--top", type=top_list, default=None,
                   help=_fallback("comma-separated ranks P", ",".join(map(str, DEFAULT_TOP))))
    p.add_argument("--out", metavar="DIR", default=None, help="report directory (default: reports/ next to the checkpoint)")

    p = add("sweep", cmd_sweep, "train and evaluate over a grid of D, r and d")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory (required)")
    p.add_argument("--out", "--checkpoint-dir", dest="out", metavar="DIR", required=True,
                   help="directory for per-point runs and the sweep table (required)")
    p.add_argument("--grid", nargs="*", metavar="KEY=V1,V2", default=None,
                   help=_fallback("grid axes over D, r, d, e.g. r=8,64 d=0.15,0.3 D=2,6,12", "a single point"))
    p.add_argument("--seeds", type=int_list, default=None, help=_fallback("comma-separated training seeds", 0))
    p.add_argument("--episodes", type=int, default=None,
                   help=_fallback("episodes per grid point", train_defaults.episodes))

    p = add("dump-attention", cmd_dump_attention, "write attention maps and PGM renderings")
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint or run directory (required)")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory (required)")
    p.add_argument("--images", type=int_list, required=True, help="comma-separated image ids (required)")
    p.add_argument("--out", metavar="DIR", default=None, help="dump directory (default: attention/ next to the checkpoint)")
    return parser


def exit_code_for(err: BaseException) -> int:
    if isinstance(err, UsageError):
        return EXIT_USAGE
    if isinstance(err, (TrainingAbort, NonFiniteError, DegenerateInputError, GradCheckError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(err, (OSError, TensorFormatError)):
        return EXIT_IO
    if isinstance(err, (ValueError, KeyError, RuntimeError, argparse.ArgumentTypeError)):
        return EXIT_VALIDATION
    raise err


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as err:  # mapped to documented exit codes
        code = exit_code_for(err)
        print(f"error: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
