"""Command line front end.

Subcommands:
  gen-shapes   render the procedural shape dataset to PNG files
  train        fit a VAE, writing checkpoint, metrics, and manifest
  eval         score a checkpoint on a test split in all three domains
  spectrum     export radial power curves for a checkpoint
  compare      merge eval reports from several run directories

Every run directory gets a manifest.json recording the resolved
configuration, expected artifacts, tool version, and a timestamp, written
before any long computation starts.  Exit codes: 0 success, 2 for usage or
configuration mistakes, 1 for failures at runtime (corrupt files, numeric
blowups, I/O errors mid-run).
"""

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, data, evaluation, training
from .data import DatasetSpec, ImageBatch
from .errors import ConfigError, FreqVaeError, UsageError
from .losses import LossConfig
from .models import UpsamplingMode

MANIFEST_NAME = "manifest.json"
LOSS_NAMES = {"vanilla": "vanilla_bce", "fft": "fft", "ai": "ai"}
MODE_NAMES = {"tconv": UpsamplingMode.TRANSPOSED_CONV, "n15": UpsamplingMode.N15}


def _widths_arg(text: str):
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated ints, got {text!r}")


def _ensure_out_dir(path_str: str) -> Path:
    """Create the output directory and prove it is writable up front."""
    path = Path(path_str)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to output directory {path}: {exc}")
    return path


def write_manifest(out_dir: Path, command: str, config: dict, artifacts) -> Path:
    payload = {
        "tool": "freqvae",
        "version": __version__,
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config,
        "artifacts": sorted(artifacts),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise UsageError(f"no {MANIFEST_NAME} in {run_dir}")
    return json.loads(path.read_text())


def _dataset_spec(args, split: str, seed_key: str = "data_seed") -> DatasetSpec:
    return DatasetSpec(name=args.dataset, split=split, root=args.data_root,
                       seed=getattr(args, seed_key, 0))


def cmd_gen_shapes(args) -> int:
    out = _ensure_out_dir(args.out)
    write_manifest(out, "gen-shapes", {"count": args.count, "seed": args.seed},
                   ["index.csv", "%06d.png x count"])
    batch = data.generate_shapes(args.count, args.seed)
    rows = []
    for i in range(len(batch)):
        name = f"{i:06d}.png"
        data.save_png(out / name, batch.data[i])
        rows.append((name, int(batch.labels[i])))
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("filename", "label"))
        w.writerows(rows)
    print(f"wrote {len(batch)} images to {out}")
    return 0


def _train_config(args) -> training.TrainConfig:
    loss = LossConfig(kind=LOSS_NAMES[args.loss], alpha=args.alpha,
                      beta=args.beta, ai_weight=args.ai_weight)
    return training.TrainConfig(
        dataset=_dataset_spec(args, "train"),
        loss=loss, mode=MODE_NAMES[args.upsample],
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        seed=args.seed, checkpoint_every=args.checkpoint_every,
        latent_dim=args.latent_dim, widths=args.widths,
        train_count=args.train_count)


def cmd_train(args) -> int:
    if args.from_manifest:
        cfg = training.config_from_dict(read_manifest_config(args.from_manifest))
    else:
        cfg = _train_config(args)
    if cfg.loss.kind == "fft" and cfg.loss.alpha == 1.0:
        print("warning: --loss fft with --alpha 1.0 keeps no spectral term; "
              "this is the plain spatial objective", file=sys.stderr)
    out = _ensure_out_dir(args.out)
    write_manifest(out, "train", training.config_to_dict(cfg),
                   ["checkpoint.fvae", "metrics.csv"])
    _, metrics = training.train(cfg, out_dir=out)
    last = metrics[-1]
    print(f"trained {cfg.epochs} epochs; final loss {last.loss_total:.6g}; "
          f"artifacts in {out}")
    return 0


def read_manifest_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"manifest not found: {p}")
    payload = json.loads(p.read_text())
    if payload.get("command") != "train" or "config" not in payload:
        raise UsageError(f"{p} is not a train manifest")
    return payload["config"]


def _load_checkpoint_arg(path_str: str) -> training.Checkpoint:
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return training.load_checkpoint(path)


def _eval_inputs(args):
    """Checkpoint plus a test batch it can actually consume."""
    ckpt = _load_checkpoint_arg(args.checkpoint)
    cfg = ckpt.config
    name = args.dataset or cfg.dataset.name
    spec = DatasetSpec(name=name, split="test", root=args.data_root,
                       seed=cfg.dataset.seed)
    if spec.resolution != cfg.dataset.resolution:
        raise UsageError(
            f"checkpoint was trained at {cfg.dataset.resolution}x"
            f"{cfg.dataset.resolution} but dataset {name} is "
            f"{spec.resolution}x{spec.resolution}")
    batch = data.load_dataset(spec, count=args.test_count)
    if args.test_count and len(batch) > args.test_count:
        labels = batch.labels[:args.test_count] if batch.labels is not None else None
        batch = ImageBatch(batch.data[:args.test_count], labels)
    if batch.data.shape[1] != cfg.channels():
        raise UsageError(
            f"checkpoint expects {cfg.channels()}-channel images, dataset "
            f"{name} has {batch.data.shape[1]}")
    params = training.restore_params(ckpt)
    return ckpt, spec, batch, params


def cmd_eval(args) -> int:
    ckpt, spec, batch, params = _eval_inputs(args)
    out = _ensure_out_dir(args.out)
    write_manifest(out, "eval",
                   {"checkpoint": str(args.checkpoint),
                    "dataset": {"name": spec.name, "resolution": spec.resolution,
                                "split": spec.split, "seed": spec.seed},
                    "n": len(batch),
                    "train_config": training.config_to_dict(ckpt.config)},
                   ["report.csv"])
    report = evaluation.evaluate(params, batch, ckpt.config)
    evaluation.export(report, out / "report.csv", "csv")
    for domain in evaluation.DOMAINS:
        mean, std = report.domain(domain)
        print(f"{report.label} {domain}: {mean:.6g} +- {std:.6g}")
    return 0


def cmd_spectrum(args) -> int:
    ckpt, spec, batch, params = _eval_inputs(args)
    out = _ensure_out_dir(args.out)
    write_manifest(out, "spectrum",
                   {"checkpoint": str(args.checkpoint),
                    "dataset": {"name": spec.name, "resolution": spec.resolution,
                                "split": spec.split, "seed": spec.seed},
                    "n": len(batch),
                    "train_config": training.config_to_dict(ckpt.config)},
                   ["curves.csv", "curves.svg"])
    curve = evaluation.spectrum_curves(params, batch)
    evaluation.export(curve, out / "curves.csv", "csv")
    evaluation.export(curve, out / "curves.svg", "svg")
    print(f"wrote {len(curve.real.bins)}-bin curves to {out}")
    return 0


def cmd_compare(args) -> int:
    if len(args.run_dir) < 2:
        raise UsageError("compare needs at least two --run-dir arguments")
    rows = []
    datasets = set()
    for run in args.run_dir:
        manifest = read_manifest(run)
        try:
            dataset = manifest["config"]["dataset"]["name"]
        except (KeyError, TypeError):
            raise UsageError(f"{run}/{MANIFEST_NAME} does not name a dataset")
        datasets.add(dataset)
        report_path = Path(run) / "report.csv"
        if not report_path.is_file():
            raise UsageError(f"no report.csv in {run}; run eval first")
        domains, meta = evaluation.read_report_csv(report_path)
        for domain, (mean, std) in domains.items():
            rows.append([dataset, meta["config"], domain, mean, std, meta["n"]])
    if len(datasets) > 1:
        raise UsageError(f"runs mix datasets {sorted(datasets)}; compare one at a time")
    rows.sort(key=lambda r: (r[0], r[2], r[3]))
    best = {}
    for row in rows:
        best.setdefault((row[0], row[2]), row[3])
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("dataset", "config", "domain", "mean", "std", "n", "best"))
        for dataset, config, domain, mean, std, n in rows:
            mark = "*" if best[(dataset, domain)] == mean else ""
            w.writerow((dataset, config, domain, repr(mean), repr(std), n, mark))
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _add_dataset_flags(sub, with_seed: bool = True):
    sub.add_argument("--dataset", choices=data.DATASET_NAMES, default=None)
    sub.add_argument("--data-root",
                     default=os.environ.get("FREQVAE_DATA_ROOT", "."),
                     help="dataset root directory (env FREQVAE_DATA_ROOT)")
    if with_seed:
        sub.add_argument("--data-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="freqvae",
        description="train and evaluate small VAEs under spatial and "
                    "spectral reconstruction objectives")
    parser.add_argument("--version", action="version",
                        version=f"freqvae {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    by_name = {}

    gen = subs.add_parser("gen-shapes", help="render shape images to PNG")
    gen.add_argument("--count", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_shapes)
    by_name["gen-shapes"] = gen

    tr = subs.add_parser("train", help="fit a VAE")
    _add_dataset_flags(tr)
    tr.set_defaults(dataset="shape")
    tr.add_argument("--loss", choices=sorted(LOSS_NAMES), default="vanilla")
    tr.add_argument("--upsample", choices=sorted(MODE_NAMES), default="tconv")
    tr.add_argument("--alpha", type=float, default=0.5)
    tr.add_argument("--beta", type=float, default=1.0)
    tr.add_argument("--ai-weight", type=float, default=1.0e4)
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--latent-dim", type=int, default=0,
                    help="0 picks the default for the resolution")
    tr.add_argument("--widths", type=_widths_arg, default=None,
                    help="encoder channel widths, e.g. 16,32,64,128")
    tr.add_argument("--train-count", type=int, default=0,
                    help="shape dataset size override, 0 for the default")
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.add_argument("--from-manifest", default=None,
                    help="re-run the exact configuration of an earlier manifest.json")
    tr.add_argument("--config", default=None,
                    help="key=value file supplying defaults; flags win")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)
    by_name["train"] = tr

    for name, func in (("eval", cmd_eval), ("spectrum", cmd_spectrum)):
        ev = subs.add_parser(name, help=f"{name} a checkpoint on a test split")
        ev.add_argument("--checkpoint", required=True)
        _add_dataset_flags(ev, with_seed=False)
        ev.add_argument("--test-count", type=int, default=256)
        ev.add_argument("--out", required=True)
        ev.set_defaults(func=func)
        by_name[name] = ev

    cm = subs.add_parser("compare", help="merge eval reports into one table")
    cm.add_argument("--run-dir", action="append", default=[],
                    help="eval output directory; pass two or more")
    cm.add_argument("--out", required=True, help="merged CSV path")
    cm.set_defaults(func=cmd_compare)
    by_name["compare"] = cm
    return parser, by_name


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config_file(path) -> dict:
    """key=value lines, # comments, keys spelled like the long flags."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    values = {}
    for ln, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = _coerce(val.strip())
    return values


def _apply_config_file(sub: argparse.ArgumentParser, path) -> None:
    values = load_config_file(path)
    dests = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise UsageError(f"unknown config keys {unknown} in {path}")
    if "widths" in values:
        values["widths"] = _widths_arg(str(values["widths"]))
    sub.set_defaults(**values)


def _exit_code(exc: SystemExit) -> int:
    if exc.code is None:
        return 0
    return exc.code if isinstance(exc.code, int) else 2


def main(argv=None) -> int:
    parser, by_name = build_parser()
    try:
        probe, _ = parser.parse_known_args(argv)
    except SystemExit as exc:
        return _exit_code(exc)
    try:
        if getattr(probe, "config", None):
            _apply_config_file(by_name[probe.command], probe.config)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return _exit_code(exc)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FreqVaeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
