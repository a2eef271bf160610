"""Command-line entry point.

Commands: synth, prepare, train, evaluate, ablate, ncc, export. Settings
resolve as flags > config file > defaults; every run writes a manifest
(resolved config, seeds, versions) next to its reports.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical
failure. ``--threads`` is applied to the BLAS thread pools before any
numeric import; the default of 1 keeps runs deterministic.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericalError


def _configure_threads(argv) -> None:
    threads = 1
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            candidate = argv[i + 1]
        elif arg.startswith("--threads="):
            candidate = arg.partition("=")[2]
        else:
            continue
        try:
            threads = max(1, int(candidate))
        except ValueError:
            pass
    if "numpy" not in sys.modules:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--out", default="out", help="output directory (default: out)")
    sub.add_argument("--data", help="dataset directory (overrides config)")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--mode", help="single fusion mode")
    sub.add_argument("--modes", help="comma-separated fusion modes")
    sub.add_argument("--pairing", help="sets both train and eval pairing policy")
    sub.add_argument("--threads", type=int, default=1)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--splits", type=int)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgaf",
        description="Multistage gated average fusion pipeline for multimodal classification.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset on disk")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--classes", type=int, default=4)
    synth.add_argument("--instances", type=int, default=12, help="instances per class")
    synth.add_argument("--noise", type=float, default=0.8)
    synth.add_argument("--frames", type=int, default=6)
    synth.add_argument("--out", default="out")
    synth.add_argument("--threads", type=int, default=1)

    prepare = commands.add_parser("prepare", help="render images and report counts")
    _add_common(prepare)
    prepare.add_argument("--dump-images", type=int, default=0,
                         help="write the first N images per modality as PGM")

    for name, text in (
        ("train", "train per-modality CNNs on the full dataset"),
        ("evaluate", "run the split/train/fuse/classify experiment"),
        ("ablate", "evaluate several fusion modes in one run"),
        ("ncc", "cross-modality correlation per conv stage"),
        ("export", "dump the fused multimodal features as CSV"),
    ):
        _add_common(commands.add_parser(name, help=text))
    return parser


def _resolved_config(args):
    from .pipeline import config_from_mapping, read_config_file

    mapping = dict(read_config_file(args.config)) if args.config else {}
    if args.data:
        mapping["data"] = args.data
    if args.seed is not None:
        mapping["seed"] = args.seed
    if args.epochs is not None:
        mapping["epochs"] = args.epochs
    if args.splits is not None:
        mapping["splits"] = args.splits
    if args.threads is not None:
        mapping["threads"] = args.threads
    if args.pairing:
        mapping["pairing_train"] = args.pairing
        mapping["pairing_eval"] = args.pairing
    if args.modes:
        mapping["modes"] = args.modes
    elif args.mode:
        mapping["modes"] = args.mode
    elif args.command == "ablate" and "modes" not in mapping:
        mapping["modes"] = "gated_average,average,gated_no_kernel,concat"
    return config_from_mapping(mapping)


def _write_manifest(out_dir: Path, command: str, argv, config_lines) -> None:
    import numpy

    from . import __version__

    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command={command}",
        "argv=" + " ".join(argv),
        f"mgaf_version={__version__}",
        f"numpy_version={numpy.__version__}",
        f"python_version={sys.version.split()[0]}",
    ]
    lines.extend(config_lines)
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_synth(args, argv) -> int:
    from .ingest import save_instances, synth_generate

    out_dir = Path(args.out)
    instances = synth_generate(args.seed, args.classes, args.instances,
                               args.noise, n_frames=args.frames)
    save_instances(instances, out_dir)
    _write_manifest(out_dir, "synth", argv, [
        f"seed={args.seed}", f"classes={args.classes}",
        f"instances={args.instances}", f"noise={args.noise}",
        f"frames={args.frames}",
    ])
    print(f"wrote {len(instances)} instances to {out_dir}")
    return 0


def _cmd_prepare(args, argv) -> int:
    from .imaging import write_pgm
    from .pipeline import load_or_synthesize, prepare_instances

    config = _resolved_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare_instances(load_or_synthesize(config), config)
    lines = ["modality,images"]
    for modality in config.modalities:
        count = sum(len(p.images[modality]) for p in prepared)
        lines.append(f"{modality},{count}")
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.dump_images > 0:
        pgm_dir = out_dir / "pgm"
        pgm_dir.mkdir(exist_ok=True)
        for modality in config.modalities:
            written = 0
            for p in prepared:
                for j, img in enumerate(p.images[modality]):
                    if written >= args.dump_images:
                        break
                    write_pgm(img, pgm_dir / f"{modality}_{p.index:04d}_{j:02d}.pgm")
                    written += 1
                if written >= args.dump_images:
                    break
    _write_manifest(out_dir, "prepare", argv, config.to_lines())
    print(f"prepared {len(prepared)} instances; summary in {out_dir / 'summary.csv'}")
    return 0


def _cmd_train(args, argv) -> int:
    from . import cnn
    from .pipeline import (derive_seed, load_or_synthesize, prepare_instances,
                           train_modality_cnn)

    config = _resolved_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    instances = load_or_synthesize(config)
    n_classes = 1 + max(inst.label for inst in instances)
    prepared = prepare_instances(instances, config)
    all_idx = range(len(prepared))
    for mi, modality in enumerate(config.modalities):
        model = train_modality_cnn(prepared, all_idx, modality, config, n_classes,
                                   model_seed=derive_seed(config.seed, 23, 0, mi))
        path = out_dir / f"cnn_{modality}.bin"
        cnn.save_model(model, path)
        print(f"trained {modality} ({model.n_parameters()} parameters) -> {path}")
    _write_manifest(out_dir, "train", argv, config.to_lines())
    return 0


def _cmd_evaluate(args, argv) -> int:
    from .pipeline import run_experiment

    config = _resolved_config(args)
    out_dir = Path(args.out)
    report = run_experiment(config)
    report.write(out_dir)
    _write_manifest(out_dir, args.command, argv, config.to_lines())
    for mode in config.modes:
        print(f"{mode}: mean accuracy {report.mean_accuracy(mode):.4f} "
              f"over {config.splits} split(s)")
    return 0


def _cmd_ncc(args, argv) -> int:
    from .diagnostics import ncc_table, write_ncc_csv
    from .pipeline import build_full_features

    config = _resolved_config(args)
    if len(config.modalities) < 2:
        raise ConfigError("ncc needs at least two modalities")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, acts, _, _ = build_full_features(config)
    first, second = config.modalities[:2]
    rows = ncc_table(acts[first], acts[second])
    write_ncc_csv(rows, out_dir / "ncc.csv")
    _write_manifest(out_dir, "ncc", argv, config.to_lines())
    for stage, value in rows:
        print(f"{stage}: ncc {value:+.6f}")
    return 0


def _cmd_export(args, argv) -> int:
    from .diagnostics import export_features
    from .pipeline import build_full_features

    config = _resolved_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, _, features, labels = build_full_features(config)
    export_features(features, labels, out_dir / "features.csv")
    _write_manifest(out_dir, "export", argv, config.to_lines())
    print(f"exported {features.rows} x {features.cols} features to "
          f"{out_dir / 'features.csv'}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_evaluate,
    "ncc": _cmd_ncc,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_threads(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args, argv)
    except (DataError, ConfigError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
