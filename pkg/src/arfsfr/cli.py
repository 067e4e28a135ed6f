"""Command-line entry point: ``arfsfr <subcommand> ...`` (or ``python3 -m arfsfr``).

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import collections
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig, load_config
from .episodes import generate_synthetic_dataset, load_dataset, save_dataset, split_classes
from .errors import ArfError, ConfigurationError
from .gradcheck import MODULES, format_table, run_suite
from .io import load_tensor, save_tensor
from .model import FewShotModel
from .tensor import no_grad
from .trainer import (Checkpoint, Ensemble, OraclePredictor, evaluate, format_result,
                      model_from_checkpoint, train)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arfsfr", description="Adaptive receptive field spatial-frequency few-shot classifier.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write the synthetic dataset to a directory")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="episodic training; writes checkpoints and train.log")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="test-split accuracy as 'mean ± ci95'")
    p.add_argument("--config", required=True, help="run configuration file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="checkpoint file")
    group.add_argument("--oracle", action="store_true", help="evaluate the always-correct reference predictor")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split to evaluate (default: test)")

    p = sub.add_parser("ensemble-eval", help="accuracy of averaged snapshot probabilities")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint files")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split to evaluate (default: test)")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--module", choices=MODULES, help="restrict to one module")

    p = sub.add_parser("export-maps", help="write fusion weights and the frequency-branch input for one sample")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--sample", required=True, help="ARFT image file [C, H, W]")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("show-rf", help="modal discrete kernel size per ARF layer and branch")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val", help="split to probe (default: val)")
    return parser


def _split(splits: dict, name: str):
    if name not in splits:
        raise UsageError(f"dataset has no {name!r} split (has: {', '.join(sorted(splits))})")
    return splits[name]


def _model(run: RunConfig, path: str) -> FewShotModel:
    return model_from_checkpoint(Checkpoint.load(path), run.model)


def cmd_gen_data(args, out) -> int:
    run = load_config(args.config)
    data = run.data
    dataset = generate_synthetic_dataset(data.synthetic_spec(), data.seed)
    splits = split_classes(dataset, data.train_classes, data.val_classes, data.test_classes)
    save_dataset(splits, args.out)
    counts = ", ".join(f"{name} {ds.num_classes} classes" for name, ds in splits.items())
    print(f"wrote {len(dataset)} samples ({counts}) to {args.out}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    run = load_config(args.config)
    splits = load_dataset(args.data)
    _split(splits, "train")
    model = FewShotModel(run.model, seed=run.model_seed)
    directory = Path(args.out)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "train.log", "w", encoding="utf-8", newline="\n") as log_file:
        checkpoints, log = train(model, splits, run.train, log_file=log_file)
    if run.train.snapshots > 1:
        names = [f"snapshot{i + 1}.arfc" for i in range(len(checkpoints))]
    else:
        names = ["best.arfc"]
    for name, ckpt in zip(names, checkpoints):
        ckpt.save(directory / name)
        print(f"saved {directory / name} (epoch {ckpt.epoch})", file=out)
    for epoch, mean, ci in log.validation:
        print(f"val epoch {epoch}: {format_result(mean, ci)}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    run = load_config(args.config)
    dataset = _split(load_dataset(args.data), args.split)
    predictor = OraclePredictor() if args.oracle else _model(run, args.checkpoint)
    print(format_result(*evaluate(predictor, dataset, run.eval)), file=out)
    return EXIT_OK


def cmd_ensemble_eval(args, out) -> int:
    run = load_config(args.config)
    paths = [p for p in args.checkpoints.split(",") if p]
    if not paths:
        raise UsageError("--checkpoints needs at least one path")
    checkpoints = [Checkpoint.load(p) for p in paths]
    if len({c.config_hash for c in checkpoints}) > 1:
        raise ConfigurationError("checkpoints were written for different architecture configurations")
    ensemble = Ensemble([model_from_checkpoint(c, run.model) for c in checkpoints])
    dataset = _split(load_dataset(args.data), args.split)
    print(format_result(*evaluate(ensemble, dataset, run.eval)), file=out)
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    results = run_suite(args.module)
    print(format_table(results), file=out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_export_maps(args, out) -> int:
    run = load_config(args.config)
    model = _model(run, args.checkpoint)
    image = load_tensor(args.sample)
    if model.encoder.fusion is None:
        raise UsageError("export-maps needs a two-branch model (branch_mode = both)")
    with no_grad():
        _, maps = model.encoder.forward(image, training=False, return_maps=True)
    directory = Path(args.out)
    directory.mkdir(parents=True, exist_ok=True)
    for key, filename in (("w_s", "W_s.arft"), ("w_f", "W_f.arft"), ("omega_f", "Omega_f.arft")):
        arr = maps[key].data
        save_tensor(directory / filename, np.ascontiguousarray(arr.reshape(arr.shape[1:])))
        print(f"wrote {directory / filename} {list(arr.shape[1:])}", file=out)
    return EXIT_OK


def receptive_field_report(model: FewShotModel, images: np.ndarray, batch_size: int = 64) -> List[tuple]:
    """``(layer, branch, (N_u, N_v), share)`` with the modal discrete size of each ARF layer."""
    counts = collections.defaultdict(collections.Counter)
    with no_grad():
        for start in range(0, len(images), batch_size):
            probe = {}
            model.features(images[start:start + batch_size], training=False, probe=probe)
            for name, (n_u, n_v, _, _) in probe.items():
                counts[name].update(zip(n_u.tolist(), n_v.tolist()))
    rows = []
    for name in sorted(counts):
        (size, hits), = counts[name].most_common(1)
        branch = name.split(".")[1]
        rows.append((name, branch, size, hits / sum(counts[name].values())))
    return rows


def cmd_show_rf(args, out) -> int:
    run = load_config(args.config)
    model = _model(run, args.checkpoint)
    images, _, _ = _split(load_dataset(args.data), args.split).stacked()
    rows = receptive_field_report(model, images)
    if not rows:
        print("model has no ARF layers", file=out)
        return EXIT_OK
    print(f"{'layer':<28}{'branch':<11}{'N_u x N_v':<11}share", file=out)
    for name, branch, (nu, nv), share in rows:
        print(f"{name:<28}{branch:<11}{f'{nu} x {nv}':<11}{100 * share:.1f}%", file=out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble-eval": cmd_ensemble_eval,
    "gradcheck": cmd_gradcheck,
    "export-maps": cmd_export_maps,
    "show-rf": cmd_show_rf,
}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args, out)
    except (UsageError, ConfigurationError) as exc:
        print(f"arfsfr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArfError, OSError, KeyError) as exc:
        print(f"arfsfr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
