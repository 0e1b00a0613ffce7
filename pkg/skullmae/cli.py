"""
Command-line interface
    python -m skullmae <synthesize|preprocess|train|infer|evaluate|ablation|gradcheck> [flags]

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from skullmae import config
from skullmae.errors import SkullMAEError, UsageError, VolumeIoError
from skullmae.schemas import CommandPlan, DatasetManifest, Subcommand, TrainConfig


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors surface as UsageError (exit 1)"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("common")
    group.add_argument("--config", type=Path, default=None,
                       help="JSON experiment config with sections synth/model/optim/data/metrics")
    group.add_argument("--seed", type=int, default=None, help="Base seed (unsigned 64-bit) for all randomness")
    group.add_argument("--jobs", type=int, default=None, help="Parallel workers for per-case synthesis/evaluation")
    group.add_argument("--out", type=Path, default=None, help="Output directory")
    group.add_argument("--quiet", action="store_true", help="Suppress progress bars and status lines")


def _add_data(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("data")
    group.add_argument("--phantoms", type=int, default=None, help="Number of training phantoms")
    group.add_argument("--held-out", type=int, default=None, help="Number of held-out phantoms")
    group.add_argument("--data", type=str, default=None, help="Directory of healthy skull volumes instead of phantoms")
    group.add_argument("--dims", type=int, nargs=3, default=None, metavar=("X", "Y", "Z"),
                       help="Phantom / normalized volume dims")


def _add_training(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int, default=None, help="Training epochs (>= 1)")
    group.add_argument("--batch-size", type=int, default=None, help="Cases per optimization step")
    group.add_argument("--checkpoint-every", type=int, default=None, help="Snapshot interval in epochs")
    group.add_argument("--dtype", choices=["float64", "float32"], default=None, help="Network precision")
    group.add_argument("--no-deform", action="store_true", help="Sharp-edged (ND) masking instead of deformable")
    group.add_argument("--nondeterministic", action="store_true",
                       help="Allow multithreaded kernels and prefetching (results may differ run to run)")


def _add_threshold(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threshold", type=float, default=None, help="Probability threshold for foreground")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skullmae", description="Skull shape completion with synthetic defects")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", required=True)

    p = sub.add_parser(Subcommand.SYNTHESIZE.value, help="Make (defective, defect) case pairs")
    p.add_argument("inputs", nargs="*", type=Path, help="Healthy skull volumes or directories (default: phantoms)")
    p.add_argument("--cases-per-skull", type=int, default=1, help="Defects drawn per skull")
    _add_common(p)
    _add_data(p)
    p.add_argument("--no-deform", action="store_true", help="Sharp-edged (ND) masking instead of deformable")

    p = sub.add_parser(Subcommand.PREPROCESS.value, help="Crop to the skull and resample")
    p.add_argument("inputs", nargs="+", type=Path, help="Volumes to normalize")
    p.add_argument("--dims", type=int, nargs=3, default=None, metavar=("X", "Y", "Z"), help="Target dims")
    p.add_argument("--margin", type=int, default=0, help="Voxels kept around the bounding box")
    _add_common(p)

    p = sub.add_parser(Subcommand.TRAIN.value, help="Train a model; writes checkpoint and train_log.jsonl")
    _add_common(p)
    _add_data(p)
    _add_training(p)

    p = sub.add_parser(Subcommand.INFER.value, help="Reconstruct defective skulls and extract the defect")
    p.add_argument("inputs", nargs="+", type=Path, help="Defective skull volumes")
    p.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint directory")
    p.add_argument("--transform", type=Path, default=None,
                   help="preproc.json; restores outputs to the original geometry")
    _add_threshold(p)
    _add_common(p)

    p = sub.add_parser(Subcommand.EVALUATE.value, help="Score predicted defects (JSONL + summary CSV)")
    p.add_argument("--pred", type=Path, nargs="+", default=None, help="Predicted defect volumes")
    p.add_argument("--gt", type=Path, nargs="+", default=None, help="Ground-truth defect volumes (same order)")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="Evaluate this model on held-out phantom cases instead of --pred/--gt")
    _add_threshold(p)
    _add_common(p)
    _add_data(p)

    p = sub.add_parser(Subcommand.ABLATION.value, help="Train D and ND models and compare them")
    p.add_argument("--repeats", type=int, default=1, help="Base seeds to average over (seed, seed+1, ...)")
    _add_threshold(p)
    _add_common(p)
    _add_data(p)
    _add_training(p)

    p = sub.add_parser(Subcommand.GRADCHECK.value, help="Finite-difference gradient checks")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64", help="Precision to check")
    _add_common(p)

    return parser


# =============================================================================
# Config resolution
# =============================================================================

def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """CLI flags > JSON config file > defaults"""
    raw = config.load_experiment_config(args.config)
    get = lambda name: getattr(args, name, None)

    flags: Dict[str, Any] = {
        "seed": get("seed"),
        "jobs": get("jobs"),
        "out_dir": str(args.out) if get("out") is not None else None,
        "epochs": get("epochs"),
        "batch_size": get("batch_size"),
        "checkpoint_every": get("checkpoint_every"),
        "threshold": get("threshold"),
        "data": {
            "phantoms": get("phantoms"),
            "held_out": get("held_out"),
            "path": get("data"),
            # preprocess --dims is a resampling target, not the phantom size
            "phantom": {"dims": get("dims") if args.command != Subcommand.PREPROCESS.value else None},
        },
        "model": {"dtype": get("dtype") if args.command != Subcommand.GRADCHECK.value else None},
        "synth": {"deform_enabled": False if get("no_deform") else None},
        "deterministic": False if get("nondeterministic") else None,
    }
    merged = config.merge_overrides(raw, flags)
    if "out_dir" not in merged:
        merged["out_dir"] = str(config.DEFAULT_OUTPUT_DIR / args.command)
    return TrainConfig.model_validate(merged)


def _check_inputs(paths: Sequence[Path]) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise UsageError(f"input path does not exist: {', '.join(missing)}")


def _expand_inputs(paths: Sequence[Path]) -> List[Path]:
    from skullmae.volume_io import find_volumes

    files: List[Path] = []
    for path in paths:
        files.extend(find_volumes(path, traverse_subfolders=True) if path.is_dir() else [path])
    return files


def _say(args: argparse.Namespace, message: str) -> None:
    if not args.quiet:
        print(f"[CLI] {message}")


# =============================================================================
# Subcommands
# =============================================================================

def cmd_synthesize(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.phantoms import TRAIN_STREAM, generate_phantoms, write_phantom_dataset
    from skullmae.synthesis import synthesize_case, write_case
    from skullmae.trainer import case_seed
    from skullmae.volume_io import read_volume

    out = Path(cfg.out_dir)
    if args.cases_per_skull < 1:
        raise UsageError("--cases-per-skull must be >= 1")

    if args.inputs:
        paths = _expand_inputs(args.inputs)
        skulls = [read_volume(p) for p in paths]
        skull_names = [str(p) for p in paths]
        kind = "volumes"
    else:
        skulls = generate_phantoms(cfg.data.phantom, cfg.data.phantoms, cfg.seed, TRAIN_STREAM)
        skull_names = write_phantom_dataset(out / "skulls", skulls, cfg.data.phantom, cfg.seed).skulls
        kind = "phantoms"

    jobs = [(i, case_seed(cfg.seed, k, i)) for k in range(args.cases_per_skull) for i in range(len(skulls))]

    def run_one(job):
        index, seed = job
        try:
            return synthesize_case(skulls[index], cfg.synth, seed), None
        except SkullMAEError as e:
            return None, f"skull {skull_names[index]} seed {seed}: {type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(pool.map(run_one, jobs))

    cases_dir = out / "cases"
    names, failures = [], []
    for pair, error in results:
        if error is not None:
            failures.append(error)
            print(f"[CLI] warning: {error}", file=sys.stderr)
            continue
        write_case(pair, cases_dir)
        names.append(f"case_{pair.seed}")

    manifest = DatasetManifest(kind=kind, count=len(names), base_seed=cfg.seed,
                               phantom=cfg.data.phantom if kind == "phantoms" else None,
                               synth_config_hash=cfg.synth.config_hash(),
                               skulls=skull_names, cases=names, failures=failures)
    cases_dir.mkdir(parents=True, exist_ok=True)
    try:
        with open(cases_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise VolumeIoError(f"Cannot write case manifest in {cases_dir}: {e}")

    _say(args, f"{len(names)} cases written to {cases_dir} ({len(failures)} failed)")
    return 2 if failures else 0


def cmd_preprocess(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.preprocess import normalize, save_transform
    from skullmae.volume_io import read_volume, write_volume

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dims = tuple(args.dims) if args.dims else cfg.data.phantom.dims
    if args.margin < 0:
        raise UsageError("--margin must be >= 0")
    if min(dims) < 1:
        raise UsageError("--dims must be three positive ints")

    for path in _expand_inputs(args.inputs):
        normalized, transform = normalize(read_volume(path), dims, args.margin)
        stem = path.name.split(".")[0]
        write_volume(normalized, out / f"{stem}.mha")
        save_transform(transform, out / f"{stem}_{config.TRANSFORM_FILENAME}")
        _say(args, f"{path} -> {out / (stem + '.mha')} {normalized.dims}")
    return 0


def cmd_train(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.trainer import TrainingManager

    result = TrainingManager(cfg, quiet=args.quiet).train()
    _say(args, f"checkpoint {result.checkpoint_dir}, final loss {result.log[-1].mean_loss:.6f}")
    return 0


def cmd_infer(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.model_loader import load_checkpoint
    from skullmae.morphology import extract_defect
    from skullmae.preprocess import load_transform, restore
    from skullmae.trainer import infer
    from skullmae.volume_io import read_volume, write_volume

    _check_inputs([args.checkpoint] + ([args.transform] if args.transform else []))
    model = load_checkpoint(args.checkpoint)["model"]
    transform = load_transform(args.transform) if args.transform else None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    for path in _expand_inputs(args.inputs):
        defective = read_volume(path)
        reconstruction = infer(model, defective, cfg.threshold)
        defect = extract_defect(reconstruction, defective, cfg.metrics.min_component_vox, cfg.metrics.open_radius)
        if transform is not None:
            reconstruction = restore(reconstruction, transform)
            defect = restore(defect, transform)
        stem = path.name.split(".")[0]
        write_volume(reconstruction, out / f"{stem}_reconstruction.mha")
        write_volume(defect, out / f"{stem}_defect.mha")
        _say(args, f"{path} -> {out / (stem + '_reconstruction.mha')}")
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.metrics import evaluate_case, summarize, write_reports

    if args.checkpoint is not None:
        from skullmae.model_loader import load_checkpoint
        from skullmae.trainer import build_test_cases, evaluate_model, load_skulls

        _check_inputs([args.checkpoint])
        model = load_checkpoint(args.checkpoint)["model"]
        _, held_out = load_skulls(cfg)
        cases = build_test_cases(held_out, cfg.synth, cfg.seed, cfg.jobs)
        reports = evaluate_model(model, cases, cfg.metrics, cfg.threshold, cfg.jobs, args.quiet)
    else:
        from skullmae.volume_io import read_volume

        if not args.pred or not args.gt:
            raise UsageError("evaluate needs --pred and --gt, or --checkpoint")
        if len(args.pred) != len(args.gt):
            raise UsageError(f"{len(args.pred)} --pred files but {len(args.gt)} --gt files")
        _check_inputs(list(args.pred) + list(args.gt))
        reports = [
            evaluate_case(read_volume(pred), read_volume(gt), case_id=pred.name.split(".")[0],
                          width_mm=cfg.metrics.bdsc_width_mm)
            for pred, gt in zip(args.pred, args.gt)
        ]

    paths = write_reports(reports, Path(cfg.out_dir))
    row = summarize(reports)
    _say(args, f"{row.n_cases} cases: DSC mean {row.dsc_mean}, BDSC mean {row.bdsc_mean}, "
               f"HD95 mean {row.hd95_mean} -> {paths[1]}")
    return 0


def cmd_ablation(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.trainer import ablation

    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    ablation(cfg, args.repeats, quiet=args.quiet)
    _say(args, f"comparison written to {Path(cfg.out_dir) / config.ABLATION_FILENAME}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: TrainConfig) -> int:
    from skullmae.gradcheck import check_or_raise, run_gradcheck
    from skullmae.network import set_deterministic

    set_deterministic(True)
    report = run_gradcheck(args.dtype, seed=args.seed or 0, quiet=args.quiet)
    # Printed even with --quiet: it is the command's result
    print(f"max relative error {report.max_rel_error:.3e}")
    check_or_raise(report)
    return 0


HANDLERS = {
    Subcommand.SYNTHESIZE: cmd_synthesize,
    Subcommand.PREPROCESS: cmd_preprocess,
    Subcommand.TRAIN: cmd_train,
    Subcommand.INFER: cmd_infer,
    Subcommand.EVALUATE: cmd_evaluate,
    Subcommand.ABLATION: cmd_ablation,
    Subcommand.GRADCHECK: cmd_gradcheck,
}


def _one_line(message: str) -> str:
    return " ".join(str(message).split())


def _validation_message(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "config"
    return f"{location}: {first['msg']}"


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        subcommand = Subcommand(args.command)
        cfg = resolve_config(args)
        inputs = [str(p) for p in (getattr(args, "inputs", None) or [])]
        _check_inputs(inputs)
        plan = CommandPlan(subcommand=subcommand, config=cfg.model_dump(mode="json"),
                           inputs=inputs, out_dir=cfg.out_dir)
        _say(args, f"{plan.subcommand.value} -> {plan.out_dir} (config {cfg.config_hash()})")
        return HANDLERS[subcommand](args, cfg)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else (0 if e.code is None else 1)
    except ValidationError as e:
        print(f"[CLI] error: ConfigError: {_one_line(_validation_message(e))}", file=sys.stderr)
        return UsageError.exit_code
    except SkullMAEError as e:
        print(f"[CLI] error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"[CLI] error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return VolumeIoError.exit_code


def main() -> None:
    sys.exit(run(sys.argv[1:]))
