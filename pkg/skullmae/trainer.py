"""
Training manager for self-supervised skull completion
Every epoch draws a fresh synthetic defect for every healthy skull; the
network learns to reconstruct the full skull from the defective one.
"""

import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from skullmae import config
from skullmae.errors import DataError, NonFiniteGradient
from skullmae.metrics import evaluate_case, failed_report, summarize, write_reports, write_summary_csv
from skullmae.model_loader import save_checkpoint
from skullmae.morphology import extract_defect
from skullmae.network import (
    ResidualUNet3D, adamw_step, build_model, build_optimizer, build_scheduler, forward, lr_at_epoch,
    set_deterministic, soft_dice_loss, to_tensor,
)
from skullmae.phantoms import HELD_OUT_STREAM, TEST_CASE_STREAM, TRAIN_STREAM, generate_phantoms
from skullmae.preprocess import normalize
from skullmae.resource_monitor import ResourceMonitor
from skullmae.schemas import MetricsConfig, MetricsReport, SummaryRow, SynthConfig, TrainConfig, TrainLogEntry
from skullmae.synthesis import CasePair, derive_seed, make_rng, synthesize_cases
from skullmae.volume import VoxelGrid
from skullmae.volume_io import find_volumes, read_volume

# Seed streams under the base seed (phantom streams live in phantoms.py)
MODEL_INIT_STREAM = 11
ORDER_STREAM = 12


def case_seed(base_seed: int, epoch: int, case_index: int) -> int:
    """Seed of the defect drawn for skull case_index in epoch (0-based)"""
    return derive_seed(base_seed, epoch, case_index)


# =============================================================================
# Data
# =============================================================================

def load_skulls(cfg: TrainConfig) -> Tuple[List[VoxelGrid], List[VoxelGrid]]:
    """
    Training and held-out skulls.

    Phantoms come from separate seed streams. A volume directory is
    normalized to data.phantom.dims and its last data.held_out volumes
    (sorted by path) are held out.
    """
    data = cfg.data
    if data.path is None:
        train = generate_phantoms(data.phantom, data.phantoms, cfg.seed, TRAIN_STREAM)
        held_out = generate_phantoms(data.phantom, data.held_out, cfg.seed, HELD_OUT_STREAM)
        return train, held_out

    paths = find_volumes(Path(data.path), traverse_subfolders=True)
    if not paths:
        raise DataError(f"No volumes found in {data.path}")
    skulls = [normalize(read_volume(p), data.phantom.dims)[0] for p in paths]
    if len(skulls) <= data.held_out:
        print(f"[Trainer] Only {len(skulls)} volumes in {data.path}; nothing held out")
        return skulls, []
    return skulls[:-data.held_out], skulls[-data.held_out:]


def build_test_cases(skulls: Sequence[VoxelGrid], synth: SynthConfig, base_seed: int,
                     jobs: int = 1, deform: bool = True) -> List[CasePair]:
    """
    Held-out evaluation cases. Deformable (smooth-boundary) defects unless
    deform is False; both settings draw the same patches for a base seed.
    """
    synth = synth.model_copy(update={"deform_enabled": deform})
    seeds = [derive_seed(base_seed, TEST_CASE_STREAM, j) for j in range(len(skulls))]
    return synthesize_cases(skulls, synth, seeds, jobs)


def prefetch(items: Iterable, size: int = config.PREFETCH_QUEUE_SIZE) -> Iterator:
    """
    Produce items on a background thread through a bounded queue.

    Exceptions raised by the producer are re-raised in the consumer.
    """
    buffer: "queue.Queue" = queue.Queue(maxsize=size)
    done = object()
    stop = threading.Event()

    def producer():
        try:
            for item in items:
                if stop.is_set():
                    return
                buffer.put(item)
            buffer.put(done)
        except BaseException as e:
            buffer.put(e)

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        # Unblock a producer waiting on a full queue
        while thread.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)


# =============================================================================
# Training
# =============================================================================

@dataclass
class TrainingState:
    """Mutable state for tracking training progress"""
    stage: str = "idle"
    epoch: int = 0
    total_epochs: int = 0
    step: int = 0
    last_loss: Optional[float] = None
    start_time: float = 0.0
    error_message: Optional[str] = None
    history: List[TrainLogEntry] = field(default_factory=list)

    @property
    def elapsed(self) -> float:
        return time.time() - self.start_time if self.start_time > 0 else 0.0


@dataclass
class TrainResult:
    model: ResidualUNet3D
    optimizer: torch.optim.Optimizer
    log: List[TrainLogEntry]
    checkpoint_dir: Path


class TrainingManager:
    """
    Runs the training loop for one TrainConfig.
    """

    def __init__(self, cfg: TrainConfig, quiet: bool = False):
        self.cfg = cfg
        self.quiet = quiet
        self.state = TrainingState()
        self.monitor = ResourceMonitor()
        self.should_stop = False

    def _log(self, message: str) -> None:
        if not self.quiet:
            tqdm.write(f"[Trainer] {message}")

    def _epoch_batches(self, skulls: Sequence[VoxelGrid], epoch: int) -> Iterator[List[CasePair]]:
        cfg = self.cfg
        order = make_rng(cfg.seed, ORDER_STREAM, epoch).permutation(len(skulls))
        for start in range(0, len(order), cfg.batch_size):
            indices = [int(i) for i in order[start:start + cfg.batch_size]]
            seeds = [case_seed(cfg.seed, epoch, i) for i in indices]
            yield synthesize_cases([skulls[i] for i in indices], cfg.synth, seeds, cfg.jobs)

    def train(self, skulls: Optional[Sequence[VoxelGrid]] = None) -> TrainResult:
        """
        Train from scratch; writes train_log.jsonl and checkpoints under cfg.out_dir.

        Raises:
            NonFiniteGradient: with the epoch and step where training diverged
        """
        cfg = self.cfg
        if skulls is None:
            skulls, _ = load_skulls(cfg)
        if not skulls:
            raise DataError("Training needs at least one healthy skull")

        set_deterministic(cfg.deterministic)
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / config.TRAIN_LOG_FILENAME
        log_path.write_text("", encoding="utf-8")

        config_hash = cfg.config_hash()
        model = build_model(cfg.model, derive_seed(cfg.seed, MODEL_INIT_STREAM))
        optimizer = build_optimizer(model, cfg.optim)
        scheduler = build_scheduler(optimizer, cfg.optim.gamma)
        dtype = next(model.parameters()).dtype

        self.state = TrainingState(stage="training", total_epochs=cfg.epochs, start_time=time.time())
        self._log(f"{len(skulls)} skulls, {cfg.epochs} epochs, config {config_hash}")
        self._log(self.monitor.describe())

        final_dir = out_dir / config.FINAL_CHECKPOINT_DIRNAME
        progress = tqdm(range(cfg.epochs), desc="Training", unit="epoch", disable=self.quiet)
        for epoch in progress:
            if self.should_stop:
                break
            epoch_start = time.time()
            lr = lr_at_epoch(epoch, cfg.optim.lr, cfg.optim.gamma)
            losses = []

            batches = self._epoch_batches(skulls, epoch)
            if not cfg.deterministic:
                batches = prefetch(batches)
            for cases in batches:
                x = to_tensor([c.defective for c in cases], dtype)
                target = to_tensor([c.skull for c in cases], dtype)

                optimizer.zero_grad()
                loss = soft_dice_loss(forward(model, x), target)
                loss.backward()
                try:
                    adamw_step(model, optimizer)
                except NonFiniteGradient as e:
                    self.state.stage = "error"
                    self.state.error_message = str(e)
                    raise NonFiniteGradient(f"epoch {epoch + 1}, step {self.state.step + 1}: {e}") from e
                self.state.step += 1
                losses.append(float(loss.detach()))

            scheduler.step()
            entry = TrainLogEntry(
                epoch=epoch + 1,
                mean_loss=float(np.mean(losses)),
                lr=lr,
                wall_ms=(time.time() - epoch_start) * 1000.0,
            )
            self.state.epoch = epoch + 1
            self.state.last_loss = entry.mean_loss
            self.state.history.append(entry)
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(entry.model_dump_json() + "\n")
            progress.set_postfix(loss=f"{entry.mean_loss:.4f}", lr=f"{lr:.2e}")

            if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                snapshot = out_dir / config.EPOCH_CHECKPOINTS_DIRNAME / f"epoch_{epoch + 1:04d}"
                save_checkpoint(snapshot, model, optimizer, cfg.optim, epoch + 1, cfg.seed, config_hash)
                self._log(f"epoch {epoch + 1}/{cfg.epochs} checkpoint {snapshot} | {self.monitor.describe()}")

        save_checkpoint(final_dir, model, optimizer, cfg.optim, self.state.epoch, cfg.seed, config_hash)
        self.state.stage = "complete"
        self._log(f"Done in {self.state.elapsed:.1f}s after {self.state.epoch} epochs, "
                  f"final loss {self.state.last_loss}, checkpoint {final_dir}")
        self._log(self.monitor.describe())
        return TrainResult(model, optimizer, list(self.state.history), final_dir)

    def stop(self):
        """Request training to stop after the current epoch"""
        self.should_stop = True


def train(cfg: TrainConfig, skulls: Optional[Sequence[VoxelGrid]] = None, quiet: bool = False) -> TrainResult:
    return TrainingManager(cfg, quiet=quiet).train(skulls)


# =============================================================================
# Inference and evaluation
# =============================================================================

def infer(model: ResidualUNet3D, defective: VoxelGrid, threshold: float = config.THRESHOLD) -> VoxelGrid:
    """Binarized reconstruction with the input's geometry"""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        probabilities = forward(model, to_tensor([defective], dtype))
    return defective.with_data(probabilities[0, 0].cpu().numpy() >= threshold)


def case_id(case: CasePair) -> str:
    return f"case_{case.seed}"


def evaluate_reconstructions(cases: Sequence[CasePair], reconstructions: Sequence[VoxelGrid],
                             metrics_cfg: MetricsConfig, jobs: int = 1) -> List[MetricsReport]:
    """
    Extract defects from reconstructions and score them against each case's ground truth.

    A failing case yields a report row with `error` set.
    """
    if len(cases) != len(reconstructions):
        raise DataError(f"{len(cases)} cases but {len(reconstructions)} reconstructions")

    def evaluate_one(pair: Tuple[CasePair, VoxelGrid]) -> MetricsReport:
        case, reconstruction = pair
        try:
            predicted = extract_defect(reconstruction, case.defective,
                                       metrics_cfg.min_component_vox, metrics_cfg.open_radius)
            return evaluate_case(predicted, case.defect_gt, case_id(case), case.seed,
                                 case.config_hash, metrics_cfg.bdsc_width_mm)
        except Exception as e:
            return failed_report(case_id(case), e, case.seed, case.config_hash)

    pairs = list(zip(cases, reconstructions))
    if jobs <= 1:
        return [evaluate_one(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(evaluate_one, pairs))


def evaluate_model(model: ResidualUNet3D, cases: Sequence[CasePair], metrics_cfg: MetricsConfig,
                   threshold: float = config.THRESHOLD, jobs: int = 1,
                   quiet: bool = False) -> List[MetricsReport]:
    if not cases:
        raise DataError("evaluate_model needs at least one case")
    reconstructions = [infer(model, c.defective, threshold)
                       for c in tqdm(cases, desc="Inference", unit="case", disable=quiet)]
    return evaluate_reconstructions(cases, reconstructions, metrics_cfg, jobs)


# =============================================================================
# Ablation
# =============================================================================

ABLATION_MODES = (("D", True), ("ND", False))
# Held-out test sets: label suffix and whether their defects are deformable
TEST_CONDITIONS = (("", True), ("/sharp", False))


def ablation(cfg: TrainConfig, repeats: int = 1, quiet: bool = False) -> List[SummaryRow]:
    """
    Train deformable (D) and sharp-edged (ND) models for each base seed
    cfg.seed, cfg.seed + 1, ... and score both on the same held-out cases,
    once with deformable defects and once with sharp-edged ones.

    Writes per-run metrics under out_dir/seed_<s>/<mode>/ (sharp test set in
    its sharp/ subdirectory) and ablation.csv with rows D, ND, D/sharp, ND/sharp.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    out_dir = Path(cfg.out_dir)
    pooled = {mode + suffix: [] for suffix, _ in TEST_CONDITIONS for mode, _ in ABLATION_MODES}

    for r in range(repeats):
        seed = cfg.seed + r
        seed_cfg = cfg.model_copy(update={"seed": seed})
        train_skulls, held_out = load_skulls(seed_cfg)
        if not held_out:
            raise DataError("ablation needs held-out skulls")
        test_sets = {suffix: build_test_cases(held_out, cfg.synth, seed, cfg.jobs, deform=test_deform)
                     for suffix, test_deform in TEST_CONDITIONS}

        for mode, deform in ABLATION_MODES:
            run_dir = out_dir / f"seed_{seed}" / mode
            run_cfg = seed_cfg.model_copy(update={
                "synth": cfg.synth.model_copy(update={"deform_enabled": deform}),
                "out_dir": str(run_dir),
            })
            if not quiet:
                print(f"[Ablation] seed {seed} ({r + 1}/{repeats}), mode {mode}")
            result = train(run_cfg, train_skulls, quiet=quiet)
            for suffix, _ in TEST_CONDITIONS:
                label = mode + suffix
                reports = evaluate_model(result.model, test_sets[suffix], cfg.metrics, cfg.threshold,
                                         cfg.jobs, quiet)
                write_reports(reports, run_dir / suffix.lstrip("/"), label=label)
                pooled[label].extend(reports)

    rows = [summarize(reports, label=label) for label, reports in pooled.items()]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_csv(rows, out_dir / config.ABLATION_FILENAME)
    if not quiet:
        for row in rows:
            print(f"[Ablation] {row.label}: DSC mean {row.dsc_mean}, BDSC mean {row.bdsc_mean}, "
                  f"HD95 mean {row.hd95_mean}")
    return rows
