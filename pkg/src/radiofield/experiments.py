"""Helpers shared by the experiment scripts and the end-to-end tests.

Everything here is a thin layer over :class:`~radiofield.trainer.Trainer`:
build a dataset and a trainer from a :class:`~radiofield.config.RunConfig`,
then train while tracking a smoothed validation curve.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

from .config import RunConfig
from .dataset import Dataset, generate_dataset
from .trainer import AblationFlags, Trainer

log = logging.getLogger(__name__)

# exponential smoothing of the validation curve (weight on the previous smoothed value)
VAL_SMOOTHING = 0.6


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return generate_dataset(d.room_model(), d.tx, d.n, d.seed, d.generation())


def build_trainer(cfg: RunConfig, dataset: Dataset, flags: AblationFlags | None = None, **paths) -> Trainer:
    flags = cfg.ablation if flags is None else flags
    return Trainer(dataset, cfg.sampler, cfg.trainer, flags, d_min=cfg.encoding.d_min, levels=cfg.encoding.levels,
                   dir_levels=cfg.encoding.dir_levels, arch_overrides=cfg.network.overrides(), **paths)


def smooth(values, weight: float = VAL_SMOOTHING) -> list[float]:
    """Debiased exponential moving average, so the first value is kept as is."""
    out, acc, norm = [], 0.0, 0.0
    for v in values:
        acc = weight * acc + (1 - weight) * v
        norm = weight * norm + (1 - weight)
        out.append(acc / norm)
    return out


def first_crossing(history, threshold_db: float, weight: float = VAL_SMOOTHING) -> int | None:
    """Iteration at which the smoothed validation curve first reaches ``threshold_db``."""
    its = [it for it, _ in history]
    for it, v in zip(its, smooth([v for _, v in history], weight)):
        if v <= threshold_db:
            return it
    return None


@dataclass
class RunResult:
    label: str
    iterations: int
    history: list = field(default_factory=list)
    test_db: float = math.nan
    seconds: float = 0.0

    @property
    def smoothed(self) -> list[float]:
        return smooth([v for _, v in self.history])

    def crossing(self, threshold_db: float) -> int | None:
        return first_crossing(self.history, threshold_db)


def train_run(cfg: RunConfig, dataset: Dataset, flags: AblationFlags | None = None, *, max_iters: int,
              stop_below_db: float | None = None, evaluate_test: bool = True, progress=None) -> RunResult:
    """Train for up to ``max_iters`` iterations.

    With ``stop_below_db`` the run ends early once the smoothed validation
    NMSE reaches that level.  ``progress`` is called with the trainer after
    every validation pass.
    """
    flags = cfg.ablation if flags is None else flags
    trainer = build_trainer(replace(cfg, ablation=flags), dataset, flags)
    t0 = time.perf_counter()
    while trainer.iteration < max_iters:
        _, val = trainer.step()
        if val is None:
            continue
        if progress is not None:
            progress(trainer)
        if stop_below_db is not None and first_crossing(trainer.history, stop_below_db) is not None:
            break
    result = RunResult(flags.label(), trainer.iteration, list(trainer.history))
    if evaluate_test:
        result.test_db = trainer.evaluate("test", per_path=False).mean_db
    result.seconds = time.perf_counter() - t0
    log.info("%s: %d iterations, test %.2f dB, %.0f s", result.label, result.iterations, result.test_db,
             result.seconds)
    return result
