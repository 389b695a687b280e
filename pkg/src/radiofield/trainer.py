"""Training loop: batch assembly, coarse-to-fine rendering, curriculum, evaluation.

One iteration draws receivers from the active curriculum blocks, turns
every noisy DoA and every negative direction into a ray, renders the rays
twice through the same network (stratified coarse depths, then importance
resampled fine depths) and takes one Adam step on the weighted NMSE of
both stages.  All randomness is derived from ``(seed, purpose, index)`` so
a run is a pure function of dataset, config and seed, and resuming from a
checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .dataset import SPLIT_NAMES, Dataset
from .encoding import EncodingConfig, SceneBounds, directional_encoding, make_encoding_config, spatial_encoding
from .network import MLPArchitecture, MLPParams, backward, forward, init_params
from .optim import OptimizerState, adam_step, scheduler_step
from .physics import C0
from .sampling import SamplerConfig, direction_from_angles, fine_depths, frustum_batch, stratified_depths
from .synthesis import (emission_weights, group_sum, loss_grad_h, nmse, ray_backward, ray_cfr, to_db,
                        training_loss)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1

# seed-stream tags
_BATCH, _COARSE, _FINE = 11, 12, 13


@dataclass(frozen=True)
class TrainerConfig:
    receivers_per_iter: int = 128
    w_c: float = 0.1
    w_f: float = 0.9
    lr: float = 1e-3
    clip: float = 5e-3
    warmup_iters: int = 500
    block_size: int = 3000
    curriculum_threshold_db: float = -10.0
    curriculum_min_gap_iters: int = 1000
    convergence_db: float = -3.0
    convergence_patience_iters: int = 1000
    improvement_db: float = 0.01
    eval_every: int = 100
    val_receivers: int | None = None
    max_iters: int = 30000
    checkpoint_every: int = 1000
    seed: int = 0
    dtype: str = "float32"
    n_negatives: int | None = None
    eval_chunk_rays: int = 2048
    sigma_bias_init: float = 0.0

    def __post_init__(self):
        if not math.isclose(self.w_c + self.w_f, 1.0):
            raise ValueError("w_c + w_f must equal 1")
        for name in ("receivers_per_iter", "block_size", "eval_every", "max_iters", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass(frozen=True)
class AblationFlags:
    scale_consistent: bool = True
    use_ipe: bool = True
    zeta_compensation: bool = True
    use_pe: bool = True

    def label(self) -> str:
        off = [name for name, on in asdict(self).items() if not on]
        return "full" if not off else "no-" + "+".join(off)


@dataclass
class CurriculumState:
    active_blocks: int = 1
    last_block_added_at: int = 0


def curriculum_step(state: CurriculumState, validation_db: float, iteration: int, cfg: TrainerConfig,
                    total_blocks: int) -> CurriculumState:
    """Open one more block once validation passes the gate and enough iterations elapsed."""
    if state.active_blocks >= total_blocks:
        return state
    if validation_db < cfg.curriculum_threshold_db and \
            iteration - state.last_block_added_at >= cfg.curriculum_min_gap_iters:
        return CurriculumState(state.active_blocks + 1, iteration)
    return state


def best_so_far(history, eps: float):
    """(best value, iteration it was reached) counting only improvements larger than ``eps``."""
    best, best_it = math.inf, 0
    for it, val in history:
        if val < best - eps:
            best, best_it = val, it
    return best, best_it


def should_stop(history, cfg: TrainerConfig, iteration: int, curriculum_complete: bool = True) -> bool:
    """Converged (gate met, stale, curriculum complete) or out of iterations."""
    if iteration >= cfg.max_iters:
        return True
    if not history or not curriculum_complete:
        return False
    best, best_it = best_so_far(history, cfg.improvement_db)
    return best <= cfg.convergence_db and iteration - best_it >= cfg.convergence_patience_iters


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    group: np.ndarray
    truth: np.ndarray
    receivers: np.ndarray
    n_positive_groups: int

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]


class RayTable:
    """Per-receiver ray lists flattened once from a dataset."""

    def __init__(self, dataset: Dataset, zeta_compensation: bool = True, n_negatives: int | None = None):
        self.n = len(dataset.samples)
        self.rx = np.array([s.receiver for s in dataset.samples], dtype=float).reshape(-1, 3)
        self.cfr = np.array([s.cfr for s in dataset.samples], dtype=complex)
        self.pos = []
        self.neg = []
        for s in dataset.samples:
            doas = np.array(s.noisy_doas, dtype=float).reshape(-1, 2)
            zeta = np.array([p.zeta for p in s.paths]) if zeta_compensation else np.ones(len(s.paths))
            self.pos.append((doas, zeta))
            neg = np.array(s.negative_doas, dtype=float).reshape(-1, 2)
            if n_negatives is not None:
                neg = neg[:n_negatives]
            self.neg.append(neg)

    def batch(self, receivers, negatives: bool = True) -> RayBatch:
        thetas, phis, zetas, groups, origins = [], [], [], [], []
        truth = [self.cfr[i] for i in receivers]
        n_pos = len(receivers)
        for g, i in enumerate(receivers):
            doas, zeta = self.pos[i]
            thetas.append(doas[:, 0])
            phis.append(doas[:, 1])
            zetas.append(zeta)
            groups.append(np.full(len(zeta), g))
            origins.append(np.repeat(self.rx[i][None], len(zeta), axis=0))
        if negatives:
            g = n_pos
            for i in receivers:
                neg = self.neg[i]
                k = neg.shape[0]
                thetas.append(neg[:, 0])
                phis.append(neg[:, 1])
                zetas.append(np.ones(k))
                groups.append(np.arange(g, g + k))
                origins.append(np.repeat(self.rx[i][None], k, axis=0))
                truth.extend([0j] * k)
                g += k
        theta = np.concatenate(thetas)
        phi = np.concatenate(phis)
        return RayBatch(np.concatenate(origins), direction_from_angles(theta, phi), theta, phi,
                        np.concatenate(zetas), np.concatenate(groups).astype(np.intp),
                        np.array(truth, dtype=complex), np.asarray(receivers), n_pos)


@dataclass
class StageResult:
    depths: np.ndarray
    sigma: np.ndarray
    x: np.ndarray
    mu_t: np.ndarray
    nu: np.ndarray
    h_ray: np.ndarray
    h_group: np.ndarray
    cache: object = None


class Pipeline:
    """Sampling + encoding + network + synthesis for batches of rays."""

    def __init__(self, sampler: SamplerConfig, encoding: EncodingConfig, fc: float):
        self.sampler = sampler
        self.encoding = encoding
        self.fc = fc

    def encode(self, rays: RayBatch, depths, dtype):
        mu, diag, mu_t = frustum_batch(rays.origins, rays.directions, depths, self.sampler.cone_ratio)
        m = depths.shape[1] - 1
        spatial = spatial_encoding(mu.reshape(-1, 3), diag.reshape(-1, 3), self.encoding).astype(dtype)
        dir_enc = directional_encoding(rays.theta, rays.phi, self.encoding.dir_levels).astype(dtype)
        return spatial, np.repeat(dir_enc, m, axis=0), mu_t

    def render(self, params: MLPParams, rays: RayBatch, depths, keep_cache: bool = False) -> StageResult:
        spatial, directional, mu_t = self.encode(rays, depths, params.dtype)
        out, cache = forward(params, spatial, directional, keep_cache)
        shape = depths.shape[0], depths.shape[1] - 1
        sigma = out.sigma.astype(np.float64).reshape(shape)
        x = (out.x_re.astype(np.float64) + 1j * out.x_im.astype(np.float64)).reshape(shape)
        nu = emission_weights(sigma, depths)
        h_ray = ray_cfr(nu, x, mu_t, rays.zeta, self.fc)
        h_group = group_sum(h_ray, rays.group, rays.truth.size)
        return StageResult(depths, sigma, x, mu_t, nu, h_ray, h_group, cache)

    def coarse_fine(self, params, rays, rng_coarse, rng_fine, keep_cache=False):
        depths_c = stratified_depths(self.sampler, rng_coarse, (rays.n_rays,))
        coarse = self.render(params, rays, depths_c, keep_cache)
        depths_f = fine_depths(depths_c, coarse.nu, self.sampler.epsilon, self.sampler.m, rng_fine)
        fine = self.render(params, rays, depths_f, keep_cache)
        return coarse, fine

    def stage_gradient(self, params, rays, stage: StageResult, weight: float):
        g_group = loss_grad_h(stage.h_group, rays.truth, weight)
        g_ray = g_group[rays.group]
        d_sigma, d_xre, d_xim = ray_backward(g_ray, stage.nu, stage.x, stage.mu_t, rays.zeta, self.fc,
                                             stage.depths, stage.sigma)
        return backward(params, stage.cache, d_sigma.ravel(), d_xre.ravel(), d_xim.ravel())


def infer_rays(pipeline: Pipeline, params: MLPParams, rays: RayBatch, chunk: int = 2048):
    """Deterministic coarse+fine inference.

    Returns per-group CFRs, per-ray CFRs and the depth of each ray's largest
    emission weight.  Sampling uses bin midpoints and evenly spaced
    quantiles, so every ray's prediction is independent of its batch.
    """
    h_ray = np.zeros(rays.n_rays, dtype=complex)
    peak = np.zeros(rays.n_rays)
    for start in range(0, rays.n_rays, chunk):
        sl = slice(start, start + chunk)
        n = min(chunk, rays.n_rays - start)
        sub = RayBatch(rays.origins[sl], rays.directions[sl], rays.theta[sl], rays.phi[sl], rays.zeta[sl],
                       np.zeros(n, dtype=np.intp), np.zeros(1, dtype=complex), rays.receivers, 0)
        _, fine = pipeline.coarse_fine(params, sub, None, None)
        h_ray[sl] = fine.h_ray
        k = np.argmax(fine.nu, axis=1)
        peak[sl] = np.take_along_axis(fine.mu_t, k[:, None], 1)[:, 0]
    return group_sum(h_ray, rays.group, rays.truth.size), h_ray, peak


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


@dataclass
class EvalReport:
    split: str
    mean_db: float
    p10_db: float
    median_db: float
    p90_db: float
    aggregate_db: float
    rows: list = field(default_factory=list)
    path_rows: list = field(default_factory=list)

    def summary(self) -> str:
        return (f"{self.split}: mean {self.mean_db:.2f} dB, p10 {self.p10_db:.2f} dB, "
                f"p90 {self.p90_db:.2f} dB, aggregate {self.aggregate_db:.2f} dB over {len(self.rows)} receivers")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["receiver_id", "n_rays", "nmse_db", "true_re", "true_im", "pred_re", "pred_im"])
            for r in self.rows:
                w.writerow([r["receiver_id"], r["n_rays"], repr(r["nmse_db"]), repr(r["true"].real),
                            repr(r["true"].imag), repr(r["pred"].real), repr(r["pred"].imag)])

    def write_paths_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["receiver_id", "path_index", "true_abs", "pred_abs", "true_delay_s", "pred_delay_s"])
            for r in self.path_rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), repr(r[5])])


class Trainer:
    def __init__(self, dataset: Dataset, sampler: SamplerConfig, cfg: TrainerConfig,
                 flags: AblationFlags = AblationFlags(), *, d_min: float = 0.02, levels=None,
                 dir_levels: int = 5, arch_overrides: dict | None = None, log_path=None, checkpoint_path=None):
        self.dataset = dataset
        self.cfg = cfg
        self.flags = flags
        self.sampler = sampler
        self.encoding = make_encoding_config(dataset.room.bounds, d_min, levels=levels, dir_levels=dir_levels,
                                             scale_consistent=flags.scale_consistent, use_pe=flags.use_pe,
                                             use_ipe=flags.use_ipe)
        self.pipeline = Pipeline(sampler, self.encoding, dataset.room.carrier)
        self.table = RayTable(dataset, flags.zeta_compensation, cfg.n_negatives)
        self.arch = MLPArchitecture(self.encoding.spatial_dim, self.encoding.directional_dim,
                                    **(arch_overrides or {}))
        self.dtype = np.dtype(cfg.dtype)
        self.params = init_params(self.arch, cfg.seed, self.dtype, cfg.sigma_bias_init)
        self.opt = OptimizerState.create(self.arch.n_params, cfg.lr, cfg.clip, cfg.warmup_iters, self.dtype,
                                         threshold=cfg.improvement_db)
        train = dataset.indices("train")
        if train.size == 0:
            raise ValueError("dataset has no training receivers")
        self.blocks = [train[i:i + cfg.block_size] for i in range(0, train.size, cfg.block_size)]
        self.curriculum = CurriculumState(1, 0)
        self.history: list[tuple[int, float]] = []
        self.iteration = 0
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.last_loss = math.nan
        self._t0 = time.perf_counter()

    # -- batches ------------------------------------------------------------------------------

    def active_pool(self) -> np.ndarray:
        return np.concatenate(self.blocks[:self.curriculum.active_blocks])

    def assemble_batch(self, iteration: int) -> RayBatch:
        rng = derive_rng(self.cfg.seed, _BATCH, iteration)
        pool = self.active_pool()
        k = min(self.cfg.receivers_per_iter, pool.size)
        chosen = np.sort(rng.choice(pool, size=k, replace=False))
        return self.table.batch(chosen, negatives=True)

    # -- one step -----------------------------------------------------------------------------

    def train_iteration(self, rays: RayBatch, iteration: int):
        """Forward both stages, backpropagate, step.  Returns ``(loss, accepted)``."""
        coarse, fine = self.pipeline.coarse_fine(
            self.params, rays, derive_rng(self.cfg.seed, _COARSE, iteration),
            derive_rng(self.cfg.seed, _FINE, iteration), keep_cache=True)
        loss = training_loss(coarse.h_group, fine.h_group, rays.truth, self.cfg.w_c, self.cfg.w_f)
        if not math.isfinite(loss):
            log.warning("non-finite loss at iteration %d; step skipped", iteration)
            self.opt.skipped += 1
            return loss, False
        grad = self.pipeline.stage_gradient(self.params, rays, coarse, self.cfg.w_c)
        coarse.cache = None
        grad += self.pipeline.stage_gradient(self.params, rays, fine, self.cfg.w_f)
        fine.cache = None
        accepted = adam_step(self.opt, self.params.flat, grad)
        return loss, accepted

    # -- evaluation ---------------------------------------------------------------------------

    def predict(self, receivers, params: MLPParams | None = None):
        """Fine-stage CFR per receiver plus per-ray details, using only positive rays."""
        params = params or self.params
        rays = self.table.batch(np.asarray(receivers, dtype=int), negatives=False)
        return self.predict_rays(rays, params)

    def predict_rays(self, rays: RayBatch, params: MLPParams | None = None):
        return infer_rays(self.pipeline, params or self.params, rays, self.cfg.eval_chunk_rays)

    def evaluate(self, split: str = "test", params: MLPParams | None = None, limit: int | None = None,
                 per_path: bool = True) -> EvalReport:
        idx = self.dataset.indices(split)
        if limit is not None:
            idx = idx[:limit]
        if idx.size == 0:
            raise ValueError(f"split {split!r} is empty")
        h_pred, h_ray, peak = self.predict(idx, params)
        truth = self.table.cfr[idx]
        err = np.abs(h_pred - truth) ** 2 / np.abs(truth) ** 2
        db = to_db(err)
        rows = []
        path_rows = []
        offset = 0
        for j, i in enumerate(idx):
            n_rays = len(self.table.pos[i][1])
            rows.append({"receiver_id": int(i), "n_rays": n_rays, "nmse_db": float(db[j]),
                         "true": complex(truth[j]), "pred": complex(h_pred[j])})
            if per_path:
                for k, p in enumerate(self.dataset.samples[i].paths):
                    path_rows.append((int(i), k, abs(p.gain), float(abs(h_ray[offset + k])), p.distance / C0,
                                      float(peak[offset + k]) / C0))
            offset += n_rays
        return EvalReport(split, float(np.mean(db)), float(np.percentile(db, 10)), float(np.median(db)),
                          float(np.percentile(db, 90)), float(to_db(nmse(h_pred, truth))), rows, path_rows)

    def validate(self) -> float:
        return self.evaluate("val", limit=self.cfg.val_receivers, per_path=False).mean_db

    # -- loop ---------------------------------------------------------------------------------

    @property
    def curriculum_complete(self) -> bool:
        return self.curriculum.active_blocks >= len(self.blocks)

    def run(self, max_iters: int | None = None, stop_at: int | None = None) -> str:
        """Train until convergence, the iteration cap, or ``stop_at`` (for interruption).

        Returns ``"converged"``, ``"cap"`` or ``"interrupted"``.
        """
        cfg = self.cfg if max_iters is None else replace(self.cfg, max_iters=max_iters)
        self._open_log()
        status = "cap"
        try:
            while True:
                if should_stop(self.history, cfg, self.iteration, self.curriculum_complete):
                    status = "cap" if self.iteration >= cfg.max_iters else "converged"
                    break
                if stop_at is not None and self.iteration >= stop_at:
                    status = "interrupted"
                    break
                self.step()
                if self.checkpoint_path and self.iteration % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint(self.checkpoint_path)
        except KeyboardInterrupt:
            status = "interrupted"
            log.warning("interrupted at iteration %d", self.iteration)
        if self.checkpoint_path:
            self.save_checkpoint(self.checkpoint_path)
        return status

    def step(self):
        it = self.iteration + 1
        rays = self.assemble_batch(it)
        loss, _ = self.train_iteration(rays, it)
        self.iteration = it
        self.last_loss = loss
        val_db = None
        if it % self.cfg.eval_every == 0:
            val_db = self.validate()
            self.history.append((it, val_db))
            scheduler_step(self.opt, val_db)
            self.curriculum = curriculum_step(self.curriculum, val_db, it, self.cfg, len(self.blocks))
        self._log_row(it, loss, val_db)
        return loss, val_db

    # -- logging & checkpoints ----------------------------------------------------------------

    LOG_FIELDS = ("iteration", "train_loss_db", "val_db", "lr", "active_blocks", "wall_time")

    def _open_log(self):
        if not self.log_path:
            return
        if self.log_path.exists() and self.iteration > 0:
            # resume: drop rows written after the checkpoint we restarted from
            lines = self.log_path.read_text().splitlines(keepends=True)
            kept = []
            for line in lines:
                head = line.split(",", 1)[0]
                if head.isdigit() and int(head) > self.iteration:
                    continue
                kept.append(line)
            self.log_path.write_text("".join(kept))
            return
        with open(self.log_path, "w", newline="") as fh:
            fh.write(f"# flags: {asdict(self.flags)}\n")
            fh.write(f"# seed: {self.cfg.seed} dtype: {self.cfg.dtype}\n")
            csv.writer(fh).writerow(self.LOG_FIELDS)

    def _log_row(self, it, loss, val_db):
        if not self.log_path:
            return
        with open(self.log_path, "a", newline="") as fh:
            csv.writer(fh).writerow([
                it, repr(float(to_db(loss))) if math.isfinite(loss) else "nan",
                "" if val_db is None else repr(float(val_db)), repr(self.opt.current_lr(self.opt.step)),
                self.curriculum.active_blocks, f"{time.perf_counter() - self._t0:.3f}"])

    def checkpoint_state(self) -> tuple[dict, dict]:
        header = {
            "kind": "checkpoint",
            "arch": self.arch.to_dict(),
            "dtype": self.cfg.dtype,
            "iteration": self.iteration,
            "optimizer": self.opt.scalars(),
            "curriculum": asdict(self.curriculum),
            "history": [[int(i), float(v)] for i, v in self.history],
            "rng_state": derive_rng(self.cfg.seed, _BATCH, self.iteration + 1).bit_generator.state,
            "trainer": asdict(self.cfg),
            "flags": asdict(self.flags),
            "sampler": asdict(self.sampler),
            "encoding": {"d_min": self.encoding.d_min, "levels": list(self.encoding.levels),
                         "dir_levels": self.encoding.dir_levels},
            "scene": {"min": list(self.encoding.bounds.min), "max": list(self.encoding.bounds.max),
                      "fc": self.dataset.room.carrier},
            "last_loss": float(self.last_loss) if math.isfinite(self.last_loss) else None,
        }
        header["rng_state"]["state"] = {k: str(v) for k, v in header["rng_state"]["state"].items()}
        arrays = {"params": self.params.flat, "adam_m": self.opt.m, "adam_v": self.opt.v}
        return header, arrays

    def save_checkpoint(self, path) -> None:
        header, arrays = self.checkpoint_state()
        container.write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)

    def load_checkpoint(self, path, weights_only: bool = False) -> dict:
        header, arrays = read_checkpoint(path)
        arch = MLPArchitecture(**header["arch"])
        if arch != self.arch:
            raise ValueError(f"checkpoint architecture {arch} does not match {self.arch}")
        self.params = MLPParams(arch, arrays["params"].astype(self.dtype))
        if weights_only:
            return header
        scal = dict(header["optimizer"])
        self.opt = OptimizerState(arrays["adam_m"].astype(self.dtype), arrays["adam_v"].astype(self.dtype), **scal)
        self.curriculum = CurriculumState(**header["curriculum"])
        self.history = [(int(i), float(v)) for i, v in header["history"]]
        self.iteration = int(header["iteration"])
        self.last_loss = header["last_loss"] if header["last_loss"] is not None else math.nan
        return header


def _configs_from_header(header):
    sampler = SamplerConfig(**header["sampler"])
    cfg = TrainerConfig(**header["trainer"])
    flags = AblationFlags(**header["flags"])
    enc = header["encoding"]
    return sampler, cfg, flags, enc


def load_model(path):
    """Rebuild ``(pipeline, params, header)`` from a checkpoint without any dataset."""
    header, arrays = read_checkpoint(path)
    sampler, cfg, flags, enc = _configs_from_header(header)
    scene = header["scene"]
    encoding = make_encoding_config(SceneBounds(tuple(scene["min"]), tuple(scene["max"])), enc["d_min"],
                                    levels=tuple(enc["levels"]), dir_levels=enc["dir_levels"],
                                    scale_consistent=flags.scale_consistent, use_pe=flags.use_pe,
                                    use_ipe=flags.use_ipe)
    arch = MLPArchitecture(**header["arch"])
    params = MLPParams(arch, arrays["params"].astype(cfg.dtype))
    return Pipeline(sampler, encoding, float(scene["fc"])), params, header


def trainer_from_checkpoint(path, dataset: Dataset, weights_only: bool = False, **kwargs) -> Trainer:
    """A trainer configured exactly as the one that wrote ``path``, with its state restored."""
    header, _ = read_checkpoint(path)
    sampler, cfg, flags, enc = _configs_from_header(header)
    arch = header["arch"]
    overrides = {k: arch[k] for k in ("trunk_layers", "trunk_width", "feature_width", "head_layers", "head_width",
                                      "skip_at")}
    trainer = Trainer(dataset, sampler, cfg, flags, d_min=enc["d_min"], levels=tuple(enc["levels"]),
                      dir_levels=enc["dir_levels"], arch_overrides=overrides, **kwargs)
    trainer.load_checkpoint(path, weights_only=weights_only)
    return trainer


def read_checkpoint(path):
    return container.read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)


def split_names() -> tuple[str, ...]:
    return SPLIT_NAMES
