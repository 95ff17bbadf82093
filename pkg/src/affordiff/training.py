"""Two-stage training: contact-point pre-training and waypoint fine-tuning.

Every stochastic choice of step ``s`` (batch rows, diffusion timesteps,
noise) comes from a generator seeded with ``(seed, s)``, so a run resumed
from a checkpoint replays exactly the steps an uninterrupted run would.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nx
from .data import Batch, DatasetManifest, collate
from .diffusion import NoiseSchedule, SamplerConfig, make_schedule, q_sample, schedule_from_dict
from .evaluation import evaluate_model
from .model import CheckpointMismatch, Denoiser, ModelConfig

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
SUPERVISION = ("first-point", "all-points")


class TrainingHalted(RuntimeError):
    """Three consecutive steps produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    eval_interval: int = 200
    eval_sampler_steps: int = 5
    supervision: str | None = None  # stage default when None
    prefetch: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer moments must lie in [0, 1)")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.supervision is not None and self.supervision not in SUPERVISION:
            raise ValueError(f"unknown supervision mode {self.supervision!r}")

    @property
    def supervision_mode(self) -> str:
        if self.supervision is not None:
            return self.supervision
        return "first-point" if self.stage == "pretrain" else "all-points"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields {sorted(unknown)}")
        return cls(**d)


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping.

    Decay applies to parameters with two or more axes (weight matrices and
    embedding tables); biases and norm gains are left alone.
    """

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> float:
        cfg = self.cfg
        norm = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads])))
        scale = 1.0
        if cfg.grad_clip and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if p.ndim >= 2 and cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data -= (cfg.lr * update).astype(p.dtype)
        return norm


@dataclass
class StepRecord:
    step: int
    loss: float | None
    mae_norm: float | None
    mae_px: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    final_step: int
    history: list[StepRecord]
    best_mae_norm: float | None
    best_step: int | None
    losses: list[float]


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


class Trainer:
    def __init__(self, model: Denoiser, schedule: NoiseSchedule, cfg: TrainConfig,
                 corpus: DatasetManifest, out_dir=None, optimizer: AdamW | None = None,
                 step: int = 0):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.corpus = corpus
        self.train_records = corpus.train
        if not self.train_records:
            raise ValueError("corpus has no train split")
        self.test_records = corpus.test
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.params = model.trainable_parameters()
        self.optimizer = optimizer or AdamW(self.params, cfg)
        self.step = step
        self._pool = collate(self.train_records)
        T = model.config.chunk_size
        if self._pool.waypoints.shape[1] != T:
            raise ValueError(f"corpus chunk size {self._pool.waypoints.shape[1]} != model chunk size {T}")
        self.best_state: dict[str, np.ndarray] | None = None
        self.best_mae: float | None = None
        self.best_step: int | None = None
        self._bad_steps = 0

    # construction -------------------------------------------------------

    @classmethod
    def fresh(cls, model_config: ModelConfig, cfg: TrainConfig, corpus, schedule_kind: str = "cosine",
              num_timesteps: int = 1000, out_dir=None, model_seed: int | None = None,
              dtype=np.float32) -> "Trainer":
        model = Denoiser(model_config, cfg.seed if model_seed is None else model_seed, dtype)
        return cls(model, make_schedule(schedule_kind, num_timesteps), cfg, corpus, out_dir)

    @classmethod
    def from_model(cls, model: Denoiser, cfg: TrainConfig, corpus, schedule: NoiseSchedule,
                   out_dir=None) -> "Trainer":
        """Continue from trained weights with a fresh optimizer (next stage)."""
        clone = Denoiser(model.config, 0, model.dtype)
        clone.load_state_dict(model.state_dict())
        return cls(clone, schedule, cfg, corpus, out_dir)

    @classmethod
    def resume(cls, path, corpus, out_dir=None) -> "Trainer":
        """Rebuild model, optimizer and step counter from a checkpoint."""
        tensors, header = ckpt.load(ckpt.resolve(path))
        model = _model_from(tensors, header)
        cfg = TrainConfig.from_dict(header["train_state"]["config"])
        trainer = cls(model, schedule_from_dict(header["schedule_config"]), cfg, corpus, out_dir,
                      step=int(header["train_state"]["step"]))
        opt = trainer.optimizer
        opt.t = int(header["train_state"]["adam_t"])
        for i, (name, _) in enumerate(_trainable_names(model)):
            for store, prefix in ((opt.m, "optim.m."), (opt.v, "optim.v.")):
                arr = tensors.get(prefix + name)
                if arr is None or arr.shape != store[i].shape:
                    raise CheckpointMismatch(f"optimizer state for tensor {name!r} missing or misshapen")
                store[i] = arr.astype(store[i].dtype, copy=True)
        return trainer

    # batches ------------------------------------------------------------

    def make_batch(self, step: int) -> tuple[Batch, np.ndarray, np.ndarray]:
        """Batch rows, timesteps and noise for ``step``."""
        rng = _step_rng(self.cfg.seed, step)
        pool = self._pool
        n = len(pool)
        B = min(self.cfg.batch_size, n)
        rows = np.sort(rng.choice(n, size=B, replace=False))
        k = rng.integers(0, self.schedule.num_steps, size=B)
        noise = rng.standard_normal((B,) + pool.waypoints.shape[1:])
        batch = Batch(
            image_current=pool.image_current[rows],
            image_previous=pool.image_previous[rows],
            text_ids=pool.text_ids[rows],
            text_mask=pool.text_mask[rows],
            waypoints=pool.waypoints[rows],
            supervise_mask=pool.supervise_mask[rows],
            pixel_resolution=pool.pixel_resolution[rows],
        )
        return batch, k, noise

    def _batches(self, start: int, stop: int) -> Iterator[tuple[Batch, np.ndarray, np.ndarray]]:
        if self.cfg.prefetch <= 0:
            for s in range(start, stop):
                yield self.make_batch(s)
            return
        # bounded hand-off: assembly runs ahead of the optimizer by at most `prefetch` batches
        q: queue.Queue = queue.Queue(maxsize=self.cfg.prefetch)
        done = object()

        def produce():
            for s in range(start, stop):
                q.put(self.make_batch(s))
            q.put(done)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        while (item := q.get()) is not done:
            yield item
        worker.join()

    # optimization -------------------------------------------------------

    def loss_mask(self, batch: Batch) -> np.ndarray:
        T = batch.waypoints.shape[1]
        if self.cfg.supervision_mode == "first-point":
            m = np.zeros((len(batch), T), dtype=bool)
            m[:, 0] = True
        else:
            m = np.ones((len(batch), T), dtype=bool)
        return np.repeat(m[..., None], 2, axis=-1)

    def clean_target(self, batch: Batch) -> np.ndarray:
        """Clean chunk to noise and regress.

        Under first-point supervision only the contact point is known, so it
        fills the whole chunk (the touch-record convention); the remaining
        ground-truth points then have no influence on the loss at all.
        """
        if self.cfg.supervision_mode == "first-point":
            return np.repeat(batch.waypoints[:, :1], batch.waypoints.shape[1], axis=1)
        return batch.waypoints

    def loss(self, batch: Batch, k: np.ndarray, noise: np.ndarray) -> nx.Tensor:
        x0 = self.clean_target(batch)
        x_k = q_sample(self.schedule, x0, k, noise).astype(self.model.dtype)
        cond = self.model.encode_batch(batch)
        pred = self.model(k, x_k, cond)
        return nx.mse(pred, x0.astype(self.model.dtype), self.loss_mask(batch))

    def train_step(self, batch: Batch, k: np.ndarray, noise: np.ndarray) -> float | None:
        """One optimizer update. Returns the batch loss, or None if the step was aborted."""
        try:
            with nx.GradientTape() as tape:
                loss = self.loss(batch, k, noise)
            grads = tape.gradient(loss, self.params)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise nx.NonFiniteError("non-finite gradient")
        except nx.NonFiniteError as exc:
            self._bad_steps += 1
            log.warning("step %d aborted: %s", self.step + 1, exc)
            if self._bad_steps >= 3:
                raise TrainingHalted(f"three consecutive non-finite steps ending at {self.step + 1}") from exc
            return None
        self._bad_steps = 0
        self.optimizer.step(grads)
        return float(loss.data)

    def evaluate(self):
        sampler = SamplerConfig(num_steps=self.cfg.eval_sampler_steps)
        return evaluate_model(self.model, self.schedule, self.test_records, sampler, seed=self.cfg.seed,
                              first_point_only=self.cfg.supervision_mode == "first-point")

    def run(self, steps: int | None = None) -> TrainResult:
        stop = self.cfg.steps if steps is None else self.step + steps
        history: list[StepRecord] = []
        losses: list[float] = []
        window: list[float] = []
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(self.out_dir / "metrics.jsonl", "a" if self.step else "w")
        try:
            for batch, k, noise in self._batches(self.step + 1, stop + 1):
                value = self.train_step(batch, k, noise)
                self.step += 1
                if value is not None:
                    losses.append(value)
                    window.append(value)
                if self.step % self.cfg.eval_interval == 0 or self.step == stop:
                    rec = self._checkpoint_metrics(window)
                    window = []
                    history.append(rec)
                    if log_fh is not None:
                        log_fh.write(rec.to_json() + "\n")
                        log_fh.flush()
                    log.info("step %d loss %s mae %s", rec.step, rec.loss, rec.mae_norm)
        finally:
            if log_fh is not None:
                log_fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "final.ckpt")
        return TrainResult(self.step, history, self.best_mae, self.best_step, losses)

    def _checkpoint_metrics(self, window: list[float]) -> StepRecord:
        loss = float(np.mean(window)) if window else None
        if not self.test_records:
            return StepRecord(self.step, loss, None, None)
        report = self.evaluate()
        if self.best_mae is None or report.mae_norm < self.best_mae:
            self.best_mae, self.best_step = report.mae_norm, self.step
            self.best_state = {k: v.copy() for k, v in self.model.state_dict().items()}
            if self.out_dir is not None:
                self.save(self.out_dir / "best.ckpt")
        return StepRecord(self.step, loss, report.mae_norm, report.mae_px)

    # persistence --------------------------------------------------------

    def save(self, path) -> Path:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for (name, _), m, v in zip(_trainable_names(self.model), self.optimizer.m, self.optimizer.v):
            tensors[f"optim.m.{name}"] = m
            tensors[f"optim.v.{name}"] = v
        return ckpt.save(
            path, tensors,
            model_config=self.model.config.to_dict(),
            schedule_config=self.schedule.to_dict(),
            dtype=self.model.dtype.name,
            train_state={"stage": self.cfg.stage, "step": self.step, "adam_t": self.optimizer.t,
                         "config": self.cfg.to_dict()},
        )


def _trainable_names(model: Denoiser) -> list[tuple[str, nx.Tensor]]:
    keep = {id(p) for p in model.trainable_parameters()}
    return [(n, p) for n, p in model.named_parameters() if id(p) in keep]


def _model_from(tensors: dict, header: dict) -> Denoiser:
    config = ModelConfig.from_dict(header["model_config"])
    model = Denoiser(config, 0, np.dtype(header.get("dtype", "float32")))
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model


def load_model(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    tensors, header = ckpt.load(ckpt.resolve(path))
    return _model_from(tensors, header), schedule_from_dict(header["schedule_config"]), header


def pretrain(corpus: DatasetManifest, cfg: TrainConfig, model_config: ModelConfig = ModelConfig(),
             schedule_kind: str = "cosine", num_timesteps: int = 1000, out_dir=None) -> Trainer:
    if cfg.stage != "pretrain":
        cfg = replace(cfg, stage="pretrain")
    trainer = Trainer.fresh(model_config, cfg, corpus, schedule_kind, num_timesteps, out_dir)
    trainer.run()
    return trainer


def finetune(corpus: DatasetManifest, init, cfg: TrainConfig, out_dir=None,
             overrides: dict | None = None) -> Trainer:
    """Fine-tune from ``init`` (a checkpoint path or a Denoiser).

    ``overrides`` may change model config fields; every stored tensor must
    still fit, otherwise :class:`CheckpointMismatch` names the offender.
    """
    if cfg.stage != "finetune":
        cfg = replace(cfg, stage="finetune")
    if isinstance(init, Denoiser):
        model, schedule = init, None
    else:
        tensors, header = ckpt.load(ckpt.resolve(init))
        config = ModelConfig.from_dict({**header["model_config"], **(overrides or {})})
        model = Denoiser(config, 0, np.dtype(header.get("dtype", "float32")))
        model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        schedule = schedule_from_dict(header["schedule_config"])
    if schedule is None:
        schedule = make_schedule()
    trainer = Trainer.from_model(model, cfg, corpus, schedule, out_dir)
    trainer.run()
    return trainer
