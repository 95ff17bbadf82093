"""Waypoint MAE, held-out evaluation and the architecture ablation harness."""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AffordanceSample, Batch, collate, token_ids
from .diffusion import NoiseSchedule, SamplerConfig, ode_sample


def mae(pred, truth, resolution, points=None) -> tuple[float, float]:
    """Mean absolute coordinate error, normalized and in pixels.

    ``resolution`` is ``(width, height)``; the pixel variant scales u by the
    width and v by the height before differencing. ``points`` optionally
    restricts the average to a boolean selection of waypoints.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"waypoint chunks differ in shape: {pred.shape} vs {truth.shape}")
    if points is not None:
        points = np.asarray(points, dtype=bool)
        if not points.any():
            raise ValueError("no waypoints selected")
        pred, truth = pred[points], truth[points]
    scale = np.asarray(resolution, dtype=np.float64)
    return float(np.abs(pred - truth).mean()), float(np.abs(pred * scale - truth * scale).mean())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def model_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    mae_norm_per_record: list[float]
    mae_px_per_record: list[float]
    mae_norm: float
    mae_px: float
    model_digest: str = ""
    config_digest: str = ""
    tag: str = "full"
    predictions: list = field(default_factory=list, repr=False)

    def to_dict(self, with_predictions: bool = False) -> dict:
        d = asdict(self)
        if not with_predictions:
            d.pop("predictions")
        return d

    def save(self, path, with_predictions: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(with_predictions), indent=1) + "\n")


def record_seed(seed: int, repetition: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, repetition, index]).generate_state(1)[0])


def _score_chunk(args):
    model, schedule, chunk, lo, sampler, seed, n_seeds, first_point_only = args
    cond = model.encode_batch(collate(chunk))
    norm = np.zeros(len(chunk))
    px = np.zeros(len(chunk))
    preds = np.zeros((len(chunk), chunk[0].chunk_size, 2))
    for rep in range(n_seeds):
        seeds = [record_seed(seed, rep, lo + i) for i in range(len(chunk))]
        out = ode_sample(model, cond, schedule, sampler, seeds)
        for i, rec in enumerate(chunk):
            n, p = mae(out[i][:1] if first_point_only else out[i],
                       rec.waypoints[:1] if first_point_only else rec.waypoints, rec.pixel_resolution)
            norm[i] += n / n_seeds
            px[i] += p / n_seeds
            preds[i] += out[i] / n_seeds
    return norm, px, preds


def evaluate_model(
    model,
    schedule: NoiseSchedule,
    records: Sequence[AffordanceSample],
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    n_seeds: int = 1,
    batch_size: int = 128,
    tag: str = "full",
    first_point_only: bool = False,
    workers: int = 1,
) -> EvalReport:
    """Sample one chunk per record (per seed) and score it against the ground truth.

    With ``first_point_only`` only the contact point is scored, which is
    all that first-point supervision trains. Records are
    processed in fixed chunks of ``batch_size``, so the result does not
    depend on ``workers``.
    """
    if not records:
        raise ValueError("no records to evaluate")
    jobs = [(model, schedule, records[lo:lo + batch_size], lo, sampler, seed, n_seeds, first_point_only)
            for lo in range(0, len(records), batch_size)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_score_chunk, jobs))
    else:
        parts = [_score_chunk(job) for job in jobs]
    per_norm = np.concatenate([p[0] for p in parts])
    per_px = np.concatenate([p[1] for p in parts])
    preds = np.concatenate([p[2] for p in parts])
    return EvalReport(
        mae_norm_per_record=per_norm.tolist(),
        mae_px_per_record=per_px.tolist(),
        mae_norm=float(per_norm.mean()),
        mae_px=float(per_px.mean()),
        model_digest=model_digest(model),
        config_digest=_digest({"model": model.config.to_dict(), "schedule": schedule.to_dict(),
                               "sampler": sampler.to_dict(), "seed": seed, "n_seeds": n_seeds}),
        tag=tag,
        predictions=[p.tolist() for p in preds],
    )


def predict(model, schedule: NoiseSchedule, image_current, instruction, image_previous=None,
            sampler: SamplerConfig = SamplerConfig(), seed: int = 0) -> np.ndarray:
    """One waypoint chunk ``[T, 2]`` for a single observation and instruction.

    ``instruction`` is either a string of vocabulary words or a sequence of ids.
    """
    ids = token_ids(instruction.split()) if isinstance(instruction, str) else tuple(instruction)
    if not ids:
        raise ValueError("empty instruction")
    cur = np.asarray(image_current)
    prev = cur if image_previous is None else np.asarray(image_previous)
    if prev.shape != cur.shape:
        raise ValueError(f"frames differ in shape: {prev.shape} vs {cur.shape}")
    batch = Batch(
        image_current=cur[None],
        image_previous=prev[None],
        text_ids=np.array([ids], dtype=np.int64),
        text_mask=np.ones((1, len(ids)), dtype=bool),
        waypoints=np.zeros((1, model.config.chunk_size, 2)),
        supervise_mask=np.ones((1, model.config.chunk_size), dtype=bool),
        pixel_resolution=np.array([[cur.shape[1], cur.shape[0]]], dtype=np.float64),
    )
    return ode_sample(model, model.encode_batch(batch), schedule, sampler, [record_seed(seed, 0, 0)])[0]


def evaluate(checkpoint_path, manifest, sampler: SamplerConfig = SamplerConfig(),
             seed: int = 0, n_seeds: int = 1, split: str = "test", workers: int = 1) -> EvalReport:
    from .training import load_model

    model, schedule, _ = load_model(checkpoint_path)
    records = manifest.subset(split) if split else manifest.records
    return evaluate_model(model, schedule, records, sampler, seed, n_seeds, workers=workers)


@dataclass
class AblationRow:
    tag: str
    mae_norm: float
    mae_px: float
    visual_tokens: int
    parameters: int


ABLATION_ARMS = {
    "full": {},
    "disable_poa": {"disable_poa": True},
    "disable_sial": {"disable_sial": True},
}


def ablation_suite(model_config, train_config, corpus, schedule_kind: str = "cosine",
                   num_timesteps: int = 1000, sampler: SamplerConfig = SamplerConfig(),
                   pretrain_corpus=None, pretrain_config=None, eval_seed: int = 0,
                   out_dir=None) -> list[AblationRow]:
    """Train the full model and both ablation arms under one budget and seed."""
    from dataclasses import replace

    from .training import Trainer

    rows = []
    for tag, overrides in ABLATION_ARMS.items():
        cfg = replace(model_config, **overrides)
        arm_dir = None if out_dir is None else Path(out_dir) / tag
        init = None
        if pretrain_corpus is not None:
            pre = Trainer.fresh(cfg, pretrain_config, pretrain_corpus, schedule_kind, num_timesteps,
                                out_dir=None if arm_dir is None else arm_dir / "pretrain")
            pre.run()
            init = pre.model
        if init is None:
            trainer = Trainer.fresh(cfg, train_config, corpus, schedule_kind, num_timesteps,
                                    out_dir=None if arm_dir is None else arm_dir / "finetune")
        else:
            trainer = Trainer.from_model(init, train_config, corpus, pre.schedule,
                                         out_dir=None if arm_dir is None else arm_dir / "finetune")
        trainer.run()
        report = evaluate_model(trainer.model, trainer.schedule, corpus.test, sampler, eval_seed, tag=tag)
        rows.append(AblationRow(tag, report.mae_norm, report.mae_px, cfg.visual_tokens,
                                trainer.model.num_parameters()))
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mae_norm", "mae_px", "visual_tokens", "parameters"])
        for r in rows:
            w.writerow([r.tag, repr(r.mae_norm), repr(r.mae_px), r.visual_tokens, r.parameters])


def metrics_to_csv(metrics_log, path) -> None:
    """Flatten a newline-delimited metrics log into a (step, MAE) CSV series."""
    lines = [json.loads(line) for line in Path(metrics_log).read_text().splitlines() if line.strip()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "mae_norm", "mae_px"])
        for m in lines:
            w.writerow([m["step"], m["loss"], m["mae_norm"], m["mae_px"]])
