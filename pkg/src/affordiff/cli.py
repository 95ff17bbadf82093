"""Command-line entry point: ``affordiff <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .diffusion import SCHEDULE_KINDS, SamplerConfig
from .model import ModelConfig
from .training import TrainConfig

log = logging.getLogger("affordiff")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    num_steps: int = 1000

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.num_steps < 1:
            raise ValueError("schedule needs at least one timestep")


@dataclass(frozen=True)
class RunConfig:
    """Merged model, schedule, sampler and training settings."""

    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("model", "schedule", "sampler", "train")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        parts = {}
        for name, kind in zip(cls.SECTIONS, (ModelConfig, ScheduleConfig, SamplerConfig, TrainConfig)):
            section = d.get(name, {})
            known = {f.name for f in fields(kind)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown {name} fields {sorted(bad)}")
            try:
                parts[name] = kind(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return cls(**parts)

    def to_dict(self) -> dict:
        out = {}
        for name in self.SECTIONS:
            part = getattr(self, name)
            out[name] = {f.name: getattr(part, f.name) for f in fields(part)}
        return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON config and apply ``section.field=value`` overrides, validating everything."""
    raw = {} if path is None else json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    raw = {k: dict(v) for k, v in raw.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.field=value")
        raw.setdefault(section, {})[name] = _parse_value(value)
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    spec = D.SyntheticTaskSpec(kind=args.task, canvas=args.canvas, chunk_size=args.chunk_size, seed=args.seed)
    manifest = D.generate_synthetic(spec, args.count, workers=args.workers)
    manifest = D.split(manifest, args.train_fraction, seed=args.seed)
    D.save_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} records ({len(manifest.train)} train / {len(manifest.test)} test) to {args.out}")


def _train_config(cfg: RunConfig, args, stage: str) -> TrainConfig:
    tc = replace(cfg.train, stage=stage)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    return tc


def cmd_pretrain(args) -> None:
    from .training import Trainer

    cfg = load_run_config(args.config, args.set)
    tc = _train_config(cfg, args, "pretrain")
    corpus = D.load_manifest(args.data)
    trainer = Trainer.fresh(cfg.model, tc, corpus, cfg.schedule.kind, cfg.schedule.num_steps, out_dir=args.out)
    _report(trainer.run(), args.out)


def cmd_finetune(args) -> None:
    from .training import Trainer, load_model

    cfg = load_run_config(args.config, args.set)
    tc = _train_config(cfg, args, "finetune")
    corpus = D.load_manifest(args.data)
    model, schedule, _ = load_model(args.init)
    trainer = Trainer.from_model(model, tc, corpus, schedule, out_dir=args.out)
    _report(trainer.run(), args.out)


def _report(result, out) -> None:
    last = result.history[-1] if result.history else None
    if last is not None and last.mae_norm is not None:
        print(f"step {last.step}: loss {last.loss:.6f} held-out MAE {last.mae_norm:.4f} ({last.mae_px:.2f} px); "
              f"best {result.best_mae_norm:.4f} at step {result.best_step}; checkpoints in {out}")
    else:
        print(f"finished {result.final_step} steps; checkpoints in {out}")


def cmd_predict(args) -> None:
    from .evaluation import predict
    from .netpbm import read_ppm, write_ppm
    from .training import load_model

    model, schedule, _ = load_model(args.checkpoint)
    cur = read_ppm(args.image)
    prev = read_ppm(args.previous) if args.previous else None
    sampler = SamplerConfig(num_steps=args.sampler_steps)
    wp = predict(model, schedule, cur, args.instruction, prev, sampler, seed=args.seed or 0)
    out = {"waypoints": wp.tolist(), "resolution": [int(cur.shape[1]), int(cur.shape[0])]}
    Path(args.out).write_text(json.dumps(out, indent=1) + "\n")
    if args.overlay:
        write_ppm(args.overlay, draw_waypoints(cur, wp))
    print(f"wrote {len(wp)} waypoints to {args.out}")


def draw_waypoints(image: np.ndarray, waypoints: np.ndarray, scale: int = 4) -> np.ndarray:
    """Upscaled copy of ``image`` with the path in white and the contact point in magenta."""
    img = np.repeat(np.repeat(np.asarray(image, dtype=np.uint8), scale, axis=0), scale, axis=1)
    h, w = img.shape[:2]
    pts = np.asarray(waypoints, dtype=np.float64) * np.array([w, h])
    for a, b in zip(pts[:-1], pts[1:]):
        n = int(np.ceil(np.abs(b - a).max())) + 1
        for t in np.linspace(0.0, 1.0, n):
            x, y = (a + t * (b - a)).astype(int)
            if 0 <= x < w and 0 <= y < h:
                img[y, x] = 255
    for i, (x, y) in enumerate(pts.astype(int)):
        color = (255, 0, 255) if i == 0 else (255, 255, 255)
        img[max(0, y - 2):y + 3, max(0, x - 2):x + 3] = color
    return img


def cmd_eval(args) -> None:
    from .evaluation import evaluate

    manifest = D.load_manifest(args.data)
    sampler = SamplerConfig(num_steps=args.sampler_steps)
    report = evaluate(args.checkpoint, manifest, sampler, seed=args.seed or 0, n_seeds=args.n_seeds,
                      split=args.split, workers=args.workers)
    if args.out:
        report.save(args.out, with_predictions=args.predictions)
    print(f"MAE {report.mae_norm:.4f} normalized, {report.mae_px:.2f} px over {len(report.mae_norm_per_record)} records")


def cmd_ablate(args) -> None:
    from .evaluation import ablation_suite

    cfg = load_run_config(args.config, args.set)
    tc = _train_config(cfg, args, "finetune")
    corpus = D.load_manifest(args.data)
    pre_corpus = D.load_manifest(args.pretrain_data) if args.pretrain_data else None
    pre_cfg = replace(tc, stage="pretrain", steps=args.pretrain_steps or tc.steps) if pre_corpus else None
    rows = ablation_suite(cfg.model, tc, corpus, cfg.schedule.kind, cfg.schedule.num_steps, cfg.sampler,
                          pretrain_corpus=pre_corpus, pretrain_config=pre_cfg, eval_seed=tc.seed, out_dir=args.out)
    print(f"{'model':<14}{'MAE':>10}{'MAE px':>10}{'visual tokens':>15}{'params':>10}")
    for r in rows:
        print(f"{r.tag:<14}{r.mae_norm:>10.4f}{r.mae_px:>10.2f}{r.visual_tokens:>15}{r.parameters:>10}")


def cmd_execute(args) -> None:
    from . import execution as E

    waypoints, resolution, heights = E.load_waypoints(args.waypoints)
    depth = E.load_depth(args.depth)
    K = E.load_intrinsics(args.intrinsics)
    candidates = E.load_candidates(args.grasps)
    selector = E.FixedSelector(heights) if heights is not None else E.rule_selector
    plan = E.plan(waypoints, resolution, depth, K, candidates, args.max_step, selector, args.clearance)
    Path(args.out).write_text(json.dumps(plan.to_dict(), indent=1) + "\n")
    print(f"wrote a {len(plan.poses)}-pose plan to {args.out}")


def cmd_gradcheck(args) -> int:
    from .checks import model_gradcheck, primitive_suite

    dtypes = {"32": [np.float32], "64": [np.float64], "both": [np.float64, np.float32]}[args.precision]
    ok = True
    for dt in dtypes:
        bits = np.dtype(dt).itemsize * 8
        for r in primitive_suite(dt, range(args.seeds)):
            ok &= r.passed
            print(f"{'PASS' if r.passed else 'FAIL'} {bits}-bit {r.name:<16} max rel err {r.max_rel_error:.2e} (tol {r.tol:g})")
        rep = model_gradcheck(dt, seed=args.seed or 0, max_coords=args.coords)
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {bits}-bit {'model':<16} max rel err {rep.max_rel_error:.2e} (tol {rep.tol:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="affordiff", description="Diffusion waypoint prediction from images and instructions.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, steps=False):
        sp.add_argument("--seed", type=int, default=None, help="seed governing all randomness")
        if config:
            sp.add_argument("--config", help="JSON file with model/schedule/sampler/train sections")
            sp.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                            help="override one config field (repeatable)")
        if steps:
            sp.add_argument("--steps", type=int, default=None, help="optimizer steps (overrides config)")

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--task", choices=D.TASK_KINDS, default="push-line")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--chunk-size", type=int, default=5)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--workers", type=int, default=1)
    common(g)
    g.set_defaults(func=cmd_gen_data, seed=0)

    for name, func, hlp in (("pretrain", cmd_pretrain, "contact-point pre-training"),
                            ("finetune", cmd_finetune, "waypoint-chunk fine-tuning")):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--data", required=True, help="corpus directory")
        t.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
        if name == "finetune":
            t.add_argument("--init", required=True, help="checkpoint to start from (e.g. ck/best)")
        common(t, config=True, steps=True)
        t.set_defaults(func=func)

    pr = sub.add_parser("predict", help="one-shot inference for an image and instruction")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, help="current frame (PPM)")
    pr.add_argument("--previous", help="previous frame (PPM); defaults to the current frame")
    pr.add_argument("--instruction", required=True, help='e.g. "push red circle"')
    pr.add_argument("--out", required=True, help="waypoints JSON")
    pr.add_argument("--overlay", help="optional PPM with the waypoints drawn on the image")
    pr.add_argument("--sampler-steps", type=int, default=5)
    common(pr)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="held-out MAE of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", help="split tag to score; empty string for all records")
    e.add_argument("--out", help="report JSON")
    e.add_argument("--predictions", action="store_true", help="include sampled waypoints in the report")
    e.add_argument("--sampler-steps", type=int, default=5)
    e.add_argument("--n-seeds", type=int, default=1)
    e.add_argument("--workers", type=int, default=1)
    common(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train full, disable_poa and disable_sial arms and compare")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--pretrain-data", help="optional corpus for a pre-training stage per arm")
    a.add_argument("--pretrain-steps", type=int, default=None)
    common(a, config=True, steps=True)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("execute", help="lift waypoints to an SE(3) plan")
    x.add_argument("--waypoints", required=True, help='JSON {"waypoints": [[u, v], ...], "resolution": [w, h]}')
    x.add_argument("--depth", required=True, help="16-bit PGM depth map with a .json scale sidecar")
    x.add_argument("--intrinsics", required=True, help="JSON {fx, fy, cx, cy}")
    x.add_argument("--grasps", required=True, help="JSON list of {position, quaternion}")
    x.add_argument("--out", required=True)
    x.add_argument("--max-step", type=float, default=0.01, help="largest step between poses (m)")
    x.add_argument("--clearance", type=float, default=0.10, help="lift for above-target waypoints (m)")
    x.set_defaults(func=cmd_execute)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--precision", choices=("32", "64", "both"), default="both")
    c.add_argument("--seeds", type=int, default=100, help="random instances per primitive")
    c.add_argument("--coords", type=int, default=300, help="sampled model coordinates")
    common(c)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
