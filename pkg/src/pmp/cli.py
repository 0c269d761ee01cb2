"""Operator surface: data generation, training, evaluation, ablation sweeps,
latency benchmarking, saliency export, and plot emission.

Every command is seed-reproducible; errors go to stderr with a nonzero exit
status, and machine-readable artifacts are only written on success.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from pmp import envsim
from pmp.config import ConfigError, parse_config
from pmp.data import read_dataset, write_dataset
from pmp.encoders import InstructionVocab
from pmp.policy import AdamW, Observation, PointMapPolicy, TrainingData

TRAIN_COLUMNS = ["step", "loss", "grad_norm", "lr", "wall_ms"]
EVAL_COLUMNS = ["task", "modality", "fusion", "encoder", "seed", "episodes",
                "success_rate", "mean_final_dist"]


class CliError(RuntimeError):
    pass


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_metrics(rows, path, columns) -> None:
    """Append rows as CSV; the header is written once and must match."""
    path = Path(path)
    header = ",".join(columns)
    lines = []
    if path.exists() and path.stat().st_size > 0:
        existing = path.read_text(encoding="utf-8").splitlines()[0]
        if existing != header:
            raise CliError(f"header mismatch appending to {path}: {existing!r} != {header!r}")
    else:
        lines.append(header)
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise CliError(f"row missing columns {missing}")
        lines.append(",".join(_fmt(row[c]) for c in columns))
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def write_pgm(path, values01: np.ndarray) -> None:
    """Binary P5 graymap from an HxW array in [0, 1]."""
    arr = np.round(np.clip(values01, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _workers() -> int:
    raw = os.environ.get("PMP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"PMP_THREADS={raw!r} is not an integer") from None


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _rig_from_dataset(dataset) -> envsim.CameraRig:
    views = [
        envsim.CameraView(cal.intrinsics(dataset.img_w, dataset.img_h), cal.extrinsics(),
                          cal.d_min, cal.d_max)
        for cal in dataset.views
    ]
    return envsim.CameraRig(views)


def _infer_task(dataset) -> str:
    instructions = {ep.instruction for ep in dataset.episodes}
    if any("largest" in s for s in instructions):
        return envsim.REACH_GEOMETRY
    return envsim.REACH_COLOR


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    task = envsim.TaskSpec(args.task)
    rig = envsim.make_rig(args.img)
    dataset = envsim.generate_dataset(task, args.episodes, args.seed, rig,
                                      workers=_workers())
    n = write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.episodes)} episodes ({dataset.total_steps} steps, {n} bytes) "
          f"to {args.out}")
    return 0


def _train_policy(cfg, dataset, seed, log_rows=None):
    """Shared training loop; returns the trained policy."""
    vocab = InstructionVocab(envsim.INSTRUCTIONS)
    policy = PointMapPolicy(cfg, vocab, init_seed=seed)
    tdata = TrainingData(dataset, horizon=policy.chunk)
    policy.stats = tdata.stats
    opt = AdamW(policy.store, lr=float(cfg["train.lr"]),
                betas=(float(cfg["train.beta1"]), float(cfg["train.beta2"])),
                weight_decay=float(cfg["train.weight_decay"]))
    rng = np.random.default_rng(seed)
    batch_size = int(cfg["train.batch"])
    for step in range(int(cfg["train.steps"])):
        t0 = time.perf_counter()
        batch = tdata.sample_batch(rng, batch_size)
        metrics = policy.train_step(batch, opt, rng)
        if log_rows is not None:
            log_rows.append({
                "step": step,
                "loss": metrics["loss"],
                "grad_norm": metrics["grad_norm"],
                "lr": float(cfg["train.lr"]),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
    return policy


def cmd_train(args) -> int:
    cfg = parse_config(args.config, _overrides(args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output dir {out} is locked by another training run "
                       f"(remove {lock} if stale)") from None
    os.close(fd)
    try:
        dataset = read_dataset(args.data)
        rows = []
        policy = _train_policy(cfg, dataset, int(cfg["train.seed"]), rows)
        policy.save(out)
        emit_metrics(rows, out / "train.csv", TRAIN_COLUMNS)
        print(f"trained {cfg['train.steps']} steps; checkpoint in {out}")
    finally:
        lock.unlink(missing_ok=True)
    return 0


def cmd_eval(args) -> int:
    policy = PointMapPolicy.load(args.ckpt)
    task = envsim.TaskSpec(args.task)
    rig = envsim.make_rig(int(policy.cfg["env.img"]), int(policy.cfg["env.views"]))
    result = envsim.evaluate_policy(policy.as_eval_policy(), task, args.episodes,
                                    args.seed, rig, stride=int(policy.cfg["env.stride"]))
    row = {
        "task": args.task,
        "modality": policy.cfg["model.modality"],
        "fusion": policy.cfg["fusion.mode"],
        "encoder": policy.cfg["encoder.family"],
        "seed": args.seed,
        "episodes": args.episodes,
        "success_rate": result["success_rate"],
        "mean_final_dist": result["mean_final_dist"],
    }
    emit_metrics([row], args.out, EVAL_COLUMNS)
    print(f"success_rate={result['success_rate']:.3f} "
          f"mean_final_dist={result['mean_final_dist']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    base = parse_config(args.config, _overrides(args.set))
    dataset = read_dataset(args.data)
    task_name = _infer_task(dataset)
    task = envsim.TaskSpec(task_name)
    rig = _rig_from_dataset(dataset)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise CliError("--seeds needs at least one integer")
    families = [str(base["encoder.family"])] if args.families == "config" \
        else ["film-residual", "depthwise-conv"]

    rows = []
    cells = set()
    for family in families:
        for mode in ("early6ch", "add", "cat", "attn"):
            for modality in ("rgb", "xyz", "both"):
                for seed in seeds:
                    overrides = {
                        "encoder.family": family,
                        "fusion.mode": mode,
                        "model.modality": modality,
                    }
                    if mode == "add":
                        overrides["encoder.tokens"] = "pooled-single"
                    cfg = base.with_overrides(overrides)
                    policy = _train_policy(cfg, dataset, seed)
                    result = envsim.evaluate_policy(
                        policy.as_eval_policy(), task, int(cfg["env.eval_episodes"]),
                        seed, rig, stride=int(cfg["env.stride"]))
                    rows.append({
                        "task": task_name,
                        "modality": modality,
                        "fusion": mode,
                        "encoder": family,
                        "seed": seed,
                        "episodes": int(cfg["env.eval_episodes"]),
                        "success_rate": result["success_rate"],
                        "mean_final_dist": result["mean_final_dist"],
                    })
                    cells.add((mode, modality))
    if len(cells) < 12:
        raise CliError(f"ablation covered only {len(cells)} fusion x modality cells")
    emit_metrics(rows, args.out, EVAL_COLUMNS)
    print(f"ablation complete: {len(cells)} fusion x modality cells, "
          f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_latency(args) -> int:
    policy = PointMapPolicy.load(args.ckpt)
    task = envsim.TaskSpec(str(policy.cfg["env.task"]))
    rig = envsim.make_rig(int(policy.cfg["env.img"]), int(policy.cfg["env.views"]))
    state = envsim.reset_env(task, 0)
    views = envsim.observation_views(state.scene, rig)
    obs = Observation(views, state.instruction)

    policy.predict_chunk(obs, seed=0)  # warm-up
    policy.denoiser_calls = 0
    times = np.empty(args.iters)
    for i in range(args.iters):
        t0 = time.perf_counter()
        policy.predict_chunk(obs, seed=i)
        times[i] = (time.perf_counter() - t0) * 1e3
    calls_per_cycle = policy.denoiser_calls / args.iters
    expected = int(policy.cfg["diffusion.steps"])
    if calls_per_cycle != expected:
        raise CliError(
            f"{calls_per_cycle} denoiser evaluations per cycle, expected exactly {expected}"
        )
    print(f"cycles={args.iters} denoiser_evals_per_cycle={expected}")
    print(f"mean_ms={times.mean():.6g} p50_ms={np.percentile(times, 50):.6g} "
          f"p99_ms={np.percentile(times, 99):.6g}")
    return 0


def cmd_saliency(args) -> int:
    policy = PointMapPolicy.load(args.ckpt)
    dataset = read_dataset(args.data)
    if not (0 <= args.episode < len(dataset.episodes)):
        raise CliError(f"episode {args.episode} out of range [0, {len(dataset.episodes)})")
    episode = dataset.episodes[args.episode]
    if not (0 <= args.step < episode.n_steps):
        raise CliError(f"step {args.step} out of range [0, {episode.n_steps})")
    tdata = TrainingData(dataset, horizon=policy.chunk, stats=policy.stats)
    flat = 0
    for ep in dataset.episodes[: args.episode]:
        flat += ep.n_steps
    flat += args.step
    from pmp.geometry import PointMap

    views = []
    for v in range(dataset.n_views):
        coords = tdata.pmap[flat, v].astype(np.float64)
        views.append((tdata.rgb[flat, v].astype(np.float64),
                      PointMap(coords, np.ones(coords.shape[:2], bool), "world")))
    obs = Observation(views, episode.instruction)
    maps = policy.saliency_map(obs, tdata.chunks[flat].astype(np.float64), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (mod, view), sal in sorted(maps.items()):
        path = out / f"saliency_{mod}_view{view}.pgm"
        write_pgm(path, sal)
        print(f"wrote {path}")
    return 0


def cmd_plot(args) -> int:
    import csv

    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    with open(args.csv, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{args.csv} has no data rows")
    for col in (args.x, args.y):
        if col not in rows[0]:
            raise CliError(f"column {col!r} not in {list(rows[0])}")
    xs = [float(r[args.x]) for r in rows]
    ys = [float(r[args.y]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o", markersize=2.5, linewidth=1.0)
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.y)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    p.add_argument("--task", required=True, choices=list(envsim.TASKS))
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--img", type=int, default=64)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, choices=list(envsim.TASKS))
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="fusion x modality x encoder sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated list")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--families", choices=["all", "config"], default="all")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("latency", help="predict_chunk timing over many cycles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.set_defaults(fn=cmd_latency)

    p = sub.add_parser("saliency", help="input-gradient saliency maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episode", type=int, required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_saliency)

    p = sub.add_parser("plot", help="line plot of one CSV column vs another")
    p.add_argument("--csv", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
