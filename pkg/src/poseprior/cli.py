"""Command-line entry point: ``poseprior {synth,fit-prior,train,score,eval,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``PAK_SEED`` in the
environment overrides ``--seed``. ``--config FILE`` loads a JSON object whose
keys mirror the long flag names (dashes or underscores); flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .dataset import build_windows
from .motion import FAMILIES, FUSE_MODES, MotionPrior, PriorFitError, fit_prior, histogram_edges, histogram_of
from .scoring import MetricError, attach_labels, evaluate, plot_series, read_scores, score_trajectories, write_scores
from .stt import ATTENTION_MODES, ConfigError, STTConfig, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate, read_labels, write_labels
from .trainer import TrainConfig, TrainingDiverged, train, warmup_lr
from .trajectory import TrajectoryFormatError, load_trajectories, write_trajectories

log = logging.getLogger("poseprior")

MANIFEST_NAME = "manifest.json"


class CommandError(RuntimeError):
    """Runtime failure reported to the user with exit status 1."""


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _on_off(value: str) -> bool:
    v = str(value).lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _seed(args) -> int:
    env = os.environ.get("PAK_SEED")
    return int(env) if env not in (None, "") else int(args.seed)


def _load_data(path):
    if not Path(path).exists():
        raise CommandError(f"data file not found: {path}")
    return load_trajectories(path)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _side_manifest(out, args, inputs: dict, **extra) -> None:
    """``<out stem>_manifest.json``: the arguments and input hashes that reproduce ``out``."""
    out = Path(out)
    settings = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "version": __version__,
        "command": args.command,
        "args": settings,
        "hashes": {name: sha256_of(path) for name, path in inputs.items() if path},
        **extra,
    }
    _write_json(out.with_name(out.stem + "_manifest.json"), manifest)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_normal=args.n_normal,
        n_anomalous=args.n_anomalous,
        normal_speed=args.speed,
        anomaly_speed_multiplier=args.multiplier,
        jitter_std=args.jitter,
        length=args.length,
        n_scenes=args.scenes,
        seed=_seed(args),
    )
    trajectories, labels = generate(spec)
    write_trajectories(args.out, trajectories)
    if args.labels:
        write_labels(args.labels, labels)
    _side_manifest(args.out, args, {}, seed=spec.seed, spec=spec.to_dict())
    print(f"wrote {len(trajectories)} trajectories to {args.out}")
    return 0


def cmd_fit_prior(args) -> int:
    wins = build_windows(_load_data(args.data), args.window, args.stride, args.poses)
    if len(wins) == 0:
        raise CommandError("no windows could be sampled from the data")
    v = wins.displacements().ravel()
    try:
        prior = fit_prior(v, args.family)
    except PriorFitError as exc:
        raise CommandError(f"prior fit failed: {exc}") from exc
    prior.save(args.out)
    hist = histogram_of(v, histogram_edges(float(v.max())))
    out = Path(args.out)
    _write_json(out.with_name(out.stem + "_hist.json"), {**hist.to_dict(), "samples": int(len(v))})
    _side_manifest(out, args, {"data": args.data})
    print(json.dumps(prior.to_dict()))
    return 0


def _model_config(args) -> STTConfig:
    return STTConfig(
        dim=args.dim,
        spatial_layers=args.ls,
        temporal_layers=args.lt,
        heads=args.heads,
        num_poses=args.poses,
        num_joints=args.joints,
        mask_ratio=args.mask_ratio,
        attention_mode=args.attention_mode,
        use_spe=args.spe,
        use_tpe=args.tpe,
    )


def cmd_train(args) -> int:
    seed = _seed(args)
    trajectories = _load_data(args.data)
    if not trajectories:
        raise CommandError("training data is empty")
    args.joints = trajectories[0].num_joints
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    prior = None
    prior_path = None
    if not args.no_me:
        if not args.prior:
            raise CommandError("--prior is required unless --no-me is given")
        prior_path = Path(args.prior)
        if not prior_path.exists():
            raise CommandError(f"prior file not found: {prior_path}")
        prior = MotionPrior.load(prior_path)

    model_config = _model_config(args)
    train_config = TrainConfig(
        learning_rate=args.lr,
        warmup_steps=args.warmup,
        batch_size=args.batch_size,
        epochs=args.epochs,
        max_steps=args.max_steps,
        weight_decay=args.weight_decay,
        seed=seed,
        checkpoint_every=args.checkpoint_every,
        dtype=args.dtype,
    )
    wins = build_windows(trajectories, args.window, args.stride, args.poses)
    log.info("%d training windows (%d dropped)", len(wins), wins.dropped)

    ckpt = out / "model.npz"
    run = {
        "fuse_mode": args.fuse_mode,
        "motion_embedding": not args.no_me,
        "window": args.window,
        "stride": args.stride,
        "prior": prior.to_dict() if prior else None,
    }
    manifest = {
        "version": __version__,
        "command": "train",
        "seed": seed,
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "run": run,
        "data": str(Path(args.data).resolve()),
        "prior_path": str(prior_path.resolve()) if prior_path else None,
        "checkpoint": str(ckpt.resolve()),
        "hashes": {"data": sha256_of(args.data), "prior": sha256_of(prior_path) if prior_path else None},
    }

    loss_log = open(out / "loss.csv", "w", encoding="utf-8")
    loss_log.write("step,loss,lr\n")

    def on_step(step, loss):
        loss_log.write(f"{step},{loss!r},{warmup_lr(step - 1, train_config)!r}\n")
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss)

    try:
        result = train(
            wins, prior, model_config, train_config, fuse_mode=args.fuse_mode,
            checkpoint_dir=out if args.checkpoint_every else None, on_step=on_step,
        )
    except TrainingDiverged as exc:
        if exc.params is not None:
            save_checkpoint(out / "partial.npz", exc.params, model_config, {"run": run, "diverged_at": exc.step})
        manifest["status"] = f"diverged at step {exc.step}"
        _write_json(out / MANIFEST_NAME, manifest)
        raise CommandError(f"training diverged: {exc}") from exc
    finally:
        loss_log.close()

    save_checkpoint(ckpt, result.params, model_config, {"run": run, "steps": result.steps})
    manifest["status"] = "ok"
    manifest["steps"] = result.steps
    manifest["final_loss"] = result.losses[-1]
    manifest["hashes"]["checkpoint"] = sha256_of(ckpt)
    _write_json(out / MANIFEST_NAME, manifest)
    print(f"trained {result.steps} steps, final loss {result.losses[-1]:.6f}; checkpoint {ckpt}")
    return 0


def _run_settings(checkpoint: Path, meta: dict) -> dict:
    manifest_path = checkpoint.parent / MANIFEST_NAME
    run = dict(meta.get("run") or {})
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("run") and manifest["run"] != run:
            raise CommandError(f"{manifest_path} disagrees with the checkpoint it describes")
    if not run:
        raise CommandError(f"{checkpoint} carries no run settings")
    return run


def cmd_score(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise CommandError(f"checkpoint not found: {checkpoint}")
    params, config, meta = load_checkpoint(checkpoint)
    run = _run_settings(checkpoint, meta)
    if args.fuse_mode and args.fuse_mode != run["fuse_mode"]:
        raise CommandError(f"--fuse-mode {args.fuse_mode} disagrees with the manifest ({run['fuse_mode']})")
    prior = MotionPrior.from_dict(run["prior"]) if run.get("prior") else None
    if args.prior:
        given = MotionPrior.load(args.prior)
        if prior is None or given.to_dict() != prior.to_dict():
            raise CommandError(f"--prior {args.prior} is not the prior this checkpoint was trained with")
    labels = read_labels(args.labels) if args.labels else None
    series = score_trajectories(
        _load_data(args.data), params, config, prior,
        fuse_mode=run["fuse_mode"], window=run["window"], stride=run["stride"],
        labels=labels, normalize=not args.no_normalize,
    )
    write_scores(args.out, series)
    _side_manifest(args.out, args, {"data": args.data, "checkpoint": checkpoint, "labels": args.labels}, run=run)
    print(f"scored {sum(len(s.frame_scores) for s in series)} frames in {len(series)} videos -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    series = read_scores(args.scores)
    if args.labels:
        series = attach_labels(series, read_labels(args.labels))
    try:
        report = evaluate(series)
    except MetricError as exc:
        raise CommandError(f"cannot compute AUC: {exc}") from exc
    print(f"AUC {report['auc']:.4f} over {report['frames']} frames")
    for scene, value in report["scenes"].items():
        print(f"  scene {scene}: {value:.4f}")
    if args.json:
        _write_json(args.json, report)
    return 0


def cmd_plot(args) -> int:
    series = read_scores(args.scores)
    if args.labels:
        series = attach_labels(series, read_labels(args.labels))
    paths = plot_series(series, args.out)
    print(f"wrote {len(paths)} plot(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_window_flags(p):
    p.add_argument("--window", type=int, default=16, help="frames per sliding window (default: %(default)s)")
    p.add_argument("--stride", type=int, default=2, help="frames between window starts (default: %(default)s)")
    p.add_argument("--poses", type=int, default=8, help="poses kept per window, T (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poseprior", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trajectory set with speed anomalies")
    p.add_argument("--out", required=True, help="trajectory JSON-lines file to write")
    p.add_argument("--labels", help="frame labels CSV to write")
    p.add_argument("--n-normal", type=int, default=200)
    p.add_argument("--n-anomalous", type=int, default=200)
    p.add_argument("--speed", type=float, default=0.01, help="Rayleigh scale of per-frame steps, fraction of w+h")
    p.add_argument("--multiplier", type=float, default=5.0, help="speed factor of anomalous walkers")
    p.add_argument("--jitter", type=float, default=0.004, help="joint jitter std, fraction of body height")
    p.add_argument("--length", type=int, default=64, help="frames per trajectory")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-prior", help="fit the motion prior to training displacements")
    p.add_argument("--data", required=True, help="training trajectories (JSON lines)")
    p.add_argument("--family", "--prior-family", dest="family", choices=FAMILIES, default="rayleigh",
                   help="prior family (default: %(default)s)")
    p.add_argument("--out", required=True, help="prior JSON to write; a _hist.json diagnostic goes next to it")
    _add_window_flags(p)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("train", help="train the reconstruction transformer")
    p.add_argument("--data", required=True, help="training trajectories (JSON lines)")
    p.add_argument("--prior", help="motion prior JSON from fit-prior")
    p.add_argument("--config", help="JSON file of flag values")
    p.add_argument("--out", required=True, help="run directory (checkpoint, manifest, loss log)")
    _add_window_flags(p)
    p.add_argument("--fuse-mode", choices=FUSE_MODES, default="divide",
                   help="how motion scales enter the pose (default: %(default)s)")
    p.add_argument("--no-me", action="store_true", help="disable motion embedding (scale fixed to 1)")
    p.add_argument("--attention-mode", choices=ATTENTION_MODES, default="spatial_temporal",
                   help="attention layout (default: %(default)s)")
    p.add_argument("--dim", type=int, default=128, help="embedding width C (default: %(default)s)")
    p.add_argument("--ls", type=int, default=2, help="spatial layers (default: %(default)s)")
    p.add_argument("--lt", type=int, default=2, help="temporal layers (default: %(default)s)")
    p.add_argument("--heads", type=int, default=8, help="attention heads (default: %(default)s)")
    p.add_argument("--mask-ratio", type=float, default=0.15, help="joint mask probability (default: %(default)s)")
    p.add_argument("--spe", type=_on_off, default=True, metavar="on|off", help="spatial position table (default: on)")
    p.add_argument("--tpe", type=_on_off, default=True, metavar="on|off", help="temporal position table (default: on)")
    p.add_argument("--lr", type=float, default=5e-5, help="peak learning rate (default: %(default)s)")
    p.add_argument("--warmup", type=int, default=1000, help="linear warm-up steps (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=256, help="windows per step (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=20, help="passes over the windows (default: %(default)s)")
    p.add_argument("--max-steps", type=int, default=None, help="optional cap on optimizer steps")
    p.add_argument("--weight-decay", type=float, default=0.01, help="decoupled weight decay (default: %(default)s)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save every N steps (0: only at the end)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="compute precision; checkpoints are always float64 (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="run seed; PAK_SEED overrides")
    p.set_defaults(func=cmd_train, joints=17)

    p = sub.add_parser("score", help="frame-level anomaly scores for a trajectory file")
    p.add_argument("--data", required=True, help="test trajectories (JSON lines)")
    p.add_argument("--checkpoint", required=True, help="model.npz from train")
    p.add_argument("--out", required=True, help="score CSV to write")
    p.add_argument("--labels", help="frame labels CSV; also defines videos and their lengths")
    p.add_argument("--prior", help="only accepted if identical to the training prior")
    p.add_argument("--fuse-mode", choices=FUSE_MODES, help="only accepted if equal to the training fuse mode")
    p.add_argument("--no-normalize", action="store_true", help="skip per-scene min-max normalization")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level AUC of a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", help="labels CSV; overrides the label column of the scores")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="one score-curve image per video")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--labels", help="labels CSV; overrides the label column of the scores")
    p.set_defaults(func=cmd_plot)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {path}: {exc}")
    if not isinstance(values, dict):
        parser.error(f"--config {path} must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    overrides = {}
    for key, value in values.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            parser.error(f"--config {path}: unknown key {key!r}")
        overrides[dest] = value
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, TrajectoryFormatError, ConfigError, MetricError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
