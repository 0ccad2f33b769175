"""``countkit`` command-line entry point.

Exit status is 0 on success, 1 for usage and input errors and 2 for
anything unexpected. Every command writes ``run_manifest.json`` into the
directory holding its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .dataset import (
    DatasetSpec,
    NormalizationStats,
    balanced_plan,
    excerpt_features,
    fit_stats_on_set,
    prepare_input,
    realize_job,
)
from .datadir import prepare_mixture_dir, read_feature_dir, read_labels, write_feature_dir, write_labels, write_mixture
from .decision import decide_batch
from .dsp import FeatureKind, extract, read_wav
from .errors import CountkitError, TooShort
from .evaluation import evaluate
from .experiment import ExperimentConfig, run_experiment
from .corpus import toy_corpus
from .mixer import UtteranceCache, load_manifest
from .model import HeadKind, ModelConfig, load_checkpoint, predict_batch, save_checkpoint
from .training import TrainConfig, train
from .vad import DEFAULT_HANGOVER, DEFAULT_THRESHOLD_DB

log = logging.getLogger("countkit")

MANIFEST_NAME = "run_manifest.json"


class UsageError(CountkitError):
    """Bad command line or configuration file."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    version: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0

    def write(self, out_dir) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")
        return path


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value.strip("\"'")
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file mirroring the flags; flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for generation and featurisation")
    p.add_argument("--train-workers", type=int, default=1, help="accepted for compatibility; see README")
    p.add_argument("--vad-threshold-db", type=float, default=DEFAULT_THRESHOLD_DB)
    p.add_argument("--vad-hangover", type=int, default=DEFAULT_HANGOVER)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="countkit", description="Speaker-count estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"countkit {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a class-balanced mixture dataset")
    _common(p)
    p.add_argument("--corpus", required=True, help="corpus manifest JSON")
    p.add_argument("--kmax", type=int, required=True)
    p.add_argument("--per-k", type=int, required=True)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("featurize", help="extract time-frequency features of a mixture dataset")
    _common(p)
    p.add_argument("--feature", choices=[k.value for k in FeatureKind], required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="normalisation statistics JSON")
    p.add_argument("--fit-stats", action="store_true", help="fit --stats on this set")

    p = sub.add_parser("train", help="train a counting network")
    _common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--head", choices=[h.value for h in HeadKind], required=True)
    p.add_argument("--kmax", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="defaults to the statistics recorded with --features")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--excerpt", type=float, default=5.0, help="excerpt length in seconds")
    p.add_argument("--n-seeds", type=int, default=1, help="independent runs from consecutive seeds")

    p = sub.add_parser("predict", help="estimate the speaker count of one WAV file")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--poisson-rule", choices=["median", "mode"], default="median")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a featurised test set")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="directory for per-k MAE and confusion CSVs")
    p.add_argument("--poisson-rule", choices=["median", "mode"], default="median")

    p = sub.add_parser("toy-corpus", help="write a synthetic speaker corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-speakers", type=int, default=12)

    p = sub.add_parser("toy-experiment", help="run the desk-scale end-to-end experiment")
    _common(p)
    p.set_defaults(seed=ExperimentConfig.seed)
    p.add_argument("--out", default="toy_experiment")
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        if f.name in ("seed", "split", "heads"):
            continue
        value = getattr(defaults, f.name)
        p.add_argument("--" + f.name.replace("_", "-"), type=type(value), default=value)
    p.add_argument("--split", default=",".join(map(str, defaults.split)), help="train,val,test speaker counts")
    p.add_argument("--heads", default=",".join(defaults.heads))
    return parser


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file name")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    """Install file values as parser defaults, so command-line flags still win."""
    known = {a.dest: a for a in sub._actions}
    converted = {}
    for key, raw in read_config_file(path).items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"{path}: unknown setting '{key}' for {sub.prog}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            converted[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            converted[key] = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError(f"{path}: bad value for {key}: {raw!r}") from None
        if action.choices and converted[key] not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {', '.join(map(str, action.choices))}")
    sub.set_defaults(**converted)
    for a in sub._actions:
        if a.dest in converted:
            a.required = False


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    if path is not None:
        commands = parser._subparsers._group_actions[0].choices
        command = next((tok for tok in argv if tok in commands), None)
        if command is None:
            raise UsageError("--config must follow a command")
        _apply_config(commands[command], path)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

_worker_state: dict = {}


def _init_worker(corpus, threshold_db, hangover):
    cache = UtteranceCache(threshold_db, hangover)
    _worker_state["pool"], _worker_state["noise"] = load_manifest(corpus, cache)


def _realize(job, duration, k_max):
    return realize_job(job, _worker_state["pool"], _worker_state["noise"], duration, k_max)


def cmd_synth(args) -> RunManifest:
    if args.kmax < 0 or args.per_k < 1:
        raise UsageError("--kmax must be >= 0 and --per-k >= 1")
    jobs = balanced_plan(DatasetSpec(args.per_k, args.kmax, source_duration_s=args.duration), args.seed)
    prepare_mixture_dir(args.out)
    init = (args.corpus, args.vad_threshold_db, args.vad_hangover)
    _init_worker(*init)
    if len(_worker_state["pool"]) < args.kmax:
        raise UsageError(f"corpus has {len(_worker_state['pool'])} speakers, --kmax {args.kmax} needs more")
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=init) as ex:
            results = ex.map(_realize, jobs, [args.duration] * len(jobs), [args.kmax] * len(jobs))
            records = [write_mixture(args.out, i, m, s) for i, (m, s) in enumerate(results)]
    else:
        records = [write_mixture(args.out, i, *_realize(j, args.duration, args.kmax)) for i, j in enumerate(jobs)]
    write_labels(args.out, records)
    log.info("wrote %d mixtures to %s", len(records), args.out)
    return RunManifest("synth", {}, {"seed": args.seed}, __version__, [args.corpus], [args.out])


def _featurize_one(path, kind):
    return extract(read_wav(path), kind).data.astype(np.float32)


def cmd_featurize(args) -> RunManifest:
    kind = FeatureKind(args.feature)
    records = read_labels(args.in_dir)
    paths = [os.path.join(args.in_dir, "audio", r["id"] + ".wav") for r in records]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            feats = list(ex.map(_featurize_one, paths, [kind] * len(paths)))
    else:
        feats = [_featurize_one(p, kind) for p in paths]
    if len({f.shape for f in feats}) > 1:
        raise UsageError("mixtures differ in length; featurise each duration separately")
    X = np.stack(feats)
    stats_file = os.path.abspath(args.stats) if args.stats else None
    write_feature_dir(args.out, X, kind, args.in_dir, stats_file)
    outputs = [args.out]
    if args.fit_stats:
        if not args.stats:
            raise UsageError("--fit-stats needs --stats to name the output file")
        fs, _ = read_feature_dir(args.out)
        fit_stats_on_set(fs).save(args.stats)
        outputs.append(args.stats)
    elif args.stats:
        stats = NormalizationStats.load(args.stats)
        if stats.feature_kind != kind:
            raise UsageError(f"{args.stats} holds {stats.feature_kind.value} statistics, not {kind.value}")
    return RunManifest("featurize", {"feature": kind.value}, {}, __version__, [args.in_dir], outputs)


def _load_stats(path, header):
    path = path or header.get("stats_file")
    return NormalizationStats.load(path) if path else None


def cmd_train(args) -> RunManifest:
    if args.train_workers > 1:
        log.warning("--train-workers > 1 has no effect; batches are already vectorised")
    train_fs, header = read_feature_dir(args.features)
    val_fs, _ = read_feature_dir(args.val)
    stats = _load_stats(args.stats, header)
    if stats is not None and stats.feature_kind != train_fs.feature_kind:
        raise UsageError("statistics and features disagree on the feature kind")
    if val_fs.feature_kind != train_fs.feature_kind:
        raise UsageError("training and validation features disagree on the feature kind")
    if train_fs.k.max() > args.kmax or val_fs.k.max() > args.kmax:
        raise UsageError("a label exceeds --kmax")
    n_frames = int(round(args.excerpt * 100))
    model_cfg = ModelConfig(train_fs.features.shape[2], n_frames, HeadKind(args.head), args.kmax)
    summary = []
    for r in range(args.n_seeds):
        seed = args.seed + r
        run_dir = args.out if args.n_seeds == 1 else os.path.join(args.out, f"seed{seed}")
        tc = TrainConfig(args.lr, max_epochs=args.max_epochs, patience=args.patience, batch_size=args.batch_size,
                         seed=seed, excerpt_frames=n_frames)
        params, train_log = train(train_fs, val_fs, model_cfg, tc, stats)
        params.feature_kind = train_fs.feature_kind.value
        save_checkpoint(run_dir, params)
        with open(os.path.join(run_dir, "train_log.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(train_log.to_jsonl())
        summary.append({"seed": seed, "best_epoch": train_log.best_epoch,
                        "stopping_epoch": train_log.stopping_epoch, "best_val_loss": train_log.best_val_loss})
    if args.n_seeds > 1:
        with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
            mean = float(np.mean([s["best_val_loss"] for s in summary]))
            json.dump({"runs": summary, "mean_best_val_loss": mean}, fh, indent=1, sort_keys=True)
    config = {k: getattr(args, k) for k in ("head", "kmax", "lr", "max_epochs", "patience", "batch_size", "excerpt")}
    return RunManifest("train", config, {"seeds": [s["seed"] for s in summary]}, __version__,
                       [args.features, args.val], [args.out])


def _fit_length(X: np.ndarray, n_frames: int) -> np.ndarray:
    """Leading ``n_frames`` frames; the dense layer fixes the input length."""
    if X.shape[0] < n_frames:
        raise TooShort(f"input has {X.shape[0]} frames, the model needs {n_frames}")
    return X[:n_frames]


def cmd_predict(args):
    params, _ = load_checkpoint(args.ckpt)
    kind = FeatureKind(params.feature_kind or "stft")
    X = _fit_length(extract(read_wav(args.wav), kind).data, params.config.n_frames)
    act = predict_batch(params, prepare_input(X, params.stats)[None])[0]
    k_hat = int(decide_batch(params.config.head_kind, act[None], args.poisson_rule)[0])
    raw = act.tolist() if params.config.head_kind == HeadKind.CLASSIFICATION else float(act[0])
    print(f"k_hat {k_hat}")
    print(f"raw {json.dumps(raw)}")
    return None


def cmd_eval(args) -> RunManifest:
    params, _ = load_checkpoint(args.ckpt)
    fs, _ = read_feature_dir(args.test)
    if params.feature_kind and FeatureKind(params.feature_kind) != fs.feature_kind:
        raise UsageError(f"checkpoint expects {params.feature_kind} features, test set has {fs.feature_kind.value}")
    n_frames = params.config.n_frames
    rng = np.random.default_rng(args.seed)
    xs, ks = [], []
    for i in range(len(fs)):
        x, k, _ = excerpt_features(fs, i, n_frames, rng)
        xs.append(prepare_input(x, params.stats))
        ks.append(k)
    if max(ks) > params.config.k_max:
        raise UsageError("test labels exceed the checkpoint's k_max")
    X = np.stack(xs).astype(params.dtype)
    act = np.concatenate([predict_batch(params, X[i : i + 32]) for i in range(0, len(X), 32)])
    k_hat = decide_batch(params.config.head_kind, act, args.poisson_rule)
    report = evaluate(zip(ks, k_hat), params.config.k_max)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"head_kind": params.config.head_kind.value, **report.to_json()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    outputs = [args.out]
    if args.csv:
        report.write_csv(args.csv)
        RunManifest("eval", vars(args).copy(), {"seed": args.seed}, __version__, [args.ckpt, args.test],
                    [args.csv]).write(args.csv)
        outputs.append(args.csv)
    log.info("MAE %.4f", report.overall_mae)
    return RunManifest("eval", {}, {"seed": args.seed}, __version__, [args.ckpt, args.test], outputs), out_dir


def cmd_toy_corpus(args) -> RunManifest:
    if args.n_speakers < 1:
        raise UsageError("--n-speakers must be >= 1")
    path = toy_corpus(args.out, args.n_speakers, args.seed)
    return RunManifest("toy-corpus", {"n_speakers": args.n_speakers}, {"seed": args.seed}, __version__, [], [path])


def cmd_toy_experiment(args) -> RunManifest:
    try:
        split = tuple(int(v) for v in args.split.split(","))
        config = ExperimentConfig(
            seed=args.seed, split=split, heads=tuple(h.strip() for h in args.heads.split(",")),
            **{f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if f.name not in ("seed", "split", "heads")},
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run_experiment(args.out, config)
    for head, res in report["heads"].items():
        print(f"{head:<15s} MAE {res['aggregate']['overall_mae']:.4f}")
    print(f"{'vq baseline':<15s} MAE {report['vq_baseline']['overall_mae']:.4f}")
    print(f"{'mean estimator':<15s} MAE {report['mean_estimator']['overall_mae']:.4f}")
    return RunManifest("toy-experiment", asdict(config), {"seed": args.seed}, __version__, [],
                       [os.path.join(args.out, "report.json")])


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "toy-corpus": cmd_toy_corpus,
    "toy-experiment": cmd_toy_experiment,
}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help and --version
        return 0 if exc.code in (0, None) else 1
    except CountkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        manifest = COMMANDS[args.command](args)
    except (CountkitError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    if manifest is not None:
        out_dir = args.out
        if isinstance(manifest, tuple):
            manifest, out_dir = manifest
        manifest.config = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
        manifest.wall_time_s = time.perf_counter() - t0
        manifest.write(out_dir)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
