"""Command-line entry point.

Subcommands: prepare, train, eval, predict, cross-eval, interrater,
params, gradcheck, benchmark. Flags override config-file values; the
effective config is copied into the output directory of every run.
Seed precedence: --seed flag, config file, RETINA_FORGE_SEED, default.
"""

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import gradcheck as gc
from . import metrics as M
from . import pipeline as P
from . import reports as R
from .architectures import KINDS, build_model, count_parameters, default_spec
from .data import (
    load_cache,
    load_dataset,
    load_weights,
    save_weights,
    serialize_weights,
    write_binary_map,
    write_cache,
    write_probability_map,
)
from .errors import ConfigError, RetinaForgeError, VerificationError
from .training import TrainConfig, train

DEFAULT_SEED = 1234
SEED_ENV = "RETINA_FORGE_SEED"

# Table-4 parameter budgets per architecture, checked at +-15%
PARAM_BUDGETS = {
    "unet": 7.8e6,
    "miunet": 0.069e6,
    "iternet": 8e6,
    "itermiunet": 0.15e6,
}
BUDGET_SLACK = 0.15


@dataclasses.dataclass
class RunConfig:
    manifest: str = None
    arch: str = "itermiunet"
    out: str = "runs/out"
    weights: str = None
    seed: int = DEFAULT_SEED
    fold: int = None
    # training (paper defaults)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    dropout: float = 0.1
    iterations: int = 4
    # pipeline
    patches_per_image: int = 10000
    stride: int = 5
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    gamma: float = 1.2
    fov_threshold: float = 30 / 255

    def cache_dir(self):
        return os.path.join(self.out, "cache")

    def pipeline_params(self):
        return P.PipelineParams(
            clahe_clip=self.clahe_clip,
            clahe_tiles=self.clahe_tiles,
            gamma=self.gamma,
            fov_threshold=self.fov_threshold,
        )

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            initial_lr=self.lr,
            plateau_patience=self.plateau_patience,
            lr_decay_factor=self.lr_decay_factor,
            dropout=self.dropout,
            iterations=self.iterations,
            seed=self.seed,
        )


def _resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid config JSON ({exc})")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(file_values) - known
        if unknown:
            raise ConfigError(f"{args.config}: unknown config keys {sorted(unknown)}")
        values.update(file_values)
    for f in dataclasses.fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    if "seed" not in values:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                values["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}")
    cfg = RunConfig(**values)
    if cfg.arch not in KINDS:
        raise ConfigError(f"unknown architecture {cfg.arch!r}; pick one of {KINDS}")
    return cfg


def _write_config_copy(cfg, name):
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"{name}_config.json")
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=1, sort_keys=True)
    return path


def _model_spec(cfg):
    n = cfg.iterations if cfg.arch in ("iternet", "itermiunet") else None
    return default_spec(cfg.arch, iterations=n)


# ---------------------------------------------------------------- commands

def cmd_prepare(cfg):
    if not cfg.manifest:
        raise ConfigError("prepare needs --manifest")
    name, samples, _plan = load_dataset(cfg.manifest, fov_threshold=cfg.fov_threshold)
    print(f"dataset {name}: {len(samples)} samples")
    preprocessed = P.preprocess_images([s.rgb for s in samples], cfg.pipeline_params())
    with open(cfg.manifest) as fh:
        split_doc = json.load(fh)["split"]
    write_cache(cfg.cache_dir(), name, samples, preprocessed, split_doc, cfg.pipeline_params())
    _write_config_copy(cfg, "prepare")
    print(f"cache written to {cfg.cache_dir()}")
    return 0


def _load_prepared(cfg):
    return load_cache(cfg.cache_dir())


def _sample_split_patches(samples, train_ids, cfg):
    by_id = {s.id: s for s in samples}
    val_count = max(1, cfg.patches_per_image // 10)
    train_sets, val_sets = [], []
    for sid in train_ids:
        s = by_id[sid]
        ps = P.sample_training_patches(
            s.image, s.gt1, cfg.patches_per_image, seed=cfg.seed, image_id=sid
        )
        tr, va = P.split_train_val(ps, val_count=val_count)
        train_sets.append(tr)
        val_sets.append(va)
    return P.concat_patchsets(train_sets), P.concat_patchsets(val_sets)


def cmd_train(cfg):
    name, samples, plan, _pipe = _load_prepared(cfg)
    folds = plan.folds if cfg.fold is None else [plan.folds[cfg.fold]]
    fold_ids = range(len(plan.folds)) if cfg.fold is None else [cfg.fold]
    _write_config_copy(cfg, "train")
    for k, fold in zip(fold_ids, folds):
        out_dir = os.path.join(cfg.out, "train", f"fold_{k:02d}")
        os.makedirs(out_dir, exist_ok=True)
        print(f"fold {k}: {len(fold.train_ids)} train images, {len(fold.test_ids)} test images")
        train_set, val_set = _sample_split_patches(samples, fold.train_ids, cfg)
        print(f"fold {k}: {len(train_set)} train patches, {len(val_set)} val patches")
        model = build_model(_model_spec(cfg), seed=cfg.seed)
        history = train(
            model,
            train_set,
            val_set,
            cfg.train_config(),
            checkpoint_path=os.path.join(out_dir, "best.weights"),
            log=print,
        )
        history.to_csv(os.path.join(out_dir, "history.csv"))
        R.save_history_figure(history, os.path.join(out_dir, "history.png"))
        print(f"fold {k}: best val {history.best_val:.4f} at epoch {history.best_epoch}")
    return 0


def _fold_weights_path(weights, k):
    if os.path.isdir(weights):
        candidate = os.path.join(weights, "train", f"fold_{k:02d}", "best.weights")
        if not os.path.exists(candidate):
            candidate = os.path.join(weights, f"fold_{k:02d}", "best.weights")
        return candidate
    return weights


def _load_model_for(cfg, k):
    if not cfg.weights:
        raise ConfigError("this command needs --weights")
    path = _fold_weights_path(cfg.weights, k)
    model, header = load_weights(path, expected_spec=_model_spec(cfg))
    return model, path


def _emit_reports(cfg, label, per_image, pooled, curve=None):
    out_dir = os.path.join(cfg.out, label)
    reports = per_image + [pooled]
    R.metrics_to_csv(reports, os.path.join(out_dir, "metrics.csv"))
    table = R.metrics_table(reports, title=label)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    if curve is not None:
        R.save_roc_figure({label: curve}, os.path.join(out_dir, "roc.png"), title=label)
    print(table)
    return out_dir


def _write_maps(out_dir, maps):
    for sid, prob in maps.items():
        write_probability_map(prob, os.path.join(out_dir, "maps", f"{sid}_prob.png"))
        write_binary_map(prob, M.THRESHOLD, os.path.join(out_dir, "maps", f"{sid}_bin.png"))


def cmd_eval(cfg):
    name, samples, plan, _pipe = _load_prepared(cfg)
    by_id = {s.id: s for s in samples}
    _write_config_copy(cfg, "eval")
    all_per, pooled_counts = [], M.ConfusionCounts(0, 0, 0, 0)
    pooled_scores, pooled_labels = [], []
    maps = {}
    folds = plan.folds if cfg.fold is None else [plan.folds[cfg.fold]]
    fold_ids = range(len(plan.folds)) if cfg.fold is None else [cfg.fold]
    for k, fold in zip(fold_ids, folds):
        model, path = _load_model_for(cfg, k)
        test = [by_id[sid] for sid in fold.test_ids]
        per_image, fold_pooled, _curve = M.evaluate_model(
            model, test, stride=cfg.stride, batch_size=cfg.batch_size, probability_maps=maps
        )
        all_per.extend(per_image)
        pooled_counts = pooled_counts + fold_pooled.counts
        for sample in test:
            prob = maps[sample.id]
            fovb = sample.fov.astype(bool)
            pooled_scores.append(prob[fovb])
            pooled_labels.append(sample.gt1[fovb].astype(bool))
    pooled_auc, curve = M.roc_auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    pooled = M.compute_metrics(pooled_counts, scope="pooled", auc=pooled_auc)
    out_dir = _emit_reports(cfg, "eval", all_per, pooled, curve)
    _write_maps(out_dir, maps)
    return 0


def cmd_predict(cfg):
    name, samples, plan, _pipe = _load_prepared(cfg)
    model, path = _load_model_for(cfg, 0)
    _write_config_copy(cfg, "predict")
    out_dir = os.path.join(cfg.out, "predict")
    maps = {}
    for sample in samples:
        maps[sample.id] = M.predict_image(
            model, sample.image, stride=cfg.stride, batch_size=cfg.batch_size
        )
    _write_maps(out_dir, maps)
    print(f"wrote {2 * len(maps)} maps to {os.path.join(out_dir, 'maps')}")
    return 0


def cmd_cross_eval(cfg):
    """Evaluate trained weights on a foreign manifest (its own statistics)."""
    if not cfg.manifest:
        raise ConfigError("cross-eval needs --manifest pointing at the foreign dataset")
    model, path = _load_model_for(cfg, 0)
    name, raw_samples, plan = load_dataset(cfg.manifest, fov_threshold=cfg.fov_threshold)
    print(f"cross-evaluating {os.path.basename(path)} on {name}")
    preprocessed = P.preprocess_images([s.rgb for s in raw_samples], cfg.pipeline_params())
    from .data import CachedSample

    samples = [
        CachedSample(id=s.id, image=img, gt1=s.gt1, fov=s.fov, gt2=s.gt2)
        for s, img in zip(raw_samples, preprocessed)
    ]
    by_id = {s.id: s for s in samples}
    test = [by_id[sid] for sid in plan.test_union()]
    _write_config_copy(cfg, "cross_eval")
    maps = {}
    per_image, pooled, curve = M.cross_train_eval(
        model, test, stride=cfg.stride, batch_size=cfg.batch_size, probability_maps=maps
    )
    out_dir = _emit_reports(cfg, f"cross_eval_{name}", per_image, pooled, curve)
    _write_maps(out_dir, maps)
    return 0


def cmd_interrater(cfg):
    name, samples, plan, _pipe = _load_prepared(cfg)
    by_id = {s.id: s for s in samples}
    test = [by_id[sid] for sid in plan.test_union() if by_id[sid].gt2 is not None]
    if not test:
        from .errors import DataError

        raise DataError("no test samples carry second-expert annotations")
    model, _path = _load_model_for(cfg, 0)
    _write_config_copy(cfg, "interrater")
    (model_per, model_pooled), (human_per, human_pooled) = M.inter_rater_eval(
        model, test, stride=cfg.stride, batch_size=cfg.batch_size
    )
    _emit_reports(cfg, "interrater_model_vs_expert2", model_per, model_pooled)
    _emit_reports(cfg, "interrater_expert1_vs_expert2", human_per, human_pooled)
    return 0


def check_param_budgets(counts):
    """Raises VerificationError unless counts satisfy the published budgets."""
    problems = []
    for kind, target in PARAM_BUDGETS.items():
        c = counts[kind]
        if abs(c - target) > BUDGET_SLACK * target:
            problems.append(f"{kind}: {c:,} outside +-15% of {target:,.0f}")
    order = ["miunet", "itermiunet", "unet", "iternet"]
    vals = [counts[k] for k in order]
    if not all(a < b for a, b in zip(vals, vals[1:])):
        problems.append(f"ordering miunet < itermiunet < unet < iternet violated: {vals}")
    if counts["itermiunet"] * 50 >= counts["iternet"]:
        problems.append(
            f"itermiunet ({counts['itermiunet']:,}) is not under 1/50th of "
            f"iternet ({counts['iternet']:,})"
        )
    if problems:
        raise VerificationError("parameter budget check failed: " + "; ".join(problems))


def cmd_params(cfg, write_out=False):
    rows = []
    counts = {}
    for kind in ("unet", "miunet", "iternet", "itermiunet"):
        model = build_model(default_spec(kind), seed=cfg.seed)
        n = count_parameters(model)
        size = len(serialize_weights(model))
        counts[kind] = n
        rows.append((kind, n, size))
    print(R.params_table(rows))
    if write_out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "params.csv"), "w") as fh:
            fh.write("model,parameters,size_bytes\n")
            for kind, n, size in rows:
                fh.write(f"{kind},{n},{size}\n")
        R.save_params_figure(counts, os.path.join(cfg.out, "params.png"))
    check_param_budgets(counts)
    print("parameter budgets: within +-15% of published values, ordering holds")
    return 0


def cmd_gradcheck(cfg, trials=100):
    results = gc.run_suite(seed=cfg.seed, composition_trials=trials)
    width = max(len(k) for k in results)
    for name, err in results.items():
        status = "ok" if err < gc.TOLERANCE else "FAIL"
        print(f"{name.ljust(width)}  max rel err {err:.3e}  {status}")
    if not gc.suite_passed(results):
        raise VerificationError("gradient check failed; see report above")
    print(f"gradient suite passed at tolerance {gc.TOLERANCE:g}")
    return 0


def cmd_benchmark(cfg, steps=3, image_size=128):
    """Report (never assert) per-architecture step and inference timings."""
    from .engine import Tape, Tensor, adam_step, backward
    from .training import composite_loss

    rng = np.random.default_rng(cfg.seed)
    batch = rng.random((cfg.batch_size, 48, 48, 1)).astype(np.float32)
    labels = (rng.random((cfg.batch_size, 48, 48, 1)) > 0.8).astype(np.float32)
    print(f"batch {cfg.batch_size}, {steps} timed steps, inference on {image_size}px image, stride {cfg.stride}")
    for kind in ("unet", "miunet", "iternet", "itermiunet"):
        model = build_model(default_spec(kind), seed=cfg.seed)
        drng = np.random.default_rng(cfg.seed)
        t0 = time.perf_counter()
        for _ in range(steps):
            with Tape() as tape:
                out = model.forward(batch, training=True, rng=drng, dropout_rate=cfg.dropout)
                loss = composite_loss(out.maps, Tensor(labels))
            backward(tape, loss)
            adam_step(model.store, cfg.lr)
        step_time = (time.perf_counter() - t0) / steps
        img = rng.random((image_size, image_size)).astype(np.float32)
        t0 = time.perf_counter()
        M.predict_image(model, img, stride=cfg.stride, batch_size=cfg.batch_size)
        infer_time = time.perf_counter() - t0
        print(
            f"{kind:12s} train step {step_time * 1e3:8.1f} ms   "
            f"tiled inference {infer_time:6.2f} s ({P.tile_grid_count(image_size, image_size, cfg.stride)} tiles)"
        )
    print("timings are hardware-bound and reported for reference only")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="retinaforge",
        description="Lightweight retinal-vessel segmentation toolkit "
        "(unet / miunet / iternet / itermiunet)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, manifest=False, weights=False):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--arch", choices=KINDS)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest JSON")
        if weights:
            p.add_argument("--weights", help="weight archive file or training output dir")
        p.add_argument("--stride", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        return p

    p = common(sub.add_parser("prepare", help="preprocess a dataset into a cache"), manifest=True)
    p.add_argument("--clahe-clip", type=float, dest="clahe_clip")
    p.add_argument("--clahe-tiles", type=int, dest="clahe_tiles")
    p.add_argument("--gamma", type=float)
    p.add_argument("--fov-threshold", type=float, dest="fov_threshold")

    p = common(sub.add_parser("train", help="train on the prepared cache"), manifest=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--iterations", type=int, help="N, number of output maps")
    p.add_argument("--patches-per-image", type=int, dest="patches_per_image")
    p.add_argument("--fold", type=int, help="train only this fold")

    p = common(sub.add_parser("eval", help="tiled evaluation on the test split"), weights=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--fold", type=int)

    p = common(sub.add_parser("predict", help="write probability/binary maps"), weights=True)
    p.add_argument("--iterations", type=int)

    p = common(
        sub.add_parser("cross-eval", help="evaluate weights on a foreign dataset"),
        manifest=True,
        weights=True,
    )
    p.add_argument("--iterations", type=int)

    p = common(sub.add_parser("interrater", help="score model and expert 1 against expert 2"), weights=True)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("params", help="parameter/size table with budget self-check")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write params.csv and params.png here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=100)

    p = common(sub.add_parser("benchmark", help="report training/inference timings"))
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--image-size", type=int, default=128, dest="image_size")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "cross-eval":
            return cmd_cross_eval(cfg)
        if args.command == "interrater":
            return cmd_interrater(cfg)
        if args.command == "params":
            return cmd_params(cfg, write_out=bool(args.out))
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, trials=args.trials)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, steps=args.steps, image_size=args.image_size)
        parser.error(f"unknown command {args.command}")
    except RetinaForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
