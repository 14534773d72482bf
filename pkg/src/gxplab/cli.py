"""Configuration-driven command line: train models per regime, attack them,
attribute, score explanation quality, verify analytic bounds, and compare runs.

Every subcommand takes --seed and --out, reads an optional JSON config of flat
dotted keys (e.g. {"pgd.eps": 0.1}), accepts --set key=value overrides, writes
its artifacts under the output directory, and finishes with a manifest.json
listing every output file digest. Exit codes: 0 success, 2 validation failure,
3 invariant/assertion failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .data import DATASET_NAMES, PerturbationSpec, get_dataset
from .metrics import (
    MetricReport,
    attribution_fn,
    gini,
    road_curve,
    ros,
    select_cohort,
    ssim_stability,
)
from .models import ARCHITECTURES, SmoothingConfig, build_model
from .stability import fuzz_bounds
from .training import PGDConfig, TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INVARIANT = 3

CHECKPOINT_NAME = "model.ckpt"

DEFAULTS: dict = {
    # data
    "dataset": "synth10",
    "data_dir": None,
    "n_train": None,
    "n_test": None,
    # model
    "arch": "fmnist_cnn",
    "activation": "softplus",      # single_layer only
    # training
    "regime": "natural",
    "optimizer": "adam",
    "lr": 1e-3,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "epochs": 5,
    "batch_size": 128,
    "lr_decay_epochs": [],
    "lr_decay_factor": 0.1,
    "eval_subset": 512,
    # attacks
    "pgd.eps": 0.1,
    "pgd.step_size": None,
    "pgd.steps": 10,
    "pgd.random_start": True,
    "eval_pgd.eps": 0.1,
    "eval_pgd.step_size": None,
    "eval_pgd.steps": 20,
    "eval_pgd.random_start": True,
    # smoothing block
    "smoothing.kind": "gaussian",
    "smoothing.placement": None,   # None = first declared insertion point
    "smoothing.kernel_size": 3,
    "smoothing.sigma": None,
    # attribution
    "attribute.method": "VG",
    "attribute.count": 8,
    "attribute.ig_steps": 128,
    # metric suite
    "metrics.methods": ["VG"],
    "metrics.cohort": 200,
    "metrics.sigma_noise": 0.05,
    "metrics.samples": 32,
    "metrics.max_attempts": 10,
    "metrics.p": 2,
    "metrics.eps_min": 1e-6,
    "metrics.ig_steps": 128,
    # removal curves
    "road.images": 200,
    "road.k_step": 5.0,
    "road.n_levels": 10,
    "road.sigma_imp": 0.01,
    # ssim sweep
    "ssim.sigmas": [0.01, 0.02, 0.05, 0.1, 0.2],
    "ssim.images": 20,
    "ssim.samples": 16,
    # bound fuzzing
    "bounds.activations": ["identity", "softplus", "sigmoid", "tanh"],
    "bounds.methods": ["VG", "IG"],
    "bounds.trials": 10000,
    "bounds.dims": [2, 8, 64],
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config resolution and manifests
# ---------------------------------------------------------------------------


def _parse_literal(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(config_path, sets, flag_overrides) -> dict:
    cfg = dict(DEFAULTS)

    def apply(key, value, source):
        if key not in cfg:
            raise CliError(f"unknown config key {key!r} (from {source})")
        cfg[key] = value

    if config_path:
        if not os.path.exists(config_path):
            raise CliError(f"config file not found: {config_path}")
        with open(config_path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CliError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise CliError(f"config file {config_path} must hold a JSON object")
        for key, value in loaded.items():
            apply(key, value, config_path)
    for item in sets or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(f"--set needs key=value, got {item!r}")
        apply(key, _parse_literal(raw), "--set")
    for key, value in (flag_overrides or {}).items():
        if value is not None:
            apply(key, value, "flag")
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class Run:
    """Output directory handle: collects artifacts, then writes the manifest."""

    def __init__(self, command: str, args, cfg: dict):
        out = args.out or (
            os.path.join(os.environ["GXP_OUT"], command) if os.environ.get("GXP_OUT") else None
        )
        if not out:
            raise CliError(f"{command}: pass --out or set GXP_OUT")
        os.makedirs(out, exist_ok=True)
        self.command = command
        self.out = out
        self.cfg = cfg
        self.seed = args.seed
        self.t0 = time.perf_counter()
        self.files: list[str] = []
        self.phases: dict[str, float] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def track(self, name: str) -> str:
        if name not in self.files:
            self.files.append(name)
        return self.path(name)

    def write_text(self, name: str, text: str) -> str:
        p = self.track(name)
        with open(p, "w") as fh:
            fh.write(text)
        return p

    def write_json(self, name: str, obj) -> str:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def phase(self, name: str, t_start: float) -> None:
        self.phases[name] = round(time.perf_counter() - t_start, 3)

    def finish(self, **extra) -> int:
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "config": self.cfg,
            "config_digest": config_digest(self.cfg),
            "files": {name: file_digest(self.path(name)) for name in self.files},
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
        }
        if self.phases:
            manifest["phase_seconds"] = self.phases
        if extra:
            manifest.update(extra)
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return EXIT_OK


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _pgd_from(cfg: dict, prefix: str) -> PGDConfig:
    return PGDConfig(
        eps=float(cfg[f"{prefix}.eps"]),
        step_size=cfg[f"{prefix}.step_size"],
        steps=int(cfg[f"{prefix}.steps"]),
        random_start=bool(cfg[f"{prefix}.random_start"]),
    )


def _smoothing_from(cfg: dict) -> SmoothingConfig:
    return SmoothingConfig(
        kind=cfg["smoothing.kind"],
        placement=cfg["smoothing.placement"],
        kernel_size=int(cfg["smoothing.kernel_size"]),
        sigma=cfg["smoothing.sigma"],
    )


def regime_label(regime: str, smoothing_kind: str | None) -> str:
    """Table shorthand: N natural, A adversarial, G/M1/M2 adversarial+smooth
    with gaussian/mean/median filters."""
    if regime == "natural":
        return "N"
    if regime == "adversarial":
        return "A"
    return {"gaussian": "G", "mean": "M1", "median": "M2"}[smoothing_kind]


def _dataset(cfg: dict, split: str, seed: int):
    n = cfg["n_train"] if split == "train" else cfg["n_test"]
    try:
        return get_dataset(cfg["dataset"], split, n=n, seed=seed, data_dir=cfg["data_dir"])
    except FileNotFoundError as exc:
        raise CliError(str(exc))
    except ValueError as exc:
        raise CliError(str(exc))


def save_model(run: Run, model, extra: dict) -> str:
    ckpt = run.track(CHECKPOINT_NAME)
    save_checkpoint(ckpt, model)
    sidecar = {
        "arch": model.architecture_id,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "smoothing": asdict(model.smoothing) if model.smoothing else None,
    }
    sidecar.update(extra)
    run.write_json(CHECKPOINT_NAME + ".json", sidecar)
    return ckpt


def load_model(path: str):
    """Rebuild a model from a checkpoint and its sidecar. `path` may be the
    checkpoint file or a directory containing model.ckpt."""
    ckpt = os.path.join(path, CHECKPOINT_NAME) if os.path.isdir(path) else path
    sidecar_path = ckpt + ".json"
    if not os.path.exists(ckpt) or not os.path.exists(sidecar_path):
        raise CliError(
            f"no trained model at {path!r} (need {CHECKPOINT_NAME} and its .json "
            f"sidecar); run `gxplab train` first"
        )
    with open(sidecar_path) as fh:
        side = json.load(fh)
    arch, params = load_checkpoint(ckpt)
    if arch != side["arch"]:
        raise CliError(f"sidecar architecture {side['arch']!r} does not match checkpoint {arch!r}")
    smoothing = SmoothingConfig(**side["smoothing"]) if side.get("smoothing") else None
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = build_model(arch, tuple(side["input_shape"]), side["class_count"],
                        smoothing=smoothing, dtype=dtype)
    model.load_state_dict(params)
    return model


def _model_digest(path: str) -> str:
    ckpt = os.path.join(path, CHECKPOINT_NAME) if os.path.isdir(path) else path
    return file_digest(ckpt)


def _parse_labeled(pairs, what: str) -> dict[str, str]:
    out = {}
    for item in pairs:
        label, sep, path = item.partition("=")
        if not sep or not label:
            raise CliError(f"{what} must be LABEL=PATH, got {item!r}")
        out[label] = path
    return out


def _per_image_spec(cfg: dict, seed: int, index: int) -> PerturbationSpec:
    return PerturbationSpec(
        sigma_noise=float(cfg["metrics.sigma_noise"]),
        count=int(cfg["metrics.samples"]),
        max_attempts=int(cfg["metrics.max_attempts"]),
        seed=seed * 1_000_003 + int(index),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "regime": args.regime, "dataset": args.dataset, "arch": args.arch,
        "epochs": args.epochs, "smoothing.kind": args.smoothing_kind,
        "smoothing.placement": args.placement,
    })
    run = Run("train", args, cfg)
    ds = _dataset(cfg, "train", args.seed)
    adversarial = cfg["regime"] != "natural"
    smoothing = _smoothing_from(cfg) if cfg["regime"] == "adversarial+smooth" else None
    try:
        model = build_model(cfg["arch"], ds.images.shape[1:], ds.class_count,
                            smoothing=smoothing, seed=args.seed,
                            activation=cfg["activation"])
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc))
    tc = TrainConfig(
        regime=cfg["regime"], optimizer=cfg["optimizer"], lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]), weight_decay=float(cfg["weight_decay"]),
        epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), seed=args.seed,
        pgd=_pgd_from(cfg, "pgd") if adversarial else None,
        eval_pgd=_pgd_from(cfg, "eval_pgd") if adversarial else None,
        lr_decay_epochs=tuple(cfg["lr_decay_epochs"]),
        lr_decay_factor=float(cfg["lr_decay_factor"]),
        eval_subset=int(cfg["eval_subset"]),
    )
    t = time.perf_counter()
    model, log = train(model, ds, tc)
    run.phase("train", t)
    label = regime_label(cfg["regime"], cfg["smoothing.kind"])
    save_model(run, model, {"regime": cfg["regime"], "label": label, "seed": args.seed,
                            "dataset": cfg["dataset"]})
    run.write_text("train_log.csv", log.to_csv())
    status = {"diverged": log.diverged, "label": label,
              "final": log.entries[-1] if log.entries else None}
    return run.finish(train=status)


def cmd_attack_eval(args) -> int:
    cfg = resolve_config(args.config, args.set, {"dataset": args.dataset})
    run = Run("attack-eval", args, cfg)
    model = load_model(args.model)
    ds = _dataset(cfg, args.split, args.seed)
    attack = _pgd_from(cfg, "eval_pgd")
    nat, rob = evaluate(model, ds, attack, seed=args.seed)
    run.write_json("eval.json", {
        "model": _model_digest(args.model), "dataset": cfg["dataset"], "split": args.split,
        "samples": len(ds), "nat_acc": nat, "rob_acc": rob,
        "attack": asdict(attack),
    })
    return run.finish()


def cmd_attribute(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "dataset": args.dataset, "attribute.method": args.method,
        "attribute.count": args.count,
    })
    run = Run("attribute", args, cfg)
    model = load_model(args.model)
    ds = _dataset(cfg, args.split, args.seed)
    count = min(int(cfg["attribute.count"]), len(ds))
    fn = attribution_fn(cfg["attribute.method"], int(cfg["attribute.ig_steps"]))
    scores, targets = [], []
    for i in range(count):
        amap = fn(model, ds.images[i])
        scores.append(amap.scores)
        targets.append(amap.target_class)
    path = run.track("attributions.npz")
    np.savez(path, scores=np.stack(scores), targets=np.array(targets),
             indices=np.arange(count), method=cfg["attribute.method"])
    return run.finish(attribute={"count": count, "method": cfg["attribute.method"]})


def cmd_verify_bounds(args) -> int:
    overrides = {}
    if args.activation:
        overrides["bounds.activations"] = [args.activation]
    if args.method:
        overrides["bounds.methods"] = [args.method]
    if args.trials:
        overrides["bounds.trials"] = args.trials
    cfg = resolve_config(args.config, args.set, overrides)
    run = Run("verify-bounds", args, cfg)
    summaries = []
    total_violations = 0
    for act in cfg["bounds.activations"]:
        for method in cfg["bounds.methods"]:
            t = time.perf_counter()
            try:
                summary = fuzz_bounds(act, method.upper(), int(cfg["bounds.trials"]),
                                      seed=args.seed, dims=tuple(cfg["bounds.dims"]))
            except (KeyError, ValueError) as exc:
                raise CliError(f"verify-bounds: {exc}")
            run.phase(f"{act}/{method}", t)
            name = f"bounds_{act}_{method.lower()}.csv"
            summary.write_csv(run.track(name))
            summaries.append({
                "activation": act, "method": method.upper(), "trials": summary.trials,
                "violations": summary.violations, "skipped": summary.skipped,
                "max_tightness": summary.max_tightness,
            })
            total_violations += summary.violations
    run.write_json("bounds.json", {"summaries": summaries, "violations": total_violations})
    code = run.finish(violations=total_violations)
    if total_violations:
        print(f"verify-bounds: {total_violations} bound violations", file=sys.stderr)
        return EXIT_INVARIANT
    return code


def cmd_metrics(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "dataset": args.dataset,
        "metrics.methods": args.methods.split(",") if args.methods else None,
        "metrics.cohort": args.cohort,
    })
    run = Run("metrics", args, cfg)
    labeled = _parse_labeled(args.models, "--models")
    models = {label: load_model(path) for label, path in labeled.items()}
    ds = _dataset(cfg, args.split, args.seed)

    t = time.perf_counter()
    cohort = select_cohort(list(models.values()), ds, int(cfg["metrics.cohort"]))
    run.phase("cohort", t)
    cohort_id = hashlib.sha256(
        (cfg["dataset"] + args.split + ",".join(map(str, cohort.tolist()))).encode()
    ).hexdigest()
    run.write_json("cohort.json", {
        "dataset": cfg["dataset"], "split": args.split, "requested": int(cfg["metrics.cohort"]),
        "indices": cohort.tolist(), "cohort_id": cohort_id,
    })

    reports: dict = {}
    for label, model in models.items():
        reports[label] = {}
        for method in cfg["metrics.methods"]:
            t = time.perf_counter()
            fn = attribution_fn(method, int(cfg["metrics.ig_steps"]))
            ginis, ssims, ross = [], [], []
            for gi in cohort:
                x = ds.images[gi]
                spec = _per_image_spec(cfg, args.seed, gi)
                ginis.append(gini(fn(model, x).scores))
                mean_ssim, _ = ssim_stability(model, method, x, spec,
                                              int(cfg["metrics.ig_steps"]))
                ssims.append(mean_ssim)
                ross.append(ros(model, method, x, spec, p=cfg["metrics.p"],
                                eps_min=float(cfg["metrics.eps_min"]),
                                ig_steps=int(cfg["metrics.ig_steps"])))
            meta = {"model": label, "method": method, "cohort_id": cohort_id}
            reports[label][method] = {
                "gini": MetricReport("gini", ginis, meta).to_dict(),
                "ssim": MetricReport("ssim", ssims, meta).to_dict(),
                "ros": MetricReport("ros", ross, meta).to_dict(),
            }
            run.phase(f"{label}/{method}", t)
    run.write_json("metrics.json", {
        "cohort_id": cohort_id,
        "dataset": cfg["dataset"],
        "split": args.split,
        "models": {label: _model_digest(path) for label, path in labeled.items()},
        "reports": reports,
    })
    return run.finish(cohort_size=int(cohort.size))


def cmd_road(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "dataset": args.dataset, "attribute.method": args.method,
        "road.images": args.images,
    })
    run = Run("road", args, cfg)
    model = load_model(args.model)
    ds = _dataset(cfg, args.split, args.seed)
    cohort = select_cohort([model], ds, int(cfg["road.images"]))
    sub = ds.subset(cohort)
    method = cfg["attribute.method"]
    fn = attribution_fn(method, int(cfg["attribute.ig_steps"]))
    t = time.perf_counter()
    maps = [fn(model, x).scores for x in sub.images]
    run.phase("attribute", t)
    t = time.perf_counter()
    curve = road_curve(model, maps, sub, k_step=float(cfg["road.k_step"]),
                       n_levels=int(cfg["road.n_levels"]),
                       sigma_imp=float(cfg["road.sigma_imp"]), seed=args.seed)
    run.phase("curve", t)
    run.write_text("road.csv", curve.to_csv())
    run.write_json("road.json", dict(curve.to_dict(), method=method,
                                     images=int(cohort.size),
                                     model=_model_digest(args.model)))
    return run.finish(aopc=curve.aopc)


def cmd_ssim_sweep(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "dataset": args.dataset, "attribute.method": args.method,
        "ssim.sigmas": [float(s) for s in args.sigmas.split(",")] if args.sigmas else None,
    })
    run = Run("ssim-sweep", args, cfg)
    model = load_model(args.model)
    ds = _dataset(cfg, args.split, args.seed)
    cohort = select_cohort([model], ds, int(cfg["ssim.images"]))
    method = cfg["attribute.method"]
    rows = []
    for sigma in cfg["ssim.sigmas"]:
        vals = []
        for gi in cohort:
            spec = PerturbationSpec(
                sigma_noise=float(sigma), count=int(cfg["ssim.samples"]),
                max_attempts=int(cfg["metrics.max_attempts"]),
                seed=args.seed * 1_000_003 + int(gi),
            )
            mean_ssim, _ = ssim_stability(model, method, ds.images[gi], spec,
                                          int(cfg["metrics.ig_steps"]))
            vals.append(mean_ssim)
        finite = [v for v in vals if np.isfinite(v)]
        rows.append((float(sigma),
                     float(np.mean(finite)) if finite else float("nan"),
                     float(np.std(finite)) if finite else float("nan")))
    csv_lines = ["sigma_noise,mean_ssim,std_ssim"]
    csv_lines += [f"{s},{m:.6f},{sd:.6f}" for s, m, sd in rows]
    run.write_text("ssim_sweep.csv", "\n".join(csv_lines) + "\n")
    run.write_json("ssim_sweep.json", {
        "method": method, "images": int(cohort.size),
        "rows": [{"sigma_noise": s, "mean": m, "std": sd} for s, m, sd in rows],
    })
    return run.finish()


@dataclass
class ExperimentRecord:
    config_digests: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    cohort_id: str = ""
    cohort_indices: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    bounds: dict | None = None
    wall_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _read_artifact(run_dir: str, name: str, producer: str) -> dict:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise CliError(f"missing {name} under {run_dir!r}; run `gxplab {producer}` first")
    with open(path) as fh:
        return json.load(fh)


def cmd_compare(args) -> int:
    cfg = resolve_config(args.config, args.set, {})
    run = Run("compare", args, cfg)
    runs = _parse_labeled(args.runs, "--runs")
    record = ExperimentRecord()
    all_reports: dict = {}
    cohort_ids = {}
    for label, run_dir in runs.items():
        metrics = _read_artifact(run_dir, "metrics.json", "metrics")
        cohort = _read_artifact(run_dir, "cohort.json", "metrics")
        manifest = _read_artifact(run_dir, "manifest.json", "metrics")
        cohort_ids[label] = metrics["cohort_id"]
        if metrics["cohort_id"] != cohort["cohort_id"]:
            raise CliError(f"{run_dir}: metrics.json and cohort.json disagree on cohort id")
        if label not in metrics["reports"]:
            raise CliError(
                f"{run_dir}: metrics.json has no model labeled {label!r} "
                f"(has {sorted(metrics['reports'])})"
            )
        all_reports[label] = metrics["reports"][label]
        record.checkpoints[label] = metrics["models"].get(label)
        record.config_digests[label] = manifest.get("config_digest")
        record.wall_seconds[label] = manifest.get("wall_seconds")
        record.cohort_indices = cohort["indices"]
    distinct = set(cohort_ids.values())
    if len(distinct) > 1:
        raise CliError(f"cohort ids differ across runs: { {k: v[:12] for k, v in cohort_ids.items()} }")
    record.cohort_id = next(iter(distinct))

    if args.bounds:
        record.bounds = _read_artifact(args.bounds, "bounds.json", "verify-bounds")

    labels = list(runs)
    methods = sorted({m for label in labels for m in all_reports[label]})
    metric_names = ("gini", "ssim", "ros")

    csv_lines = ["regime,method,metric,mean,std,count"]
    md = ["| regime | method | " + " | ".join(metric_names) + " |",
          "|---|---|" + "---|" * len(metric_names)]
    for label in labels:
        for method in methods:
            per = all_reports[label].get(method)
            if per is None:
                continue
            cells = []
            for name in metric_names:
                rep = per[name]
                csv_lines.append(
                    f"{label},{method},{name},{rep['mean']:.6f},{rep['std']:.6f},{rep['count']}"
                )
                cells.append(f"{rep['mean']:.4f} ± {rep['std']:.4f}")
            md.append(f"| {label} | {method} | " + " | ".join(cells) + " |")
    record.reports = all_reports

    delta_lines = ["regime,method,delta_gini,delta_ros"]
    delta_md = []
    if "N" in all_reports:
        delta_md = ["", "Shift relative to the natural model (positive ΔGini = sparser, "
                        "negative ΔROS = more stable):", "",
                    "| regime | method | ΔGini | ΔROS |", "|---|---|---|---|"]
        for label in labels:
            if label == "N":
                continue
            for method in methods:
                per = all_reports[label].get(method)
                base = all_reports["N"].get(method)
                if per is None or base is None:
                    continue
                d_gini = per["gini"]["mean"] - base["gini"]["mean"]
                d_ros = per["ros"]["mean"] - base["ros"]["mean"]
                delta_lines.append(f"{label},{method},{d_gini:.6f},{d_ros:.6f}")
                delta_md.append(f"| {label} | {method} | {d_gini:+.4f} | {d_ros:+.4f} |")

    run.write_text("compare.csv", "\n".join(csv_lines) + "\n")
    run.write_text("delta.csv", "\n".join(delta_lines) + "\n")
    run.write_text("compare.md", "\n".join(
        [f"# Metric comparison ({', '.join(labels)})", ""] + md + delta_md) + "\n")
    run.write_json("record.json", record.to_dict())
    return run.finish(cohort_id=record.cohort_id)


def cmd_ablate_placement(args) -> int:
    cfg = resolve_config(args.config, args.set, {
        "dataset": args.dataset, "arch": args.arch,
    })
    run = Run("ablate-placement", args, cfg)
    train_ds = _dataset(cfg, "train", args.seed)
    test_ds = _dataset(cfg, "test", args.seed)

    def make(smoothing):
        return build_model(cfg["arch"], train_ds.images.shape[1:], train_ds.class_count,
                           smoothing=smoothing, seed=args.seed)

    def fit(model, regime):
        tc = TrainConfig(
            regime=regime, optimizer=cfg["optimizer"], lr=float(cfg["lr"]),
            momentum=float(cfg["momentum"]), weight_decay=float(cfg["weight_decay"]),
            epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), seed=args.seed,
            pgd=_pgd_from(cfg, "pgd") if regime != "natural" else None,
            eval_subset=int(cfg["eval_subset"]),
        )
        model, log = train(model, train_ds, tc)
        if log.diverged:
            raise CliError(f"{regime} training diverged", EXIT_INVARIANT)
        return model

    t = time.perf_counter()
    natural = fit(make(None), "natural")
    run.phase("natural", t)

    placements = (args.placements.split(",") if args.placements
                  else list(make(None).insertion_points))
    if not placements:
        raise CliError(f"{cfg['arch']} declares no insertion points")

    def suite(model, other, seed_salt):
        cohort = select_cohort([model, other], test_ds, int(cfg["metrics.cohort"]))
        ginis, ross = [], []
        for gi in cohort:
            x = test_ds.images[gi]
            spec = _per_image_spec(cfg, args.seed + seed_salt, gi)
            fn = attribution_fn("VG")
            ginis.append(gini(fn(model, x).scores))
            ross.append(ros(model, "VG", x, spec, p=cfg["metrics.p"],
                            eps_min=float(cfg["metrics.eps_min"])))
        return (float(np.mean(ginis)), float(np.mean(ross)), int(cohort.size))

    rows = []
    for placement in placements:
        smoothing = replace(_smoothing_from(cfg), placement=placement)
        t = time.perf_counter()
        try:
            smoothed = fit(make(smoothing), "adversarial+smooth")
        except (ValueError, KeyError) as exc:
            raise CliError(f"placement {placement!r}: {exc}")
        g_gini, g_ros, used = suite(smoothed, natural, seed_salt=1)
        n_gini, n_ros, _ = suite(natural, smoothed, seed_salt=1)
        rows.append({
            "placement": placement, "cohort": used,
            "gini": g_gini, "ros": g_ros,
            "delta_gini": g_gini - n_gini, "delta_ros": g_ros - n_ros,
        })
        run.phase(placement, t)

    csv_lines = ["placement,cohort,gini,ros,delta_gini,delta_ros"]
    csv_lines += [
        f"{r['placement']},{r['cohort']},{r['gini']:.6f},{r['ros']:.6f},"
        f"{r['delta_gini']:.6f},{r['delta_ros']:.6f}" for r in rows
    ]
    run.write_text("ablate.csv", "\n".join(csv_lines) + "\n")
    md = ["| placement | ΔGini | ΔROS |", "|---|---|---|"]
    md += [f"| {r['placement']} | {r['delta_gini']:+.4f} | {r['delta_ros']:+.4f} |" for r in rows]
    run.write_text("ablate.md", "\n".join(md) + "\n")
    run.write_json("ablate.json", {"rows": rows})
    return run.finish()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file with flat dotted keys")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (JSON literal or string)")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", help="output directory (default: $GXP_OUT/<command>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gxplab",
        description="Train, attack, attribute, and score explanation quality.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model under a regime")
    _add_common(p)
    p.add_argument("--regime", choices=["natural", "adversarial", "adversarial+smooth"])
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--arch", choices=list(ARCHITECTURES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--smoothing-kind", dest="smoothing_kind",
                   choices=["gaussian", "mean", "median"])
    p.add_argument("--placement")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack-eval", help="natural and robust accuracy of a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_attack_eval)

    p = sub.add_parser("attribute", help="write attribution maps for a few inputs")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--split", default="test")
    p.add_argument("--method", choices=["VG", "IG", "vg", "ig"])
    p.add_argument("--count", type=int)
    p.set_defaults(fn=cmd_attribute)

    p = sub.add_parser("metrics", help="gini/ssim/ros over a shared cohort")
    _add_common(p)
    p.add_argument("--models", nargs="+", required=True, metavar="LABEL=PATH")
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--split", default="test")
    p.add_argument("--methods", help="comma-separated attribution methods")
    p.add_argument("--cohort", type=int)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("verify-bounds", help="randomized perturbation-bound fuzzing")
    _add_common(p)
    p.add_argument("--activation")
    p.add_argument("--method", choices=["VG", "IG", "vg", "ig"])
    p.add_argument("--trials", type=int)
    p.set_defaults(fn=cmd_verify_bounds)

    p = sub.add_parser("road", help="removal curve with noisy linear imputation")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--split", default="test")
    p.add_argument("--method", choices=["VG", "IG", "vg", "ig"])
    p.add_argument("--images", type=int)
    p.set_defaults(fn=cmd_road)

    p = sub.add_parser("ssim-sweep", help="attribution SSIM across noise scales")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--split", default="test")
    p.add_argument("--method", choices=["VG", "IG", "vg", "ig"])
    p.add_argument("--sigmas", help="comma-separated noise scales")
    p.set_defaults(fn=cmd_ssim_sweep)

    p = sub.add_parser("compare", help="merge metric runs into comparison tables")
    _add_common(p)
    p.add_argument("--runs", nargs="+", required=True, metavar="LABEL=DIR")
    p.add_argument("--bounds", help="verify-bounds output dir to fold into the record")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("ablate-placement", help="smoothing-block placement sweep")
    _add_common(p)
    p.add_argument("--dataset", choices=list(DATASET_NAMES))
    p.add_argument("--arch", choices=list(ARCHITECTURES))
    p.add_argument("--placements", help="comma-separated insertion points (default: all)")
    p.set_defaults(fn=cmd_ablate_placement)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"gxplab {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
