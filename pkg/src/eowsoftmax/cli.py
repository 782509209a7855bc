"""Command-line entry point.

Configuration is a flat ``key = value`` text file. Every key in
:data:`DEFAULTS` may also be set through an environment variable
``EOW_<KEY>`` (upper case), which overrides the file. Unknown keys are
rejected. Outputs go to ``<out>/<config-hash>-s<seed>/``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calibration, data, theory
from .energy import DiagnosticsLog, SgldConfig
from .model import EowClassifier, load_checkpoint, save_checkpoint
from .objective import TrainConfig, TrainingDiverged, fit

logger = logging.getLogger("eowsoftmax")

ENV_PREFIX = "EOW_"

# key: (type, default, help)
SCHEMA = {
    "dataset": (str, "gmm", "gmm | ood | moons | idx | csv"),
    "n": (int, 2000, "synthetic sample count"),
    "k": (int, 3, "mixture components / classes"),
    "noise": (float, 0.1, "two-moons noise"),
    "data_path": (str, "", "csv file, or 'images,labels' IDX pair"),
    "eval_fraction": (float, 0.2, "held-out share for evaluation"),
    "data_seed": (int, 0, "seed for synthetic data and the split"),
    "hidden": (str, "16,16", "hidden layer widths"),
    "loss_kind": (str, "eow", "eow | vanilla | label_smoothing"),
    "lam": (float, 0.1, "weight of the uncertainty term"),
    "lr": (float, 1e-4, "learning rate"),
    "momentum": (float, 0.9, "SGD momentum"),
    "weight_decay": (float, 5e-4, "L2 weight decay"),
    "batch_size": (int, 64, "minibatch size"),
    "epochs": (int, 50, "training epochs"),
    "lr_decay": (float, 0.1, "factor applied at each milestone"),
    "smoothing": (float, 0.1, "label smoothing epsilon"),
    "sgld_alpha": (float, 2.0, "Langevin step size"),
    "sgld_sigma": (float, 1e-3, "Langevin noise scale"),
    "sgld_steps": (int, 100, "Langevin steps per round"),
    "sgld_stage": (int, 2, "stage whose output is sampled"),
    "sgld_init": (str, "data", "data | noise | persistent"),
    "sgld_clip": (float, 100.0, "per-sample gradient norm clip"),
    "sgld_reinit": (float, 0.05, "persistent buffer reinit probability"),
    "sgld_buffer": (int, 10000, "persistent buffer size"),
    "energy_sign": (str, "proof", "proof | literal"),
    "n_bins": (int, 15, "calibration bins"),
    "backend": (str, "auto", "auto | numba | numpy"),
}
DEFAULTS = {k: v[1] for k, v in SCHEMA.items()}
ABLATION_LAMBDAS = (1.0, 0.1, 0.01)


class ConfigError(ValueError):
    pass


def _coerce(key, raw):
    typ = SCHEMA[key][0]
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(path=None, env=None, overrides=None) -> dict:
    """Defaults, then the file, then ``EOW_*`` variables, then ``overrides``."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key in SCHEMA:
            cfg[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["dataset"] not in ("gmm", "ood", "moons", "idx", "csv"):
        raise ConfigError(f"unknown dataset {cfg['dataset']!r}")
    if cfg["dataset"] in ("idx", "csv") and not cfg["data_path"]:
        raise ConfigError(f"dataset {cfg['dataset']} needs data_path")
    if not 0 <= cfg["eval_fraction"] < 1:
        raise ConfigError("eval_fraction must lie in [0, 1)")
    if cfg["backend"] not in ("auto", "numba", "numpy"):
        raise ConfigError("backend must be auto, numba or numpy")
    hidden_widths(cfg)
    try:
        train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def hidden_widths(cfg) -> list[int]:
    try:
        widths = [int(w) for w in cfg["hidden"].split(",") if w.strip()]
    except ValueError as exc:
        raise ConfigError(f"hidden: bad width list {cfg['hidden']!r}") from exc
    if not widths or min(widths) < 1:
        raise ConfigError("hidden needs at least one positive width")
    return widths


def train_config(cfg, **changes) -> TrainConfig:
    cfg = {**cfg, **changes}
    sgld = SgldConfig(alpha=cfg["sgld_alpha"], sigma=cfg["sgld_sigma"], steps=cfg["sgld_steps"],
                      stage=cfg["sgld_stage"], init_mode=cfg["sgld_init"], clip=cfg["sgld_clip"],
                      reinit_prob=cfg["sgld_reinit"], buffer_size=cfg["sgld_buffer"],
                      energy_sign=cfg["energy_sign"])
    return TrainConfig(lam=cfg["lam"], lr=cfg["lr"], momentum=cfg["momentum"],
                       weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       lr_decay=cfg["lr_decay"], loss_kind=cfg["loss_kind"], smoothing=cfg["smoothing"], sgld=sgld)


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir(out, cfg, seed) -> Path:
    return Path(out) / f"{config_hash(cfg)}-s{seed}"


def load_dataset(cfg) -> data.Dataset:
    kind = cfg["dataset"]
    if kind == "gmm":
        return data.gen_gaussian_mixture(cfg["data_seed"], cfg["n"], cfg["k"])
    if kind == "ood":
        return data.gen_ood_mixture(cfg["data_seed"] + 1, cfg["n"], cfg["k"])
    if kind == "moons":
        return data.gen_two_moons(cfg["data_seed"], cfg["n"], cfg["noise"])
    if kind == "csv":
        return data.load_csv(cfg["data_path"])
    parts = cfg["data_path"].split(",")
    if len(parts) != 2:
        raise ConfigError("idx data_path must be 'images,labels'")
    return data.load_idx(parts[0].strip(), parts[1].strip())


def train_eval_split(cfg):
    ds = load_dataset(cfg)
    if cfg["eval_fraction"] == 0:
        return ds, None
    ev, tr = data.split(ds, (cfg["eval_fraction"], 1 - cfg["eval_fraction"]), seed=cfg["data_seed"])
    return tr, ev


def dataset_from_arg(arg: str) -> data.Dataset:
    """``--dataset`` value: a CSV file or ``images,labels`` IDX pair."""
    if "," in arg:
        images, labels = arg.split(",", 1)
        return data.load_idx(images, labels)
    return data.load_csv(arg)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _attach_log(path):
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


@dataclass
class TrainOutcome:
    directory: Path
    metrics: dict


def train_one(cfg: dict, seed: int, out) -> TrainOutcome:
    """Train one seed; writes config, checkpoint, metrics, SGLD diagnostics and evaluation."""
    directory = run_dir(out, cfg, seed)
    directory.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(directory / "run.log")
    try:
        _write_json(directory / "config.json", {**cfg, "seed": seed, "config_hash": config_hash(cfg)})
        tr, ev = train_eval_split(cfg)
        rng = np.random.default_rng(seed)
        model = EowClassifier([tr.dim] + hidden_widths(cfg), tr.num_classes, rng=rng)
        backend = None if cfg["backend"] == "auto" else cfg["backend"]
        logger.info("training seed %d in %s", seed, directory)
        with DiagnosticsLog(directory / "sgld.csv") as sgld_log:
            model, _ = fit(model, tr, train_config(cfg), rng, eval_set=ev,
                           metrics_path=directory / "metrics.csv", sgld_log=sgld_log, backend=backend)
        save_checkpoint(model, directory / "checkpoint.bin")
        target = ev if ev is not None else tr
        evaluation = calibration.evaluate(model, target.inputs, target.labels, cfg["n_bins"])
        evaluation.ece.write_csv(directory / "reliability.csv")
        metrics = {**evaluation.summary(), "bins_csv": str(directory / "reliability.csv")}
        _write_json(directory / "eval.json", metrics)
        logger.info("seed %d done: %s", seed, metrics)
        return TrainOutcome(directory, metrics)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def summarize(outcomes, keys=("acc", "ece", "nll_true", "nll_predicted")) -> dict:
    out = {"n_seeds": len(outcomes)}
    for key in keys:
        vals = np.array([o.metrics[key] for o in outcomes], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def _seeds(args) -> list[int]:
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad seed list {args.seeds!r}") from exc
    return [args.seed]


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    outcomes = [train_one(cfg, s, args.out) for s in _seeds(args)]
    result = {"runs": [str(o.directory) for o in outcomes]}
    if len(outcomes) > 1:
        summary = summarize(outcomes)
        path = Path(args.out) / f"{config_hash(cfg)}-summary.json"
        _write_json(path, summary)
        result["summary"] = summary
    else:
        result["metrics"] = outcomes[0].metrics
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _model_and_data(args, which="eval"):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    if args.dataset:
        ds = dataset_from_arg(args.dataset)
    elif args.config:
        tr, ev = train_eval_split(resolve_config(args.config))
        ds = ev if (which == "eval" and ev is not None) else tr
    else:
        raise ConfigError("need --dataset or --config")
    return model, ds


def evaluate_checkpoint(model, ds, n_bins=15, out=None) -> dict:
    evaluation = calibration.evaluate(model, ds.inputs, ds.labels, n_bins)
    result = evaluation.summary()
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        evaluation.ece.write_csv(out / "reliability.csv")
        result["bins_csv"] = str(out / "reliability.csv")
        _write_json(out / "eval.json", result)
    return result


def cmd_evaluate(args) -> int:
    model, ds = _model_and_data(args)
    print(json.dumps(evaluate_checkpoint(model, ds, args.bins, args.out), indent=2, sort_keys=True))
    return 0


def ood_table(model, in_ds, ood_ds, thresholds=calibration.OOD_THRESHOLDS):
    label, conf, _ = model.predict(in_ds.inputs)
    _, ood_conf, _ = model.predict(ood_ds.inputs)
    return calibration.ood_threshold_accuracy(conf, label == in_ds.labels, ood_conf, thresholds)


def cmd_ood_eval(args) -> int:
    model, in_ds = _model_and_data(args)
    if args.ood:
        ood_ds = dataset_from_arg(args.ood)
    elif args.config:
        ood_ds = load_dataset({**resolve_config(args.config), "dataset": "ood"})
    else:
        raise ConfigError("need --ood or --config")
    rows = ood_table(model, in_ds, ood_ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    calibration.write_threshold_table(rows, out / "ood_thresholds.csv", out / "ood_thresholds.json")
    print(json.dumps([r.__dict__ for r in rows], indent=2))
    return 0


def cmd_corruption_eval(args) -> int:
    model, ds = _model_and_data(args)
    kinds = [k.strip() for k in args.corruptions.split(",") if k.strip()]
    for kind in kinds:
        if kind != "identity" and kind not in data.CORRUPTIONS:
            raise ConfigError(f"unknown corruption {kind!r}")
    rows = calibration.corruption_sweep(model, ds.inputs, ds.labels, kinds, seed=args.seed, n_bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    calibration.write_severity_csv(rows, out / "corruption_ece.csv")
    for r in rows:
        print(f"severity {r.severity}: mean ECE {r.mean_ece:.6f} (std {r.std_ece:.6f})")
    return 0


def cmd_theory_check(args) -> int:
    if args.grid < 2:
        raise ConfigError("--grid must be at least 2")
    report = theory.run_all(seed=args.seed, grid_size=args.grid)
    checks = report["checks"]
    p1, l1, t1, pi = (checks[k] for k in ("proposition1", "lemma1", "theorem1", "partition_identity"))
    print(f"proposition1  {'PASS' if p1['passed'] else 'FAIL'}  max rel dev {p1['max_rel_dev']:.3e}"
          f"  min cosine {p1['min_cosine']:.15f}")
    print(f"lemma1        {'PASS' if l1['passed'] else 'FAIL'}  max rel err {l1['max_rel_dev']:.3e}")
    print(f"theorem1      {'PASS' if t1['passed'] else 'FAIL'}  min margin {t1['details']['min_margin']:.3e}"
          f"  aggregate margin {t1['details']['aggregate_margin']:.6f}")
    print(f"partition     {'PASS' if pi['passed'] else 'FAIL'}  max |Z + Z' - |X|| {pi['max_abs_error']:.3e}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "theory.json", report)
    return 0 if report["passed"] else 1


def ablate_lambda(cfg, lambdas, seeds, out) -> list[dict]:
    rows = []
    for lam in lambdas:
        sub = {**cfg, "lam": float(lam)}
        outcomes = [train_one(sub, s, out) for s in seeds]
        summary = summarize(outcomes)
        rows.append({"lam": float(lam), "acc": summary["acc"]["mean"], "ece": summary["ece"]["mean"],
                     "nll": summary["nll_true"]["mean"], "n_seeds": len(seeds)})
    return rows


def write_ablation(rows, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_lambda.csv", "w") as f:
        f.write("lam,acc,ece,nll\n")
        for r in rows:
            f.write(f"{r['lam']!r},{r['acc']!r},{r['ece']!r},{r['nll']!r}\n")
    _write_json(out / "ablation_lambda.json", rows)


def cmd_ablate_lambda(args) -> int:
    cfg = resolve_config(args.config)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad lambda list {args.lambdas!r}") from exc
    if not lambdas:
        raise ConfigError("empty lambda list")
    rows = ablate_lambda(cfg, lambdas, _seeds(args), args.out)
    write_ablation(rows, args.out)
    print(f"{'lambda':>8} {'acc':>8} {'ece':>8} {'nll':>8}")
    for r in rows:
        print(f"{r['lam']:>8g} {r['acc']:>8.4f} {r['ece']:>8.4f} {r['nll']:>8.4f}")
    return 0


def cmd_make_data(args) -> int:
    cfg = resolve_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr, ev = train_eval_split(cfg)
    data.save_csv(tr, out / "train.csv")
    written = ["train.csv"]
    if ev is not None:
        data.save_csv(ev, out / "eval.csv")
        written.append("eval.csv")
    if cfg["dataset"] == "gmm":
        data.save_csv(load_dataset({**cfg, "dataset": "ood"}), out / "ood.csv")
        written.append("ood.csv")
    print(" ".join(str(out / w) for w in written))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eowsoftmax", description="Train and evaluate K+1-way softmax classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("train", cmd_train, "train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", help="comma-separated seeds; writes a mean/std summary")
    p.add_argument("--out", default="runs")

    for name, fn, help_ in (("evaluate", cmd_evaluate, "accuracy, ECE and NLL of a checkpoint"),
                            ("ood-eval", cmd_ood_eval, "thresholded accuracy with OOD inputs"),
                            ("corruption-eval", cmd_corruption_eval, "ECE under corruptions per severity")):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="CSV file or 'images,labels' IDX pair")
        p.add_argument("--config", help="take the held-out split of this config instead of --dataset")
        p.add_argument("--out", default="eval" if name == "evaluate" else name)
        p.add_argument("--bins", type=int, default=15)
        p.add_argument("--seed", type=int, default=0)
        if name == "ood-eval":
            p.add_argument("--ood", help="OOD CSV file; default is the translated mixture of --config")
        if name == "corruption-eval":
            p.add_argument("--corruptions", default=",".join(data.CORRUPTIONS))

    p = add("theory-check", cmd_theory_check, "exact-enumeration checks of the gradient identities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--out")

    p = add("ablate-lambda", cmd_ablate_lambda, "train and evaluate for several lambda values")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", default=",".join(str(v) for v in ABLATION_LAMBDAS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds")
    p.add_argument("--out", default="runs")

    p = add("make-data", cmd_make_data, "write the configured dataset (and OOD set) as CSV")
    p.add_argument("--config")
    p.add_argument("--out", default="data_out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, data.IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
