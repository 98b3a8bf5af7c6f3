"""Command-line entry point: ``bregnn {train,sweep-depth,homophily,verify,convert}``.

Configuration is a single JSON file; command-line flags override file values,
which override defaults. Exit codes: 0 ok, 1 verification failure (or a
``--check`` mismatch), 2 configuration error, 3 training divergence.

Example config::

    {
      "dataset": "data/cora",
      "model": {"base": "gcn", "bregman_enhanced": true, "depth": 3, "hidden": 64,
                "activation": "leaky_relu", "dropout": 0.5},
      "train": {"lr": 0.01, "weight_decay": 5e-4, "max_epochs": 500, "patience": 100,
                "seeds": 10},
      "output": "runs/cora-bregman-gcn"
    }

``dataset`` may instead be ``{"sbm": {"n": 400, "classes": 2, "p_in": 0.01,
"p_out": 0.04, "feat_dim": 16, "seed": 0}}`` for a synthetic graph.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .layers import ConfigError, GraphOperators, ModelConfig, build_model
from .sparsegraph import DatasetError, edge_homophily, generate_sbm, load_dataset
from .train import TrainConfig, TrainingDivergence, fit, mean_std, multi_seed
from .verify import InfeasibleInstance, run_certificates, smoothness_metric

EXIT_OK, EXIT_VERIFY_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

SBM_DEFAULTS = {"n": 400, "classes": 2, "p_in": 0.01, "p_out": 0.04, "feat_dim": 16, "seed": 0,
                "feature_signal": 1.0, "feature_noise": 1.0}
DEFAULT_DEPTHS = [3, 5, 7, 9]
# lr, weight decay, hidden, dropout and (Bregman only) activation
DEFAULT_GRID = {
    "train.lr": [0.01, 0.005],
    "train.weight_decay": [5e-4, 5e-5],
    "model.hidden": [64],
    "model.dropout": [0.5, 0.1],
    "model.activation": ["tanh", "arctan", "softplus", "leaky_relu"],
}
RUN_COLUMNS = ["dataset", "model", "variant", "depth", "activation", "seed", "test_acc", "best_val_acc",
               "epochs"]
TOP_LEVEL_KEYS = {"dataset", "model", "train", "output", "depths", "grid"}


@dataclasses.dataclass
class RunSpec:
    dataset: object
    model: ModelConfig
    train: TrainConfig
    output: str | None
    depths: list
    grid: dict | None

    def as_dict(self):
        return {
            "dataset": self.dataset,
            "model": dataclasses.asdict(self.model),
            "train": {**dataclasses.asdict(self.train), "betas": list(self.train.betas)},
            "output": self.output,
            "depths": list(self.depths),
            "grid": self.grid,
        }

    def config_hash(self):
        payload = self.as_dict()
        payload.pop("output")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _coerce(section, name, value, default):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
        return tuple(float(v) for v in value)
    return value


def _section(cls, section, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected an object")
    obj = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        if section == "train" and key == "seeds":
            setattr(obj, key, _seeds(value))
            continue
        setattr(obj, key, _coerce(section, key, value, getattr(obj, key)))
    return obj


def _seeds(value):
    if isinstance(value, bool):
        raise ConfigError("train.seeds: expected a count or a list of integers")
    if isinstance(value, int):
        if value < 1:
            raise ConfigError("train.seeds: count must be positive")
        return list(range(value))
    if isinstance(value, list) and value and all(isinstance(s, int) and not isinstance(s, bool) for s in value):
        return list(value)
    raise ConfigError("train.seeds: expected a count or a non-empty list of integers")


def _dataset_spec(value):
    if isinstance(value, str):
        p = Path(value)
        if not p.is_dir():
            raise ConfigError(f"dataset: directory {value!r} does not exist")
        return str(p)
    if isinstance(value, dict) and set(value) == {"sbm"} and isinstance(value["sbm"], dict):
        sbm = dict(SBM_DEFAULTS)
        for key, v in value["sbm"].items():
            if key not in SBM_DEFAULTS:
                raise ConfigError(f"dataset.sbm.{key}: unknown field")
            sbm[key] = _coerce("dataset.sbm", key, v, SBM_DEFAULTS[key])
        for key in ("p_in", "p_out"):
            if not 0.0 <= sbm[key] <= 1.0:
                raise ConfigError(f"dataset.sbm.{key}: must be a probability")
        if sbm["n"] < sbm["classes"] or sbm["classes"] < 1:
            raise ConfigError("dataset.sbm: need n >= classes >= 1")
        return {"sbm": sbm}
    raise ConfigError("dataset: expected a directory path or {\"sbm\": {...}}")


def _grid_spec(value):
    if value is None or value is False:
        return None
    if value is True:
        return copy.deepcopy(DEFAULT_GRID)
    if not isinstance(value, dict) or not value:
        raise ConfigError("grid: expected true or an object of field -> list of values")
    for key, options in value.items():
        section, _, name = key.partition(".")
        cls = {"model": ModelConfig, "train": TrainConfig}.get(section)
        if cls is None or name not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(f"grid.{key}: expected model.<field> or train.<field>")
        if not isinstance(options, list) or not options:
            raise ConfigError(f"grid.{key}: expected a non-empty list")
    return value


def resolve(args):
    """Merge defaults, the config file and flags into a validated :class:`RunSpec`."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config!r} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config!r} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = set(raw) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    raw = copy.deepcopy(raw)
    model_raw = raw.get("model") or {}
    train_raw = raw.get("train") or {}
    if getattr(args, "dataset", None):
        raw["dataset"] = args.dataset
    if getattr(args, "model", None):
        model_raw["base"] = args.model
    if getattr(args, "bregman", None):
        model_raw["bregman_enhanced"] = True
    if getattr(args, "depth", None) is not None:
        model_raw["depth"] = args.depth
    if getattr(args, "activation", None):
        model_raw["activation"] = args.activation
    if getattr(args, "seeds", None) is not None:
        train_raw["seeds"] = args.seeds
    if getattr(args, "out", None):
        raw["output"] = args.out
    if getattr(args, "grid", False):
        raw["grid"] = True

    if "dataset" not in raw:
        raise ConfigError("dataset: required (config file or --dataset)")
    model = _section(ModelConfig, "model", model_raw)
    train = _section(TrainConfig, "train", train_raw)
    if "dropout" in train_raw and "dropout" not in model_raw:
        model.dropout = train.dropout
    train.dropout = model.dropout
    model.validate()
    train.validate()
    depths = raw.get("depths", DEFAULT_DEPTHS)
    if not isinstance(depths, list) or not depths or not all(isinstance(d, int) for d in depths):
        raise ConfigError("depths: expected a non-empty list of integers")
    if any(d < 3 for d in depths):
        raise ConfigError("depths: every depth must be at least 3")
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output: expected a directory path")
    return RunSpec(_dataset_spec(raw["dataset"]), model, train, output, depths, _grid_spec(raw.get("grid")))


def load_spec_dataset(spec):
    if isinstance(spec.dataset, dict):
        s = spec.dataset["sbm"]
        return generate_sbm(s["n"], s["classes"], s["p_in"], s["p_out"], s["feat_dim"], s["seed"],
                            feature_signal=s["feature_signal"], feature_noise=s["feature_noise"])
    return load_dataset(spec.dataset)


# ----------------------------------------------------------------------
# output helpers


def _fmt(x):
    return f"{x:.6f}"


def _write_csv(path, header_hash, columns, rows):
    lines = [f"# config_hash={header_hash}", ",".join(columns)]
    lines.extend(",".join(str(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_csv_hash(path):
    first = Path(path).read_text(encoding="utf-8").split("\n", 1)[0]
    return first.split("=", 1)[1] if first.startswith("# config_hash=") else None


def _run_rows(ds_name, cfg, runs, seeds):
    variant = "bregman" if cfg.bregman_enhanced else "standard"
    act = cfg.activation if cfg.bregman_enhanced else cfg.base_activation
    return [[ds_name, cfg.base, variant, cfg.depth, act, seed, _fmt(r.test_acc), _fmt(r.best_val_acc), r.epochs]
            for seed, r in zip(seeds, runs)]


def _apply(model_cfg, train_cfg, assignment):
    m, t = copy.deepcopy(model_cfg), copy.deepcopy(train_cfg)
    for key, value in assignment.items():
        section, _, name = key.partition(".")
        target = m if section == "model" else t
        setattr(target, name, value)
    t.dropout = m.dropout
    return m.validate(), t.validate()


def _grid_assignments(grid, bregman_enhanced):
    keys = [k for k in sorted(grid) if bregman_enhanced or k != "model.activation"]
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def train_once(ds, ops, model_cfg, train_cfg):
    return multi_seed(lambda seed: build_model(model_cfg, ds, seed=seed, ops=ops), ds, train_cfg)


# ----------------------------------------------------------------------
# commands


def _output_dir(spec, required=True):
    if spec.output is None:
        if required:
            raise ConfigError("output: required (config file or --out)")
        return None
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check(spec, names):
    out = Path(spec.output) if spec.output else None
    if out is None:
        raise ConfigError("output: --check needs the output directory")
    expected = spec.config_hash()
    ok = True
    for name in names:
        path = out / name
        if not path.is_file():
            print(f"{name}: missing")
            ok = False
            continue
        if name.endswith(".json"):
            found = json.loads(path.read_text(encoding="utf-8")).get("config_hash")
        else:
            found = _read_csv_hash(path)
        status = "ok" if found == expected else f"MISMATCH (file {found}, config {expected})"
        ok &= found == expected
        print(f"{name}: {status}")
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


def cmd_train(args):
    spec = resolve(args)
    if args.check:
        return _check(spec, ["runs.csv", "summary.json"])
    if len(spec.train.seeds) < 2:
        raise ConfigError("train.seeds: need at least two seeds for mean and std")
    out = _output_dir(spec)
    ds = load_spec_dataset(spec)
    ops = GraphOperators.from_dataset(ds)
    h = spec.config_hash()

    grid_rows = []
    if spec.grid:
        best = None
        for assignment in _grid_assignments(spec.grid, spec.model.bregman_enhanced):
            m, t = _apply(spec.model, spec.train, assignment)
            summary = train_once(ds, ops, m, t)
            val = float(np.mean([r.best_val_acc for r in summary.runs]))
            grid_rows.append([json.dumps(assignment, sort_keys=True).replace(",", ";"), _fmt(val),
                              _fmt(summary.mean), _fmt(summary.std)])
            if best is None or val > best[0]:
                best = (val, m, t, summary, assignment)
        _, model_cfg, train_cfg, summary, chosen = best
    else:
        model_cfg, train_cfg, chosen = spec.model, spec.train, None
        summary = train_once(ds, ops, model_cfg, train_cfg)

    _write_csv(out / "runs.csv", h, RUN_COLUMNS, _run_rows(ds.name, model_cfg, summary.runs, train_cfg.seeds))
    if grid_rows:
        _write_csv(out / "grid.csv", h, ["assignment", "mean_val_acc", "mean_test_acc", "std_test_acc"], grid_rows)
    result = {
        "config_hash": h,
        "dataset": ds.name,
        "mean": summary.mean,
        "std": summary.std,
        "n_seeds": len(summary.runs),
        "selected": chosen,
        "clamp_counts": [r.clamp_counts for r in summary.runs],
        "seconds": [round(r.seconds, 3) for r in summary.runs],
    }
    (out / "summary.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"{ds.name} {model_cfg.base} {'bregman' if model_cfg.bregman_enhanced else 'standard'} "
          f"depth={model_cfg.depth}: {100 * summary.mean:.2f} +/- {100 * summary.std:.2f} "
          f"over {len(summary.runs)} seeds")
    return EXIT_OK


def cmd_sweep_depth(args):
    spec = resolve(args)
    if args.depths:
        spec.depths = args.depths
        if any(d < 3 for d in spec.depths):
            raise ConfigError("depths: every depth must be at least 3")
    if args.check:
        return _check(spec, ["runs.csv", "sweep.csv", "sweep_plot.csv"])
    if len(spec.train.seeds) < 2:
        raise ConfigError("train.seeds: need at least two seeds for mean and std")
    out = _output_dir(spec)
    ds = load_spec_dataset(spec)
    ops = GraphOperators.from_dataset(ds)
    h = spec.config_hash()
    run_rows, sweep_rows = [], []
    series = {"standard": [], "bregman": []}
    for depth in spec.depths:
        for variant in ("standard", "bregman"):
            cfg = dataclasses.replace(spec.model, depth=depth, bregman_enhanced=variant == "bregman").validate()
            runs, smooth = [], []
            for seed in spec.train.seeds:
                model = build_model(cfg, ds, seed=seed, ops=ops)
                runs.append(fit(model, ds, spec.train, seed=seed))
                smooth.append(smoothness_metric(model.last_hidden, ops.adj))
            mean, std = mean_std([r.test_acc for r in runs])
            run_rows.extend(_run_rows(ds.name, cfg, runs, spec.train.seeds))
            sweep_rows.append([depth, variant, _fmt(mean), _fmt(std), _fmt(float(np.mean(smooth)))])
            series[variant].append((depth, mean))
            print(f"depth {depth} {variant}: {100 * mean:.2f} +/- {100 * std:.2f} "
                  f"(smoothness {np.mean(smooth):.4f})")
    _write_csv(out / "runs.csv", h, RUN_COLUMNS, run_rows)
    _write_csv(out / "sweep.csv", h, ["depth", "variant", "mean", "std", "smoothness"], sweep_rows)
    plot_rows = [[s_d, _fmt(s_m), b_d, _fmt(b_m)]
                 for (s_d, s_m), (b_d, b_m) in zip(series["standard"], series["bregman"])]
    _write_csv(out / "sweep_plot.csv", h, ["standard_depth", "standard_acc", "bregman_depth", "bregman_acc"],
               plot_rows)
    return EXIT_OK


def cmd_homophily(args):
    target = args.path or args.dataset
    if not target:
        raise ConfigError("dataset: pass a dataset directory")
    ds = load_dataset(target)
    print(f"{edge_homophily(ds):.4f}")
    return EXIT_OK


def cmd_verify(args):
    if args.trials < 1:
        raise ConfigError("trials: must be at least 1")
    if args.instances < 1:
        raise ConfigError("instances: must be at least 1")
    h = hashlib.sha256(json.dumps({"instances": args.instances, "trials": args.trials, "seed": args.seed,
                                   "inject_fault": args.inject_fault}, sort_keys=True).encode()).hexdigest()[:16]
    lines, failed, total = [], 0, 0
    try:
        for cert in run_certificates(instances=args.instances, trials=args.trials, seed=args.seed,
                                     inject_fault=args.inject_fault):
            record = cert.as_dict()
            record["config_hash"] = h
            lines.append(json.dumps(record, sort_keys=True))
            total += 1
            failed += not cert.passed
    except InfeasibleInstance as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAIL
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "certificates.jsonl").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"{total - failed}/{total} certificates passed", file=sys.stderr)
    return EXIT_VERIFY_FAIL if failed else EXIT_OK


def cmd_convert(args):
    from .convert import convert

    try:
        ds = convert(args.source, args.out, args.format, args.name, split=args.split,
                     num_features=args.num_features)
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise ConfigError(str(exc)) from None
    print(f"wrote {ds.name}: n={ds.n}, features={ds.num_features}, classes={ds.num_classes}, "
          f"edges={ds.num_edges}, train/val/test={int(ds.train_mask.sum())}/{int(ds.val_mask.sum())}/"
          f"{int(ds.test_mask.sum())}")
    return EXIT_OK


def _common(p):
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--dataset", metavar="PATH", help="canonical dataset directory")
    p.add_argument("--model", choices=["gcn", "gat", "sage", "appnp"], help="base model")
    p.add_argument("--bregman", action="store_true", default=None, help="use Bregman layers")
    p.add_argument("--depth", type=int, help="number of layers including the output head")
    p.add_argument("--activation", help="activation pair for Bregman layers")
    p.add_argument("--seeds", type=int, help="number of seeds (0..N-1)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--check", action="store_true", help="compare config hashes of existing outputs")


def build_parser():
    parser = argparse.ArgumentParser(prog="bregnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="multi-seed training run")
    _common(p)
    p.add_argument("--grid", action="store_true", help="search the documented hyperparameter grid")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-depth", help="standard vs Bregman accuracy across depths")
    _common(p)
    p.add_argument("--depths", type=int, nargs="+", help="depths to sweep (default 3 5 7 9)")
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("homophily", help="print the edge homophily of a dataset")
    p.add_argument("path", nargs="?", help="canonical dataset directory")
    p.add_argument("--dataset", metavar="PATH")
    p.set_defaults(func=cmd_homophily)

    p = sub.add_parser("verify", help="argmin certificates for the Bregman layer")
    p.add_argument("--instances", type=int, default=50, help="random instances per activation x aggregator")
    p.add_argument("--trials", type=int, default=100, help="random perturbations per instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="DIR", help="write certificates.jsonl here (default stdout)")
    p.add_argument("--inject-fault", action="store_true", help="corrupt one closed form per combination")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("convert", help="convert a native dataset to the canonical layout")
    p.add_argument("--format", required=True, choices=["planetoid", "geom-gcn"])
    p.add_argument("--name", required=True, help="dataset name, e.g. cora or texas")
    p.add_argument("--source", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--split", type=int, default=0, help="Geom-GCN split index")
    p.add_argument("--num-features", type=int, help="feature dimension for index-list features")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
