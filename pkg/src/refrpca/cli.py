"""Command-line driver.

Every subcommand resolves its settings from built-in defaults, then an
optional flat ``key = value`` config file, then command-line flags. The
resolved settings are logged and written to ``run_config.txt`` beside the
outputs.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import checks, urpc
from .datagen import DataGenConfig, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericalError, ParameterError, ShapeError
from .net import load_params, save_params
from .proximal import ProxParams, mixed_l12_threshold, reweighted_l1l1_branches, soft_threshold
from .solvers import SolverConfig, corona_ista_solve, nuclear_norm, ref_rpca_solve, refrpca_objective, residual_norm
from .training import TrainConfig, depth_sweep, evaluate, metrics_csv, predict, sweep_csv, train

log = logging.getLogger("refrpca")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

PRESETS = {
    "desk": dict(h=32, w=32, m=20, r=5, n_train=800, n_val=100, n_test=100, source="sprites"),
    "paper": dict(h=32, w=32, m=20, r=5, n_train=8000, n_val=1000, n_test=1000, source="mnist"),
}

_COMMON = {"seed": 0, "threads": 1, "deterministic": True}
_TRAIN = {
    "dataset": "",
    "out": "",
    "learning_rate": 1e-3,
    "batch_size": 200,
    "epochs": 50,
    "depth": 2,
    "variant": "refrpca",
    "kernel_size": 5,
    "clip_norm": None,
    "detach_reference": False,
    "corona_threshold": "scalar",
}
# Per-command defaults; the keys are also the only accepted config keys.
DEFAULTS = {
    "gen": {
        "out": "",
        "preset": "desk",
        "h": 32,
        "w": 32,
        "m": 20,
        "r": 5,
        "n_train": 800,
        "n_val": 100,
        "n_test": 100,
        "source": "sprites",
        "mnist_dir": "",
    },
    "solve": {
        "input": "",
        "dataset": "",
        "split": "test",
        "index": 0,
        "out": "",
        "solver": "refrpca",
        "lambda1": None,
        "lambda2": None,
        "lambda3": None,
        "c": 2.0,
        "iters": 100,
        "consistent_step": True,
        "threshold": "scalar",
        "h": None,
        "w": None,
    },
    "train": dict(_TRAIN),
    "eval": {"dataset": "", "params": "", "split": "val", "out": "", "dump_frames": False, "sequences": "0"},
    "sweep": dict(_TRAIN, depths="1,2,4", variants="refrpca,corona"),
    "prox-plot": {
        "operator": "refrpca",
        "out": "",
        "tau": 0.2,
        "a2": 0.2,
        "a3": 0.3,
        "q": 1.0,
        "s_p": 1.0,
        "lo": -4.0,
        "hi": 4.0,
        "step": 1e-3,
    },
    "selftest": {"out": "", "suites": ",".join(checks.SUITES)},
}
for _d in DEFAULTS.values():
    for _k, _v in _COMMON.items():
        _d.setdefault(_k, _v)

_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def _coerce(key, text, default):
    if isinstance(text, str):
        text = text.strip()
    else:
        return text
    if text.lower() in ("none", "null", ""):
        return None if default is None or not isinstance(default, str) else ""
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"cannot parse {key} = {text!r}") from exc
    return text


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def resolve_config(command, file_values, flag_values):
    defaults = DEFAULTS[command]
    resolved = dict(defaults)
    if command == "gen":
        preset = flag_values.get("preset") or file_values.get("preset") or defaults["preset"]
        if preset not in PRESETS and preset != "custom":
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)} or custom")
        resolved.update(PRESETS.get(preset, {}))
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            if value is not None:
                resolved[key] = _coerce(key, value, defaults[key])
    return resolved


def format_config(command, cfg):
    lines = [f"command = {command}"]
    lines += [f"{k} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}" for k, v in sorted(cfg.items())]
    return "\n".join(lines) + "\n"


def _require(cfg, *keys):
    for key in keys:
        if not cfg[key]:
            raise ConfigError(f"missing required setting {key!r}")


def _write_text(path, text):
    with open(path, "w", newline="") as f:
        f.write(text)


def _out_dir(cfg):
    _require(cfg, "out")
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _int_list(text, key):
    try:
        values = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key} must be a comma-separated integer list, got {text!r}") from exc
    if not values:
        raise ConfigError(f"{key} is empty")
    return values


def _find_mnist(directory):
    found = []
    for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            path = os.path.join(directory, name)
            if os.path.exists(path):
                found.append(path)
                break
        else:
            raise FileNotFoundError(f"{stem} not found in {directory}")
    return found


def cmd_gen(cfg):
    out = _out_dir(cfg)
    images = labels = None
    if cfg["source"] == "mnist":
        if not cfg["mnist_dir"]:
            raise ConfigError("mnist source needs --mnist-dir")
        images, labels = _find_mnist(cfg["mnist_dir"])
    gen = DataGenConfig(
        h=cfg["h"],
        w=cfg["w"],
        m=cfg["m"],
        r=cfg["r"],
        n_train=cfg["n_train"],
        n_val=cfg["n_val"],
        n_test=cfg["n_test"],
        seed=cfg["seed"],
        source=cfg["source"],
        mnist_images=images,
        mnist_labels=labels,
    )
    splits = generate_dataset(gen)
    path = os.path.join(out, "dataset.urpc")
    save_dataset(path, splits, gen)
    header, _ = urpc.load_container(path)
    _write_text(os.path.join(out, "manifest.json"), json.dumps(header, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s (%s)", path, ", ".join(f"{k}={len(v)}" for k, v in splits.items()))


def _solve_input(cfg):
    if cfg["input"]:
        X = urpc.load_tensor(cfg["input"])
        if X.ndim != 2:
            raise ShapeError(f"{cfg['input']}: expected an (n, m) matrix, got shape {X.shape}")
        h = cfg["h"] or X.shape[0]
        w = cfg["w"] or 1
        return X, None, None, (int(h), int(w))
    _require(cfg, "dataset")
    splits, _ = load_dataset(cfg["dataset"])
    if cfg["split"] not in splits or not 0 <= cfg["index"] < len(splits[cfg["split"]]):
        raise ConfigError(f"no sample {cfg['split']}[{cfg['index']}] in {cfg['dataset']}")
    ds = splits[cfg["split"]]
    i = cfg["index"]
    return ds.M[i], ds.L[i], ds.S[i], (ds.h, ds.w)


def _corona_objective(M, L, S, config):
    R = M - L - S
    if config.threshold == "mixed":
        sparse = float(np.sum(np.sqrt(np.sum(S * S, axis=-1))))
    else:
        sparse = float(np.sum(np.abs(S)))
    return 0.5 * float(np.sum(R * R)) + config.lambda1 * nuclear_norm(L) + config.lambda2 * sparse


def cmd_solve(cfg):
    out = _out_dir(cfg)
    M, L_true, S_true, _ = _solve_input(cfg)
    n, m = M.shape
    overrides = {k: cfg[k] for k in ("lambda1", "lambda2", "lambda3") if cfg[k] is not None}
    if cfg["solver"] == "corona":
        overrides.setdefault("lambda3", 0.0)
    elif cfg["solver"] != "refrpca":
        raise ConfigError(f"unknown solver {cfg['solver']!r}")
    config = SolverConfig.defaults(
        n,
        m,
        c=cfg["c"],
        max_iters=cfg["iters"],
        consistent_step=cfg["consistent_step"],
        threshold=cfg["threshold"],
        **overrides,
    )
    rows = []

    def record(k, L, S):
        if cfg["solver"] == "corona":
            obj = _corona_objective(M, L, S, config)
        else:
            obj = refrpca_objective(M, L, S, config)
        rows.append((k, obj, residual_norm(M, L, S, config)))

    solve = corona_ista_solve if cfg["solver"] == "corona" else ref_rpca_solve
    state = solve(M, config, on_iter=record)
    urpc.save_tensor(os.path.join(out, "L.urpc"), state.L)
    urpc.save_tensor(os.path.join(out, "S.urpc"), state.S)
    with open(os.path.join(out, "objective.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("iter", "objective", "residual"))
        for k, obj, res in rows:
            writer.writerow((k, repr(float(obj)), repr(float(res))))
    if L_true is not None:
        err = np.linalg.norm(state.L - L_true) / max(np.linalg.norm(L_true), 1e-300)
        log.info("relative L error vs ground truth: %.6g", err)


def _train_config(cfg, **changes):
    keys = ("learning_rate", "batch_size", "epochs", "seed", "depth", "variant", "kernel_size", "clip_norm")
    keys += ("deterministic", "detach_reference", "corona_threshold")
    values = {k: cfg[k] for k in keys}
    values.update(changes)
    return TrainConfig(**values)


def _load_train_val(cfg):
    _require(cfg, "dataset")
    splits, _ = load_dataset(cfg["dataset"])
    return splits["train"], splits["val"]


def cmd_train(cfg):
    out = _out_dir(cfg)
    train_set, val_set = _load_train_val(cfg)
    config = _train_config(cfg)
    params, rows = train(train_set, val_set, config)
    save_params(os.path.join(out, "params.urpc"), params)
    _write_text(os.path.join(out, "metrics.csv"), metrics_csv(rows))


def write_pgm(path, frame):
    """8-bit binary PGM, values mapped linearly from [0, 1] with clipping."""
    frame = np.asarray(frame, dtype=np.float64)
    pixels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def cmd_eval(cfg):
    out = _out_dir(cfg)
    _require(cfg, "dataset", "params")
    splits, _ = load_dataset(cfg["dataset"])
    if cfg["split"] not in splits:
        raise ConfigError(f"unknown split {cfg['split']!r}")
    ds = splits[cfg["split"]]
    params = load_params(cfg["params"])
    if (params.h, params.w, params.m) != ds.geometry:
        raise ShapeError(f"network geometry {(params.h, params.w, params.m)} differs from dataset {ds.geometry}")
    scores = evaluate(params, ds)
    with open(os.path.join(out, "eval.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("split", "mse_L", "mse_S", "mse_avg"))
        writer.writerow((cfg["split"], *(repr(float(s)) for s in scores)))
    log.info("%s: mse_L %.6g, mse_S %.6g, mse_avg %.6g", cfg["split"], *scores)
    if not cfg["dump_frames"]:
        return
    seqs = _int_list(cfg["sequences"], "sequences")
    bad = [i for i in seqs if not 0 <= i < len(ds)]
    if bad:
        raise ConfigError(f"sequence indices {bad} out of range for {len(ds)} samples")
    L_hat, S_hat = predict(params, ds.M[seqs])
    for j, i in enumerate(seqs):
        folder = os.path.join(out, "frames", f"seq{i:04d}")
        os.makedirs(folder, exist_ok=True)
        for name, video in (("M", ds.M[i]), ("L", L_hat[j]), ("S", S_hat[j])):
            frames = video.T.reshape(-1, ds.h, ds.w)
            for t, frame in enumerate(frames):
                write_pgm(os.path.join(folder, f"{name}_{t:03d}.pgm"), frame)


def cmd_sweep(cfg):
    out = _out_dir(cfg)
    train_set, val_set = _load_train_val(cfg)
    depths = _int_list(cfg["depths"], "depths")
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    for v in variants:
        if v not in ("refrpca", "corona"):
            raise ConfigError(f"unknown variant {v!r}")
    rows = depth_sweep(train_set, val_set, depths, variants, _train_config(cfg))
    _write_text(os.path.join(out, "sweep.csv"), sweep_csv(rows))
    for row in rows:
        if row.metrics:
            _write_text(os.path.join(out, f"metrics_{row.variant}_d{row.depth}.csv"), metrics_csv(row.metrics))


def prox_curve(operator, xs, cfg):
    if operator == "soft":
        return soft_threshold(xs, cfg["tau"])
    if operator == "refrpca":
        p = ProxParams(cfg["a2"], cfg["a3"], cfg["q"], cfg["s_p"])
        return reweighted_l1l1_branches(xs, p.A, p.B, p.s_p)[0]
    if operator == "mixed":
        # a single-entry row: the group threshold coincides with the scalar one
        return mixed_l12_threshold(xs[:, None], cfg["tau"])[:, 0]
    raise ConfigError(f"unknown operator {operator!r}; choose soft, mixed or refrpca")


def cmd_prox_plot(cfg):
    out = _out_dir(cfg)
    if not (cfg["step"] > 0 and cfg["hi"] > cfg["lo"]):
        raise ConfigError("need step > 0 and hi > lo")
    count = int(np.floor((cfg["hi"] - cfg["lo"]) / cfg["step"] + 1e-9)) + 1
    xs = cfg["lo"] + cfg["step"] * np.arange(count)
    ys = prox_curve(cfg["operator"], xs, cfg)
    with open(os.path.join(out, f"prox_{cfg['operator']}.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("x", "phi"))
        for x, y in zip(xs, ys):
            writer.writerow((repr(float(x)), repr(float(y))))


def cmd_selftest(cfg):
    out = _out_dir(cfg)
    suites = [s.strip() for s in cfg["suites"].split(",") if s.strip()]
    unknown = [s for s in suites if s not in checks.SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}; available: {list(checks.SUITES)}")
    rows = checks.run_selftest(suites, seed=cfg["seed"])
    with open(os.path.join(out, "selftest.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("check", "value", "tolerance", "status"))
        for r in rows:
            writer.writerow((r.check, repr(float(r.value)), repr(float(r.tolerance)), "pass" if r.passed else "FAIL"))
    for r in rows:
        log.info("%-45s %-10s %.3e (tol %.0e)", r.check, "pass" if r.passed else "FAIL", r.value, r.tolerance)
    failed = [r.check for r in rows if not r.passed]
    if failed:
        raise NumericalError(f"self-checks failed: {', '.join(failed)}")


COMMANDS = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "prox-plot": cmd_prox_plot,
    "selftest": cmd_selftest,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="refrpca", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, dest=key, default=None, action=argparse.BooleanOptionalAction)
            else:
                p.add_argument(flag, dest=key, default=None, metavar=key.upper())
    return parser


def _thread_limit(threads):
    if threads is None or threads <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS[command]}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_values, flags)
        text = format_config(command, cfg)
        log.info("resolved config:\n%s", text.rstrip())
        if cfg.get("out"):
            os.makedirs(cfg["out"], exist_ok=True)
            _write_text(os.path.join(cfg["out"], "run_config.txt"), text)
        with _thread_limit(cfg["threads"]):
            COMMANDS[command](cfg)
    except (ConfigError, ParameterError, ShapeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
