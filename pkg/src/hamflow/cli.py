"""Command-line entry point: train, eval, sweep, sample.

Exit codes: 0 success, 2 configuration/schema violation, 3 numeric abort
during training, 4 corrupt checkpoint, 5 sweep with no successful cell.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from .autodiff import ConfigError, ContractError, NumericError, ParamStore
from .densities import field_grid, kde_grid, model_sample, write_grid_csv
from .dynamics import StateVector, write_trajectory_csv
from .symmetry import density_invariance_probe
from .training import (
    ExperimentConfig,
    TrainingAbort,
    derive_seed,
    make_dataset,
    make_rng,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_SWEEP_FAILED = 5


def _schema() -> dict:
    text = resources.files("hamflow").joinpath("config.schema.json").read_text()
    return json.loads(text)


def load_config(path: str) -> tuple[ExperimentConfig, str]:
    """Parse + schema-validate a config file; returns (config, raw text)."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path_str = "/".join(str(p) for p in err.absolute_path) or "(top level)"
        raise ConfigError(f"config field {path_str}: {err.message}")
    return ExperimentConfig.from_dict(raw), text


def _resolve_out(out_dir: str | None, fallback: str) -> str:
    root = os.environ.get("HAMFLOW_OUT")
    out = out_dir or fallback
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def write_manifest(out_dir: str, config_hash: str, seeds: list[int],
                   started: str, artifacts: list[str]) -> None:
    payload = {
        "config_hash": config_hash,
        "seeds": seeds,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": sorted(artifacts),
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2)


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _artifact_list(out_dir: str) -> list[str]:
    found = []
    for base, _dirs, files in os.walk(out_dir):
        for f in files:
            if f == "manifest.json":
                continue
            found.append(os.path.relpath(os.path.join(base, f), out_dir))
    return found


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    cfg, text = load_config(args.config)
    out = _resolve_out(args.out or cfg.out_dir, f"runs/{_hash_text(text)[:12]}")
    cfg.out_dir = out
    os.makedirs(out, exist_ok=True)
    try:
        train(cfg)
    except TrainingAbort as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        if err.dump_path:
            print(f"diagnostic dump: {err.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    write_manifest(out, _hash_text(text), [cfg.seed], started, _artifact_list(out))
    print(f"trained {cfg.steps} steps -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# checkpoint loading


def load_checkpoint(ckpt_dir: str):
    """Rebuild a model from config.json + params.bin in a run directory."""
    cfg_path = os.path.join(ckpt_dir, "config.json")
    params_path = os.path.join(ckpt_dir, "params.bin")
    if not os.path.isfile(cfg_path) or not os.path.isfile(params_path):
        raise ConfigError(f"checkpoint directory {ckpt_dir} needs config.json and params.bin")
    with open(cfg_path) as fh:
        cfg = ExperimentConfig.from_dict(json.load(fh))
    from .training import build_model

    model, gens = build_model(cfg)
    loaded = ParamStore.load(params_path)
    model.store.load_values_from(loaded)
    return cfg, model, gens


def cmd_eval(args) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    try:
        cfg, model, gens = load_checkpoint(args.checkpoint)
    except (ConfigError, ContractError, OSError) as err:
        print(f"cannot load checkpoint: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    out = _resolve_out(args.out, os.path.join(args.checkpoint, "eval"))
    os.makedirs(out, exist_ok=True)

    if args.grid:
        dataset = make_dataset(cfg.dataset, cfg.dataset_size,
                               derive_seed(cfg.seed, "data"), cfg.test_size,
                               cfg.dataset_path)
        samples = model_sample(model, cfg.grid_sample_count,
                               derive_seed(cfg.seed, "model-kde"))
        write_grid_csv(os.path.join(out, "model_kde.csv"), kde_grid(samples))
        if dataset.sampler is not None:
            target = dataset.sampler(cfg.grid_sample_count, make_rng(cfg.seed, "target-kde"))
        else:
            target = dataset.train_q
        write_grid_csv(os.path.join(out, "target_kde.csv"), kde_grid(target))
        K, U = model.flow.hamiltonians[0]
        write_grid_csv(os.path.join(out, "u_grid.csv"), field_grid(U, model.store, var="q"))
        write_grid_csv(os.path.join(out, "k_grid.csv"), field_grid(K, model.store, var="p"))

    if args.samples:
        rows = model_sample(model, args.samples, derive_seed(cfg.seed, "eval-sample"))
        _write_samples_csv(os.path.join(out, "samples.csv"), rows)

    if args.invariance_angles is not None:
        angles = [float(a) for a in args.invariance_angles.split(",") if a != ""]
        qs = make_dataset(cfg.dataset, cfg.dataset_size, derive_seed(cfg.seed, "data"),
                          cfg.test_size, cfg.dataset_path).test_q[:256]
        with open(os.path.join(out, "invariance.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["angle", "joint_residual", "potential_residual"])
            for a in angles:
                probe = density_invariance_probe(model, a, qs,
                                                 seed=derive_seed(cfg.seed, "probe"))
                writer.writerow([repr(a), repr(probe.joint_residual),
                                 repr(probe.potential_residual)])

    n_traj = args.trajectories
    if n_traj:
        rng = make_rng(cfg.seed, "trajectories")
        starts_batch = model.base.sample(n_traj, rng)
        starts = [StateVector(starts_batch.q[i], starts_batch.p[i]) for i in range(n_traj)]
        write_trajectory_csv(os.path.join(out, "trajectories.csv"), model.flow,
                             starts, args.traj_steps, model.store,
                             generators=gens.generators)

    write_manifest(out, "", [cfg.seed], started, _artifact_list(out))
    print(f"eval artifacts -> {out}")
    return EXIT_OK


def _write_samples_csv(path: str, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i+1}" for i in range(rows.shape[1])])
        for r in rows:
            writer.writerow([repr(float(v)) for v in r])


def cmd_sample(args) -> int:
    try:
        cfg, model, _g = load_checkpoint(args.checkpoint)
    except (ConfigError, ContractError, OSError) as err:
        print(f"cannot load checkpoint: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    seed = args.seed if args.seed is not None else derive_seed(cfg.seed, "eval-sample")
    rows = model_sample(model, args.count, seed)
    out = _resolve_out(args.out, os.path.join(args.checkpoint, "samples.csv"))
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    _write_samples_csv(out, rows)
    print(f"{args.count} samples -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _run_cell(cfg_dict: dict) -> dict:
    """One (kappa, size, seed) training run in its own process."""
    try:
        cfg = ExperimentConfig.from_dict(cfg_dict)
        result = train(cfg)
        last = result.metrics[-1]
        return {"ok": True, "final_test_elbo": last["test_elbo"],
                "final_train_elbo": last["train_elbo"], "out_dir": cfg.out_dir}
    except Exception as err:  # cell failures are recorded, not fatal
        return {"ok": False, "error": f"{type(err).__name__}: {err}",
                "out_dir": cfg_dict.get("out_dir")}


def cmd_sweep(args) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    cfg, text = load_config(args.config)
    kappas = [float(k) for k in args.kappa.split(",") if k != ""]
    if not kappas:
        print("empty --kappa list", file=sys.stderr)
        return EXIT_CONFIG
    if args.data_sizes:
        sizes = [None if s == "infinite" else int(s)
                 for s in args.data_sizes.split(",") if s != ""]
    else:
        sizes = [cfg.dataset_size]
    n_seeds = args.seeds
    if n_seeds < 1:
        print("--seeds must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    out_root = _resolve_out(args.out or cfg.out_dir, f"sweep/{_hash_text(text)[:12]}")
    os.makedirs(out_root, exist_ok=True)

    gen_kinds = [g.kind for g in cfg.generators] or ["so2"]
    jobs = []
    for kappa in kappas:
        for size in sizes:
            for i in range(n_seeds):
                cell = cfg.to_dict()
                # the dataset, init and noise streams depend only on
                # (size, seed index), so kappa comparisons are paired
                cell["seed"] = derive_seed(cfg.seed, f"cell-size{size}-seed{i}")
                cell["dataset_size"] = "infinite" if size is None else size
                cell["generators"] = (
                    [] if kappa == 0.0
                    else [{"kind": k, "kappa": kappa} for k in gen_kinds])
                size_tag = "infinite" if size is None else str(size)
                cell["out_dir"] = os.path.join(
                    out_root, f"kappa_{kappa:g}_size_{size_tag}", f"seed_{i}")
                jobs.append(((kappa, size, i), cell))

    workers = args.jobs or min(len(jobs), os.cpu_count() or 1)
    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (key, _cell), res in zip(jobs, pool.map(_run_cell, [c for _k, c in jobs])):
                results[key] = res
    else:
        for key, cell in jobs:
            results[key] = _run_cell(cell)

    summary_path = os.path.join(out_root, "summary.csv")
    any_cell_ok = False
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kappa", "size", "seeds", "mean_test_elbo", "stderr_test_elbo",
                         "mean_train_elbo", "mean_train_test_gap", "failures"])
        for kappa in kappas:
            for size in sizes:
                cell_res = [results[(kappa, size, i)] for i in range(n_seeds)]
                good = [r for r in cell_res if r["ok"]]
                fails = len(cell_res) - len(good)
                if good:
                    any_cell_ok = True
                    te = np.array([r["final_test_elbo"] for r in good])
                    tr = np.array([r["final_train_elbo"] for r in good])
                    stderr = float(te.std(ddof=1) / np.sqrt(len(te))) if len(te) > 1 else 0.0
                    writer.writerow([repr(kappa), size if size is not None else "infinite",
                                     len(good), repr(float(te.mean())), repr(stderr),
                                     repr(float(tr.mean())), repr(float((tr - te).mean())),
                                     fails])
                else:
                    writer.writerow([repr(kappa), size if size is not None else "infinite",
                                     0, "", "", "", "", fails])
    write_manifest(out_root, _hash_text(text), [cfg.seed], started,
                   _artifact_list(out_root))
    print(f"sweep summary -> {summary_path}")
    return EXIT_OK if any_cell_ok else EXIT_SWEEP_FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamflow",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training config")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="export grids/samples/diagnostics from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", default=None)
    p.add_argument("--grid", action="store_true")
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--invariance-angles", default=None)
    p.add_argument("--trajectories", type=int, default=0)
    p.add_argument("--traj-steps", type=int, default=20)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="cross product of kappa/data-size/seed cells")
    p.add_argument("config")
    p.add_argument("--kappa", required=True)
    p.add_argument("--data-sizes", default=None)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("sample", help="draw model samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
