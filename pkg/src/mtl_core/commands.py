"""
Command implementations behind the `adapmtl` CLI.

Every command returns a process exit code. Library errors are mapped via
their `exit_code` and reported as one JSON line on stderr.
"""
import dataclasses
import functools
import json
import logging
import multiprocessing as mp
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import hydra
import pandas as pd
import psutil

from .checkpoint import load_checkpoint, restore_model, restore_pruner, resume_trainer, save_checkpoint
from .config import RunConfig, dump_run_config, load_run_config, parse_run_config
from .data import dataset_from_config, save_dataset
from .errors import AmtlError, ArtifactIOError, ConfigError
from .metrics import read_metric_table, table_deltas
from .model import build_model
from .reporters import DEFAULT_REPORTERS
from .sparse_infer import bench, export_sparse, load_sparse_model, save_sparse_model
from .trainer import Trainer
from .utils import setup_logging

log = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final.safetensors"
SPARSE_MODEL = "sparse.safetensors"


def report_error(e: BaseException) -> int:
    if isinstance(e, AmtlError):
        code = e.exit_code
    elif isinstance(e, OSError):
        code = ArtifactIOError.exit_code
    else:
        code = 1
    payload = {"error": type(e).__name__, "message": str(e), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def exit_code(func):
    """Run a command and turn raised errors into exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            result = func(*args, **kwargs)
            return 0 if result is None else int(result)
        except (AmtlError, OSError) as e:
            return report_error(e)

    return wrapper


# ----------------------------------------------------------------------
# --- train ---
# ----------------------------------------------------------------------

def instantiate_reporters(reporter_configs: Dict[str, Any]) -> List[Any]:
    configs = reporter_configs if reporter_configs else DEFAULT_REPORTERS
    reporters = []
    for name, r_conf in configs.items():
        if r_conf is None:
            continue
        try:
            reporter = hydra.utils.instantiate(r_conf)
            reporters.append(reporter)
            log.debug(f"Initialized reporter '{name}': {reporter.__class__.__name__}")
        except Exception as e:
            log.error(f"Failed to instantiate reporter config {r_conf}: {e}")
    return reporters


def load_baseline_metrics(path) -> Dict[str, float]:
    path = Path(path)
    try:
        with open(path) as f:
            report = json.load(f)
    except FileNotFoundError as e:
        raise ArtifactIOError(f"baseline report not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"baseline report {path} is not valid JSON: {e}") from e
    if "final_metrics" not in report:
        raise ConfigError(f"baseline report {path} has no final_metrics")
    return {k: float(v) for k, v in report["final_metrics"].items()}


def train_run(run: RunConfig, out_dir: Path, resume: Optional[str] = None) -> Trainer:
    """Train one seed into `out_dir` (which must exist) and write the final checkpoint."""
    cfg = run.train
    dataset = dataset_from_config(run.data)
    baseline = load_baseline_metrics(cfg.baseline_report) if cfg.baseline_report else None
    kwargs = dict(
        reporters=instantiate_reporters(run.reporters),
        on_checkpoint=lambda tr: save_checkpoint(out_dir / f"epoch_{tr.epoch:04d}.safetensors", tr, run),
        baseline_metrics=baseline,
        output_dir=out_dir,
    )

    if resume:
        trainer = resume_trainer(load_checkpoint(resume), dataset, run, **kwargs)
    else:
        model = build_model(run.model.to_spec(), theta_init=cfg.theta_init, seed=cfg.seed)
        trainer = Trainer(model, dataset, cfg, **kwargs)

    (out_dir / "config.yaml").write_text(dump_run_config(run))
    trainer.run()
    save_checkpoint(out_dir / FINAL_CHECKPOINT, trainer, run)
    return trainer


def _train_seed_worker(config_yaml: str, seed: int, out_dir: str) -> int:
    setup_logging()
    run = parse_run_config(config_yaml)
    run.train = dataclasses.replace(run.train, seed=seed, seeds=[])
    out = Path(out_dir)
    try:
        out.mkdir(exist_ok=True)
        train_run(run, out)
    except (AmtlError, OSError) as e:
        return report_error(e)
    return 0


@exit_code
def cmd_train(config_path: Optional[str], overrides: Sequence[str] = (), seed: Optional[int] = None,
              out: Optional[str] = None, resume: Optional[str] = None):
    if config_path is None:
        if resume is None:
            raise ConfigError("train needs --config (or --resume with a checkpoint)")
        run = load_checkpoint(resume).run_config
    else:
        run = load_run_config(config_path, overrides)
        if resume is not None and seed is None:
            # a checkpoint always belongs to one seed of the run
            seed = load_checkpoint(resume).run_config.train.seed
    if seed is not None:
        run.train = dataclasses.replace(run.train, seed=seed, seeds=[])
    if out is not None:
        run.output_dir = out

    out_dir = Path(run.output_dir)
    if not out_dir.is_dir():
        raise ArtifactIOError(f"output directory does not exist: {out_dir}")

    seeds = list(run.train.seeds)
    if not seeds or resume:
        train_run(run, out_dir, resume)
        return 0

    workers = max(1, min(len(seeds), psutil.cpu_count(logical=False) or 1))
    log.info(f"Training {len(seeds)} seeds with {workers} worker process(es)")
    config_yaml = dump_run_config(run)
    jobs = [(config_yaml, s, str(out_dir / f"seed_{s}")) for s in seeds]
    with mp.get_context("spawn").Pool(workers) as pool:
        codes = pool.starmap(_train_seed_worker, jobs)
    failed = {s: c for s, c in zip(seeds, codes) if c}
    if failed:
        log.error(f"Seeds failed: {failed}")
        return max(failed.values())
    return 0


# ----------------------------------------------------------------------
# --- export / bench ---
# ----------------------------------------------------------------------

@exit_code
def cmd_export(checkpoint: str, out: Optional[str] = None):
    ckpt = load_checkpoint(checkpoint)
    model = restore_model(ckpt)
    pruner = restore_pruner(ckpt, model)
    sparse_model = export_sparse(model, pruner)
    out_path = Path(out) if out is not None else ckpt.path.with_name(SPARSE_MODEL)
    save_sparse_model(sparse_model, out_path)

    totals = {c.name: c.weight_count() for c in model.components}
    rows = [
        {"component": name, "nnz": nnz, "total": totals[name], "sparsity": 1.0 - nnz / totals[name]}
        for name, nnz in sparse_model.nnz_by_component().items()
    ]
    print(pd.DataFrame(rows).to_string(index=False, float_format="%.4f"))
    log.info(f"Wrote sparse model to {out_path}")


@exit_code
def cmd_bench(sparse_path: str, checkpoint: str, n: int = 100, out: Optional[str] = None):
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    sparse_model = load_sparse_model(sparse_path)
    ckpt = load_checkpoint(checkpoint)
    report = bench(sparse_model, restore_model(ckpt), n_inputs=n)
    print(pd.DataFrame(report.tasks).to_string(index=False))
    print(f"mul_add_ratio: {report.mul_add_ratio:.4f}")
    if out is not None:
        with open(out, "w") as f:
            json.dump(report.to_json(), f, indent=2)


# ----------------------------------------------------------------------
# --- report / gen-data ---
# ----------------------------------------------------------------------

@exit_code
def cmd_report(tables: Sequence[str], baseline: Optional[str] = None, convention: str = "sum",
               out: Optional[str] = None):
    table = read_metric_table(list(tables), baseline)
    deltas = table_deltas(table, convention)
    print(f"baseline: {table.baseline}  convention: {convention}")
    print(deltas.to_string(index=False, float_format="%.3f"))
    if out is not None:
        payload = {
            "baseline": table.baseline,
            "convention": convention,
            "rows": deltas.to_dict(orient="records"),
        }
        with open(out, "w") as f:
            json.dump(payload, f, indent=2)


@exit_code
def cmd_gen_data(config_path: str, overrides: Sequence[str] = (), out: Optional[str] = None):
    run = load_run_config(config_path, overrides)
    if run.data.path:
        raise ConfigError("data.path is set; gen-data generates from data.tasks")
    dataset = dataset_from_config(run.data)
    out_path = Path(out) if out is not None else Path(run.output_dir) / "dataset.amtl"
    if not out_path.parent.is_dir():
        raise ArtifactIOError(f"output directory does not exist: {out_path.parent}")
    save_dataset(dataset, out_path)
    print(f"{len(dataset.train_idx)} train / {len(dataset.test_idx)} test samples -> {out_path}")
