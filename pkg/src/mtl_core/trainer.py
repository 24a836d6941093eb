"""
Multitask training with learnable pruning thresholds and adaptive task weighting.

Per batch: the pruner hands out effective weights, every head's loss is
computed through them, the weighted total Σ β_t·L_t is differentiated, and
the pruner applies the masked weight and threshold updates. Per epoch: the
epoch-mean losses enter the sliding windows, task weights are refreshed
after warm-up, the model is evaluated on the test split, sparsity is
measured and the masks are frozen once the target is reached.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import TrainConfig
from .data import SynthDataset, batch_indices
from .errors import DatasetError, DivergenceError, InsufficientDataError, NonFiniteError
from .metrics import EVAL_METRICS, RunReport, eval_metric, flops_estimate, metric_frame, metric_name
from .model import MultitaskModel, forward_task, param_counts
from .optim import lr_at
from .pruning import BasePruner, ComponentSparsity, SparsitySnapshot, build_pruner
from .tensor import ComputationTape, Tensor, loss_fn
from .weighting import WeightingState, compute_betas, push_loss, weighted_total_loss, weighting_rows

log = logging.getLogger(__name__)

# keeps negative-cosine losses positive inside the windows
COSINE_SHIFT = 1.0


@dataclass
class EpochRecord:
    epoch: int
    train_losses: Dict[str, float]
    eval_metrics: Dict[str, float]
    betas: Dict[str, float]
    thresholds: Dict[str, float]
    snapshot: SparsitySnapshot
    lr: float
    frozen: bool
    weighting: List[Dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> Dict[str, Any]:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "snapshot"}
        d["snapshot"] = [dataclasses.asdict(c) for c in self.snapshot.components]
        return d

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> "EpochRecord":
        snapshot = SparsitySnapshot(int(d["epoch"]), tuple(ComponentSparsity(**c) for c in d["snapshot"]))
        return cls(
            epoch=int(d["epoch"]),
            train_losses=dict(d["train_losses"]),
            eval_metrics=dict(d["eval_metrics"]),
            betas=dict(d["betas"]),
            thresholds=dict(d["thresholds"]),
            snapshot=snapshot,
            lr=float(d["lr"]),
            frozen=bool(d["frozen"]),
            weighting=list(d.get("weighting", [])),
        )


@dataclass
class RunLog:
    """Append-only record of completed epochs."""

    run_name: str = "run"
    epochs: List[EpochRecord] = field(default_factory=list)
    freeze_epoch: Optional[int] = None
    report: Optional[RunReport] = None

    def append(self, record: EpochRecord):
        if record.epoch != len(self.epochs):
            raise ValueError(f"epoch {record.epoch} appended after {len(self.epochs)} records")
        self.epochs.append(record)

    def __len__(self):
        return len(self.epochs)

    def losses_frame(self) -> pd.DataFrame:
        rows = [{"epoch": r.epoch, "task": t, "loss": v} for r in self.epochs for t, v in r.train_losses.items()]
        return pd.DataFrame(rows, columns=["epoch", "task", "loss"])

    def betas_frame(self) -> pd.DataFrame:
        rows = [row for r in self.epochs for row in r.weighting]
        return pd.DataFrame(rows, columns=["epoch", "task", "window_mad", "current_loss", "beta"])

    def sparsity_frame(self) -> pd.DataFrame:
        rows = [row for r in self.epochs for row in r.snapshot.rows()]
        return pd.DataFrame(rows, columns=["epoch", "component", "nnz", "total", "sparsity"])

    def thresholds_frame(self) -> pd.DataFrame:
        rows = [
            {"epoch": r.epoch, "group": g, "theta": theta, "alpha": 1.0 / (1.0 + math.exp(-theta))}
            for r in self.epochs for g, theta in r.thresholds.items()
        ]
        return pd.DataFrame(rows, columns=["epoch", "group", "theta", "alpha"])

    def eval_frame(self) -> pd.DataFrame:
        rows = [{"epoch": r.epoch, "metric": m, "value": v} for r in self.epochs for m, v in r.eval_metrics.items()]
        return pd.DataFrame(rows, columns=["epoch", "metric", "value"])

    def to_json(self) -> Dict[str, Any]:
        return {
            "run_name": self.run_name,
            "epochs": [r.to_json() for r in self.epochs],
            "freeze_epoch": self.freeze_epoch,
        }

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> "RunLog":
        return cls(
            run_name=d.get("run_name", "run"),
            epochs=[EpochRecord.from_json(r) for r in d["epochs"]],
            freeze_epoch=d.get("freeze_epoch"),
        )


def metric_directions(model: MultitaskModel) -> Dict[str, bool]:
    return {metric_name(h.task_name, h.loss): EVAL_METRICS[h.loss][1] for h in model.heads}


def evaluate(model: MultitaskModel, pruner: BasePruner, dataset: SynthDataset, split: str = "test") -> Dict[str, float]:
    """Task metrics on a split using the pruner's effective weights."""
    weights = {n: Tensor(v) for n, v in pruner.effective_weights().items()}
    x, ys = dataset.split_arrays(split)
    out = {}
    for t, head in enumerate(model.heads):
        pred = forward_task(model, x, t, weights)
        out[metric_name(head.task_name, head.loss)] = eval_metric(head.loss, pred.values, ys[t])
    return out


def check_dataset(model: MultitaskModel, dataset: SynthDataset):
    if dataset.task_names != model.task_names:
        raise DatasetError(f"dataset tasks {dataset.task_names} do not match model heads {model.task_names}")
    if dataset.input_dim != model.input_dim:
        raise DatasetError(f"dataset input_dim {dataset.input_dim} != model input_dim {model.input_dim}")


class Trainer:
    def __init__(self, model: MultitaskModel, dataset: SynthDataset, config: TrainConfig,
                 pruner: Optional[BasePruner] = None, reporters: Sequence[Any] = (),
                 on_checkpoint: Optional[Callable[["Trainer"], None]] = None, run_name: Optional[str] = None,
                 baseline_metrics: Optional[Dict[str, float]] = None, output_dir=None):
        check_dataset(model, dataset)
        self.model = model
        self.dataset = dataset
        self.config = config
        self.pruner = pruner if pruner is not None else build_pruner(model, config)
        self.reporters = list(reporters)
        self.on_checkpoint = on_checkpoint
        self.baseline_metrics = baseline_metrics
        self.output_dir = output_dir
        self.weighting = WeightingState.create(
            model.task_names,
            capacity=config.window_capacity,
            weighting_lambda=config.weighting_lambda,
            warmup_epochs=config.resolved_warmup_epochs(),
            loss_normalizer=config.loss_normalizer,
        )
        self.rng = np.random.default_rng(config.seed)
        self.param_counts = param_counts(model)
        self.epoch = 0
        self.iteration = 0
        self.log = RunLog(run_name=run_name or f"{self.pruner.kind}-seed{config.seed}")
        n_train = len(dataset.train_idx)
        self.steps_per_epoch = math.ceil(n_train / config.batch_size)
        self.total_iterations = self.steps_per_epoch * config.epochs

    # ------------------------------------------------------------------

    def lr(self) -> float:
        c = self.config
        return lr_at(c.lr, self.iteration, c.lr_decay, c.lr_decay_interval)

    def lr_theta(self) -> float:
        c = self.config
        return lr_at(c.resolved_lr_theta(), self.iteration, c.lr_decay, c.lr_decay_interval)

    def train_step(self, x: np.ndarray, ys: Sequence[np.ndarray]) -> List[float]:
        """One forward/backward/update; returns the unweighted task losses."""
        model = self.model
        for layer in model.layers():
            layer.bias.zero_grad()

        effective = self.pruner.effective_weights()
        with ComputationTape() as tape:
            weights = {n: Tensor(v, requires_grad=True, name=n) for n, v in effective.items()}
            losses = [
                loss_fn(head.loss, forward_task(model, x, t, weights), ys[t])
                for t, head in enumerate(model.heads)
            ]
            total = weighted_total_loss(self.weighting.beta_list(), losses)
            tape.backward(total)

        grads = {n: (w.grad if w.grad is not None else np.zeros_like(w.values)) for n, w in weights.items()}
        lr, lr_theta = self.lr(), self.lr_theta()
        self.pruner.apply(grads, lr, lr_theta)
        for layer in model.layers():
            g = layer.bias.grad if layer.bias.grad is not None else np.zeros_like(layer.bias.values)
            self.pruner.optimizer.step(layer.bias_name, layer.bias.values, g, np.ones_like(g), lr, 0.0)

        self.iteration += 1
        self.pruner.after_training_iteration(self.iteration)
        return [loss.item() for loss in losses]

    def _window_value(self, task_index: int, loss: float) -> float:
        if self.model.heads[task_index].loss == "negative-cosine":
            return loss + COSINE_SHIFT
        return loss

    def run_epoch(self) -> EpochRecord:
        epoch = self.epoch
        cfg = self.config
        model = self.model
        betas_used = dict(zip(model.task_names, self.weighting.beta_list()))
        lr_start = self.lr()

        epoch_seed = int(self.rng.integers(0, 2 ** 63 - 1))
        sums = np.zeros(model.num_tasks)
        n_seen = 0
        try:
            for idx in batch_indices(self.dataset.train_idx, cfg.batch_size, epoch_seed):
                x = self.dataset.inputs[idx]
                ys = [self.dataset.targets[t][idx] for t in model.task_names]
                losses = self.train_step(x, ys)
                sums += np.asarray(losses) * len(idx)
                n_seen += len(idx)
                if cfg.freeze_cadence == "batch" and not self.pruner.frozen:
                    self._check_freeze(epoch)

            epoch_losses = sums / n_seen
            current = {}
            for t, task in enumerate(model.task_names):
                current[task] = self._window_value(t, float(epoch_losses[t]))
                push_loss(self.weighting, task, current[task])
        except (NonFiniteError, DivergenceError) as e:
            raise DivergenceError(f"training diverged in epoch {epoch}: {e}", epoch=epoch) from e

        weighting_log = weighting_rows(self.weighting, epoch, current)
        for row in weighting_log:
            row["beta"] = betas_used[row["task"]]

        self.pruner.at_epoch_end(epoch)
        snapshot = self.pruner.snapshot(epoch)
        if not self.pruner.frozen:
            self._maybe_freeze(snapshot)
        if self.pruner.frozen and self.log.freeze_epoch is None:
            self.log.freeze_epoch = epoch

        try:
            compute_betas(self.weighting, current, self.param_counts, epoch=epoch + 1)
        except InsufficientDataError:
            self.weighting.betas = {t: 1.0 for t in model.task_names}

        record = EpochRecord(
            epoch=epoch,
            train_losses={t: float(v) for t, v in zip(model.task_names, epoch_losses)},
            eval_metrics=evaluate(model, self.pruner, self.dataset, "test"),
            betas=betas_used,
            thresholds=self.pruner.thresholds(),
            snapshot=snapshot,
            lr=lr_start,
            frozen=self.pruner.frozen,
            weighting=weighting_log,
        )
        self.log.append(record)
        self.epoch += 1
        return record

    def _check_freeze(self, epoch: int):
        self._maybe_freeze(self.pruner.snapshot(epoch))

    def _maybe_freeze(self, snapshot: SparsitySnapshot):
        if self.pruner.maybe_freeze(snapshot) and self.log.freeze_epoch is None:
            self.log.freeze_epoch = snapshot.epoch

    # ------------------------------------------------------------------

    def _notify(self, hook: str, *args):
        for r in self.reporters:
            try:
                getattr(r, hook)(*args)
            except Exception as e:
                log.error(f"Error in {r.__class__.__name__}.{hook}: {e}")

    def run(self) -> RunLog:
        cfg = self.config
        self.pruner.at_train_begin(self.total_iterations, self.steps_per_epoch)
        context = {"trainer": self, "model": self.model, "run_log": self.log, "output_dir": self.output_dir}
        self._notify("on_start", context)

        pbar = tqdm(total=cfg.epochs, initial=self.epoch, desc="Training", disable=cfg.disable_progress_bar)
        try:
            while self.epoch < cfg.epochs:
                record = self.run_epoch()
                pbar.update(1)
                pbar.set_postfix(
                    loss=f"{sum(record.train_losses.values()):.4f}",
                    sparsity=f"{record.snapshot.overall:.3f}",
                )
                self._notify("on_epoch", record, context)
                if cfg.checkpoint_interval and self.epoch % cfg.checkpoint_interval == 0 and self.on_checkpoint:
                    self.on_checkpoint(self)
        finally:
            pbar.close()

        self.log.report = self.make_report(self.baseline_metrics)
        self._notify("on_finish", context)
        log.info(
            f"Finished {self.log.run_name}: sparsity {self.log.report.overall_sparsity:.4f}, "
            f"freeze epoch {self.log.freeze_epoch}"
        )
        return self.log

    def make_report(self, baseline_metrics: Optional[Dict[str, float]] = None) -> RunReport:
        snapshot = self.pruner.snapshot(self.epoch - 1)
        flops = flops_estimate(self.model, snapshot)
        final_metrics = self.log.epochs[-1].eval_metrics if self.log.epochs else {}
        report = RunReport(
            pruner_kind=self.pruner.kind,
            seed=self.config.seed,
            target_sparsity=self.config.target_sparsity,
            epochs_completed=len(self.log),
            freeze_epoch=self.log.freeze_epoch,
            overall_sparsity=snapshot.overall,
            sparsity={c.component: c.sparsity for c in snapshot.components},
            param_count=sum(self.param_counts.values()),
            dense_flops=flops["dense_flops"],
            sparse_flops=flops["sparse_flops"],
            final_metrics=dict(final_metrics),
            thresholds=self.pruner.thresholds(),
            betas=dict(self.weighting.betas),
        )
        if baseline_metrics is not None:
            report.attach_baseline(baseline_metrics, metric_directions(self.model))
        return report

    def metrics_frame(self) -> pd.DataFrame:
        final = self.log.epochs[-1].eval_metrics if self.log.epochs else {}
        return metric_frame({self.log.run_name: final}, metric_directions(self.model))


def train(model: MultitaskModel, dataset: SynthDataset, config: TrainConfig, **kwargs) -> RunLog:
    return Trainer(model, dataset, config, **kwargs).run()


def train_baseline_shared_threshold(model: MultitaskModel, dataset: SynthDataset, config: TrainConfig,
                                    **kwargs) -> RunLog:
    """Same loop with a single threshold shared by every component."""
    return train(model, dataset, dataclasses.replace(config, pruner_kind="shared-threshold"), **kwargs)


def train_baseline_magnitude(model: MultitaskModel, dataset: SynthDataset, config: TrainConfig,
                             **kwargs) -> RunLog:
    """Train-then-prune rounds with global magnitude masks."""
    return train(model, dataset, dataclasses.replace(config, pruner_kind="magnitude-iterative"), **kwargs)
