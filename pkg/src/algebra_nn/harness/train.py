"""Training loop with optional magnitude pruning, metrics CSV and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..algebra import AlgebraId, Kind
from ..autodiff import Tape
from ..cost import model_cost
from ..nn.modules import ConvClassifier, GRULanguageModel, MLPClassifier, Model
from ..nn.serialize import load_arrays, save_arrays
from ..pruning import (PruneMask, PruneSchedule, apply_mask, load_mask, prune_step, save_mask,
                       _layer_masks)
from . import data as D
from .config import ExperimentConfig

log = logging.getLogger(__name__)

# weight decay multiplier used for matrix and quaternion models on CIFAR-10
CIFAR_MATRIX_L2_SCALE = 0.725
_MATRIX_LIKE = {Kind.M2R, Kind.M3R, Kind.M4R, Kind.M2C, Kind.QUATERNION}


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step, self.checkpoint = step, checkpoint


# data


@dataclass
class DataBundle:
    train: D.Dataset
    eval: D.Dataset
    features: int = 0
    classes: int = 0
    channels: int = 0
    image_size: int = 0


def make_data(cfg: ExperimentConfig) -> DataBundle:
    d = cfg.data
    if d.name in ("spiral", "blobs"):
        if d.name == "spiral":
            x, y = D.spiral(d.samples_per_class, d.classes, d.noise, d.turns, seed=cfg.seed)
        else:
            x, y = D.blobs(d.samples_per_class, d.classes, d.features, d.spread, seed=cfg.seed)
        ds = D.Dataset("table", x, y, d.batch_size)
        return DataBundle(ds, ds, features=x.shape[1], classes=d.classes)
    if d.name == "cifar10":
        (x, y), (xt, yt) = D.load_cifar_dir(d.path, d.max_records)
        if xt is None:
            xt, yt = x, y
        elif d.max_records:
            xt, yt = xt[: d.max_records], yt[: d.max_records]
        train = D.Dataset("image", x, y, d.batch_size or 128, crop=d.crop)
        return DataBundle(train, D.Dataset("image", xt, yt), channels=3, classes=10, image_size=32)
    if d.name == "text":
        tokens = D.load_text(d.path)
        cut = max(int(tokens.size * 0.9), 2)
        train = D.Dataset("text", tokens[:cut], batch_size=d.batch_size or 16, seq_len=cfg.model.seq_len)
        held = tokens[cut:] if tokens.size - cut > cfg.model.seq_len else tokens
        return DataBundle(train, D.Dataset("text", held, seq_len=cfg.model.seq_len), classes=256)
    raise ValueError(f"unknown dataset {d.name!r}")


def build_model(cfg: ExperimentConfig, bundle: DataBundle | None = None) -> Model:
    """Instantiate the model a config describes; ``bundle`` supplies input sizes."""
    m = cfg.model
    if bundle is None:
        bundle = _shape_only(cfg)
    if m.kind == "mlp":
        return MLPClassifier(cfg.algebra, bundle.features, m.hidden, bundle.classes, m.activation,
                             m.lift, m.lift_hidden, m.batchnorm, m.gate, m.dropout, m.bias, seed=cfg.seed)
    if m.kind == "conv":
        return ConvClassifier(cfg.algebra, bundle.channels, m.stem, m.blocks, bundle.classes,
                              bundle.image_size or 32, m.activation, m.lift, m.lift_hidden, seed=cfg.seed)
    if m.kind == "gru":
        return GRULanguageModel(cfg.algebra, m.embed, m.hidden[0], 256, m.seq_len, m.lift,
                                m.lift_hidden, seed=cfg.seed)
    raise ValueError(f"unknown model kind {m.kind!r}")


def _shape_only(cfg: ExperimentConfig) -> DataBundle:
    """Input sizes implied by the config alone, without reading data files."""
    d = cfg.data
    empty = D.Dataset("table", np.zeros((0, 1)))
    if d.name == "spiral":
        return DataBundle(empty, empty, features=2, classes=d.classes)
    if d.name == "blobs":
        return DataBundle(empty, empty, features=d.features, classes=d.classes)
    if d.name == "cifar10":
        return DataBundle(empty, empty, channels=3, classes=10, image_size=32)
    return DataBundle(empty, empty, classes=256)


# optimisers


class SGD:
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        for k, g in grads.items():
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v
            params[k] -= lr * v


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: ExperimentConfig):
    o = cfg.optim
    if o.name == "sgd":
        return SGD(o.momentum)
    if o.name == "adam":
        return Adam(o.beta1, o.beta2, o.eps)
    raise ValueError(f"unknown optimizer {o.name!r}")


def learning_rate(cfg: ExperimentConfig, step: int) -> float:
    o = cfg.optim
    if o.schedule == "constant":
        return o.lr
    if o.schedule == "step":
        return o.lr * o.gamma ** sum(step > m for m in o.milestones)
    raise ValueError(f"unknown lr schedule {o.schedule!r}")


def l2_scale(cfg: ExperimentConfig) -> float:
    if cfg.optim.l2_scale >= 0:
        return cfg.optim.l2_scale
    kind = AlgebraId.parse(cfg.algebra).kind
    return CIFAR_MATRIX_L2_SCALE if cfg.data.name == "cifar10" and kind in _MATRIX_LIKE else 1.0


def _decayed(model: Model) -> list[str]:
    return [k for k in model.params if k.endswith(".weight") or k.startswith("gru.w_")]


# run


@dataclass
class RunResult:
    model: Model
    mask: PruneMask | None
    history: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    eval_metric: float = float("nan")
    checkpoint: Path | None = None
    seconds: float = 0.0


def prune_schedule(cfg: ExperimentConfig) -> PruneSchedule | None:
    p = cfg.prune
    if p.final_sparsity <= 0:
        return None
    return PruneSchedule(cfg.steps, p.final_sparsity, p.start_fraction, p.end_fraction, p.interval)


def evaluate(model: Model, ds: D.Dataset) -> float:
    """Accuracy for classifiers, bits per byte for the language model."""
    tape = Tape()
    _, metric = model.loss(tape, model.bind(tape), ds.full(), training=False)
    return metric


def train(cfg: ExperimentConfig, out_dir: Path | str | None = None, bundle: DataBundle | None = None,
          on_step=None) -> RunResult:
    """Train ``cfg``. Writes ``metrics.csv``, ``model.ckpt`` and ``model.mask``
    (when pruning) into ``out_dir`` if given. Deterministic for a fixed seed."""
    t0 = time.perf_counter()
    bundle = bundle or make_data(cfg)
    model = build_model(cfg, bundle)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = make_optimizer(cfg)
    schedule = prune_schedule(cfg)
    mode = "component" if cfg.prune.criterion == "component" else "tuple"
    mask = PruneMask.dense(model.params, model.prunable, model.frozen_weights, mode) if schedule else None
    decay = cfg.optim.l2 * l2_scale(cfg)
    decayed = _decayed(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt" if out is not None else None
    history: list[dict] = []
    loss_value = float("nan")
    last_good = {k: v.copy() for k, v in model.params.items()}

    for step in range(1, cfg.steps + 1):
        tape = Tape()
        p = model.bind(tape)
        loss, metric = model.loss(tape, p, bundle.train.batch(rng), training=True, rng=rng)
        loss_value = float(loss.value)
        if not np.isfinite(loss_value):
            model.params.update(last_good)
            saved = save_checkpoint(model, cfg, ckpt, mask, step - 1) if ckpt else None
            raise NonFiniteLossError(step, saved)
        last_good = {k: v.copy() for k, v in model.params.items()}
        grads = tape.gradients(loss, p)
        if decay:
            for k in decayed:
                grads[k] = grads[k] + decay * model.params[k]
        if mask is not None:
            for k in mask.keep:
                grads[k] = grads[k] * mask.weight_mask(k, grads[k].shape)
        opt.step(model.params, grads, learning_rate(cfg, step))
        if mask is not None:
            apply_mask(model.params, mask)
            if schedule.is_boundary(step):
                mask = prune_step(model.params, mask, schedule, step, cfg.prune.criterion,
                                  model.algebra, cfg.prune.per_layer)
        if step % cfg.log_every == 0 or step == cfg.steps:
            row = {"step": step, "loss": loss_value, "metric": metric,
                   "sparsity": mask.sparsity() if mask is not None else 0.0}
            history.append(row)
            log.info("step %d loss %.5f metric %.4f sparsity %.3f", step, loss_value, metric, row["sparsity"])
            if on_step is not None and on_step(row):
                break

    result = RunResult(model, mask, history, loss_value, evaluate(model, bundle.eval))
    if out is not None:
        write_metrics(out / "metrics.csv", history)
        result.checkpoint = save_checkpoint(model, cfg, ckpt, mask, history[-1]["step"] if history else 0)
        (out / "summary.json").write_text(json.dumps({
            "name": cfg.name, "algebra": model.algebra.tag, "final_loss": result.final_loss,
            "eval_metric": result.eval_metric, "sparsity": mask.sparsity() if mask else 0.0,
            "multiplies": run_cost(model, mask).multiplies,
        }, indent=2))
    result.seconds = time.perf_counter() - t0
    return result


def write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["step", "loss", "metric", "sparsity"], lineterminator="\n")
        w.writeheader()
        w.writerows(history)


def run_cost(model: Model, mask: PruneMask | None):
    specs = model.layer_specs()
    if mask is None:
        return model_cost(specs)
    return model_cost(specs, _layer_masks(mask, model.weight_layer), mode=mask.mode)


# checkpoints


def save_checkpoint(model: Model, cfg: ExperimentConfig, path: Path, mask: PruneMask | None,
                    step: int) -> Path:
    arrays = dict(model.params)
    arrays.update({f"state.{k}": v for k, v in model.state_arrays().items()})
    save_arrays(path, arrays, model.algebra.tag, {"config": cfg.to_dict(), "step": step, "kind": model.kind})
    sibling = Path(path).with_suffix(".mask")
    if mask is not None:
        save_mask(sibling, mask, {"step": step})
    elif sibling.exists():
        sibling.unlink()
    return Path(path)


def load_checkpoint(path) -> tuple[Model, ExperimentConfig, PruneMask | None]:
    arrays, algebra, meta = load_arrays(path)
    cfg = ExperimentConfig.from_dict(meta["config"])
    bundle = _shape_only(cfg)
    if cfg.model.kind == "mlp" and cfg.data.name in ("spiral", "blobs"):
        bundle.features = arrays["fc1.weight"].shape[1] * (AlgebraId.parse(algebra).dim
                                                            if cfg.model.lift == "reshape" else 1)
    model = build_model(cfg, bundle)
    for k in model.params:
        model.params[k] = arrays[k]
    model.load_state_arrays({k[len("state."):]: v for k, v in arrays.items() if k.startswith("state.")})
    sibling = Path(path).with_suffix(".mask")
    mask = load_mask(sibling)[0] if sibling.exists() else None
    return model, cfg, mask


# width matching


def matched_width(cfg: ExperimentConfig, budget: int, layers: int | None = None) -> int:
    """Largest uniform hidden width whose model fits within ``budget`` multiplies."""
    layers = layers or len(cfg.model.hidden)
    best = 0
    width = 1
    while True:
        trial = cfg.override([f"model.hidden={[width] * layers}"])
        if model_cost(build_model(trial).layer_specs()).multiplies > budget:
            return best
        best, width = width, width + 1
