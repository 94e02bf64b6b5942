"""Training loop with best-by-validation selection, evaluation and the benchmark grid."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classical import KNNClassifier, RandomForest
from .data import EEGDataset, channel_stats, load_container, make_split, preset, synth_generate
from .errors import DatasetError, GeometryMismatch, NonFiniteLoss, UEEGError
from .losses import binary_cross_entropy, categorical_cross_entropy
from .metrics import MetricsReport, build_report, format_table, reports_to_csv
from .models import Model, ModelConfig, build_model, checkpoint_bytes, classify, load_checkpoint
from .optim import make_optimizer
from .rng import epoch_seed, substream
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

# architecture -> (optimizer, learning rate, batch size)
DEFAULT_BINDINGS = {
    "four_cnn": ("adam", 0.001, 128),
    "gru_encoder": ("adam", 0.001, 64),
    "autoencoder": ("adadelta", 0.001, 128),
}

MODEL_NAMES = {"four_cnn": "FourCNN", "gru_encoder": "GRUNetwork"}
EVAL_BATCH = 256


@dataclass
class TrainConfig:
    arch: str
    data: str | None = None
    preset: str | None = None
    preset_overrides: dict = field(default_factory=dict)
    optimizer: str | None = None
    lr: float | None = None
    batch_size: int | None = None
    max_epochs: int = 100
    seed: int = 0
    out_dir: str | None = None
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in DEFAULT_BINDINGS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        opt, lr, bs = DEFAULT_BINDINGS[self.arch]
        self.optimizer = self.optimizer or opt
        self.lr = lr if self.lr is None else float(self.lr)
        self.batch_size = bs if self.batch_size is None else int(self.batch_size)
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def load_dataset(self) -> EEGDataset:
        if self.data:
            try:
                return load_container(self.data)
            except OSError as exc:
                raise DatasetError(f"cannot read {self.data}: {exc}") from None
        if self.preset:
            return synth_generate(preset(self.preset, **self.preset_overrides))
        raise DatasetError("either data or preset is required")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    notes: list[str] = field(default_factory=list)

    def records(self) -> dict:
        """Everything except wall-clock timings (which never repeat exactly)."""
        d = asdict(self)
        d.pop("epoch_seconds")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, order.size, size)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        # a single-sample batch cannot be batch-normalized; fold it into its neighbour
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _embeddings(model: Model, x: np.ndarray) -> np.ndarray:
    out = [model.encode(Tensor(x[i : i + EVAL_BATCH]), "eval").data for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(out).astype(np.float32)


def predict_proba(model: Model, x: np.ndarray, head: str | None = None) -> np.ndarray:
    """Eval-mode class probabilities for already-preprocessed inputs."""
    return np.concatenate([classify(model, x[i : i + EVAL_BATCH], head) for i in range(0, len(x), EVAL_BATCH)])


def _snapshot(model: Model) -> list:
    # parameter and buffer arrays are replaced, never written, so references suffice
    return [(t, t.data) for t in model.parameters()] + [
        (p, b, p.buffers[b]) for _, p, b in model.named_buffers()
    ]


def _restore(snap: list) -> None:
    for item in snap:
        if len(item) == 2:
            item[0]._replace(item[1])
        else:
            item[0].buffers[item[1]] = item[2]


def fit_heads(model: Model, x_train: np.ndarray, y_train: np.ndarray) -> None:
    cfg = model.config
    emb = _embeddings(model, x_train)
    k = min(cfg.knn_k, len(emb))
    model.heads["knn"] = KNNClassifier(k).fit(emb, y_train, cfg.num_classes)
    model.heads["rf"] = RandomForest(cfg.rf_estimators, cfg.seed).fit(emb, y_train, cfg.num_classes)


def train(config: TrainConfig, dataset: EEGDataset | None = None) -> tuple[Model, TrainHistory]:
    ds = dataset if dataset is not None else config.load_dataset()
    plan = make_split(ds, config.seed)
    if plan.train.size == 0:
        raise DatasetError("empty train split")
    mcfg = ModelConfig(config.arch, ds.channels, ds.timesteps, ds.num_classes, seed=config.seed,
                       **config.model_options)
    model = build_model(mcfg)
    if config.arch != "autoencoder":
        mean, std = channel_stats(ds.records, plan.train)
        # keep what the checkpoint can store so reloaded models see identical inputs
        model.norm = (mean.astype(np.float32).astype(np.float64), std.astype(np.float32).astype(np.float64))
    x_all = model.preprocess(ds.records)
    y_all = ds.labels.astype(np.int64)
    val_idx = plan.val
    history = TrainHistory()
    if val_idx.size == 0:
        val_idx = plan.train
        history.notes.append("empty validation split: selecting on the train split")
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.lr)
    is_ae = config.arch == "autoencoder"
    best_acc, best_snap = -1.0, None

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        eseed = epoch_seed(config.seed, epoch)
        order = substream(eseed, "shuffle").permutation(plan.train)
        drop_rng = substream(eseed, "dropout")
        batches = _batches(order, config.batch_size)
        if epoch == 0 and order.size % config.batch_size:
            history.notes.append(f"last batch partial ({order.size % config.batch_size} samples), kept")
        total_loss, correct = 0.0, 0
        for b, idx in enumerate(batches):
            xb = Tensor(x_all[idx])
            with Tape() as tape:
                out = model.forward(xb, "train", drop_rng)
                loss = binary_cross_entropy(out, xb) if is_ae else categorical_cross_entropy(out, y_all[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {b}")
            optimizer.step(tape.backward(loss))
            total_loss += value * idx.size
            if not is_ae:
                correct += int(np.count_nonzero(out.data.argmax(axis=1) == y_all[idx]))

        if is_ae:
            emb_train = _embeddings(model, x_all[plan.train])
            knn = KNNClassifier(min(mcfg.knn_k, plan.train.size)).fit(emb_train, y_all[plan.train], mcfg.num_classes)
            train_acc = float(np.mean(knn.predict(emb_train) == y_all[plan.train]))
            val_acc = float(np.mean(knn.predict(_embeddings(model, x_all[val_idx])) == y_all[val_idx]))
        else:
            train_acc = correct / order.size
            val_acc = float(np.mean(predict_proba(model, x_all[val_idx]).argmax(axis=1) == y_all[val_idx]))
        history.train_loss.append(total_loss / order.size)
        history.train_acc.append(train_acc)
        history.val_acc.append(val_acc)
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, history.train_loss[-1], train_acc, val_acc)
        if val_acc > best_acc:
            best_acc, best_snap, history.best_epoch = val_acc, _snapshot(model), epoch

    _restore(best_snap)
    if is_ae:
        fit_heads(model, x_all[plan.train], y_all[plan.train])
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "best.ueeg").write_bytes(checkpoint_bytes(model))
        (out / "history.json").write_text(history.to_json())
        (out / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2))
    return model, history


def model_name(model: Model, head: str | None = None) -> str:
    if model.config.arch == "autoencoder":
        return "AutoencoderRF" if (head or model.config.head) == "rf" else "AutoencoderKNN"
    return MODEL_NAMES[model.config.arch]


def evaluate(model, dataset: EEGDataset, split: str = "test", head: str | None = None,
             average: str = "macro") -> MetricsReport:
    """Metrics of a trained model (or checkpoint path) on one split of ``dataset``."""
    if not isinstance(model, Model):
        model = load_checkpoint(model)
    cfg = model.config
    if (dataset.channels, dataset.timesteps, dataset.num_classes) != (cfg.channels, cfg.timesteps, cfg.num_classes):
        raise GeometryMismatch(
            f"dataset is ({dataset.channels}, {dataset.timesteps}, K={dataset.num_classes}), "
            f"model expects ({cfg.channels}, {cfg.timesteps}, K={cfg.num_classes})"
        )
    plan = make_split(dataset, cfg.seed)
    idx = {"train": plan.train, "val": plan.val, "test": plan.test, "all": np.arange(len(dataset))}[split]
    x = model.preprocess(dataset.records[idx])
    proba = predict_proba(model, x, head)
    true = dataset.labels[idx].astype(np.int64)
    scores = proba[:, 1] if cfg.num_classes == 2 else None
    return build_report(dataset.name, model_name(model, head), proba.argmax(axis=1), true,
                        cfg.num_classes, scores, average)


# ---------------------------------------------------------------------------
# benchmark grid

BENCH_MODELS = {
    "AutoencoderKNN": ("autoencoder", "knn"),
    "AutoencoderRF": ("autoencoder", "rf"),
    "FourCNN": ("four_cnn", None),
    "GRUNetwork": ("gru_encoder", None),
}


@dataclass
class BenchResult:
    cells: dict
    datasets: list[str]
    models: list[str]

    def table(self, reference: bool = True) -> str:
        return format_table(self.cells, self.datasets, self.models, reference)

    def csv(self) -> str:
        rows = []
        for (m, d), cell in self.cells.items():
            if isinstance(cell, MetricsReport):
                rows.append(cell)
            else:
                rows.append({"dataset": d, "model": m, "acc": cell, "f1": cell, "auc": ""})
        return reports_to_csv(rows)


def _load_bench_dataset(name: str, suite: dict) -> EEGDataset:
    if Path(name).suffix in (".eegc", ".bin") or Path(name).exists():
        return load_container(name)
    overrides = suite.get("preset_overrides", {}).get(name, suite.get("preset_overrides_all", {}))
    return synth_generate(preset(name, **overrides))


def bench(suite: dict) -> BenchResult:
    """Train and evaluate every (model, dataset) cell; a failing cell becomes ``ERROR``.

    ``suite`` keys: ``models`` (names from the table), ``datasets`` (preset
    names or container paths) or an explicit ``cells`` list of
    ``{"model", "dataset"}``; optional ``epochs``, ``seed``, ``batch_size``,
    ``preset_overrides`` ({dataset: {field: value}}) and ``model_options``.
    """
    if "cells" in suite:
        pairs = [(c["model"], c["dataset"]) for c in suite["cells"]]
    else:
        pairs = [(m, d) for d in suite["datasets"] for m in suite.get("models", list(BENCH_MODELS))]
    datasets = list(dict.fromkeys(d for _, d in pairs))
    models = list(dict.fromkeys(m for m, _ in pairs))
    cache: dict = {}
    cells: dict = {}
    for m, d in pairs:
        try:
            arch, head = BENCH_MODELS[m]
            key = (arch, d)
            if key not in cache:
                ds = _load_bench_dataset(d, suite)
                cfg = TrainConfig(arch, max_epochs=int(suite.get("epochs", 100)), seed=int(suite.get("seed", 0)),
                                  batch_size=suite.get("batch_size"), model_options=suite.get("model_options", {}))
                model, _ = train(cfg, ds)
                cache[key] = (model, ds)
            model, ds = cache[key]
            cells[(m, d)] = evaluate(model, ds, "test", head)
        except (UEEGError, ValueError, KeyError, OSError) as exc:
            log.error("bench cell (%s, %s) failed: %s", m, d, exc)
            cells[(m, d)] = "ERROR"
    return BenchResult(cells, datasets, models)
