"""Shared-trunk multi-task model: assembly, weighted total loss, training loop
with early stopping, and emotion posterior extraction (subtask heads are kept
in checkpoints but never used at inference).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .seeding import derive_seed

TASK_EMOTION = "emotion"
TASK_GENDER = "gender"
TASK_NATURALNESS = "naturalness"

_TASK_CLASSES = {TASK_EMOTION: 4, TASK_GENDER: 4, TASK_NATURALNESS: 2}

SUBTASK_MODES = ("all", "gender", "naturalness", "none")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TaskHead:
    name: str
    n_classes: int
    loss_weight: float

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError("task loss weight must be non-negative")


@dataclass(frozen=True)
class MTLNetworkConfig:
    trunk: str = "lstm"
    layer_sizes: tuple[int, ...] = ()
    context_frames: int = 0
    subtask_mode: str = "all"
    subtask_weight: float = 0.1
    n_features: int = 32

    def __post_init__(self):
        if self.trunk not in ("dnn", "lstm"):
            raise ValueError(f"unknown trunk type: {self.trunk!r}")
        if self.subtask_mode not in SUBTASK_MODES:
            raise ValueError(f"unknown subtask_mode: {self.subtask_mode!r}")
        if not self.layer_sizes:
            sizes = (256, 256, 256) if self.trunk == "dnn" else (256, 256)
            object.__setattr__(self, "layer_sizes", sizes)
        else:
            object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.context_frames <= 0:
            object.__setattr__(self, "context_frames", 25 if self.trunk == "dnn" else 1)
        if self.trunk == "lstm" and self.context_frames != 1:
            raise ValueError("LSTM trunk uses context_frames = 1")

    @property
    def input_width(self) -> int:
        if self.trunk == "dnn":
            return self.context_frames * self.n_features
        return self.n_features

    @property
    def heads(self) -> tuple[TaskHead, ...]:
        heads = [TaskHead(TASK_EMOTION, _TASK_CLASSES[TASK_EMOTION], 1.0)]
        if self.subtask_mode in ("all", "gender"):
            heads.append(TaskHead(TASK_GENDER, _TASK_CLASSES[TASK_GENDER], self.subtask_weight))
        if self.subtask_mode in ("all", "naturalness"):
            heads.append(TaskHead(TASK_NATURALNESS, _TASK_CLASSES[TASK_NATURALNESS], self.subtask_weight))
        return tuple(heads)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 3e-3
    dropout_p: float = 0.5
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    lstm_chunk_frames: int = 300
    dnn_window_stride: int = 1
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.patience < self.max_epochs):
            raise ValueError("require 0 <= patience < max_epochs")
        if self.lstm_chunk_frames < 1 or self.dnn_window_stride < 1:
            raise ValueError("chunk length and window stride must be >= 1")


@dataclass(frozen=True)
class LabeledFeatures:
    """One utterance ready for training: standardized features + integer labels."""

    utterance_id: str
    features: np.ndarray  # (n_frames, n_features)
    labels: dict[str, int]


def total_loss(per_task_losses: dict[str, float], heads: tuple[TaskHead, ...]) -> float:
    """Weighted multi-task cost: main loss plus lambda-weighted subtask losses."""
    main = [h for h in heads if h.name == TASK_EMOTION]
    if len(main) != 1:
        raise ValueError("exactly one main (emotion) head required")
    try:
        value = per_task_losses[TASK_EMOTION]
        for head in heads:
            if head.name != TASK_EMOTION:
                value = value + head.loss_weight * per_task_losses[head.name]
    except KeyError as exc:
        raise ValueError(f"missing loss for task {exc.args[0]!r}") from None
    return value


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class MultiTaskModel:
    """Shared trunk (dense stack or LSTM stack) with one linear softmax head per task.

    Heads are created in a fixed order (emotion first, then subtasks), so a
    subtask-free model shares its trunk and emotion-head initialization with
    the multi-task variants built from the same seed.
    """

    def __init__(self, config: MTLNetworkConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(derive_seed(seed, "init"))
        self.trunk_layers = []
        width = config.input_width
        for size in config.layer_sizes:
            if config.trunk == "dnn":
                self.trunk_layers.append(nn.DenseLayer(width, size, "relu", rng))
            else:
                self.trunk_layers.append(nn.LSTMLayer(width, size, rng))
            width = size
        self.heads = {}
        for head in config.heads:
            self.heads[head.name] = nn.DenseLayer(width, head.n_classes, "linear", rng)

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.trunk_layers):
            for key, arr in layer.parameters().items():
                params[f"trunk.{i}.{key}"] = arr
        for head in self.config.heads:
            for key, arr in self.heads[head.name].parameters().items():
                params[f"head.{head.name}.{key}"] = arr
        return params

    def n_parameters(self) -> int:
        return sum(arr.size for arr in self.parameters().values())

    # -- forward/backward -------------------------------------------------

    def _trunk_forward(self, x, dropout_p: float, rng, train: bool):
        spec = nn.DropoutSpec(p=dropout_p, mode="train" if train else "eval")
        caches = []
        h = x
        for layer in self.trunk_layers:
            h, cache = layer.forward(h)
            h, mask = nn.dropout(h, spec, rng)
            caches.append((cache, mask))
        return h, caches

    def _trunk_backward(self, dh, caches):
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.trunk_layers) - 1, -1, -1):
            layer = self.trunk_layers[i]
            cache, mask = caches[i]
            if mask is not None:
                dh = dh * mask
            if isinstance(layer, nn.LSTMLayer):
                dh, layer_grads, _, _ = layer.backward(dh, cache)
            else:
                dh, layer_grads = layer.backward(dh, cache)
            for key, g in layer_grads.items():
                grads[f"trunk.{i}.{key}"] = g
        return dh, grads

    def loss_and_grads(self, batch: dict, dropout_p: float = 0.0,
                       rng: np.random.Generator | None = None, train: bool = True):
        """Per-task losses, the weighted total, and gradients for one mini-batch.

        DNN batches: {"x": (B, input_width), "targets": {task: (B,) ints}}.
        LSTM batches: {"x": (B, T, n_features), "mask": (B, T) bool,
        "targets": {task: (B,) ints}} with frame-broadcast chunk labels and
        padding excluded from every per-frame loss mean.
        """
        if self.config.trunk == "dnn":
            return self._loss_and_grads_dnn(batch, dropout_p, rng, train)
        return self._loss_and_grads_lstm(batch, dropout_p, rng, train)

    def _head_pass(self, h_rows, targets_rows, grads):
        losses: dict[str, float] = {}
        dh = np.zeros_like(h_rows)
        for head_spec in self.config.heads:
            head = self.heads[head_spec.name]
            logits, cache = head.forward(h_rows)
            onehot = nn.one_hot(targets_rows[head_spec.name], head_spec.n_classes)
            loss, _, dlogits = nn.softmax_xent(logits, onehot)
            losses[head_spec.name] = loss
            if head_spec.loss_weight != 0.0:
                dx, head_grads = head.backward(dlogits * head_spec.loss_weight, cache)
                dh += dx
            else:
                head_grads = {k: np.zeros_like(v) for k, v in head.parameters().items()}
            for key, g in head_grads.items():
                grads[f"head.{head_spec.name}.{key}"] = g
        return losses, dh

    def _loss_and_grads_dnn(self, batch, dropout_p, rng, train):
        x = batch["x"]
        h, caches = self._trunk_forward(x, dropout_p, rng, train)
        grads: dict[str, np.ndarray] = {}
        losses, dh = self._head_pass(h, batch["targets"], grads)
        _, trunk_grads = self._trunk_backward(dh, caches)
        grads.update(trunk_grads)
        return losses, total_loss(losses, self.config.heads), grads

    def _loss_and_grads_lstm(self, batch, dropout_p, rng, train):
        x = batch["x"]
        mask = batch["mask"]
        batch_size, time = mask.shape
        h, caches = self._trunk_forward(x, dropout_p, rng, train)
        hsz = h.shape[2]
        valid = mask.reshape(-1)
        h_rows = h.reshape(batch_size * time, hsz)[valid]
        frame_targets = {
            name: np.repeat(np.asarray(t, dtype=np.int64), time)[valid]
            for name, t in batch["targets"].items()
        }
        grads: dict[str, np.ndarray] = {}
        losses, dh_rows = self._head_pass(h_rows, frame_targets, grads)
        dh = np.zeros((batch_size * time, hsz))
        dh[valid] = dh_rows
        _, trunk_grads = self._trunk_backward(dh.reshape(batch_size, time, hsz), caches)
        grads.update(trunk_grads)
        return losses, total_loss(losses, self.config.heads), grads

    # -- inference ---------------------------------------------------------

    def emotion_posteriors(self, features: np.ndarray) -> np.ndarray:
        """Emotion posterior sequence for one utterance's standardized features.

        LSTM trunks emit one row per frame; DNN trunks one row per 25-frame
        context window. Subtask heads produce no output here.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.n_features:
            raise nn.ShapeError(f"features must be (n, {self.config.n_features})")
        if self.config.trunk == "dnn":
            context = self.config.context_frames
            n = features.shape[0]
            if n < context:
                raise ValueError(f"too few frames for DNN context: {n} < {context}")
            windows = np.lib.stride_tricks.sliding_window_view(features, (context, features.shape[1]))
            x = windows.reshape(n - context + 1, context * features.shape[1])
        else:
            x = features[None, :, :]
        h, _ = self._trunk_forward(x, 0.0, None, train=False)
        if self.config.trunk == "lstm":
            h = h[0]
        logits, _ = self.heads[TASK_EMOTION].forward(h)
        return _stable_softmax(logits)


def build_model(config: MTLNetworkConfig, seed: int = 0) -> MultiTaskModel:
    return MultiTaskModel(config, seed)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_losses: dict[str, float]
    train_total: float
    val_losses: dict[str, float]
    val_total: float


@dataclass
class TrainedModel:
    model: MultiTaskModel
    network_config: MTLNetworkConfig
    train_config: TrainConfig
    history: list[EpochStats]
    best_epoch: int
    best_val_total: float

    def emotion_posteriors(self, features: np.ndarray) -> np.ndarray:
        return self.model.emotion_posteriors(features)


def _dnn_index(dataset, context: int, stride: int):
    index = []
    for u, item in enumerate(dataset):
        n = item.features.shape[0]
        for start in range(0, n - context + 1, stride):
            index.append((u, start))
    return index


def _lstm_index(dataset, chunk: int):
    index = []
    for u, item in enumerate(dataset):
        n = item.features.shape[0]
        for start in range(0, n, chunk):
            index.append((u, start, min(chunk, n - start)))
    return index


def _collate_dnn(dataset, index, picks, context, heads):
    x = np.stack([dataset[u].features[s : s + context].reshape(-1) for u, s in (index[i] for i in picks)])
    targets = {
        h.name: np.array([dataset[index[i][0]].labels[h.name] for i in picks], dtype=np.int64)
        for h in heads
    }
    return {"x": x, "targets": targets}


def _collate_lstm(dataset, index, picks, heads, n_features):
    items = [index[i] for i in picks]
    max_len = max(length for _, _, length in items)
    x = np.zeros((len(items), max_len, n_features))
    mask = np.zeros((len(items), max_len), dtype=bool)
    for row, (u, start, length) in enumerate(items):
        x[row, :length] = dataset[u].features[start : start + length]
        mask[row, :length] = True
    targets = {
        h.name: np.array([dataset[u].labels[h.name] for u, _, _ in items], dtype=np.int64)
        for h in heads
    }
    return {"x": x, "mask": mask, "targets": targets}


def _batch_weight(batch) -> int:
    if "mask" in batch:
        return int(batch["mask"].sum())
    return int(batch["x"].shape[0])


def _dataset_losses(model, dataset, tc: TrainConfig):
    """Weighted per-task losses over a dataset in eval mode (no dropout)."""
    heads = model.config.heads
    if model.config.trunk == "dnn":
        index = _dnn_index(dataset, model.config.context_frames, tc.dnn_window_stride)
    else:
        index = _lstm_index(dataset, tc.lstm_chunk_frames)
    if not index:
        raise ValueError("dataset produced no evaluation samples")
    sums = {h.name: 0.0 for h in heads}
    weight_total = 0
    for start in range(0, len(index), tc.batch_size):
        picks = range(start, min(start + tc.batch_size, len(index)))
        if model.config.trunk == "dnn":
            batch = _collate_dnn(dataset, index, picks, model.config.context_frames, heads)
        else:
            batch = _collate_lstm(dataset, index, picks, heads, model.config.n_features)
        losses, _, _ = model.loss_and_grads(batch, dropout_p=0.0, rng=None, train=False)
        w = _batch_weight(batch)
        weight_total += w
        for name, value in losses.items():
            sums[name] += value * w
    mean_losses = {name: value / weight_total for name, value in sums.items()}
    return mean_losses, total_loss(mean_losses, heads)


def train(model: MultiTaskModel, train_set, val_set, tc: TrainConfig) -> TrainedModel:
    """Mini-batch Adam training with validation-based early stopping.

    Stops after ``patience`` consecutive epochs without improving the
    validation total loss and restores the best epoch's parameters.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must both be non-empty")
    overlap = {u.utterance_id for u in train_set} & {u.utterance_id for u in val_set}
    if overlap:
        raise ValueError(f"train/validation overlap: {sorted(overlap)[:3]}")

    heads = model.config.heads
    params = model.parameters()
    adam = nn.AdamState.for_params(params, lr=tc.lr)
    rng = np.random.default_rng(derive_seed(tc.seed, "train"))

    if model.config.trunk == "dnn":
        index = _dnn_index(train_set, model.config.context_frames, tc.dnn_window_stride)
    else:
        index = _lstm_index(train_set, tc.lstm_chunk_frames)
    if not index:
        raise ValueError("training set produced no samples (all utterances too short?)")

    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] | None = None
    since_best = 0

    for epoch in range(tc.max_epochs):
        order = rng.permutation(len(index))
        sums = {h.name: 0.0 for h in heads}
        weight_total = 0
        for start in range(0, len(order), tc.batch_size):
            picks = [int(i) for i in order[start : start + tc.batch_size]]
            if model.config.trunk == "dnn":
                batch = _collate_dnn(train_set, index, picks, model.config.context_frames, heads)
            else:
                batch = _collate_lstm(train_set, index, picks, heads, model.config.n_features)
            losses, batch_total, grads = model.loss_and_grads(
                batch, dropout_p=tc.dropout_p, rng=rng, train=True
            )
            if not np.isfinite(batch_total):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}, sample {start}"
                )
            nn.clip_global_norm(grads, tc.clip_norm)
            nn.adam_step(adam, params, grads)
            w = _batch_weight(batch)
            weight_total += w
            for name, value in losses.items():
                sums[name] += value * w
        train_losses = {name: value / weight_total for name, value in sums.items()}
        val_losses, val_total = _dataset_losses(model, val_set, tc)
        history.append(
            EpochStats(
                epoch=epoch,
                train_losses=train_losses,
                train_total=total_loss(train_losses, heads),
                val_losses=val_losses,
                val_total=val_total,
            )
        )
        if val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_params = {name: arr.copy() for name, arr in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= tc.patience:
                break

    assert best_params is not None
    for name, arr in params.items():
        arr[...] = best_params[name]
    return TrainedModel(
        model=model,
        network_config=model.config,
        train_config=tc,
        history=history,
        best_epoch=best_epoch,
        best_val_total=float(best_val),
    )


def emotion_posteriors(trained: TrainedModel | MultiTaskModel, features: np.ndarray) -> np.ndarray:
    model = trained.model if isinstance(trained, TrainedModel) else trained
    return model.emotion_posteriors(features)


# ---------------------------------------------------------------------------
# Run-directory artifacts
# ---------------------------------------------------------------------------

def network_config_to_dict(config: MTLNetworkConfig) -> dict:
    return {
        "trunk": config.trunk,
        "layer_sizes": list(config.layer_sizes),
        "context_frames": config.context_frames,
        "subtask_mode": config.subtask_mode,
        "subtask_weight": config.subtask_weight,
        "n_features": config.n_features,
    }


def network_config_from_dict(data: dict) -> MTLNetworkConfig:
    return MTLNetworkConfig(
        trunk=data["trunk"],
        layer_sizes=tuple(data["layer_sizes"]),
        context_frames=data["context_frames"],
        subtask_mode=data["subtask_mode"],
        subtask_weight=data["subtask_weight"],
        n_features=data.get("n_features", 32),
    )


def train_config_to_dict(tc: TrainConfig) -> dict:
    return {
        "batch_size": tc.batch_size,
        "lr": tc.lr,
        "dropout_p": tc.dropout_p,
        "max_epochs": tc.max_epochs,
        "patience": tc.patience,
        "seed": tc.seed,
        "lstm_chunk_frames": tc.lstm_chunk_frames,
        "dnn_window_stride": tc.dnn_window_stride,
        "clip_norm": tc.clip_norm,
    }


def train_config_from_dict(data: dict) -> TrainConfig:
    return TrainConfig(**data)


def save_model(path: str | Path, trained: TrainedModel,
               extra_params: dict[str, np.ndarray] | None = None) -> Path:
    params = dict(trained.model.parameters())
    if extra_params:
        params.update(extra_params)
    header = {
        "network": network_config_to_dict(trained.network_config),
        "training": train_config_to_dict(trained.train_config),
        "model_seed": trained.model.seed,
        "best_epoch": trained.best_epoch,
        "best_val_total": trained.best_val_total,
        "heads": [
            {"name": h.name, "n_classes": h.n_classes, "loss_weight": h.loss_weight}
            for h in trained.network_config.heads
        ],
    }
    return nn.save_checkpoint(path, params, header)


def load_model(path: str | Path):
    """Load a model checkpoint. Returns (MultiTaskModel, header, extra_params)."""
    params, header = nn.load_checkpoint(path)
    config = network_config_from_dict(header["network"])
    model = MultiTaskModel(config, seed=header.get("model_seed", 0))
    own = model.parameters()
    extras: dict[str, np.ndarray] = {}
    for name, values in params.items():
        if name in own:
            own[name][...] = values
        else:
            extras[name] = values
    return model, header, extras


def write_history_csv(path: str | Path, history: list[EpochStats],
                      heads: tuple[TaskHead, ...]) -> Path:
    path = Path(path)
    names = [h.name for h in heads]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch"]
            + [f"train_{n}" for n in names] + ["train_total"]
            + [f"val_{n}" for n in names] + ["val_total"]
        )
        for row in history:
            writer.writerow(
                [row.epoch]
                + [repr(row.train_losses[n]) for n in names] + [repr(row.train_total)]
                + [repr(row.val_losses[n]) for n in names] + [repr(row.val_total)]
            )
    return path
