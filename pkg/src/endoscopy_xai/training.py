"""Training loop with Adamax, categorical crossentropy and the control callbacks.

Callbacks run once per epoch in a fixed order::

    select_monitor -> snapshot_best -> reduce_lr_on_plateau
                   -> early_stop_check -> manual_control_prompt

so the best snapshot is always taken before any stop decision.
"""

import copy
import csv
import io
import logging
import math
import queue
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import data as data_mod
from .model import ConfigurationError

log = logging.getLogger(__name__)

TRAIN_ACCURACY = "train_accuracy"
VAL_LOSS = "val_loss"
HISTORY_FIELDS = ("epoch", "loss", "accuracy", "val_loss", "val_accuracy", "learning_rate", "duration_s")


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingPolicy:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.001
    lr_reduction_factor: float = 0.5
    lr_patience: int = 3
    early_stop_patience: int = 5
    accuracy_threshold: float = 0.9
    min_delta: float = 1e-4
    # "switched" follows the accuracy/val-loss monitor; "val_loss" pins it
    lr_monitor: str = "switched"
    manual_prompt_interval: int = 5
    prompt_timeout: float = 30.0
    shuffle: bool = False
    flip: bool = True
    flip_probability: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if not 0 < self.lr_reduction_factor < 1:
            raise ConfigurationError("lr_reduction_factor must be in (0, 1)")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be >= 1")
        if not 0 < self.accuracy_threshold < 1:
            raise ConfigurationError("accuracy_threshold must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.lr_monitor not in ("switched", VAL_LOSS):
            raise ConfigurationError(f"lr_monitor must be 'switched' or 'val_loss', got {self.lr_monitor!r}")


# -- loss and optimizer ------------------------------------------------------------

def categorical_crossentropy(y_true, p_pred, clip=1e-7):
    """Batch mean of ``-sum(y * log(p))`` with ``p`` clipped to ``[clip, 1 - clip]``."""
    if tuple(y_true.shape) != tuple(p_pred.shape):
        raise ValueError(f"shape mismatch: y_true {tuple(y_true.shape)} vs p_pred {tuple(p_pred.shape)}")
    if isinstance(p_pred, torch.Tensor):
        p = torch.clamp(p_pred, clip, 1 - clip)
        return -(y_true * torch.log(p)).sum(dim=-1).mean()
    p = np.clip(np.asarray(p_pred, dtype=np.float64), clip, 1 - clip)
    return float(-(np.asarray(y_true) * np.log(p)).sum(axis=-1).mean())


@dataclass
class AdamaxState:
    t: int = 0
    m: np.ndarray | None = None
    u: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eta: float = 0.001
    epsilon: float = 1e-7


def adamax_moments(m, u, g, beta1, beta2):
    """First moment EMA and exponentially weighted infinity norm, elementwise."""
    maximum = torch.maximum if isinstance(g, torch.Tensor) else np.maximum
    return beta1 * m + (1 - beta1) * g, maximum(beta2 * u, abs(g))


def adamax_delta(m, u, t, eta, beta1, epsilon):
    return -(eta / (1 - beta1 ** t)) * m / (u + epsilon)


def adamax_step(state, gradients):
    """One Adamax update; returns ``(new_state, parameter_delta)``."""
    g = np.asarray(gradients, dtype=np.float64)
    if not np.isfinite(g).all():
        bad = np.flatnonzero(~np.isfinite(g.ravel()))
        raise FloatingPointError(
            f"non-finite gradient at step {state.t + 1}: {bad.size} entries, first at flat index {bad[0]}"
        )
    m = np.zeros_like(g) if state.m is None else state.m
    u = np.zeros_like(g) if state.u is None else state.u
    t = state.t + 1
    m, u = adamax_moments(m, u, g, state.beta1, state.beta2)
    delta = adamax_delta(m, u, t, state.eta, state.beta1, state.epsilon)
    return replace(state, t=t, m=m, u=u), delta


class Adamax(torch.optim.Optimizer):
    """Torch optimizer running the same recurrence as :func:`adamax_step`."""

    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-7):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["m"] = torch.zeros_like(p)
                    st["u"] = torch.zeros_like(p)
                st["step"] += 1
                st["m"], st["u"] = adamax_moments(st["m"], st["u"], p.grad, beta1, beta2)
                p.add_(adamax_delta(st["m"], st["u"], st["step"], group["lr"], beta1, group["eps"]))
        return loss


# -- callbacks ---------------------------------------------------------------------

@dataclass
class CallbackState:
    monitored_metric: str = TRAIN_ACCURACY
    best_value: float = -math.inf
    best_weights: dict | None = None
    best_epoch: int | None = None
    epochs_since_improvement: int = 0
    lr_metric: str = TRAIN_ACCURACY
    lr_best_value: float = -math.inf
    lr_epochs_since_improvement: int = 0
    learning_rate: float = 0.001
    epoch_durations: list = field(default_factory=list)
    stop_requested: bool = False
    stop_reason: str | None = None
    target_epochs: int = 0

    @property
    def cumulative_time(self):
        return sum(self.epoch_durations)


def _initial(metric):
    return -math.inf if metric == TRAIN_ACCURACY else math.inf


def is_improvement(metric, value, best, min_delta=1e-4):
    if math.isinf(best):
        return True
    if metric == TRAIN_ACCURACY:
        return value > best + min_delta
    return value < best - min_delta


def select_monitor(latest_train_accuracy, threshold=0.9, current=TRAIN_ACCURACY):
    """Accuracy is monitored until it strictly exceeds ``threshold``; from then
    on validation loss is monitored for the rest of the run."""
    if current == VAL_LOSS or latest_train_accuracy > threshold:
        return VAL_LOSS
    return TRAIN_ACCURACY


def switch_monitor(cb_state, metric, policy):
    """Point the callbacks at a new metric, restarting best values and counters."""
    cb_state.monitored_metric = metric
    cb_state.best_value = _initial(metric)
    cb_state.epochs_since_improvement = 0
    if policy.lr_monitor == "switched":
        cb_state.lr_metric = metric
        cb_state.lr_best_value = _initial(metric)
        cb_state.lr_epochs_since_improvement = 0
    return cb_state


def new_callback_state(policy):
    st = CallbackState(learning_rate=policy.learning_rate, target_epochs=policy.epochs)
    st.lr_metric = TRAIN_ACCURACY if policy.lr_monitor == "switched" else VAL_LOSS
    st.lr_best_value = _initial(st.lr_metric)
    return st


def snapshot_best(cb_state, model, metric_value, epoch=None, min_delta=1e-4, checkpoint=None):
    """Keep a copy of the weights whenever the monitored metric improves.

    ``model`` needs ``state_dict()``; ``checkpoint`` is an optional callable
    persisting the new best to disk, whose failure aborts the run.
    """
    if not math.isfinite(metric_value):
        raise TrainingAborted(f"non-finite monitored metric {metric_value!r} at epoch {epoch}")
    if is_improvement(cb_state.monitored_metric, metric_value, cb_state.best_value, min_delta):
        cb_state.best_value = metric_value
        cb_state.best_weights = copy.deepcopy(model.state_dict())
        cb_state.best_epoch = epoch
        cb_state.epochs_since_improvement = 0
        if checkpoint is not None:
            try:
                checkpoint()
            except OSError as exc:
                raise CheckpointError(f"could not write best checkpoint: {exc}") from exc
    else:
        cb_state.epochs_since_improvement += 1
    return cb_state


def reduce_lr_on_plateau(cb_state, current_metric, policy):
    """Multiply the learning rate by the reduction factor after ``lr_patience``
    consecutive epochs without improvement of ``cb_state.lr_metric``."""
    if is_improvement(cb_state.lr_metric, current_metric, cb_state.lr_best_value, policy.min_delta):
        cb_state.lr_best_value = current_metric
        cb_state.lr_epochs_since_improvement = 0
    else:
        cb_state.lr_epochs_since_improvement += 1
        if cb_state.lr_epochs_since_improvement >= policy.lr_patience:
            cb_state.learning_rate *= policy.lr_reduction_factor
            cb_state.lr_epochs_since_improvement = 0
    return cb_state.learning_rate


def early_stop_check(cb_state, policy):
    return cb_state.epochs_since_improvement >= policy.early_stop_patience


# -- manual control ----------------------------------------------------------------

@dataclass(frozen=True)
class Directive:
    action: str  # continue | stop | extend
    epochs: int = 0


CONTINUE = Directive("continue")


def parse_directive(text):
    """``continue`` | ``stop`` | ``extend <positive int>``; ``None`` if malformed."""
    parts = text.strip().lower().split()
    if parts == ["continue"] or parts == []:
        return CONTINUE
    if parts == ["stop"]:
        return Directive("stop")
    if len(parts) == 2 and parts[0] == "extend" and parts[1].isdigit() and int(parts[1]) > 0:
        return Directive("extend", int(parts[1]))
    return None


class PromptChannel:
    """Line-oriented prompt channel.

    A daemon thread reads the input stream and posts lines to a queue; the
    training loop only drains the queue at epoch boundaries.
    """

    def __init__(self, stream_in=None, stream_out=None, interactive=True, timeout=30.0):
        self.stream_in = stream_in if stream_in is not None else sys.stdin
        self.stream_out = stream_out if stream_out is not None else sys.stdout
        self.interactive = interactive
        self.timeout = timeout
        self._lines = queue.Queue()
        self._reader = None

    def _pump(self):
        for line in self.stream_in:
            self._lines.put(line)
        self._lines.put(None)

    def write(self, text):
        self.stream_out.write(text)
        self.stream_out.flush()

    def readline(self, timeout=None):
        if self._reader is None:
            self._reader = threading.Thread(target=self._pump, daemon=True)
            self._reader.start()
        try:
            return self._lines.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            return None


def manual_control_prompt(io_channel, epoch, interval, status=""):
    """Ask for a directive every ``interval`` epochs; never blocks when the
    channel is absent or non-interactive, or once the read times out."""
    if io_channel is None or not io_channel.interactive or interval < 1 or epoch % interval:
        return CONTINUE
    io_channel.write(f"{status}\n[epoch {epoch}] continue | stop | extend <n> > ")
    for attempt in range(2):
        line = io_channel.readline()
        if line is None:
            return CONTINUE
        directive = parse_directive(line)
        if directive is not None:
            return directive
        if attempt == 0:
            io_channel.write(f"unrecognised directive {line.strip()!r}; try again > ")
    return CONTINUE


# -- history -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    val_loss: float
    val_accuracy: float
    learning_rate: float
    duration_s: float


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self):
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for r in self.records:
            writer.writerow([getattr(r, f) if f == "epoch" else repr(float(getattr(r, f))) for f in HISTORY_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = csv.DictReader(io.StringIO(text))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[f]) for f in HISTORY_FIELDS[1:])) for r in rows])

    def metrics_equal(self, other):
        """Equality ignoring wall-clock durations."""
        def strip(h):
            return [replace(r, duration_s=0.0) for r in h.records]
        return strip(self) == strip(other)


# -- loop --------------------------------------------------------------------------

def _to_tensor(pixels):
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2)))


def evaluate_loss(model, manifest, split="val", batch_size=64, normalization=None):
    """Loss (crossentropy plus head penalties) and accuracy in evaluation mode."""
    net = model.network
    net.eval()
    total_loss = correct = seen = 0.0
    with torch.no_grad():
        for b in range(data_mod.num_batches(manifest, split, batch_size)):
            batch = data_mod.preprocess(data_mod.load_batch(manifest, split, b, batch_size), False,
                                        normalization=normalization)
            logits, hidden = net.forward_with_activations(_to_tensor(batch.pixels))
            y = torch.from_numpy(batch.labels)
            loss = categorical_crossentropy(y, torch.softmax(logits, 1)) + net.head.regularization(hidden)
            n = len(batch.labels)
            total_loss += float(loss) * n
            correct += float((logits.argmax(1) == y.argmax(1)).sum())
            seen += n
    if not seen:
        return math.nan, math.nan
    return total_loss / seen, correct / seen


def _train_epoch(model, manifest, policy, optimizer, seed, epoch, normalization):
    net = model.network
    net.train()
    if not model.trainable_backbone:
        net.backbone.eval()
    order = None
    if policy.shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(manifest.split("train")))
    n_batches = data_mod.num_batches(manifest, "train", policy.batch_size)
    total_loss = correct = seen = 0.0
    steps = 0
    for b in range(n_batches):
        if order is None:
            batch = data_mod.load_batch(manifest, "train", b, policy.batch_size)
        else:
            batch = _load_shuffled(manifest, order, b, policy.batch_size)
        batch = data_mod.preprocess(batch, policy.flip, policy.flip_probability, normalization, seed, epoch)
        logits, hidden = net.forward_with_activations(_to_tensor(batch.pixels))
        y = torch.from_numpy(batch.labels)
        loss = categorical_crossentropy(y, torch.softmax(logits, 1)) + net.head.regularization(hidden)
        if not torch.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        steps += 1
        n = len(batch.labels)
        total_loss += float(loss.detach()) * n
        correct += float((logits.argmax(1) == y.argmax(1)).sum())
        seen += n
    return total_loss / seen, correct / seen, steps


def _load_shuffled(manifest, order, b, batch_size):
    members = manifest.split("train")
    idx = order[b * batch_size:(b + 1) * batch_size]
    pixels = np.stack([data_mod.load_image(members[i].path) for i in idx])
    labels = np.zeros((len(idx), len(manifest.class_names)), dtype=np.float32)
    labels[np.arange(len(idx)), [members[i].label_index for i in idx]] = 1.0
    return data_mod.ImageBatch(pixels, labels, False, np.asarray(idx), [members[i].path for i in idx])


def train(model, manifest, policy=None, seed=0, channel=None, checkpoint_path=None,
          normalization=None, on_epoch_end=None):
    """Fit ``model`` on the train split, validating after every epoch.

    Returns ``(model, history)`` where the model carries the best snapshot's
    weights.  ``checkpoint_path`` receives the best weights whenever they change.
    """
    from .model import save_checkpoint

    policy = policy or TrainingPolicy()
    history = TrainingHistory(metadata={"policy": asdict(policy), "seed": seed, "monitors": [],
                                        "stop_reason": None, "steps": 0,
                                        "early_stop_metric": "same as monitored metric"})
    if policy.epochs == 0:
        history.metadata["stop_reason"] = "zero epochs requested"
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
        return model, history
    if not manifest.split("train") or not manifest.split("val"):
        raise ValueError("manifest needs nonempty train and val splits")

    torch.manual_seed(seed)
    params = [p for p in model.network.parameters() if p.requires_grad]
    optimizer = Adamax(params, lr=policy.learning_rate, betas=(policy.beta1, policy.beta2), eps=policy.epsilon)
    cb = new_callback_state(policy)
    checkpoint = None
    if checkpoint_path is not None:
        def checkpoint():
            save_checkpoint(model, checkpoint_path, {"best_epoch": cb.best_epoch})

    epoch = 0
    while epoch < cb.target_epochs:
        epoch += 1
        lr_used = cb.learning_rate
        for group in optimizer.param_groups:
            group["lr"] = lr_used
        start = time.monotonic()
        loss, acc, steps = _train_epoch(model, manifest, policy, optimizer, seed, epoch, normalization)
        val_loss, val_acc = evaluate_loss(model, manifest, "val", policy.batch_size, normalization)
        duration = round(time.monotonic() - start, 3)
        cb.epoch_durations.append(duration)
        history.metadata["steps"] += steps
        history.records.append(EpochRecord(epoch, loss, acc, val_loss, val_acc, lr_used, duration))
        if not math.isfinite(val_loss):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}")

        monitor = select_monitor(acc, policy.accuracy_threshold, cb.monitored_metric)
        if monitor != cb.monitored_metric:
            switch_monitor(cb, monitor, policy)
        history.metadata["monitors"].append(monitor)
        value = acc if monitor == TRAIN_ACCURACY else val_loss
        snapshot_best(cb, model.network, value, epoch, policy.min_delta, checkpoint)
        reduce_lr_on_plateau(cb, acc if cb.lr_metric == TRAIN_ACCURACY else val_loss, policy)

        status = (f"epoch {epoch}/{cb.target_epochs} loss={loss:.4f} acc={acc:.4f} "
                  f"val_loss={val_loss:.4f} val_acc={val_acc:.4f} lr={lr_used:.6g} "
                  f"time={duration:.1f}s total={cb.cumulative_time:.1f}s")
        log.info(status)
        if early_stop_check(cb, policy):
            cb.stop_requested, cb.stop_reason = True, f"early stop: no improvement in {monitor} for {policy.early_stop_patience} epochs"
        else:
            directive = manual_control_prompt(channel, epoch, policy.manual_prompt_interval, status)
            if directive.action == "stop":
                cb.stop_requested, cb.stop_reason = True, "stopped by user"
            elif directive.action == "extend":
                cb.target_epochs += directive.epochs
        if on_epoch_end is not None:
            on_epoch_end(epoch, history.records[-1], cb)
        if cb.stop_requested:
            break

    history.metadata.update(
        stop_reason=cb.stop_reason or "completed all epochs",
        best_epoch=cb.best_epoch,
        best_value=cb.best_value,
        final_monitor=cb.monitored_metric,
        total_epochs=cb.target_epochs,
        cumulative_time_s=round(cb.cumulative_time, 3),
    )
    if cb.best_weights is not None:
        model.load_weights(cb.best_weights)
    return model, history
