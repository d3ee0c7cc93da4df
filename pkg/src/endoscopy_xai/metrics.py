"""Confusion matrix, one-vs-rest rates, timed evaluation and report rendering."""

import csv
import io
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from ._io import atomic_path, write_json, write_text

RATES = ("precision", "recall", "f1", "specificity")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    class_names: list = field(default_factory=list)

    @property
    def total(self):
        return int(self.counts.sum())

    def to_dict(self):
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}


def confusion_matrix(y_true, y_pred, num_classes, class_names=None):
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"{name} has labels outside 0..{num_classes - 1}")
    counts = np.bincount(y_true * num_classes + y_pred, minlength=num_classes * num_classes)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), names)


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
    return out.astype(np.float64), den == 0


@dataclass
class MetricsReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    specificity: float
    averaging_mode: str = "weighted"
    per_class: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    micro_recall: float = 0.0
    confusion: ConfusionMatrix | None = None
    zero_division: list = field(default_factory=list)  # (class, metric) pairs set to 0
    parameter_count: int | None = None
    inference_time: float | None = None

    def to_dict(self):
        out = asdict(self)
        out["confusion"] = self.confusion.to_dict() if self.confusion is not None else None
        out["zero_division"] = [list(p) for p in self.zero_division]
        return out


def per_class_counts(counts):
    counts = np.asarray(counts, dtype=np.int64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    tn = counts.sum() - tp - fn - fp
    return tp, fp, fn, tn


def classification_metrics(cm, averaging_mode="weighted"):
    """One-vs-rest precision/recall/specificity/F1 and accuracy, in percent.

    Zero denominators yield 0 and are listed in ``zero_division``.  Both the
    macro and the support-weighted aggregates are always computed; the headline
    fields follow ``averaging_mode``.
    """
    if averaging_mode not in ("macro", "weighted"):
        raise ValueError("averaging_mode must be 'macro' or 'weighted'")
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp, fp, fn, tn = per_class_counts(counts)
    precision, p0 = _ratio(tp, tp + fp)
    recall, r0 = _ratio(tp, tp + fn)
    specificity, s0 = _ratio(tn, tn + fp)
    f1, f0 = _ratio(2 * precision * recall, precision + recall)

    names = cm.class_names or [str(i) for i in range(len(counts))]
    zero = []
    for metric, mask in (("precision", p0), ("recall", r0), ("specificity", s0), ("f1", f0)):
        zero += [(names[k], metric) for k in np.flatnonzero(mask)]
    if zero:
        warnings.warn(f"zero denominators set to 0: {zero}", stacklevel=2)

    rates = {"precision": precision, "recall": recall, "f1": f1, "specificity": specificity}
    support = counts.sum(axis=1)
    macro = {k: float(v.mean() * 100) for k, v in rates.items()}
    weighted = {k: float((v * support).sum() / total * 100) for k, v in rates.items()}
    per_class = [
        {"class": names[k], "support": int(support[k]), **{m: float(rates[m][k] * 100) for m in RATES}}
        for k in range(len(counts))
    ]
    head = weighted if averaging_mode == "weighted" else macro
    accuracy = float(np.trace(counts) / total * 100)
    return MetricsReport(
        accuracy=accuracy,
        recall=head["recall"],
        precision=head["precision"],
        f1=head["f1"],
        specificity=head["specificity"],
        averaging_mode=averaging_mode,
        per_class=per_class,
        macro=macro,
        weighted=weighted,
        micro_recall=float(tp.sum() / (tp + fn).sum() * 100),
        confusion=cm,
        zero_division=zero,
    )


def evaluate(model, manifest, split="test", batch_size=64, averaging_mode="weighted", normalization=None):
    """Deterministic timed inference over a split.

    ``model`` needs ``predict_proba(pixels)``; ``parameter_count`` is read when
    present.  The timed region covers loading and inference of the whole split.
    """
    members = manifest.split(split)
    if not members:
        raise ValueError(f"split {split!r} is empty")
    y_true, y_pred = [], []
    start = time.perf_counter()
    for b in range(data_mod.num_batches(manifest, split, batch_size)):
        batch = data_mod.preprocess(data_mod.load_batch(manifest, split, b, batch_size), False,
                                    normalization=normalization)
        probs = np.asarray(model.predict_proba(batch.pixels))
        y_pred.append(np.argmax(probs, axis=1))  # ties -> lowest index
        y_true.append(np.argmax(batch.labels, axis=1))
    elapsed = time.perf_counter() - start
    cm = confusion_matrix(np.concatenate(y_true), np.concatenate(y_pred), len(manifest.class_names),
                          manifest.class_names)
    report = classification_metrics(cm, averaging_mode)
    report.inference_time = elapsed
    report.parameter_count = getattr(model, "parameter_count", None)
    return report


def save_report(report, path):
    return write_json(path, report.to_dict())


# -- comparison table ------------------------------------------------------------------

COMPARE_COLUMNS = ("model", "accuracy", "recall", "precision", "f1", "specificity", "parameters", "test_time")


def format_params(n):
    return "" if n is None else f"{n / 1e6:.1f}M"


def format_time(seconds):
    return "" if seconds is None else f"{seconds:.1f}s"


@dataclass
class ComparisonTable:
    rows: list  # lists of strings in COMPARE_COLUMNS order, plus status

    def to_csv(self):
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS + ("status",))
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_text(self):
        header = ("Model", "Accuracy", "Recall", "Precision", "F1-Score", "Specificity", "Parameters", "Test Time")
        body = [r[:len(header)] if r[-1] == "ok" else [r[0]] + ["failed"] + [""] * (len(header) - 2)
                for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(str(x).ljust(w) if i == 0 else str(x).rjust(w) for i, (x, w) in enumerate(zip(row, widths)))
                 for row in [header, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(line.rstrip() for line in lines) + "\n"


def compare_report(reports):
    """Rows in input order; ``reports`` holds ``(name, MetricsReport | None)``,
    ``None`` marking a failed evaluation."""
    rows = []
    for name, rep in reports:
        if rep is None:
            rows.append([name] + [""] * (len(COMPARE_COLUMNS) - 1) + ["failed"])
            continue
        rows.append([
            name,
            *(f"{getattr(rep, k):.2f}" for k in ("accuracy", "recall", "precision", "f1", "specificity")),
            format_params(rep.parameter_count),
            format_time(rep.inference_time),
            "ok",
        ])
    return ComparisonTable(rows)


# -- figures ---------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _savefig(fig, path):
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", dpi=100)


def render_curves(history, out_dir, prefix=""):
    """Loss and accuracy vs epoch (train and validation overlaid) plus a JSON
    sidecar holding the plotted series."""
    if not len(history):
        raise ValueError("history is empty")
    plt = _pyplot()
    out_dir = Path(out_dir)
    epochs = history.column("epoch")
    series = {
        "epoch": epochs,
        "loss": history.column("loss"),
        "val_loss": history.column("val_loss"),
        "accuracy": history.column("accuracy"),
        "val_accuracy": history.column("val_accuracy"),
    }
    paths = {}
    for kind, train_key, val_key in (("loss", "loss", "val_loss"), ("accuracy", "accuracy", "val_accuracy")):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, series[train_key], marker="o", label="training")
        ax.plot(epochs, series[val_key], marker="o", label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(kind)
        ax.set_title(f"{kind.capitalize()} vs epochs")
        ax.legend()
        fig.tight_layout()
        paths[kind] = out_dir / f"{prefix}{kind}_curve.png"
        _savefig(fig, paths[kind])
        plt.close(fig)
    paths["sidecar"] = write_json(out_dir / f"{prefix}curves.json", series)
    return paths


def render_confusion_matrix(cm, path):
    plt = _pyplot()
    path = Path(path)
    counts = np.asarray(cm.counts)
    n = len(counts)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * n, 1.0 + 0.8 * n))
    ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(n), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    peak = counts.max() if counts.size else 0
    for i in range(n):
        for j in range(n):
            ax.text(j, i, int(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > peak / 2 else "black")
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)
    sidecar = write_json(path.with_suffix(".json"), cm.to_dict())
    return path, sidecar


def save_comparison(table, out_dir, stem="comparison"):
    out_dir = Path(out_dir)
    return (write_text(out_dir / f"{stem}.csv", table.to_csv()),
            write_text(out_dir / f"{stem}.txt", table.to_text()))
