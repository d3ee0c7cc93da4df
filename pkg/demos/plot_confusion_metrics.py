"""
Metrics from a confusion matrix
================================

Twelve hand-labelled predictions over three classes, the per-class rates
and the one-row comparison table.
"""

import numpy as np

from endoscopy_xai.metrics import classification_metrics, compare_report, confusion_matrix, render_confusion_matrix

y_true = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
y_pred = [0, 0, 0, 1, 1, 1, 2, 0, 2, 2, 2, 2]
cm = confusion_matrix(y_true, y_pred, 3, ["polyp", "ulcer", "normal"])
print(cm.counts)

report = classification_metrics(cm, averaging_mode="macro")
for name, row in zip(cm.class_names, report.per_class):
    print(f"{name:8s}", {k: round(v, 2) for k, v in row.items() if isinstance(v, float)})

# parameter count and timing are placeholders here
report.parameter_count, report.inference_time = 11_100_000, 3.5
print(compare_report([("toy", report)]).to_text())

render_confusion_matrix(cm, "confusion_matrix.png")
print("mean recall:", np.mean([r["recall"] for r in report.per_class]))
