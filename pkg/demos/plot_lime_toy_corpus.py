"""
Train on a colour-coded toy corpus and explain one image
=========================================================

Three classes differ only by base colour, so a parameter-free mean-colour
backbone is enough.  The run takes a few seconds on a laptop CPU.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from endoscopy_xai import data, explain, model, training
from endoscopy_xai.synthetic import make_color_corpus

workdir = Path(tempfile.mkdtemp())
root = make_color_corpus(workdir / "corpus", num_classes=3, per_class=20)
manifest = data.make_splits(data.scan_corpus(root).records, (0.8, 0.1, 0.1), seed=0)
print({s: len(manifest.split(s)) for s in data.SPLITS})

net = model.build_classifier("stub-3", model.HeadConfig(num_classes=3), weights=None,
                             class_names=manifest.class_names)
net, history = training.train(net, manifest, training.TrainingPolicy(), seed=0)
print(history.metadata["stop_reason"], "after", len(history), "epochs")

###############################################################################
# LIME on the first test image

image = data.load_image(manifest.split("test")[0].path)
result = explain.explain_instance(net, image, explain.LimeConfig(num_samples=300))
overlay = explain.render_overlay(image, result.segments, result)
print("predicted", manifest.class_names[result.predicted_class], "segments", result.selected_segments)

fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
axes[0].imshow(image.astype("uint8"))
axes[1].imshow(overlay)
for ax in axes:
    ax.axis("off")
fig.savefig("lime_toy.png", dpi=100)
