"""Endoscopic image classification with an EfficientNet-B3 backbone, a
regularized dense head, Adamax training callbacks, a multi-class metric
suite and LIME superpixel explanations."""

from .data import (
    ImageBatch,
    ImageRecord,
    ScalarNormalization,
    SplitManifest,
    load_batch,
    make_splits,
    preprocess,
    scan_corpus,
)
from .explain import (
    Explanation,
    LimeConfig,
    SegmentMap,
    apply_mask,
    explain_instance,
    fit_surrogate,
    kernel_weight,
    render_overlay,
    sample_perturbations,
    segment_image,
    select_features,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    classification_metrics,
    compare_report,
    confusion_matrix,
    evaluate,
    render_curves,
)
from .model import (
    ClassifierModel,
    HeadConfig,
    build_classifier,
    count_parameters,
    dropout_forward,
    l1_penalty,
    l2_penalty,
    softmax,
)
from .training import (
    AdamaxState,
    CallbackState,
    TrainingHistory,
    TrainingPolicy,
    adamax_step,
    categorical_crossentropy,
    early_stop_check,
    manual_control_prompt,
    reduce_lr_on_plateau,
    select_monitor,
    snapshot_best,
    train,
)

__version__ = "0.1.0"
