"""Desk-scale laboratory for transductive zero-shot semantic segmentation.

A small fully convolutional network projects pixels into a semantic
embedding space shared by seen and unseen classes.  Source images train
the visual-semantic relation with cross-entropy; unlabeled target images
rectify the prediction bias toward seen classes through an unseen-mass
loss; progressive self-training and class-balanced self-training are
available on top.  Scenes are synthetic, with pixel appearance an affine
function of class embeddings, so zero-shot transfer is well-posed by
construction.
"""

from .embeddings import (
    BACKGROUND,
    ClassVocabulary,
    EmbeddingTable,
    SplitSpec,
    concat_embeddings,
    generate_synthetic_embeddings,
    load_embedding_table,
    make_split,
    save_embedding_table,
)
from .dataio import (
    Dataset,
    Sample,
    SceneConfig,
    generate_dataset,
    load_dataset,
    make_mixing_matrix,
    render_scene,
    save_dataset,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    evaluate,
    harmonic_mean,
    iou_per_class,
    miou,
    unseen_prediction_rate,
)
from .model import (
    NetConfig,
    forward,
    infer_probs,
    init_net,
    load_checkpoint,
    pixel_softmax,
    predict,
    relation_logits,
    save_checkpoint,
)
from .numerics import ParamSet, ShapeError, Tape, Tensor, backward, grad_check, poly_lr, sgd_momentum_step
from .objectives import (
    IGNORE_INDEX,
    LossValue,
    bias_rectification,
    seg_cross_entropy,
    total_objective,
)
from .presets import (
    DEFAULT_CLASS_NAMES,
    DEFAULT_UNSEEN,
    DESK_LR,
    reference_dataset,
    reference_embeddings,
    reference_scene_config,
    reference_split,
    reference_train_config,
    reference_vocabulary,
)
from .transduce import (
    MODES,
    TrainConfig,
    cbst_thresholds,
    pseudo_label,
    run,
    self_train,
    train,
)

__version__ = "0.1.0"
