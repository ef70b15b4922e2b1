from .tensor import (
    Tensor as Tensor,
    Graph as Graph,
    no_grad as no_grad,
    double_precision as double_precision,
    conv2d as conv2d,
    transposed_conv2d as transposed_conv2d,
    bilinear_resize as bilinear_resize,
    cross_entropy as cross_entropy,
    softmax as softmax,
)
from .nn import Module as Module, Conv2d as Conv2d, Linear as Linear
from .optim import SGD as SGD
from .gradcheck import grad_check as grad_check
from .host import (
    HostConfig as HostConfig,
    HostModel as HostModel,
    FrozenHost as FrozenHost,
    Taps as Taps,
    Xlayer as Xlayer,
    build_host as build_host,
    freeze as freeze,
)
from .transforms import (
    TransformKind as TransformKind,
    TransformSpec as TransformSpec,
    CanvasPolicy as CanvasPolicy,
    apply_transform as apply_transform,
    bin_angle as bin_angle,
    dual_rotate_features as dual_rotate_features,
)
from .lenses import (
    LensConfig as LensConfig,
    LensInit as LensInit,
    LensRegistry as LensRegistry,
    RotationLens as RotationLens,
    ScalingLens as ScalingLens,
    RotationClassifier as RotationClassifier,
    build_lens as build_lens,
    apply_lens_pipeline as apply_lens_pipeline,
)
from .losses import (
    LossMode as LossMode,
    LossConfig as LossConfig,
    tac_loss as tac_loss,
    mse_loss as mse_loss,
    mae_loss as mae_loss,
    feature_loss as feature_loss,
    topk_locations as topk_locations,
)
from .train_config import (
    TrainConfig as TrainConfig,
    AugPolicy as AugPolicy,
    EvalSpec as EvalSpec,
    SelectMode as SelectMode,
    ExperimentConfig as ExperimentConfig,
)
from .training import (
    TrainLog as TrainLog,
    lr_at as lr_at,
    train_host as train_host,
    train_lens as train_lens,
    train_lenses as train_lenses,
    train_rot_classifier as train_rot_classifier,
    train_xlayer as train_xlayer,
    train_dataaug as train_dataaug,
)
from .analysis import (
    pearson as pearson,
    feature_correlations as feature_correlations,
    evaluate_accuracy as evaluate_accuracy,
    regress_corr_accuracy as regress_corr_accuracy,
    emit_report as emit_report,
)
from .data import (
    Dataset as Dataset,
    load_mnist as load_mnist,
    load_mnist_idx as load_mnist_idx,
    make_rotated_dataset as make_rotated_dataset,
)
from .checkpoint import save_checkpoint as save_checkpoint, load_checkpoint as load_checkpoint
from .cli import cli as cli
