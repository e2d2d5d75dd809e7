"""Sub-pixel-convolution encoder-decoder networks for optical flow and
stereo disparity estimation, with their deconvolution baselines.

The package is self-contained: a small NumPy autodiff core (`tensor`,
`ops`), parametric network builders (`networks`), a supervised training
harness (`training`), synthetic data generation and file formats (`data`,
`formats`), and an experiment/evaluation layer with a CLI (`evaluate`,
`cli`).
"""

from .tensor import ConvParams, GradCheckResult, Tape, Tensor, backward, grad_check
from .ops import (
    add,
    concat_channels,
    conv2d,
    conv2d_transpose,
    correlation_1d,
    leaky_relu,
    pixel_shuffle,
    reduce_mean,
    reduce_sum,
    scale,
    upsample,
)
from .networks import (
    DecoderSpec,
    EncoderSpec,
    NetworkInstance,
    SubPixelModuleSpec,
    TOPOLOGY_NAMES,
    TopologySpec,
    build_network,
    build_subpixel_module,
    count_params,
    custom_topology,
    describe,
    topology,
)
from .training import (
    AugmentConfig,
    OptimizerState,
    TrainConfig,
    TrainHistory,
    TrainingDiverged,
    adam_step,
    augment,
    epe,
    lr_at,
    multiscale_epe_loss,
    train,
)
from .data import (
    DatasetManifest,
    FlowSample,
    StereoSample,
    gen_synthetic_flow,
    gen_synthetic_stereo,
)
from .evaluate import (
    ExperimentConfig,
    ResultRow,
    checkerboard_overlap,
    compare,
    desk_preset,
    evaluate,
    run_experiment,
    visualize,
)
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
