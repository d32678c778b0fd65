"""Temporal feature aggregation for cine sequence segmentation.

The package bundles a small numpy autodiff core (``tensor``, ``layers``),
dense optical flow (``flow``), motion-compensated feature aggregation
(``aggregation``), U-shaped segmentation networks with a per-frame baseline
and two aggregating variants (``model``), synthetic beating-annulus data
(``phantom``), evaluation metrics (``metrics``), and a batch CLI (``cli``).
"""

from .aggregation import (
    AggregationConfig,
    FlowCache,
    WeightMap,
    aggregate,
    aggregate_window,
    cosine_weight,
    warp_bilinear,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .flow import (
    FlowField,
    FlowParams,
    estimate_flow,
    flow_energy,
    image_gradients,
    load_flow_text,
    resample_flow,
    save_flow_text,
)
from .layers import (
    LayerSpec,
    RunningStats,
    batchnorm,
    conv2d,
    cross_entropy_loss,
    exponential_lr,
    maxpool2,
    relu,
    sgd_step,
    softmax_channels,
    upsample2,
)
from .metrics import (
    Contour,
    ContourError,
    MetricsReport,
    apd,
    area_curve,
    dice,
    evaluate_sequence,
    extract_contours,
    marching_squares,
    temporal_smoothness,
)
from .model import (
    EpochStats,
    NetworkConfig,
    SegmentationNet,
    TrainConfig,
    VARIANTS,
    build_network,
    forward_ofnet,
    forward_unet,
    predict_sequence,
    train,
)
from .phantom import (
    CineSequence,
    PhantomConfig,
    augment_rotate,
    center_crop,
    corrupt_frame,
    generate_phantom,
    load_sequence,
    normalize_intensity,
    preset_config,
    save_sequence,
)
from .tensor import NumericalError, ShapeError, Tensor, backward, no_grad

__version__ = "0.1.0"
