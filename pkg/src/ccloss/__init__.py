"""Channel-correlation loss: attention-gated classification with a
batch-level intra/inter attention-distance penalty, built on a minimal
reverse-mode autodiff core."""

from .autodiff import (
    GradientTape,
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    no_grad,
)
from .datasets import (
    DatasetError,
    LabeledBatch,
    LabeledDataset,
    batches,
    export_idx,
    load_cifar100,
    load_mnist,
    load_synth,
    parse_cifar100,
    parse_idx,
    synth_blobs,
    write_idx,
)
from .estimator import ChannelCorrelationClassifier
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import (
    LossBreakdown,
    attention_distances,
    cc_loss,
    intra_inter,
    pairwise_sq_dist_gram,
    pairwise_sq_dist_naive,
    softmax_ce,
)
from .nn import (
    ChannelAttentionModule,
    CheckpointError,
    LinearLayer,
    MLPBackbone,
    Model,
    TinyCNN,
    he_init,
    load_checkpoint,
    save_checkpoint,
    squeeze_excite,
)
from .training import (
    ConfigError,
    DegenerateSampleError,
    EvalStats,
    MetricsLog,
    RunSummary,
    SGD,
    TrainConfig,
    TrainResult,
    TrainingAborted,
    cosine_lr,
    evaluate,
    export_embeddings,
    one_sample_ttest,
    sgd_update,
    train,
)

__version__ = "0.1.0"
