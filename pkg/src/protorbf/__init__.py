"""Prototype-based interpretable classifier toolkit.

Pipeline: superpixel segmentation -> CNN embeddings -> expert-curated concept
pool -> per-class K-Medoids prototypes -> Gaussian RBF layer + softmax head,
with explanations traced to prototypes by the same computation that makes the
prediction.
"""

from ._kernels import BACKEND as kernel_backend
from .clustering import ClusteringResult, kmedoids, select_prototypes, silhouette
from .errors import ProtoRbfError, ValidationError
from .model import (
    Explanation,
    RbfModel,
    default_sigma,
    explain,
    forward,
    load_model,
    predict_image,
    rbf_activations,
    save_model,
)
from .prototypes import Prototype, PrototypeSet, load_prototypes, save_prototypes
from .segmentation import extract_segment_crops, slic_segment
from .store import (
    CurationLog,
    CurationState,
    DatasetManifest,
    EmbeddingStore,
    ManifestImage,
    SegmentRecord,
    read_embeddings,
    record_decision,
    write_embeddings,
)
from .training import (
    TrainConfig,
    TrainReport,
    adam_step,
    augment_mixup,
    augment_noise,
    cross_entropy,
    evaluate,
    focal_loss,
    head_gradients,
    smote_oversample,
    stratified_split,
    total_loss,
    train,
)

__version__ = "0.1.0"
