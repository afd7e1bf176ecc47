"""Two-stage metal-artifact suppression and kVCT-to-MVCT translation toolkit."""

from .errors import ConfigError, FormatError, NumericalError
from .volume import (
    Modality,
    Volume,
    classify_artifact_slices,
    denormalize_hu,
    normalize_hu,
    read_volume,
    write_volume,
)
from .phantom import (
    AugmentParams,
    PatientCase,
    PhantomConfig,
    augment_pair,
    generate_patient_case,
    load_dataset,
    save_patient_case,
    split_dataset,
)
from .prenet import WaveletPreNet, haar_dwt2, haar_idwt2, prenet_forward
from .transnet import DomainTransNet, TransNetSpec, count_parameters, desk_scale, full_scale
from .losses import (
    LossWeights,
    PerceptualExtractor,
    SupervisionCriterion,
    build_metal_weight_map,
    deep_supervision_loss,
    perceptual_loss,
    ssim,
    ssim_loss,
    supervision_loss,
    total_loss,
    weighted_l1,
)
from .metrics import EvalReport, histogram_stats, hu_correlation, psnr, roi_metrics
from .training import (
    Checkpoint,
    ModelAssembly,
    TrainConfig,
    build_ablation,
    evaluate,
    lr_at,
    make_pseudo_clean,
    predict_volume,
    train,
)

__version__ = "0.1.0"
