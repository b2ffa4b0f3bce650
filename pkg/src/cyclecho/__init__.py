"""Semi-supervised ejection-fraction prediction from cyclical ultrasound video.

Two-stage pipeline: (1) segmentation trained jointly with a cyclical
feature-consistency loss on unlabeled clips, (2) ejection-fraction video
regression where a mask-augmented teacher is distilled into a video-only
student. A synthetic cyclical-video generator makes the whole pipeline
verifiable at desk scale.
"""

from cyclecho.cycle import (
    CycleConfig,
    EmbeddingSequence,
    MatchProfile,
    Phase,
    RegionPartition,
    SoftPhase,
    cycle_loss,
    gradient_check,
    match_probabilities,
    phase_embedding,
    phase_similarity,
    sample_template_starts,
    soft_offset_phase,
    template_match_probabilities,
)
from cyclecho.data import (
    ClipSample,
    DatasetSplit,
    EchoDataset,
    EchoSequence,
    SynthParams,
    generate_synthetic,
    load_manifest,
    sample_cycle_clip,
    sample_regression_clip,
    split_labels,
    temporal_mirror,
    write_corpus,
)
from cyclecho.evaluation import (
    MetricReport,
    frame_similarity_matrix,
    mae,
    r_squared,
    smoothgrad,
    top_gradient_dice,
)
from cyclecho.models import build_segmentation_model, build_video_regressor, load_checkpoint
from cyclecho.regression import (
    EfPrediction,
    RegTrainConfig,
    build_multi_input_clip,
    predict_ef,
    pseudo_label,
    train_distilled,
    train_multi_input,
)
from cyclecho.segmentation import (
    LossBreakdown,
    SegTrainConfig,
    dice,
    encode_clip,
    infer_masks,
    seg_loss,
    train_joint,
    train_supervised,
)

__version__ = "0.1.0"
