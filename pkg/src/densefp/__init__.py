"""Fixed-length dense fingerprint representation and matching toolkit."""

from .errors import (
    DensefpError,
    DuplicateId,
    EmptyOverlap,
    EmptyScores,
    FormatError,
    InvalidArgument,
    InvalidPose,
    LabelError,
    NoForeground,
    PoseMissing,
    ProtocolError,
    RecipeError,
    SizeMismatch,
)
from .image import GrayImage, estimate_foreground, load_image, save_image
from .pose import (
    Pose2D,
    align_to_canonical,
    downsample_half_half,
    estimate_pose_baseline,
    load_pose_file,
    normalize_angle,
    perturb_pose,
    rigid_transform,
    save_pose_file,
    transformed_pose,
)
from .synth import (
    DegradationRecipe,
    DistortionField,
    apply_elastic_distortion,
    degrade,
    generate_synthetic_fingerprint,
    histogram_match,
    load_recipe,
    make_distortion_field,
    save_recipe,
    simulate_incomplete,
)
from .descriptor import (
    BranchFeatures,
    DenseDescriptor,
    assemble_descriptor,
    deserialize,
    deserialize_many,
    extract_baseline,
    extract_descriptor,
    local_consistency_loss,
    positional_embedding_2d,
    serialize,
    serialize_many,
)
from .matching import (
    GalleryIndex,
    MatchResult,
    enroll,
    fuse_scores,
    match_score,
    match_score_bruteforce,
    search,
    write_scores_csv,
)
from .metrics import (
    Protocol,
    ScoreSet,
    build_cross_protocol,
    build_fvc_protocol,
    cmc_curve,
    det_curve,
    eer,
    rank1_accuracy,
    tar_at_far,
)

__version__ = "0.1.0"
