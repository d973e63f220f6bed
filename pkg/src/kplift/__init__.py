"""Multi-category 2D keypoint detection and 3D lifting on synthetic
deformable objects, supervised only by 2D keypoint annotations."""

from .autodiff import Tensor, finite_difference_check, gradient_of
from .detector import Detector, ImageRaster, select_keypoints
from .geometry import (
    depth_flip,
    orthographic_project,
    reshape_structure,
    rotation_from_6d,
)
from .lifter import Lifter, LifterInput, lift, normalize_keypoints
from .matching import LossWeights, hungarian_match
from .metrics import EvalReport, mpjpe, mutual_coherence, stress
from .shapemodel import (
    CategoryRegistry,
    CategorySchema,
    ShapeDictionary,
    cross_category_decode,
    cutoff_decode,
    truncation_shift_construction,
)
from .synthdata import Dataset, generate_dataset, read_dataset, write_dataset
from .training import (
    TrainConfig,
    evaluate_bundle,
    evaluate_checkpoint,
    load_bundle,
    run_training,
    template_baseline_mpjpe,
)

__version__ = "0.1.0"
