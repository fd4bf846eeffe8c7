"""Unsupervised Covid lesion segmentation by dual lung-model probability subtraction.

Two lung-tissue probability networks are trained independently, one on normal
anatomy and one on Covid anatomy. Lesions are segmented without lesion labels
by thresholding the voxelwise absolute difference of the two models' lung
probability maps. The package includes a synthetic phantom dataset generator
and the full evaluation suite (Dice/Jaccard, error rates, surface distances,
HU/volume differentials, ROC/AUC).
"""

from .errors import DataError, NumericError
from .lesions import LesionConfig, LesionResult, infer_lesions, infer_lung, mean_prob_gap, subtract_prob_maps, threshold_lesion
from .network import ArchitectureSpec, ModelParams, forward_lung_prob, init_params, load_params, lung_mask_from_prob, save_params
from .phantom import PhantomCase, PhantomConfig, generate_case, generate_dataset, read_index
from .preprocess import BoundingBox, NormalizedSlice, PreprocessConfig, bounding_box, extract_training_slices, normalize_hu, resize_bilinear, resize_nearest, unresize_to_original
from .training import TrainConfig, TrainReport, dice_ns_loss, lr_schedule, split_dataset, train_model
from .volumes import BinaryMask, Geometry, ProbMap, Volume, mask_volume_count, read_volume, write_volume

__version__ = "0.1.0"
