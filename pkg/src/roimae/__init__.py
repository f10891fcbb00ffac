"""Atlas-guided spatiotemporal masking for masked-autoencoder pretraining on 4D fMRI."""

from .atlas import GroupingTable, RegionGroup, default_grouping, load_grouping, mask_ratio
from .harness import ExperimentConfig, ExperimentReport, emit_report, load_config, run_experiment
from .mae import MaeModel, PatchSpec, TrainConfig, forward, masked_mse, pretrain
from .masking import MaskStrategy, generate_mask, parse_strategy
from .nifti_io import load_volume, read_labels, read_volume, write_volume
from .preprocess import PreprocessConfig, preprocess_volume
from .probe import evaluate, split_subjects, train_head
from .volume import GridDims, LabelVolume, Mask3D, Mask4D, Volume4D

__version__ = "0.1.0"
