"""Region classification for object detection with FALKON and approximated hard negative mining."""
from .bbox import BoxDeltas, RlsModel, apply_deltas, compute_targets, rls_train
from .bootstrap import (BootstrapConfig, BootstrapState, ClassifierEnsemble, cross_validate,
                        load_ensemble, mini_bootstrap_train_class, save_ensemble, train_ensemble)
from .errors import (ConfigError, ConvergenceWarning, FalkdetError, IngestionError, InputError,
                     NumericalError)
from .evaluation import Detection, detect, evaluate_map, nms, voc07_ap
from .falkon import (FalkonModel, SolverConfig, falkon_predict, falkon_train, krr_direct_full,
                     load_model, nystrom_krr_direct, save_model)
from .kernels import GaussianKernelParams, gaussian_kernel, kernel_block
from .regions import (Box, DetectionDataset, GroundTruth, RegionProposal, assign_labels, iou,
                      load_dataset, save_dataset)
from .sampling import rebalanced_center_sampling, subsample_negatives
from .synthetic import SyntheticConfig, generate_synthetic

__version__ = "0.1.0"
