"""Level-wise mixture tree classifier over a visual hierarchy."""
from .adaptation import (CountMatrix, apply_nonoverlap, estimate_psi, gibbs_posterior,
                         gibbs_sweep, init_counts)
from .dataset import Dataset, SynthSpec, generate_synthetic, load_features, split
from .feature_net import FeatureNet, init_feature_net
from .hierarchy import (Hierarchy, HierarchyConfig, build_hierarchy, class_representations,
                        init_psi, permute_groups, similarity_matrix)
from .lmm_head import LMMHead, LevelClassifier, backward_head, forward_level, loss, mix, predict_topk
from .trainer import TrainConfig, TrainState, evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
