"""Compositional (vMF mixture) image classification with an occluder model,
query-budgeted black-box patch attacks, and robustness evaluation."""

from .attacks import AttackConfig, AttackResult, PatchSpec, sparse_rs_patch_attack, texture_patch_attack
from .backbone import BackboneParams, FeatureMap, extract_features, init_filters
from .combiner import CombinedClassifier, CombinerConfig, CompNetClassifier, PlainClassifier
from .compnet import ClassModel, CompNet, OccluderModel
from .data import LabeledDataset, SyntheticSpec, background_corpus, generate_synthetic_dataset
from .evaluation import ExperimentConfig, Report, run_experiment
from .finetune import FinetuneConfig, PartClassifier, finetune
from .models import ModelBundle, TrainConfig, load_bundle, save_bundle, train_models
from .vmf import VmfDictionary, learn_dictionary, log_normalizer

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "BackboneParams", "ClassModel", "CombinedClassifier", "CombinerConfig",
    "CompNet", "CompNetClassifier", "ExperimentConfig", "FeatureMap", "FinetuneConfig", "LabeledDataset",
    "ModelBundle", "OccluderModel", "PartClassifier", "PatchSpec", "PlainClassifier", "Report", "SyntheticSpec",
    "TrainConfig", "VmfDictionary", "background_corpus", "extract_features", "finetune",
    "generate_synthetic_dataset", "init_filters", "learn_dictionary", "load_bundle", "log_normalizer",
    "run_experiment", "save_bundle", "sparse_rs_patch_attack", "texture_patch_attack", "train_models",
]
