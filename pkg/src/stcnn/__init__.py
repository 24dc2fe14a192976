"""Spatio-temporal network identification for 4D fMRI volumes.

The U-Net and temporal autoencoder run on :mod:`stcnn.autodiff`, a small
reverse-mode engine over numpy arrays.
"""
from .dictionary import DictionaryLearner, dict_learn, select_target, supervised_dict_learn
from .joint import STCNN, Subject, TrainConfig
from .synthetic import make_cohort, synthesize, template_map
from .volume import Volume4D, normalize, read_volume4d, write_volume4d

__version__ = "0.1.0"

__all__ = [
    "DictionaryLearner", "STCNN", "Subject", "TrainConfig", "Volume4D", "dict_learn",
    "make_cohort", "normalize", "read_volume4d", "select_target", "supervised_dict_learn",
    "synthesize", "template_map", "write_volume4d",
]
