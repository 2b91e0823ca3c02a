"""Reliable imputed-sample assisted vertical federated learning on numpy."""

from .dataops import (PartyDataset, gen_synthetic, impute_mean, party_means, sample_overlap,
                      vertical_split)
from .evfl import VflConfig, run_baseline, run_method, run_risa, uncertainty_threshold
from .evidence import (DirichletParams, Opinion, evidence_to_opinion, evidential_loss,
                       fuse_all, fuse_pair, opinion_to_dirichlet, predict)
from .metrics import accuracy, compute_auc

__version__ = "0.1.0"
