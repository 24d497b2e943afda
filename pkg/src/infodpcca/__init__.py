"""InfoDPCCA: two-step information-theoretic dynamic probabilistic CCA.

Library + CLI for extracting shared/private latent dynamics from paired
sequences, with DVIB and DPCCA baselines, a Henon-map synthetic
benchmark and quantitative evaluation metrics.
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
