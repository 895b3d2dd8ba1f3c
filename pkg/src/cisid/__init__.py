"""cisid: closed-set speaker identification with a simulated cochlear-implant
(ACE electrodogram) front end versus a normal-hearing MFCC front end, scored
by GMM-UBM and i-vector/PLDA back ends under clean and noisy conditions."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
