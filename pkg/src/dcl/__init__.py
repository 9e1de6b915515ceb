"""dcl: two-phase unsupervised image clustering.

Phase 1 trains a convolutional adversarial pair with a Sobel edge front-end
and uses the discriminator as a feature extractor; phase 2 clusters the
extracted features with a bank of softmax heads trained by a tolerance-clamped
information-maximization objective plus adversarial- and dropout-consistency
penalties.
"""

import os as _os
import sys as _sys

# DCL_THREADS caps BLAS worker threads (default 1 for determinism). Only
# effective when numpy has not been imported yet by the host process.
if "numpy" not in _sys.modules:
    _n = _os.environ.get("DCL_THREADS", "1")
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _n)

__version__ = "0.1.0"
