"""Segmentation with Monte-Carlo-dropout uncertainty for OCT-like B-scan volumes.

Subpackages and modules:

* ``engine``      - numpy reverse-mode kernels (conv, pooling, batchnorm,
                    dropout, cross entropy) and the Adam optimizer
* ``model``       - the three encoder-decoder variants and checkpoints
* ``inference``   - MC-dropout mean probability / epistemic std maps
* ``postprocess`` - Otsu binarization and per-column disruption scores
* ``metrics``     - Dice, PR-AUC, OLS regression, split evaluation
* ``dataset``     - seeded synthetic volume generator, splits, tensor IO
* ``train``       - training loop with LR plateau schedule and selection
* ``cli``         - the ``uncertseg`` command
"""

__version__ = "0.1.0"

from .rng import RngState

__all__ = ["RngState", "__version__"]
