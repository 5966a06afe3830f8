"""notebench: a desk-scale workbench for note-based disease-risk prediction.

Importing this package pins BLAS pools to one thread (when numpy is not yet
loaded): training is single-threaded by contract, and threaded BLAS is
slower on the small matrices used here.

Submodules
----------
corpus      synthetic patient/note corpora with a tunable lexical signal
cohort      inclusion criteria, validity windows, and every dataset split
text        word-level vocabulary and hashed character n-grams
tensor      float64 autodiff core
params      parameter store, Adam, checkpoint container
encoder     small transformer: masked-LM pretraining, fine-tuning, soft prompts
wem         static subword embedding baseline
evaluation  per-patient aggregation, AUROC / AUPRC / Brier
cli         experiment pipeline subcommands
"""

import os as _os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
