"""Environment radiance fields recovered from reflections on glossy objects."""

import warnings

# numba probes an old TBB on import; the workqueue/omp layers are used instead
warnings.filterwarnings("ignore", message="The TBB threading layer")

__version__ = "0.1.0"
