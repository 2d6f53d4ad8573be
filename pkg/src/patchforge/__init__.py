"""patchforge: desk-scale graph learning pipelines.

Two end-to-end pipelines built on a small numpy tensor engine:

* a transductive node classifier over patch-subsampled heterogeneous
  citation graphs, trained with cross-entropy plus a bootstrapped
  self-supervised objective on unlabelled patches, and
* a deep graph-network regressor for molecular scalar targets,
  regularised by input-denoising auxiliary losses.

Hot numeric kernels are JIT-compiled with numba when available; set
``PATCHFORGE_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks.
"""

__version__ = "0.1.0"
