"""Structure-from-motion on sparse point tracks: an attention-network
front end for initialization-free reconstruction plus the classical
refinement stack (triangulation, bundle adjustment, alignment, metrics)."""

__version__ = "0.1.0"
