"""Camera-motion regression from dense optical flow, at desk scale.

Modules: ``geometry`` (so(3), poses, pinhole camera), ``synthgen`` (scenes
and ground-truth flow), ``augment`` (intrinsics layer, crop-and-resize),
``losses``, ``model`` (numpy pose network), ``trainer`` (training and the
generalisation experiments), ``evaluation`` (ATE, segment drift),
``formats`` and ``cli``.
"""
__version__ = "0.1.0"
