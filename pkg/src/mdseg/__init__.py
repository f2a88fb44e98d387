"""Multi-domain regularized FCN segmentation toolkit.

Training engine with hand-rolled backprop, synthetic ultrasound-phantom
data, iterative crop-and-refine inference, and a per-domain evaluation
harness, all deterministic per seed.
"""

__version__ = "0.1.0"
