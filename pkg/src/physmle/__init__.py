"""PhysMLE: mixture of low-rank experts with element-wise routers for
simultaneous HR, BVP, SpO2 and RR estimation from spatial-temporal maps."""

__version__ = "0.1.0"
