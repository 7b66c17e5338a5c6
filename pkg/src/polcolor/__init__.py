"""Reconstruction of full-polarimetric SAR covariance images from single-pol intensity."""

from . import decomp, evalmetrics, neuralnet, pipeline, polmath, quantizer, synthdata

__version__ = "0.1.0"

__all__ = ["decomp", "evalmetrics", "neuralnet", "pipeline", "polmath", "quantizer", "synthdata"]
