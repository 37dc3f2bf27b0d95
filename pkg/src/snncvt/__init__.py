"""Two-stage ANN-to-SNN conversion: QC finetuning and layer-wise calibration."""

__version__ = "0.1.0"
