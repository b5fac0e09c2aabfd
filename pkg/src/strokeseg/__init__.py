"""Ischemic stroke lesion segmentation from DWI and ADC MRI."""

__version__ = "0.1.0"
