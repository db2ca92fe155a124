"""Multi-stage 3D lung nodule detection and patient classification pipeline.

Stages: volumetric preprocessing, grid-cell nodule/malignancy detection,
candidate extraction and classification, patient-level feature pooling.
A synthetic phantom generator provides reproducible ground-truth datasets
so the whole pipeline trains and evaluates without clinical data.
"""

__version__ = "0.1.0"
