"""Loss ensembles for extremely imbalanced 3D segmentation, at desk scale.

Modules: ``volume`` and ``nifti`` for data, ``preprocess``, ``losses``,
``segnet`` and ``training`` for the model, ``inference``, ``postprocess``
and ``metrics`` for prediction and scoring, ``synthgen`` for synthetic data
and ``cli`` for the command-line pipeline.
"""

__version__ = "0.1.0"
