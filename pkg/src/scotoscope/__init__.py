"""Classification of pupil-size time series recorded in darkness.

Modules: :mod:`signal_io` (recordings and their CSV format), :mod:`synth`
(synthetic data), :mod:`preprocess` (resampling, gap filling, windows and
folds), :mod:`baseline` (normative-graph classifiers), :mod:`nn_engine`
(layers with exact backward passes and Adam), :mod:`model` (MLP and 1D-CNN
training), :mod:`experiment` (cross-validation and reports) and :mod:`cli`.
"""

__version__ = "0.1.0"
