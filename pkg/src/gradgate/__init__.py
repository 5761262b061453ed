"""Gradient-response anomaly detection for small classifiers.

Pipeline: train a classifier, generate adversarial and out-of-distribution
inputs, extract per-parameter-set gradient-norm features elicited by a
confounding label, train a binary detector, and report accuracy/AUROC/AUPR.
"""

__version__ = "0.1.0"
