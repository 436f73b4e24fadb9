"""Cardiovascular mortality prediction from chest CT via autoencoder encodings.

Stages: synthetic phantoms, heart localization, preprocessing, a 3D
convolutional autoencoder trained with MSE or feature perceptual loss, and
SVM / random forest / small-network classifiers on the encodings, evaluated
by fold-wise cross-validation.
"""
__version__ = "0.1.0"
