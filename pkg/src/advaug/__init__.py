"""Adversarial chained data augmentation for 2D image segmentation."""
