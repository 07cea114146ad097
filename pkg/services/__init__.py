"""
MoSARe desk-scale services
Multimodal fusion with cross-modal attention, mixture-of-experts selection,
decoupled reconstruction for missing modalities and dual contrastive alignment
"""

import os

# Quiet TensorFlow's C++ logging before any module imports it
os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '2')

__version__ = '0.1.0'
