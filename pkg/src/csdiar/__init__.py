"""Language diarization of code-switched speech.

Baseline BiLSTM and x-vector self-attention diarizers, a linear head over
pretrained-encoder embeddings, and the feature, label, training and scoring
machinery around them.
"""

__version__ = "0.1.0"
