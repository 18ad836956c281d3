"""Missing-modality brain tumour segmentation with a hetero-modal variational
encoder, an mLSTM attention bottleneck and cross-aware dual decoders."""

__version__ = "0.1.0"
