"""Cross-modal audio-lip key-value memory, trainable end to end on a synthetic phoneme world."""

__version__ = "0.1.0"
