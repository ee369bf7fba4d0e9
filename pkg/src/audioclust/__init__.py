"""Self-supervised audio pretraining by alternating offline clustering of
encoder embeddings with pseudo-label prediction on masked spectrograms,
plus frozen-probe and fine-tune downstream evaluation."""

__version__ = "0.1.0"
