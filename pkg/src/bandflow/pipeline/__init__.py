"""Data, training, checkpoint, evaluation and command-line plumbing."""
