"""Configuration, datasets, training loops, checkpoints and the command-line interface."""
