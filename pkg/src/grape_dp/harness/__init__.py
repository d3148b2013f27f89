"""Experiment harness: config, datasets, training/spectrum runs, CLI."""
