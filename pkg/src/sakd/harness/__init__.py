"""Experiment harness: config, data, checkpoints, orchestration, gradcheck."""
