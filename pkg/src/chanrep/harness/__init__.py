"""Experiment orchestration: config, stages, evaluation, verification and the CLI."""
