"""Experiment orchestration: pipeline cells, the trials sweep, reports and the CLI."""
